//! Estimator synthesis: program assembly, recovery-level line search, and
//! certificate checking.

mod certificate;
mod gains;
mod layout;
mod program;
mod response;

pub use certificate::{
    check_certificate, language_fingerprint, model_fingerprint, verify_certificate,
    worst_case_profile, BoundKind, Certificate, RowViolation, SolverMetadata, VerificationReport,
    CERTIFICATE_FORMAT, VERIFY_TOLERANCE,
};
pub use gains::{GainNode, GainSet, SequenceGains};
pub use layout::{allocate_shared_variables, apply_delay_pattern, gain_layout, Dims, GainLayout, NodeLayout};
pub use program::{assemble_robust_lp, FixedDesign, RobustProgram};
pub use response::{build_response, ResponseMatrices};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, GridPoint, Result};
use crate::language::{reduce_language, DelayLanguage, PrefixTree};
use crate::lp::{solve_lp_with, LpOptions, LpStatus};
use crate::model::SystemModel;

/// `J = mu1 · μ₁ + Σ_α Σ_k mu2[k] · μ₂,k^α`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostWeights {
    pub mu1: f64,
    /// One weight per step `k = 0..=T`.
    pub mu2: Vec<f64>,
}

impl CostWeights {
    pub fn uniform(horizon: usize) -> Self {
        Self {
            mu1: 1.0,
            mu2: vec![1.0; horizon + 1],
        }
    }

    pub fn check(&self, horizon: usize) -> Result<()> {
        if self.mu2.len() != horizon + 1 {
            return Err(Error::ShapeMismatch(format!(
                "{} mu2 weights for horizon {horizon}",
                self.mu2.len()
            )));
        }
        if std::iter::once(&self.mu1)
            .chain(&self.mu2)
            .any(|w| !(*w >= 0.0 && w.is_finite()))
        {
            return Err(Error::InvalidModel("cost weights must be finite and >= 0".into()));
        }
        Ok(())
    }

    pub fn evaluate(&self, mu1: f64, mu2: &[Vec<f64>]) -> f64 {
        self.mu1 * mu1
            + mu2
                .iter()
                .map(|row| row.iter().zip(&self.mu2).map(|(m, w)| m * w).sum::<f64>())
                .sum::<f64>()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Mu1Search {
    /// Grid over `[1e-3 s, 1e2 s]` with `s = η_v` (or `η_w + η_v` with process noise).
    Auto { points: usize, refine_points: usize },
    Range {
        lo: f64,
        hi: f64,
        points: usize,
        refine_points: usize,
    },
    /// A single program at a prescribed recovery level.
    Fixed(f64),
}

impl Default for Mu1Search {
    fn default() -> Self {
        Mu1Search::Auto {
            points: 40,
            refine_points: 20,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct SynthesisOptions {
    pub mu1: Mu1Search,
    /// Defaults to uniform weights.
    pub weights: Option<CostWeights>,
    pub design: FixedDesign,
    pub lp: LpOptions,
    /// Worker threads for grid points; `None` uses the global rayon pool.
    pub workers: Option<usize>,
}

fn linspace(lo: f64, hi: f64, points: usize) -> Vec<f64> {
    if points <= 1 || hi == lo {
        return vec![lo];
    }
    (0..points)
        .map(|i| lo + (hi - lo) * i as f64 / (points - 1) as f64)
        .collect()
}

fn default_scale(model: &SystemModel) -> f64 {
    if model.has_process_noise() && model.eta_w() > 0.0 {
        model.eta_w() + model.eta_v()
    } else {
        model.eta_v()
    }
}

struct Evaluated {
    point: GridPoint,
    values: Option<Vec<f64>>,
    meta: Option<(f64, f64, u32, String)>,
}

fn evaluate(
    model: &SystemModel,
    ev: &crate::language::EventLanguage,
    mu1: f64,
    opts: &SynthesisOptions,
    weights: &CostWeights,
) -> Result<Evaluated> {
    let prog = assemble_robust_lp(model, ev, mu1, &opts.design, weights)?;
    let sol = solve_lp_with(&prog.lp, &opts.lp)?;
    let optimal = sol.status == LpStatus::Optimal;
    Ok(Evaluated {
        point: GridPoint {
            mu1,
            objective: optimal.then_some(sol.objective),
            status: sol.status.to_string(),
        },
        meta: optimal.then(|| {
            (
                sol.primal_residual,
                sol.relative_gap,
                sol.iterations,
                sol.status.to_string(),
            )
        }),
        values: optimal.then_some(sol.values),
    })
}

/// Index of the best feasible point: lowest objective, ties within 1e-9 go to the smaller `μ₁`.
fn best_index(points: &[Evaluated]) -> Option<usize> {
    let best = points
        .iter()
        .filter_map(|e| e.point.objective)
        .fold(f64::INFINITY, f64::min);
    if !best.is_finite() {
        return None;
    }
    points
        .iter()
        .enumerate()
        .filter(|(_, e)| e.point.objective.is_some_and(|j| j <= best + 1e-9))
        .min_by(|a, b| a.1.point.mu1.total_cmp(&b.1.point.mu1))
        .map(|(i, _)| i)
}

/// Line search over `μ₁`, one LP per level, returning the best certificate.
pub fn synthesize(
    model: &SystemModel,
    lang: &DelayLanguage,
    opts: &SynthesisOptions,
) -> Result<Certificate> {
    let t = model.horizon();
    if lang.horizon() != t {
        return Err(Error::ShapeMismatch(format!(
            "language horizon {} differs from model horizon {t}",
            lang.horizon()
        )));
    }
    let weights = opts.weights.clone().unwrap_or_else(|| CostWeights::uniform(t));
    weights.check(t)?;
    let ev = reduce_language(lang);

    let (grid, refine) = match opts.mu1 {
        Mu1Search::Fixed(mu1) => (vec![mu1], 0),
        Mu1Search::Auto {
            points,
            refine_points,
        } => {
            let s = default_scale(model);
            if s == 0.0 {
                (vec![0.0], 0)
            } else {
                (linspace(1e-3 * s, 1e2 * s, points), refine_points)
            }
        }
        Mu1Search::Range {
            lo,
            hi,
            points,
            refine_points,
        } => {
            if !(lo >= 0.0 && hi >= lo && points >= 1) {
                return Err(Error::InvalidModel(format!(
                    "invalid recovery-level range [{lo}, {hi}] with {points} points"
                )));
            }
            (linspace(lo, hi, points), refine_points)
        }
    };

    let run = |levels: &[f64]| -> Result<Vec<Evaluated>> {
        let work = || {
            levels
                .par_iter()
                .map(|&mu1| evaluate(model, &ev, mu1, opts, &weights))
                .collect::<Result<Vec<_>>>()
        };
        match opts.workers {
            Some(w) => rayon::ThreadPoolBuilder::new()
                .num_threads(w.max(1))
                .build()
                .map_err(|e| Error::Solver(format!("thread pool: {e}")))?
                .install(work),
            None => work(),
        }
    };

    let mut evaluated = run(&grid)?;
    if let (Some(b), true) = (best_index(&evaluated), refine > 0 && grid.len() > 1) {
        let lo = grid[b.saturating_sub(1)];
        let hi = grid[(b + 1).min(grid.len() - 1)];
        let extra: Vec<f64> = linspace(lo, hi, refine)
            .into_iter()
            .filter(|m| !grid.contains(m))
            .collect();
        evaluated.extend(run(&extra)?);
    }

    let table: Vec<GridPoint> = evaluated.iter().map(|e| e.point.clone()).collect();
    let Some(best) = best_index(&evaluated) else {
        return Err(Error::AllInfeasible { table });
    };
    let chosen = &evaluated[best];
    let mu1 = chosen.point.mu1;
    let values = chosen.values.as_ref().expect("feasible point keeps its solution");
    let (primal_residual, relative_gap, iterations, lp_status) =
        chosen.meta.clone().expect("feasible point keeps its metadata");

    let prog = assemble_robust_lp(model, &ev, mu1, &opts.design, &weights)?;
    let gains = prog.gains(values, &opts.design, model)?;
    let s0 = opts.design.s0(model)?;
    let tree = PrefixTree::build(&ev);

    // Tighten each level to the exact closed-form worst case of the extracted gains.
    let mut mu2 = Vec::with_capacity(ev.len());
    for alpha in 0..ev.len() {
        let worst = certificate::row_worst_cases(model, &gains, &tree, alpha, mu1, &s0)?;
        mu2.push(
            worst
                .chunks(model.n())
                .map(|rows| rows.iter().copied().fold(mu1, f64::max))
                .collect::<Vec<_>>(),
        );
    }
    let objective = weights.evaluate(mu1, &mu2);

    Ok(Certificate {
        format: CERTIFICATE_FORMAT.to_string(),
        horizon: t,
        n: model.n(),
        p: model.p(),
        mu1,
        mu2,
        s0,
        sequences: ev.sequences().to_vec(),
        gains,
        objective,
        weights,
        language_fingerprint: language_fingerprint(lang),
        model_fingerprint: model_fingerprint(model),
        solver: SolverMetadata {
            backend: "clarabel 0.11 (interior point)".into(),
            lp_status,
            lp_objective: chosen.point.objective.unwrap_or(f64::NAN),
            primal_residual,
            relative_gap,
            iterations,
            variables: prog.lp.num_vars(),
            equalities: prog.lp.equalities().len(),
            inequalities: prog.lp.inequalities().len(),
            mu1_search: table,
        },
    })
}
