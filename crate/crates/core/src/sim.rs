//! Closed-loop rollouts of plant, delay channel and estimator, with bound audits.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DVector;
use rand::rngs::ChaCha8Rng;
use rand::SeedableRng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::EstimatorDesign;
use crate::language::{word_to_event_sequence, DelayWord, EventSequence};
use crate::model::SystemModel;
use crate::rows;

/// Absolute slack on every bound check.
pub const VIOLATION_TOLERANCE: f64 = 1e-6;

/// Draws from `N(0, (bound/5)^2)` conditioned on `|x| <= bound`.
pub fn sample_truncated_normal<R: rand::Rng + ?Sized>(bound: f64, count: usize, rng: &mut R) -> Vec<f64> {
    if bound <= 0.0 {
        return vec![0.0; count];
    }
    let normal = Normal::new(0.0, bound / 5.0).expect("positive finite sigma");
    (0..count)
        .map(|_| loop {
            let x: f64 = normal.sample(rng);
            if x.abs() <= bound {
                break x;
            }
        })
        .collect()
}

pub fn sample_truncated_normal_seeded(bound: f64, count: usize, seed: u64) -> Vec<f64> {
    sample_truncated_normal(bound, count, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Delivery schedule induced by a word: source `i` arrives at `i + τ(i)` if that is `< T`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DelayChannel {
    word: DelayWord,
    schedule: Vec<Vec<usize>>,
}

impl DelayChannel {
    pub fn new(word: DelayWord, horizon: usize) -> Result<Self> {
        if word.len() != horizon {
            return Err(Error::InputLength {
                expected: horizon,
                got: word.len(),
            });
        }
        let mut schedule = vec![Vec::new(); horizon];
        for i in 0..horizon {
            if let Some(k) = word.arrival_step(i) {
                schedule[k].push(i);
            }
        }
        Ok(Self { word, schedule })
    }

    pub fn word(&self) -> &DelayWord {
        &self.word
    }

    /// Source times delivered at step `k`, ascending.
    pub fn delivered_at(&self, k: usize) -> &[usize] {
        self.schedule.get(k).map_or(&[], Vec::as_slice)
    }
}

/// Noise realization of one period.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialNoise {
    #[serde(with = "rows::vector")]
    pub x0_err: DVector<f64>,
    /// `w_0 .. w_{T-1}`; empty without process noise.
    pub w: Vec<Vec<f64>>,
    /// `v_0 .. v_{T-1}`.
    pub v: Vec<Vec<f64>>,
}

impl TrialNoise {
    /// Draw order: `x̃_0`, then `w_k` and `v_k` for each step.
    pub fn sample<R: rand::Rng + ?Sized>(model: &SystemModel, mu1: f64, rng: &mut R) -> Self {
        let x0_err = DVector::from_vec(sample_truncated_normal(mu1, model.n(), rng));
        let (w, v) = Self::sample_signals(model, rng);
        Self { x0_err, w, v }
    }

    fn sample_signals<R: rand::Rng + ?Sized>(model: &SystemModel, rng: &mut R) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let mut w = Vec::new();
        let mut v = Vec::new();
        for _ in 0..model.horizon() {
            if model.has_process_noise() {
                w.push(sample_truncated_normal(model.eta_w(), model.nw(), rng));
            }
            v.push(sample_truncated_normal(model.eta_v(), model.p(), rng));
        }
        (w, v)
    }

    pub fn zero(model: &SystemModel) -> Self {
        let nw = if model.has_process_noise() { model.horizon() } else { 0 };
        Self {
            x0_err: DVector::zeros(model.n()),
            w: vec![vec![0.0; model.nw()]; nw],
            v: vec![vec![0.0; model.p()]; model.horizon()],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub k: usize,
    pub x: Vec<f64>,
    pub xhat: Vec<f64>,
    /// `x_k - x̂_k`
    pub err: Vec<f64>,
    pub err_norm: f64,
    /// Certified level of the realized sequence (`μ₂,k^α`, `μ₁` at `T`).
    pub bound: f64,
    /// Level known to the estimator from the arrivals so far.
    pub observer_bound: f64,
    /// Source times delivered at this step.
    pub arrivals: Vec<usize>,
    /// Event index at this step; `None` at `k = T`.
    pub event: Option<u64>,
    pub violation: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationTrace {
    pub word: String,
    pub seed: Option<u64>,
    /// Index of the realized event sequence in the certificate.
    pub alpha: usize,
    pub steps: Vec<TraceStep>,
    pub noise: TrialNoise,
}

impl SimulationTrace {
    pub fn violations(&self) -> usize {
        self.steps.iter().filter(|s| s.violation).count()
    }

    pub fn errors(&self) -> Vec<DVector<f64>> {
        self.steps.iter().map(|s| DVector::from_column_slice(&s.err)).collect()
    }
}

fn sequence_index(design: &EstimatorDesign<'_>, seq: &EventSequence) -> Result<usize> {
    if let Some(a) = design.certificate().sequences.iter().position(|s| s == seq) {
        return Ok(a);
    }
    for k in 0..seq.len() {
        design.tree().resolve(seq.prefix(k + 1))?;
    }
    Err(Error::PatternOutsideLanguage { step: seq.len().saturating_sub(1) })
}

fn inputs_or_zero(model: &SystemModel, inputs: Option<&[DVector<f64>]>) -> Result<Vec<DVector<f64>>> {
    match inputs {
        None => Ok(vec![DVector::zeros(model.m()); model.horizon()]),
        Some(us) => {
            if us.len() != model.horizon() {
                return Err(Error::InputLength {
                    expected: model.horizon(),
                    got: us.len(),
                });
            }
            if let Some(u) = us.iter().find(|u| u.len() != model.m()) {
                return Err(Error::InputLength {
                    expected: model.m(),
                    got: u.len(),
                });
            }
            Ok(us.to_vec())
        }
    }
}

/// Runs one period from true state `x0` and estimate `x0 - noise.x0_err`.
pub fn rollout(
    design: &EstimatorDesign<'_>,
    word: &DelayWord,
    x0: &DVector<f64>,
    noise: &TrialNoise,
    inputs: Option<&[DVector<f64>]>,
) -> Result<SimulationTrace> {
    let model = design.model();
    let cert = design.certificate();
    let t = model.horizon();
    if x0.len() != model.n() {
        return Err(Error::InputLength {
            expected: model.n(),
            got: x0.len(),
        });
    }
    let channel = DelayChannel::new(word.clone(), t)?;
    let seq = word_to_event_sequence(word);
    let alpha = sequence_index(design, &seq)?;
    let inputs = inputs_or_zero(model, inputs)?;

    let mut x = x0.clone();
    let mut est = design.start(x0 - &noise.x0_err)?;
    let mut measurements = Vec::with_capacity(t);
    let mut steps = Vec::with_capacity(t + 1);
    let record = |k: usize, x: &DVector<f64>, xhat: &DVector<f64>, observer: f64, arrivals: Vec<usize>, event| {
        let err = x - xhat;
        let err_norm = err.amax();
        let bound = if k == t { cert.mu1 } else { cert.mu2[alpha][k] };
        TraceStep {
            k,
            x: x.iter().copied().collect(),
            xhat: xhat.iter().copied().collect(),
            err: err.iter().copied().collect(),
            err_norm,
            bound,
            observer_bound: observer,
            arrivals,
            event,
            violation: err_norm > bound + VIOLATION_TOLERANCE,
        }
    };
    for k in 0..t {
        let v = DVector::from_column_slice(&noise.v[k]);
        measurements.push(model.c(k) * &x + model.v(k) * v);
        let delivered = channel.delivered_at(k).to_vec();
        let arrivals: Vec<(usize, DVector<f64>)> = delivered
            .iter()
            .map(|&i| (i, measurements[i].clone()))
            .collect();
        est.ingest(&arrivals)?;
        let step = record(k, &x, est.xhat(), est.current_bound(), delivered, Some(seq.indices()[k]));
        steps.push(step);
        let mut next = model.a(k) * &x + model.b(k) * &inputs[k];
        if let Some(w) = model.w(k) {
            next += w * DVector::from_column_slice(&noise.w[k]);
        }
        est.step(&inputs[k])?;
        x = next;
    }
    steps.push(record(t, &x, est.xhat(), est.current_bound(), Vec::new(), None));
    Ok(SimulationTrace {
        word: word.to_string(),
        seed: None,
        alpha,
        steps,
        noise: noise.clone(),
    })
}

/// One seeded trial: samples `x̃_0`, `w`, `v` and runs [`rollout`].
pub fn run_trial(
    design: &EstimatorDesign<'_>,
    word: &DelayWord,
    seed: u64,
    x0: &DVector<f64>,
    inputs: Option<&[DVector<f64>]>,
) -> Result<SimulationTrace> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = TrialNoise::sample(design.model(), design.certificate().mu1, &mut rng);
    let mut trace = rollout(design, word, x0, &noise, inputs)?;
    trace.seed = Some(seed);
    Ok(trace)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchSummary {
    pub word: String,
    pub trials: usize,
    pub seed0: u64,
    pub violations: usize,
    pub trials_with_violations: usize,
    pub max_error: Vec<f64>,
    pub bound: Vec<f64>,
    pub mu1: f64,
    pub terminal_max_error: f64,
}

/// Trials with seeds `seed0 .. seed0 + n_trials`.
pub fn batch_run(
    design: &EstimatorDesign<'_>,
    word: &DelayWord,
    n_trials: usize,
    seed0: u64,
    x0: &DVector<f64>,
) -> Result<(BatchSummary, Vec<SimulationTrace>)> {
    if n_trials == 0 {
        return Err(Error::InputLength {
            expected: 1,
            got: 0,
        });
    }
    let traces: Vec<SimulationTrace> = (0..n_trials as u64)
        .into_par_iter()
        .map(|j| run_trial(design, word, seed0 + j, x0, None))
        .collect::<Result<_>>()?;
    Ok((summarize(&traces, seed0, design.certificate().mu1), traces))
}

pub fn summarize(traces: &[SimulationTrace], seed0: u64, mu1: f64) -> BatchSummary {
    let len = traces[0].steps.len();
    let mut max_error = vec![0.0f64; len];
    for tr in traces {
        for (m, s) in max_error.iter_mut().zip(&tr.steps) {
            *m = m.max(s.err_norm);
        }
    }
    BatchSummary {
        word: traces[0].word.clone(),
        trials: traces.len(),
        seed0,
        violations: traces.iter().map(SimulationTrace::violations).sum(),
        trials_with_violations: traces.iter().filter(|t| t.violations() > 0).count(),
        terminal_max_error: max_error[len - 1],
        max_error,
        bound: traces[0].steps.iter().map(|s| s.bound).collect(),
        mu1,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeriodicTrace {
    pub seed: u64,
    pub periods: Vec<SimulationTrace>,
    /// `‖x̃‖_∞` at the end of every period.
    pub boundary_errors: Vec<f64>,
    pub violations: usize,
}

/// Repeats the certified gains over consecutive periods. Word `j % words.len()`
/// drives period `j`; each period restarts the estimator from the previous
/// period's final estimate while the plant continues.
pub fn periodic_run(
    design: &EstimatorDesign<'_>,
    words: &[DelayWord],
    n_periods: usize,
    seed: u64,
    x0: &DVector<f64>,
) -> Result<PeriodicTrace> {
    if words.is_empty() || n_periods == 0 {
        return Err(Error::InputLength {
            expected: 1,
            got: 0,
        });
    }
    let model = design.model();
    let mu1 = design.certificate().mu1;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut noise = TrialNoise::sample(model, mu1, &mut rng);
    let mut x = x0.clone();
    let mut periods = Vec::with_capacity(n_periods);
    for j in 0..n_periods {
        if j > 0 {
            let (w, v) = TrialNoise::sample_signals(model, &mut rng);
            let last = periods.last().map(|p: &SimulationTrace| p.steps.last().expect("non-empty trace"));
            let last = last.expect("previous period");
            x = DVector::from_column_slice(&last.x);
            noise = TrialNoise {
                x0_err: DVector::from_column_slice(&last.err),
                w,
                v,
            };
        }
        let mut trace = rollout(design, &words[j % words.len()], &x, &noise, None)?;
        trace.seed = Some(seed);
        periods.push(trace);
    }
    let boundary_errors: Vec<f64> = periods
        .iter()
        .map(|p| p.steps.last().expect("non-empty trace").err_norm)
        .collect();
    let violations = periods.iter().map(SimulationTrace::violations).sum();
    Ok(PeriodicTrace {
        seed,
        periods,
        boundary_errors,
        violations,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceFormat {
    Csv,
    Json,
}

impl TraceFormat {
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("json") => TraceFormat::Json,
            _ => TraceFormat::Csv,
        }
    }
}

fn fmt17(x: f64) -> String {
    format!("{x:.16e}")
}

fn csv_header(n: usize) -> Vec<String> {
    let mut h: Vec<String> = ["k", "error_norm", "bound", "observer_bound"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    for prefix in ["err", "x", "xhat"] {
        h.extend((0..n).map(|i| format!("{prefix}_{i}")));
    }
    h.extend(["arrivals", "event", "violation"].iter().map(|s| s.to_string()));
    h
}

pub fn export_trace(trace: &SimulationTrace, path: impl AsRef<Path>, format: TraceFormat) -> Result<()> {
    let path = path.as_ref();
    match format {
        TraceFormat::Json => fs::write(path, serde_json::to_string_pretty(trace)?)?,
        TraceFormat::Csv => {
            let n = trace.steps.first().map_or(0, |s| s.err.len());
            let mut w = csv::Writer::from_path(path)?;
            w.write_record(csv_header(n))?;
            for s in &trace.steps {
                let mut rec = vec![
                    s.k.to_string(),
                    fmt17(s.err_norm),
                    fmt17(s.bound),
                    fmt17(s.observer_bound),
                ];
                for vals in [&s.err, &s.x, &s.xhat] {
                    rec.extend(vals.iter().map(|&v| fmt17(v)));
                }
                rec.push(
                    s.arrivals
                        .iter()
                        .map(usize::to_string)
                        .collect::<Vec<_>>()
                        .join(";"),
                );
                rec.push(s.event.map_or(String::new(), |e| e.to_string()));
                rec.push(u8::from(s.violation).to_string());
                w.write_record(rec)?;
            }
            w.flush()?;
        }
    }
    Ok(())
}

fn bad(msg: impl Into<String>) -> Error {
    Error::InvalidArrival(msg.into())
}

/// Reads back the per-step rows of a CSV trace.
pub fn read_trace_csv(path: impl AsRef<Path>) -> Result<Vec<TraceStep>> {
    let mut r = csv::Reader::from_path(path)?;
    let header = r.headers()?.clone();
    let n = header.iter().filter(|h| h.starts_with("err_")).count();
    if header.len() != 4 + 3 * n + 3 {
        return Err(bad("unexpected trace header"));
    }
    let num = |s: &str| s.parse::<f64>().map_err(|e| bad(format!("{s:?}: {e}")));
    let mut steps = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let f = |i: usize| rec.get(i).unwrap_or("");
        let vec_at = |start: usize| (start..start + n).map(|i| num(f(i))).collect::<Result<Vec<_>>>();
        let tail = 4 + 3 * n;
        let arrivals = if f(tail).is_empty() {
            Vec::new()
        } else {
            f(tail)
                .split(';')
                .map(|s| s.parse::<usize>().map_err(|e| bad(e.to_string())))
                .collect::<Result<_>>()?
        };
        steps.push(TraceStep {
            k: f(0).parse().map_err(|_| bad("bad step index"))?,
            err_norm: num(f(1))?,
            bound: num(f(2))?,
            observer_bound: num(f(3))?,
            err: vec_at(4)?,
            x: vec_at(4 + n)?,
            xhat: vec_at(4 + 2 * n)?,
            arrivals,
            event: match f(tail + 1) {
                "" => None,
                e => Some(e.parse().map_err(|_| bad("bad event index"))?),
            },
            violation: f(tail + 2) == "1",
        });
    }
    Ok(steps)
}

/// Writes `trial_XXXX.csv` per trace and `summary.json` into `dir`.
pub fn export_batch(dir: impl AsRef<Path>, summary: &BatchSummary, traces: &[SimulationTrace]) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut written = Vec::with_capacity(traces.len() + 1);
    for (j, tr) in traces.iter().enumerate() {
        let p = dir.join(format!("trial_{j:04}.csv"));
        export_trace(tr, &p, TraceFormat::Csv)?;
        written.push(p);
    }
    let p = dir.join("summary.json");
    fs::write(&p, serde_json::to_string_pretty(summary)?)?;
    written.push(p);
    Ok(written)
}
