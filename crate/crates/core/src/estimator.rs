//! Online execution of a synthesized estimator.
//!
//! At step `k` the caller first ingests the measurements delivered at `k`
//! (any source time `i <= k`), then calls [`EstimatorState::step`]. The
//! availability pattern observed so far selects a prefix-tree node, and the
//! gain row for step `k` is read from that node.

use std::collections::BTreeSet;
use std::path::Path;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::language::{event_index_from_availability, PrefixTree, ROOT};
use crate::model::SystemModel;
use crate::synthesis::{check_certificate, Certificate};

/// A certificate checked against its model, ready to drive estimator runs.
#[derive(Debug, Clone)]
pub struct EstimatorDesign<'a> {
    cert: &'a Certificate,
    model: &'a SystemModel,
    tree: PrefixTree,
}

impl<'a> EstimatorDesign<'a> {
    /// Refuses certificates whose model fingerprint differs or that fail the
    /// closed-form re-check.
    pub fn new(cert: &'a Certificate, model: &'a SystemModel) -> Result<Self> {
        cert.check_model(model)?;
        let report = check_certificate(model, cert)?;
        if !report.passed() {
            let first = report
                .violations
                .first()
                .map(|v| v.to_string())
                .or_else(|| report.structural.first().cloned())
                .unwrap_or_default();
            return Err(Error::CertificateRejected(format!(
                "{} bound violations, {} structural problems; first: {first}",
                report.violations.len(),
                report.structural.len()
            )));
        }
        let tree = cert.tree()?;
        Ok(Self { cert, model, tree })
    }

    pub fn certificate(&self) -> &'a Certificate {
        self.cert
    }

    pub fn model(&self) -> &'a SystemModel {
        self.model
    }

    pub fn tree(&self) -> &PrefixTree {
        &self.tree
    }

    pub fn start(&self, xhat0: DVector<f64>) -> Result<EstimatorState<'_>> {
        if xhat0.len() != self.model.n() {
            return Err(Error::InputLength {
                expected: self.model.n(),
                got: xhat0.len(),
            });
        }
        Ok(EstimatorState {
            design: self,
            k: 0,
            xhat: xhat0,
            s: self.cert.s0.clone(),
            history: Vec::new(),
            innovations: vec![None; self.model.horizon()],
            arrived: BTreeSet::new(),
            base: ROOT,
            node: None,
        })
    }
}

/// Starts a run of a checked design at `xhat0`.
pub fn init_estimator<'a>(
    design: &'a EstimatorDesign<'a>,
    xhat0: DVector<f64>,
) -> Result<EstimatorState<'a>> {
    design.start(xhat0)
}

#[derive(Debug, Clone)]
pub struct EstimatorState<'a> {
    design: &'a EstimatorDesign<'a>,
    k: usize,
    xhat: DVector<f64>,
    s: DVector<f64>,
    /// `x̂_i + s_i` cached at every past step `i < k`, and at `k` once stepped into.
    history: Vec<DVector<f64>>,
    /// Frozen `z̃_i`, indexed by source time.
    innovations: Vec<Option<DVector<f64>>>,
    arrived: BTreeSet<usize>,
    /// Node of depth `k` (pattern through step `k - 1`).
    base: usize,
    /// Node of depth `k + 1` once step `k`'s arrivals are resolved.
    node: Option<usize>,
}

impl<'a> EstimatorState<'a> {
    pub fn step_index(&self) -> usize {
        self.k
    }

    pub fn xhat(&self) -> &DVector<f64> {
        &self.xhat
    }

    pub fn s(&self) -> &DVector<f64> {
        &self.s
    }

    pub fn arrived(&self) -> &BTreeSet<usize> {
        &self.arrived
    }

    pub fn innovation(&self, source: usize) -> Option<&DVector<f64>> {
        self.innovations.get(source).and_then(Option::as_ref)
    }

    /// Deepest resolved prefix-tree node.
    pub fn node(&self) -> usize {
        self.node.unwrap_or(self.base)
    }

    /// Sequences still consistent with the observed arrivals.
    pub fn consistent_sequences(&self) -> &[usize] {
        &self.design.tree.node(self.node()).sequences
    }

    /// Guaranteed `‖x̃_k‖_∞` level: the worst `μ₂,k^α` over consistent
    /// sequences, and `μ₁` at the final step.
    pub fn current_bound(&self) -> f64 {
        let cert = self.design.cert;
        if self.k >= cert.horizon {
            return cert.mu1;
        }
        self.consistent_sequences()
            .iter()
            .map(|&a| cert.mu2[a][self.k])
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// Accepts measurements delivered at the current step. May be called more
    /// than once per step; the pattern is re-resolved each time.
    pub fn ingest(&mut self, arrivals: &[(usize, DVector<f64>)]) -> Result<()> {
        let model = self.design.model;
        let k = self.k;
        if k >= model.horizon() {
            return Err(Error::StepBeyondHorizon(k));
        }
        let mut seen = BTreeSet::new();
        for (i, z) in arrivals {
            if *i > k {
                return Err(Error::InvalidArrival(format!(
                    "measurement of time {i} delivered at step {k}"
                )));
            }
            if z.len() != model.p() {
                return Err(Error::InputLength {
                    expected: model.p(),
                    got: z.len(),
                });
            }
            if self.arrived.contains(i) || !seen.insert(*i) {
                return Err(Error::DuplicateArrival(*i));
            }
        }
        let node = self.resolve(self.arrived.iter().chain(&seen).copied())?;
        self.cache_current();
        for (i, z) in arrivals {
            let predicted = model.c(*i) * &self.history[*i];
            self.innovations[*i] = Some(z - predicted);
            self.arrived.insert(*i);
        }
        self.node = Some(node);
        Ok(())
    }

    fn cache_current(&mut self) {
        if self.history.len() == self.k {
            self.history.push(&self.xhat + &self.s);
        }
    }

    fn resolve(&self, available: impl Iterator<Item = usize>) -> Result<usize> {
        let event = event_index_from_availability(self.k, available)?;
        self.design
            .tree
            .child(self.base, event.index())
            .ok_or(Error::PatternOutsideLanguage { step: self.k })
    }

    /// Advances to `k + 1` with input `u_k` and returns `x̂_{k+1}`.
    pub fn step(&mut self, u: &DVector<f64>) -> Result<&DVector<f64>> {
        let model = self.design.model;
        let k = self.k;
        if k >= model.horizon() {
            return Err(Error::StepBeyondHorizon(k));
        }
        if u.len() != model.m() {
            return Err(Error::InputLength {
                expected: model.m(),
                got: u.len(),
            });
        }
        let node = match self.node {
            Some(id) => id,
            None => {
                let id = self.resolve(self.arrived.iter().copied())?;
                self.cache_current();
                id
            }
        };
        let gains = &self.design.cert.gains.nodes[node];
        debug_assert_eq!(gains.depth, k + 1);

        let mut ue = gains.nu.clone();
        for &i in &self.arrived {
            let z = self.innovations[i].as_ref().expect("arrived innovations are cached");
            ue += &gains.m_blocks[i] * z;
        }
        let a = model.a(k);
        let mut s_next = a * &self.s + &ue;
        if let Some(z) = self.innovations[k].as_ref() {
            s_next += &gains.l_block * z;
        } else {
            debug_assert!(gains.l_block.iter().all(|&x| x == 0.0));
        }
        self.xhat = a * &self.xhat + model.b(k) * u - ue;
        self.s = s_next;
        self.k += 1;
        self.base = node;
        self.node = None;
        Ok(&self.xhat)
    }
}

/// One delivered measurement in a replay file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayArrival {
    pub step: usize,
    pub source: usize,
    pub z: Vec<f64>,
}

/// Offline arrival log for re-running an estimator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayLog {
    pub xhat0: Vec<f64>,
    /// `u_0 .. u_{T-1}`; zero inputs when absent.
    #[serde(default)]
    pub inputs: Option<Vec<Vec<f64>>>,
    pub arrivals: Vec<ReplayArrival>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayStep {
    pub k: usize,
    pub xhat: Vec<f64>,
    pub bound: f64,
    pub node: usize,
}

pub fn load_replay(path: impl AsRef<Path>) -> Result<ReplayLog> {
    let text = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

/// Runs the estimator over a logged arrival stream. Arrivals at steps `>= T`
/// are dropped.
pub fn replay(design: &EstimatorDesign<'_>, log: &ReplayLog) -> Result<Vec<ReplayStep>> {
    let model = design.model();
    let t = model.horizon();
    let mut est = design.start(DVector::from_vec(log.xhat0.clone()))?;
    let mut out = Vec::with_capacity(t + 1);
    for k in 0..t {
        let arrivals: Vec<(usize, DVector<f64>)> = log
            .arrivals
            .iter()
            .filter(|a| a.step == k)
            .map(|a| (a.source, DVector::from_vec(a.z.clone())))
            .collect();
        est.ingest(&arrivals)?;
        out.push(ReplayStep {
            k,
            xhat: est.xhat().iter().copied().collect(),
            bound: est.current_bound(),
            node: est.node(),
        });
        let u = match &log.inputs {
            Some(us) => DVector::from_vec(
                us.get(k)
                    .cloned()
                    .ok_or(Error::InputLength { expected: t, got: us.len() })?,
            ),
            None => DVector::zeros(model.m()),
        };
        est.step(&u)?;
    }
    out.push(ReplayStep {
        k: t,
        xhat: est.xhat().iter().copied().collect(),
        bound: est.current_bound(),
        node: est.node(),
    });
    Ok(out)
}
