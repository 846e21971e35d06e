use std::fmt;
use std::path::Path;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, GridPoint, Result};
use crate::language::{reduce_language, DelayLanguage, EventLanguage, EventSequence, PrefixTree};
use crate::model::{stack_system, SystemModel};
use crate::rows;

use super::gains::GainSet;
use super::response::build_response;
use super::CostWeights;

pub const CERTIFICATE_FORMAT: &str = "eqrec-certificate/1";

/// Absolute slack allowed when re-checking bounds.
pub const VERIFY_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverMetadata {
    pub backend: String,
    pub lp_status: String,
    pub lp_objective: f64,
    pub primal_residual: f64,
    pub relative_gap: f64,
    pub iterations: u32,
    pub variables: usize,
    pub equalities: usize,
    pub inequalities: usize,
    /// Every recovery level evaluated by the line search, in evaluation order.
    pub mu1_search: Vec<GridPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Certificate {
    pub format: String,
    #[serde(rename = "T")]
    pub horizon: usize,
    pub n: usize,
    pub p: usize,
    pub mu1: f64,
    /// `μ₂,k^α`, indexed `[α][k]` for `k = 0..=T`.
    pub mu2: Vec<Vec<f64>>,
    #[serde(with = "rows::vector")]
    pub s0: DVector<f64>,
    /// Reduced event language; `α` indexes this list.
    pub sequences: Vec<EventSequence>,
    pub gains: GainSet,
    pub objective: f64,
    pub weights: CostWeights,
    pub language_fingerprint: String,
    pub model_fingerprint: String,
    pub solver: SolverMetadata,
}

fn sha256_json<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("in-memory values serialize");
    hex::encode(Sha256::digest(&bytes))
}

pub fn model_fingerprint(model: &SystemModel) -> String {
    sha256_json(&model.to_file_data())
}

pub fn language_fingerprint(lang: &DelayLanguage) -> String {
    sha256_json(lang)
}

impl Certificate {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cert: Self = serde_json::from_str(&text)?;
        if cert.format != CERTIFICATE_FORMAT {
            return Err(Error::CertificateRejected(format!(
                "unknown format tag {:?}",
                cert.format
            )));
        }
        Ok(cert)
    }

    pub fn event_language(&self) -> Result<EventLanguage> {
        EventLanguage::from_sequences(self.horizon, self.sequences.clone())
    }

    pub fn tree(&self) -> Result<PrefixTree> {
        Ok(PrefixTree::build(&self.event_language()?))
    }

    pub fn max_mu2(&self) -> f64 {
        self.mu2.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn check_model(&self, model: &SystemModel) -> Result<()> {
        let actual = model_fingerprint(model);
        if actual != self.model_fingerprint {
            return Err(Error::FingerprintMismatch {
                kind: "model",
                expected: self.model_fingerprint.clone(),
                actual,
            });
        }
        Ok(())
    }

    pub fn check_language(&self, lang: &DelayLanguage) -> Result<()> {
        let actual = language_fingerprint(lang);
        if actual != self.language_fingerprint {
            return Err(Error::FingerprintMismatch {
                kind: "language",
                expected: self.language_fingerprint.clone(),
                actual,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundKind {
    /// `|x̃_k| <= μ₂,k^α`
    Intermediate,
    /// `|x̃_T| <= μ₁`
    Terminal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowViolation {
    pub alpha: usize,
    pub step: usize,
    pub row: usize,
    pub kind: BoundKind,
    pub worst_case: f64,
    pub bound: f64,
    /// `bound - worst_case` (negative).
    pub margin: f64,
}

impl fmt::Display for RowViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "alpha {} step {} row {} ({:?}): worst case {:.9} exceeds bound {:.9} by {:.3e}",
            self.alpha, self.step, self.row, self.kind, self.worst_case, self.bound, -self.margin
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub checked_rows: usize,
    /// Smallest `bound - worst_case` over all checked rows.
    pub min_slack: f64,
    pub violations: Vec<RowViolation>,
    /// Violated gain-structure or level constraints.
    pub structural: Vec<String>,
}

impl VerificationReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty() && self.structural.is_empty()
    }
}

/// Per-sequence closed-form worst case of every stacked error row.
pub(crate) fn row_worst_cases(
    model: &SystemModel,
    cert_gains: &GainSet,
    tree: &PrefixTree,
    alpha: usize,
    mu1: f64,
    s0: &DVector<f64>,
) -> Result<Vec<f64>> {
    let stacked = stack_system(model);
    let g = cert_gains.for_sequence(tree, alpha);
    let resp = build_response(model, &stacked, &g.m, &g.l_blocks)?;
    let offset = resp.offset(&stacked, &g.nu, s0);
    Ok(resp.row_worst_case(&offset, model.eta_w(), model.eta_v(), mu1))
}

/// Fingerprint checks against the source files, then [`check_certificate`].
pub fn verify_certificate(
    model: &SystemModel,
    lang: &DelayLanguage,
    cert: &Certificate,
) -> Result<VerificationReport> {
    cert.check_model(model)?;
    cert.check_language(lang)?;
    let ev = reduce_language(lang);
    if ev.sequences() != cert.sequences.as_slice() {
        return Err(Error::CertificateRejected(
            "event sequences differ from the reduced language".into(),
        ));
    }
    check_certificate(model, cert)
}

/// Closed-form re-check of every bound plus the gain zero and sharing structure.
pub fn check_certificate(model: &SystemModel, cert: &Certificate) -> Result<VerificationReport> {
    let (n, t) = (model.n(), model.horizon());
    if cert.horizon != t || cert.n != n || cert.p != model.p() {
        return Err(Error::CertificateRejected(format!(
            "certificate dimensions (T={}, n={}, p={}) do not match the model",
            cert.horizon, cert.n, cert.p
        )));
    }
    let tree = cert.tree()?;
    cert.gains.check_alignment(&tree)?;
    if cert.mu2.len() != cert.sequences.len() || cert.mu2.iter().any(|r| r.len() != t + 1) {
        return Err(Error::CertificateRejected("mu2 table has the wrong shape".into()));
    }
    if cert.s0.len() != n {
        return Err(Error::CertificateRejected("s0 has the wrong length".into()));
    }

    let mut structural = Vec::new();
    if !(cert.mu1 >= 0.0) {
        structural.push(format!("mu1 = {} is negative", cert.mu1));
    }
    for (a, row) in cert.mu2.iter().enumerate() {
        for (k, &m) in row.iter().enumerate() {
            if !(m >= cert.mu1 - VERIFY_TOLERANCE) {
                structural.push(format!("mu2[{a}][{k}] = {m} is below mu1 = {}", cert.mu1));
            }
        }
    }
    // Delay pattern: blocks of measurements that have not arrived must be zero.
    for (id, node) in cert.gains.nodes.iter().enumerate().skip(1) {
        let step = node.depth - 1;
        let alpha = tree.node(id).sequences[0];
        let event = cert.sequences[alpha].event(step);
        for (i, block) in node.m_blocks.iter().enumerate() {
            if !event.bit(i) && block.iter().any(|&x| x != 0.0) {
                structural.push(format!(
                    "node {id}: M_({step},{i}) is nonzero but z_{i} is unavailable at step {step}"
                ));
            }
        }
        if !event.bit(step) && node.l_block.iter().any(|&x| x != 0.0) {
            structural.push(format!(
                "node {id}: L_{step} is nonzero but z_{step} is not on time"
            ));
        }
    }
    // Prefix sharing on the expanded per-sequence gains.
    let expanded: Vec<_> = (0..cert.sequences.len())
        .map(|a| cert.gains.for_sequence(&tree, a))
        .collect();
    let (np, pp) = (n, model.p());
    for node in tree.nodes().iter().skip(1) {
        let d = node.depth;
        let first = node.sequences[0];
        for &other in &node.sequences[1..] {
            let (x, y) = (&expanded[first], &expanded[other]);
            let same_m = x.m.view((0, 0), (d * np, d * pp)) == y.m.view((0, 0), (d * np, d * pp));
            let same_l = x.l_blocks[..d] == y.l_blocks[..d];
            let same_nu = x.nu.rows(0, d * np) == y.nu.rows(0, d * np);
            if !(same_m && same_l && same_nu) {
                structural.push(format!(
                    "sequences {first} and {other} share a length-{d} prefix but their leading gains differ"
                ));
            }
        }
    }

    let mut violations = Vec::new();
    let mut min_slack = f64::INFINITY;
    let mut checked_rows = 0;
    for alpha in 0..cert.sequences.len() {
        let worst = row_worst_cases(model, &cert.gains, &tree, alpha, cert.mu1, &cert.s0)?;
        for (idx, &wc) in worst.iter().enumerate() {
            let (step, row) = (idx / n, idx % n);
            let mut check = |kind, bound: f64| {
                checked_rows += 1;
                let margin = bound - wc;
                min_slack = min_slack.min(margin);
                if margin < -VERIFY_TOLERANCE {
                    violations.push(RowViolation {
                        alpha,
                        step,
                        row,
                        kind,
                        worst_case: wc,
                        bound,
                        margin,
                    });
                }
            };
            check(BoundKind::Intermediate, cert.mu2[alpha][step]);
            if step == t {
                check(BoundKind::Terminal, cert.mu1);
            }
        }
    }
    Ok(VerificationReport {
        checked_rows,
        min_slack,
        violations,
        structural,
    })
}

/// Certified worst-case `‖x̃_k‖_∞` of sequence `alpha` for `k = 0..=T`.
pub fn worst_case_profile(model: &SystemModel, cert: &Certificate, alpha: usize) -> Result<Vec<f64>> {
    if alpha >= cert.sequences.len() {
        return Err(Error::CertificateRejected(format!(
            "sequence index {alpha} out of range ({} sequences)",
            cert.sequences.len()
        )));
    }
    let tree = cert.tree()?;
    let worst = row_worst_cases(model, &cert.gains, &tree, alpha, cert.mu1, &cert.s0)?;
    Ok(worst
        .chunks(model.n())
        .map(|rows| rows.iter().copied().fold(0.0, f64::max))
        .collect())
}
