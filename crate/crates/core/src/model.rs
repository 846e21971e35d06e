//! Linear time-varying plant description and its horizon-stacked form.

use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Either one matrix broadcast over the horizon or one matrix per step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MatrixSeries {
    PerStep(Vec<Vec<Vec<f64>>>),
    Constant(Vec<Vec<f64>>),
}

/// On-disk model layout. Matrices are row-major nested arrays.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub n: usize,
    pub m: usize,
    pub p: usize,
    #[serde(rename = "T")]
    pub horizon: usize,
    #[serde(rename = "A")]
    pub a: MatrixSeries,
    #[serde(rename = "B")]
    pub b: MatrixSeries,
    #[serde(rename = "C")]
    pub c: MatrixSeries,
    #[serde(rename = "W", default, skip_serializing_if = "Option::is_none")]
    pub w: Option<MatrixSeries>,
    #[serde(rename = "V")]
    pub v: MatrixSeries,
    #[serde(default)]
    pub eta_w: f64,
    pub eta_v: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SystemModel {
    n: usize,
    m: usize,
    p: usize,
    horizon: usize,
    a: Vec<DMatrix<f64>>,
    b: Vec<DMatrix<f64>>,
    c: Vec<DMatrix<f64>>,
    w: Option<Vec<DMatrix<f64>>>,
    v: Vec<DMatrix<f64>>,
    eta_w: f64,
    eta_v: f64,
}

fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| m.row(i).iter().copied().collect())
        .collect()
}

fn from_rows(name: &str, rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::InvalidModel(format!("{name} has ragged rows")));
    }
    if rows.iter().flatten().any(|x| !x.is_finite()) {
        return Err(Error::InvalidModel(format!("{name} has non-finite entries")));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

fn expand(name: &str, series: &MatrixSeries, horizon: usize) -> Result<Vec<DMatrix<f64>>> {
    match series {
        MatrixSeries::Constant(rows) => Ok(vec![from_rows(name, rows)?; horizon]),
        MatrixSeries::PerStep(steps) => {
            if steps.len() != horizon {
                return Err(Error::InvalidModel(format!(
                    "{name} lists {} matrices, expected T = {horizon}",
                    steps.len()
                )));
            }
            steps
                .iter()
                .enumerate()
                .map(|(k, rows)| from_rows(&format!("{name}[{k}]"), rows))
                .collect()
        }
    }
}

fn check_shape(name: &str, mats: &[DMatrix<f64>], rows: usize, cols: usize) -> Result<()> {
    for (k, m) in mats.iter().enumerate() {
        if m.shape() != (rows, cols) {
            return Err(Error::InvalidModel(format!(
                "dimension mismatch: {name}[{k}] is {}x{}, expected {rows}x{cols}",
                m.nrows(),
                m.ncols()
            )));
        }
    }
    Ok(())
}

impl SystemModel {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        a: Vec<DMatrix<f64>>,
        b: Vec<DMatrix<f64>>,
        c: Vec<DMatrix<f64>>,
        w: Option<Vec<DMatrix<f64>>>,
        v: Vec<DMatrix<f64>>,
        eta_w: f64,
        eta_v: f64,
    ) -> Result<Self> {
        let horizon = a.len();
        if horizon == 0 {
            return Err(Error::InvalidModel("horizon must be at least 1".into()));
        }
        let n = a[0].nrows();
        let m = b.first().map_or(0, |b| b.ncols());
        let p = c.first().map_or(0, |c| c.nrows());
        for (name, len) in [("B", b.len()), ("C", c.len()), ("V", v.len())] {
            if len != horizon {
                return Err(Error::InvalidModel(format!(
                    "{name} has {len} steps, A has {horizon}"
                )));
            }
        }
        check_shape("A", &a, n, n)?;
        check_shape("B", &b, n, m)?;
        check_shape("C", &c, p, n)?;
        check_shape("V", &v, p, p)?;
        if let Some(w) = &w {
            if w.len() != horizon {
                return Err(Error::InvalidModel(format!(
                    "W has {} steps, A has {horizon}",
                    w.len()
                )));
            }
            check_shape("W", w, n, w[0].ncols())?;
        }
        if !(eta_w >= 0.0 && eta_w.is_finite()) || !(eta_v >= 0.0 && eta_v.is_finite()) {
            return Err(Error::InvalidModel(format!(
                "noise bounds must be finite and non-negative (eta_w = {eta_w}, eta_v = {eta_v})"
            )));
        }
        if w.is_none() && eta_w != 0.0 {
            return Err(Error::InvalidModel(
                "eta_w must be 0 when the model has no process noise matrix W".into(),
            ));
        }
        Ok(Self {
            n,
            m,
            p,
            horizon,
            a,
            b,
            c,
            w,
            v,
            eta_w,
            eta_v,
        })
    }

    pub fn from_file_data(file: &ModelFile) -> Result<Self> {
        let t = file.horizon;
        if t == 0 {
            return Err(Error::InvalidModel("T must be at least 1".into()));
        }
        let a = expand("A", &file.a, t)?;
        let b = expand("B", &file.b, t)?;
        let c = expand("C", &file.c, t)?;
        let w = file.w.as_ref().map(|w| expand("W", w, t)).transpose()?;
        let v = expand("V", &file.v, t)?;
        check_shape("A", &a, file.n, file.n)?;
        check_shape("B", &b, file.n, file.m)?;
        check_shape("C", &c, file.p, file.n)?;
        check_shape("V", &v, file.p, file.p)?;
        Self::new(a, b, c, w, v, file.eta_w, file.eta_v)
    }

    pub fn to_file_data(&self) -> ModelFile {
        let series = |mats: &[DMatrix<f64>]| MatrixSeries::PerStep(mats.iter().map(to_rows).collect());
        ModelFile {
            n: self.n,
            m: self.m,
            p: self.p,
            horizon: self.horizon,
            a: series(&self.a),
            b: series(&self.b),
            c: series(&self.c),
            w: self.w.as_deref().map(series),
            v: series(&self.v),
            eta_w: self.eta_w,
            eta_v: self.eta_v,
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }
    pub fn m(&self) -> usize {
        self.m
    }
    pub fn p(&self) -> usize {
        self.p
    }
    pub fn horizon(&self) -> usize {
        self.horizon
    }
    pub fn a(&self, k: usize) -> &DMatrix<f64> {
        &self.a[k]
    }
    pub fn b(&self, k: usize) -> &DMatrix<f64> {
        &self.b[k]
    }
    pub fn c(&self, k: usize) -> &DMatrix<f64> {
        &self.c[k]
    }
    pub fn v(&self, k: usize) -> &DMatrix<f64> {
        &self.v[k]
    }
    pub fn w(&self, k: usize) -> Option<&DMatrix<f64>> {
        self.w.as_ref().map(|w| &w[k])
    }
    pub fn has_process_noise(&self) -> bool {
        self.w.is_some()
    }
    /// Dimension of `w_k` (0 without process noise).
    pub fn nw(&self) -> usize {
        self.w.as_ref().map_or(0, |w| w[0].ncols())
    }
    pub fn eta_w(&self) -> f64 {
        self.eta_w
    }
    pub fn eta_v(&self) -> f64 {
        self.eta_v
    }

    /// Same plant with both noise bounds multiplied by `factor`.
    pub fn with_scaled_noise(&self, factor: f64) -> Result<Self> {
        let mut out = self.clone();
        out.eta_w *= factor;
        out.eta_v *= factor;
        Self::new(out.a, out.b, out.c, out.w, out.v, out.eta_w, out.eta_v)
    }

    /// Same plant with a new output-noise bound.
    pub fn with_eta_v(&self, eta_v: f64) -> Result<Self> {
        let out = self.clone();
        Self::new(out.a, out.b, out.c, out.w, out.v, out.eta_w, eta_v)
    }

    pub fn is_time_invariant(&self) -> bool {
        let same = |v: &[DMatrix<f64>]| v.iter().all(|m| m == &v[0]);
        same(&self.a)
            && same(&self.b)
            && same(&self.c)
            && same(&self.v)
            && self.w.as_deref().is_none_or(same)
    }
}

pub fn load_model(path: impl AsRef<Path>) -> Result<SystemModel> {
    let text = std::fs::read_to_string(path.as_ref())?;
    parse_model(&text)
}

pub fn parse_model(text: &str) -> Result<SystemModel> {
    let file: ModelFile = serde_json::from_str(text).map_err(|e| {
        Error::InvalidModel(format!("line {} column {}: {e}", e.line(), e.column()))
    })?;
    SystemModel::from_file_data(&file)
}

/// Horizon-stacked matrices. Block rows of the state stacks run over `k = 0..=T`.
#[derive(Debug, Clone, PartialEq)]
pub struct StackedSystem {
    /// `[I; A^1_0; ...; A^T_0]`, `(T+1)n x n`.
    pub a: DMatrix<f64>,
    /// `blkdiag(C_0..C_{T-1})` with a zero last block column, `Tp x (T+1)n`.
    pub c: DMatrix<f64>,
    /// Block `(k, i-1)` is `A^k_i` for `1 <= i <= k`, `(T+1)n x Tn`.
    pub h: DMatrix<f64>,
    /// `blkdiag(W_k)`; `None` for plants without process noise.
    pub w: Option<DMatrix<f64>>,
    pub v: DMatrix<f64>,
    /// Terminal selector `[0 I]`, `n x (T+1)n`.
    pub r_t: DMatrix<f64>,
}

pub(crate) fn block_diag(blocks: &[&DMatrix<f64>]) -> DMatrix<f64> {
    let rows: usize = blocks.iter().map(|b| b.nrows()).sum();
    let cols: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = DMatrix::zeros(rows, cols);
    let (mut r, mut c) = (0, 0);
    for b in blocks {
        out.view_mut((r, c), b.shape()).copy_from(b);
        r += b.nrows();
        c += b.ncols();
    }
    out
}

/// Stacks the transition products of `steps` (each `n x n`): the free response
/// `[I; F^1_0; ...; F^T_0]` and the block-lower forced response with blocks `F^k_i`.
fn propagation(steps: &[DMatrix<f64>], n: usize) -> (DMatrix<f64>, DMatrix<f64>) {
    let t = steps.len();
    let mut free = DMatrix::zeros((t + 1) * n, n);
    let mut prod = DMatrix::identity(n, n);
    free.view_mut((0, 0), (n, n)).copy_from(&prod);
    for k in 0..t {
        prod = &steps[k] * prod;
        free.view_mut(((k + 1) * n, 0), (n, n)).copy_from(&prod);
    }
    let mut forced = DMatrix::zeros((t + 1) * n, t * n);
    for i in 1..=t {
        let mut block = DMatrix::identity(n, n);
        forced.view_mut((i * n, (i - 1) * n), (n, n)).copy_from(&block);
        for k in i..t {
            block = &steps[k] * block;
            forced
                .view_mut(((k + 1) * n, (i - 1) * n), (n, n))
                .copy_from(&block);
        }
    }
    (free, forced)
}

pub fn stack_system(model: &SystemModel) -> StackedSystem {
    let (n, p, t) = (model.n, model.p, model.horizon);
    let (a, h) = propagation(&model.a, n);
    let mut c = DMatrix::zeros(t * p, (t + 1) * n);
    for k in 0..t {
        c.view_mut((k * p, k * n), (p, n)).copy_from(&model.c[k]);
    }
    let w = model
        .w
        .as_ref()
        .map(|w| block_diag(&w.iter().collect::<Vec<_>>()));
    let v = block_diag(&model.v.iter().collect::<Vec<_>>());
    let mut r_t = DMatrix::zeros(n, (t + 1) * n);
    r_t.view_mut((0, t * n), (n, n)).fill_with_identity();
    StackedSystem { a, c, h, w, v, r_t }
}

/// Closed-loop stacks `(Φ, Γ)` for `Φ_k = A_k - L_k C_k`.
pub fn stack_phi_gamma(
    model: &SystemModel,
    l_blocks: &[DMatrix<f64>],
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    if l_blocks.len() != model.horizon {
        return Err(Error::ShapeMismatch(format!(
            "{} gain blocks for horizon {}",
            l_blocks.len(),
            model.horizon
        )));
    }
    let phi_steps = l_blocks
        .iter()
        .enumerate()
        .map(|(k, l)| {
            if l.shape() != (model.n, model.p) {
                return Err(Error::ShapeMismatch(format!(
                    "L[{k}] is {}x{}, expected {}x{}",
                    l.nrows(),
                    l.ncols(),
                    model.n,
                    model.p
                )));
            }
            Ok(&model.a[k] - l * &model.c[k])
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(propagation(&phi_steps, model.n))
}
