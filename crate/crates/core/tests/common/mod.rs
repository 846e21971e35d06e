//! Independent oracles shared by the integration tests. Nothing here calls the
//! library's LP assembly, stacked matrices, or solver.

#![allow(dead_code)]

use std::collections::{BTreeSet, HashMap};

use eqrec::language::DelayWord;
use eqrec::model::SystemModel;
use nalgebra::{DMatrix, DVector};
use rand::rngs::ChaCha8Rng;
use rand::{RngExt, SeedableRng};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// ---------------------------------------------------------------------------
// Dense two-phase simplex (Bland's rule)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Default)]
pub struct DenseLp {
    pub c: Vec<f64>,
    pub ub: Vec<(Vec<f64>, f64)>,
    pub eq: Vec<(Vec<f64>, f64)>,
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl DenseLp {
    pub fn new(nvars: usize) -> Self {
        Self {
            c: vec![0.0; nvars],
            ub: Vec::new(),
            eq: Vec::new(),
            lo: vec![f64::NEG_INFINITY; nvars],
            hi: vec![f64::INFINITY; nvars],
        }
    }

    pub fn nvars(&self) -> usize {
        self.c.len()
    }

    /// Sparse helper: `Σ coef x_j <= rhs`.
    pub fn le(&mut self, terms: &[(usize, f64)], rhs: f64) {
        let mut row = vec![0.0; self.nvars()];
        for &(j, a) in terms {
            row[j] += a;
        }
        self.ub.push((row, rhs));
    }

    pub fn equal(&mut self, terms: &[(usize, f64)], rhs: f64) {
        let mut row = vec![0.0; self.nvars()];
        for &(j, a) in terms {
            row[j] += a;
        }
        self.eq.push((row, rhs));
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SimplexOutcome {
    Optimal { x: Vec<f64>, objective: f64 },
    Infeasible,
    Unbounded,
}

const EPS: f64 = 1e-9;

struct Tableau {
    t: Vec<Vec<f64>>,
    basis: Vec<usize>,
    cols: usize,
}

impl Tableau {
    fn pivot(&mut self, r: usize, c: usize) {
        let p = self.t[r][c];
        for v in self.t[r].iter_mut() {
            *v /= p;
        }
        let pivot_row = self.t[r].clone();
        for (i, row) in self.t.iter_mut().enumerate() {
            if i != r {
                let f = row[c];
                if f != 0.0 {
                    for (v, pv) in row.iter_mut().zip(&pivot_row) {
                        *v -= f * pv;
                    }
                }
            }
        }
        self.basis[r] = c;
    }

    /// Minimizes the objective row (last row). Returns false when unbounded.
    fn run(&mut self, allowed: &dyn Fn(usize) -> bool) -> bool {
        let m = self.basis.len();
        let rhs = self.cols;
        loop {
            let obj = &self.t[m];
            let Some(enter) = (0..self.cols).find(|&j| allowed(j) && obj[j] < -EPS) else {
                return true;
            };
            let mut leave: Option<(usize, f64)> = None;
            for r in 0..m {
                let a = self.t[r][enter];
                if a > EPS {
                    let ratio = self.t[r][rhs] / a;
                    leave = match leave {
                        None => Some((r, ratio)),
                        Some((lr, lratio)) => {
                            if ratio < lratio - EPS
                                || (ratio <= lratio + EPS && self.basis[r] < self.basis[lr])
                            {
                                Some((r, ratio))
                            } else {
                                Some((lr, lratio))
                            }
                        }
                    };
                }
            }
            match leave {
                None => return false,
                Some((r, _)) => self.pivot(r, enter),
            }
        }
    }
}

/// Textbook two-phase tableau simplex.
pub fn simplex(lp: &DenseLp) -> SimplexOutcome {
    let n = lp.nvars();
    // x_j = offset_j + Σ sign * y_col
    let mut map: Vec<(f64, Vec<(usize, f64)>)> = Vec::with_capacity(n);
    let mut ncols = 0;
    let mut extra_ub: Vec<(usize, f64)> = Vec::new();
    for j in 0..n {
        let (lo, hi) = (lp.lo[j], lp.hi[j]);
        if lo.is_finite() {
            map.push((lo, vec![(ncols, 1.0)]));
            if hi.is_finite() {
                extra_ub.push((ncols, hi - lo));
            }
            ncols += 1;
        } else if hi.is_finite() {
            map.push((hi, vec![(ncols, -1.0)]));
            ncols += 1;
        } else {
            map.push((0.0, vec![(ncols, 1.0), (ncols + 1, -1.0)]));
            ncols += 2;
        }
    }
    let transform = |row: &[f64], rhs: f64| -> (Vec<f64>, f64) {
        let mut out = vec![0.0; ncols];
        let mut b = rhs;
        for (j, &a) in row.iter().enumerate() {
            if a != 0.0 {
                b -= a * map[j].0;
                for &(col, s) in &map[j].1 {
                    out[col] += a * s;
                }
            }
        }
        (out, b)
    };
    let mut rows: Vec<(Vec<f64>, f64, bool)> = Vec::new();
    for (row, rhs) in &lp.ub {
        let (r, b) = transform(row, *rhs);
        rows.push((r, b, true));
    }
    for &(col, cap) in &extra_ub {
        let mut r = vec![0.0; ncols];
        r[col] = 1.0;
        rows.push((r, cap, true));
    }
    for (row, rhs) in &lp.eq {
        let (r, b) = transform(row, *rhs);
        rows.push((r, b, false));
    }
    let m = rows.len();
    let nslack = rows.iter().filter(|r| r.2).count();
    let art0 = ncols + nslack;
    let total = art0 + m;
    let mut t = vec![vec![0.0; total + 1]; m + 1];
    let mut slack = ncols;
    for (i, (r, b, is_ub)) in rows.iter().enumerate() {
        t[i][..ncols].copy_from_slice(r);
        t[i][total] = *b;
        if *is_ub {
            t[i][slack] = 1.0;
            slack += 1;
        }
        if t[i][total] < 0.0 {
            for v in t[i].iter_mut() {
                *v = -*v;
            }
        }
        t[i][art0 + i] = 1.0;
    }
    // phase 1 objective: Σ artificials, expressed in non-basic terms
    for i in 0..m {
        for j in 0..=total {
            if !(art0..total).contains(&j) {
                t[m][j] -= t[i][j];
            }
        }
    }
    let mut tab = Tableau {
        t,
        basis: (art0..total).collect(),
        cols: total,
    };
    tab.run(&|_| true);
    let infeas = -tab.t[m][total];
    let scale = 1.0 + rows.iter().map(|r| r.1.abs()).fold(0.0, f64::max);
    if infeas > 1e-7 * scale {
        return SimplexOutcome::Infeasible;
    }
    for r in 0..m {
        if tab.basis[r] >= art0 {
            if let Some(c) = (0..art0).find(|&c| tab.t[r][c].abs() > EPS) {
                tab.pivot(r, c);
            }
        }
    }
    // phase 2 objective
    let mut cost = vec![0.0; total];
    for j in 0..n {
        for &(col, s) in &map[j].1 {
            cost[col] += lp.c[j] * s;
        }
    }
    let mut obj = vec![0.0; total + 1];
    obj[..total].copy_from_slice(&cost);
    for r in 0..m {
        let cb = cost[tab.basis[r]];
        if cb != 0.0 {
            for j in 0..=total {
                obj[j] -= cb * tab.t[r][j];
            }
        }
    }
    tab.t[m] = obj;
    if !tab.run(&|j| j < art0) {
        return SimplexOutcome::Unbounded;
    }
    let mut y = vec![0.0; total];
    for r in 0..m {
        y[tab.basis[r]] = tab.t[r][total];
    }
    let x: Vec<f64> = map
        .iter()
        .map(|(off, cols)| off + cols.iter().map(|&(c, s)| s * y[c]).sum::<f64>())
        .collect();
    let objective = x.iter().zip(&lp.c).map(|(a, b)| a * b).sum::<f64>();
    SimplexOutcome::Optimal { x, objective }
}

// ---------------------------------------------------------------------------
// Availability and event oracles
// ---------------------------------------------------------------------------

/// `z_i` is usable at step `k` iff it was sent by then: `i + τ(i) <= k`.
pub fn available(word: &[usize], k: usize, i: usize) -> bool {
    i <= k && i + word[i] <= k
}

/// Availability tensor `[k][i]` for `i <= k`.
pub fn availability(word: &[usize]) -> Vec<Vec<bool>> {
    (0..word.len())
        .map(|k| (0..=k).map(|i| available(word, k, i)).collect())
        .collect()
}

/// Distinct availability tensors in first-occurrence order, plus the word map.
pub fn dedup_sequences(words: &[Vec<usize>]) -> (Vec<Vec<Vec<bool>>>, Vec<usize>) {
    let mut seen: HashMap<Vec<Vec<bool>>, usize> = HashMap::new();
    let mut seqs = Vec::new();
    let mut map = Vec::new();
    for w in words {
        let a = availability(w);
        let idx = *seen.entry(a.clone()).or_insert_with(|| {
            seqs.push(a);
            seqs.len() - 1
        });
        map.push(idx);
    }
    (seqs, map)
}

/// Number of distinct non-empty prefixes plus the root.
pub fn distinct_prefixes(seqs: &[Vec<Vec<bool>>]) -> usize {
    let mut set: BTreeSet<Vec<Vec<bool>>> = BTreeSet::new();
    for s in seqs {
        for d in 1..=s.len() {
            set.insert(s[..d].to_vec());
        }
    }
    set.len() + 1
}

/// Every word with delays in `0..=tau_bar`.
pub fn all_words(t: usize, tau_bar: usize) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new()];
    for _ in 0..t {
        out = out
            .into_iter()
            .flat_map(|w| {
                (0..=tau_bar).map(move |d| {
                    let mut w = w.clone();
                    w.push(d);
                    w
                })
            })
            .collect();
    }
    out
}

pub fn word_digits(w: &DelayWord) -> Vec<usize> {
    w.delays().to_vec()
}

// ---------------------------------------------------------------------------
// Direct recursion of the estimator error
// ---------------------------------------------------------------------------

/// Gains of one sequence: `m[k][i]` for `i <= k`, `l[k]`, `nu[k]`.
#[derive(Debug, Clone)]
pub struct OracleGains {
    pub m: Vec<Vec<DMatrix<f64>>>,
    pub l: Vec<DMatrix<f64>>,
    pub nu: Vec<DVector<f64>>,
}

impl OracleGains {
    pub fn zeros(t: usize, n: usize, p: usize) -> Self {
        Self {
            m: (0..t).map(|k| vec![DMatrix::zeros(n, p); k + 1]).collect(),
            l: vec![DMatrix::zeros(n, p); t],
            nu: vec![DVector::zeros(n); t],
        }
    }

    /// Stacked `Tn x Tp` block lower-triangular `M`.
    pub fn stacked_m(&self, n: usize, p: usize) -> DMatrix<f64> {
        let t = self.m.len();
        let mut out = DMatrix::zeros(t * n, t * p);
        for (k, row) in self.m.iter().enumerate() {
            for (i, b) in row.iter().enumerate() {
                out.view_mut((k * n, i * p), (n, p)).copy_from(b);
            }
        }
        out
    }

    pub fn stacked_nu(&self) -> DVector<f64> {
        let parts: Vec<f64> = self.nu.iter().flat_map(|v| v.iter().copied()).collect();
        DVector::from_vec(parts)
    }
}

/// Noise realization: `w[k]` (may be empty), `v[k]`, `x0_err`.
#[derive(Debug, Clone)]
pub struct OracleNoise {
    pub w: Vec<DVector<f64>>,
    pub v: Vec<DVector<f64>>,
    pub x0_err: DVector<f64>,
}

/// Plant, channel and estimator stepped literally; returns `x̃_0 .. x̃_T`.
///
/// `x_{k+1} = A x + W w`, `z_k = C x + V v`, `x̂_{k+1} = A x̂ - u_e`,
/// `s_{k+1} = A s + u_e + L z̃_k` (on time only), `z̃_i = z_i - C_i(x̂_i + s_i)`.
pub fn rollout_errors(
    model: &SystemModel,
    word: &[usize],
    gains: &OracleGains,
    s0: &DVector<f64>,
    noise: &OracleNoise,
) -> Vec<DVector<f64>> {
    let t = model.horizon();
    let mut x = DVector::zeros(model.n());
    let mut xhat = -&noise.x0_err;
    let mut s = s0.clone();
    let mut z = Vec::with_capacity(t);
    let mut snapshot = Vec::with_capacity(t);
    let mut errs = vec![&x - &xhat];
    for k in 0..t {
        z.push(model.c(k) * &x + model.v(k) * &noise.v[k]);
        snapshot.push(&xhat + &s);
        let innov = |i: usize| &z[i] - model.c(i) * &snapshot[i];
        let mut ue = gains.nu[k].clone();
        for i in 0..=k {
            if available(word, k, i) {
                ue += &gains.m[k][i] * innov(i);
            }
        }
        let mut s_next = model.a(k) * &s + &ue;
        if available(word, k, k) {
            s_next += &gains.l[k] * innov(k);
        }
        let mut x_next = model.a(k) * &x;
        if let Some(w) = model.w(k) {
            x_next += w * &noise.w[k];
        }
        xhat = model.a(k) * &xhat - &ue;
        s = s_next;
        x = x_next;
        errs.push(&x - &xhat);
    }
    errs
}

/// Uncertainty box vertices in the order `w`, `v`, `x̃_0`.
pub fn box_dims(model: &SystemModel, mu1: f64) -> Vec<f64> {
    let t = model.horizon();
    let mut r = Vec::new();
    if model.has_process_noise() {
        r.extend(std::iter::repeat_n(model.eta_w(), t * model.nw()));
    }
    r.extend(std::iter::repeat_n(model.eta_v(), t * model.p()));
    r.extend(std::iter::repeat_n(mu1, model.n()));
    r
}

pub fn noise_from_flat(model: &SystemModel, xi: &[f64]) -> OracleNoise {
    let t = model.horizon();
    let mut pos = 0;
    let mut take = |len: usize| {
        let v = DVector::from_column_slice(&xi[pos..pos + len]);
        pos += len;
        v
    };
    let w = if model.has_process_noise() {
        (0..t).map(|_| take(model.nw())).collect()
    } else {
        Vec::new()
    };
    let v = (0..t).map(|_| take(model.p())).collect();
    let x0_err = take(model.n());
    OracleNoise { w, v, x0_err }
}

/// Every corner of the box with half-widths `radii`.
pub fn vertices(radii: &[f64]) -> Vec<Vec<f64>> {
    let d = radii.len();
    (0..1u64 << d)
        .map(|mask| {
            (0..d)
                .map(|j| if mask >> j & 1 == 1 { radii[j] } else { -radii[j] })
                .collect()
        })
        .collect()
}

pub fn random_noise(model: &SystemModel, mu1: f64, rng: &mut ChaCha8Rng) -> OracleNoise {
    let radii = box_dims(model, mu1);
    let xi: Vec<f64> = radii
        .iter()
        .map(|&r| if r > 0.0 { rng.random_range(-r..=r) } else { 0.0 })
        .collect();
    noise_from_flat(model, &xi)
}

pub fn random_matrix(rows: usize, cols: usize, scale: f64, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-scale..=scale))
}

pub fn random_vector(len: usize, scale: f64, rng: &mut ChaCha8Rng) -> DVector<f64> {
    DVector::from_fn(len, |_, _| rng.random_range(-scale..=scale))
}

/// Random time-varying model.
pub fn random_model(
    n: usize,
    p: usize,
    t: usize,
    nw: Option<usize>,
    eta_w: f64,
    eta_v: f64,
    rng: &mut ChaCha8Rng,
) -> SystemModel {
    let a = (0..t).map(|_| random_matrix(n, n, 0.7, rng)).collect();
    let b = (0..t).map(|_| random_matrix(n, 1, 1.0, rng)).collect();
    let c = (0..t).map(|_| random_matrix(p, n, 1.0, rng)).collect();
    let v = (0..t).map(|_| random_matrix(p, p, 1.0, rng)).collect();
    let w = nw.map(|nw| (0..t).map(|_| random_matrix(n, nw, 1.0, rng)).collect());
    SystemModel::new(a, b, c, w, v, if nw.is_some() { eta_w } else { 0.0 }, eta_v).unwrap()
}

/// Random gains obeying the availability pattern of `word`.
pub fn random_gains(word: &[usize], n: usize, p: usize, scale: f64, rng: &mut ChaCha8Rng) -> OracleGains {
    let t = word.len();
    let mut g = OracleGains::zeros(t, n, p);
    for k in 0..t {
        for i in 0..=k {
            if available(word, k, i) {
                g.m[k][i] = random_matrix(n, p, scale, rng);
            }
        }
        if available(word, k, k) {
            g.l[k] = random_matrix(n, p, scale, rng);
        }
        g.nu[k] = random_vector(n, scale, rng);
    }
    g
}

// ---------------------------------------------------------------------------
// Vertex-enumeration program
// ---------------------------------------------------------------------------

/// Gain variable of one sequence: `M_(k,i)[r,q]` or `ν_k[r]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GainSlot {
    M { k: usize, i: usize, r: usize, q: usize },
    Nu { k: usize, r: usize },
}

impl GainSlot {
    pub fn step(&self) -> usize {
        match *self {
            GainSlot::M { k, .. } | GainSlot::Nu { k, .. } => k,
        }
    }
}

pub fn gain_slots(word: &[usize], n: usize, p: usize) -> Vec<GainSlot> {
    let mut out = Vec::new();
    for k in 0..word.len() {
        for i in 0..=k {
            if available(word, k, i) {
                for r in 0..n {
                    for q in 0..p {
                        out.push(GainSlot::M { k, i, r, q });
                    }
                }
            }
        }
        for r in 0..n {
            out.push(GainSlot::Nu { k, r });
        }
    }
    out
}

pub fn set_slot(g: &mut OracleGains, slot: GainSlot, value: f64) {
    match slot {
        GainSlot::M { k, i, r, q } => g.m[k][i][(r, q)] = value,
        GainSlot::Nu { k, r } => g.nu[k][r] = value,
    }
}

/// Fixed Luenberger blocks applied only where the measurement is on time.
pub fn fixed_l(word: &[usize], l_blocks: &[DMatrix<f64>], n: usize, p: usize) -> Vec<DMatrix<f64>> {
    (0..word.len())
        .map(|k| {
            if available(word, k, k) {
                l_blocks[k].clone()
            } else {
                DMatrix::zeros(n, p)
            }
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct VertexProgram {
    pub lp: DenseLp,
    /// Availability tensors of the distinct sequences.
    pub sequences: Vec<Vec<Vec<bool>>>,
    /// Representative word of each sequence.
    pub words: Vec<Vec<usize>>,
    pub slots: Vec<Vec<GainSlot>>,
    /// Variable index of each slot, per sequence.
    pub slot_vars: Vec<Vec<usize>>,
    /// `μ₂[α][k]` variable indices, `k = 0..=T`.
    pub mu2_vars: Vec<Vec<usize>>,
    /// Constant added to the LP objective (`w₁ μ₁`).
    pub offset: f64,
}

/// Per-sequence gains linked by explicit prefix equalities, with one bound
/// row per uncertainty vertex, step and error component.
#[allow(clippy::too_many_arguments)]
pub fn vertex_program(
    model: &SystemModel,
    words: &[Vec<usize>],
    mu1: f64,
    l_blocks: &[DMatrix<f64>],
    s0: &DVector<f64>,
    w_mu1: f64,
    w_mu2: &[f64],
) -> VertexProgram {
    let (n, p, t) = (model.n(), model.p(), model.horizon());
    let (sequences, map) = dedup_sequences(words);
    let reps: Vec<Vec<usize>> = (0..sequences.len())
        .map(|a| words[map.iter().position(|&m| m == a).unwrap()].clone())
        .collect();
    let slots: Vec<Vec<GainSlot>> = reps.iter().map(|w| gain_slots(w, n, p)).collect();
    let mut nvars = 0;
    let slot_vars: Vec<Vec<usize>> = slots
        .iter()
        .map(|s| {
            let v = (nvars..nvars + s.len()).collect();
            nvars += s.len();
            v
        })
        .collect();
    let mu2_vars: Vec<Vec<usize>> = (0..sequences.len())
        .map(|_| {
            let v = (nvars..nvars + t + 1).collect();
            nvars += t + 1;
            v
        })
        .collect();
    let mut lp = DenseLp::new(nvars);
    for vars in &mu2_vars {
        for (k, &v) in vars.iter().enumerate() {
            lp.lo[v] = mu1;
            lp.c[v] = w_mu2[k];
        }
    }
    // sequences with equal availability through step k share step-k gains
    for b in 0..sequences.len() {
        for k in 0..t {
            let Some(a) = (0..b).find(|&a| sequences[a][..=k] == sequences[b][..=k]) else {
                continue;
            };
            for (jb, sb) in slots[b].iter().enumerate() {
                if sb.step() != k {
                    continue;
                }
                let ja = slots[a].iter().position(|sa| sa == sb).expect("same pattern");
                lp.equal(&[(slot_vars[a][ja], 1.0), (slot_vars[b][jb], -1.0)], 0.0);
            }
        }
    }
    let radii = box_dims(model, mu1);
    for (a, word) in reps.iter().enumerate() {
        let l = fixed_l(word, l_blocks, n, p);
        let mut zero = OracleGains::zeros(t, n, p);
        zero.l = l;
        for xi in vertices(&radii) {
            let noise = noise_from_flat(model, &xi);
            let base = rollout_errors(model, word, &zero, s0, &noise);
            let coefs: Vec<Vec<DVector<f64>>> = slots[a]
                .iter()
                .map(|&slot| {
                    let mut g = zero.clone();
                    set_slot(&mut g, slot, 1.0);
                    let e = rollout_errors(model, word, &g, s0, &noise);
                    e.iter().zip(&base).map(|(x, b)| x - b).collect()
                })
                .collect();
            for k in 1..=t {
                for r in 0..n {
                    let lin: Vec<(usize, f64)> = slot_vars[a]
                        .iter()
                        .zip(&coefs)
                        .map(|(&v, c)| (v, c[k][r]))
                        .filter(|&(_, c)| c != 0.0)
                        .collect();
                    for sign in [1.0, -1.0] {
                        let mut terms: Vec<(usize, f64)> =
                            lin.iter().map(|&(v, c)| (v, sign * c)).collect();
                        if k == t {
                            lp.le(&terms, mu1 - sign * base[k][r]);
                        }
                        terms.push((mu2_vars[a][k], -1.0));
                        lp.le(&terms, -sign * base[k][r]);
                    }
                }
            }
        }
    }
    VertexProgram {
        lp,
        sequences,
        words: reps,
        slots,
        slot_vars,
        mu2_vars,
        offset: w_mu1 * mu1,
    }
}

/// Same program handed to the library's sparse backend.
pub fn to_linear_program(lp: &DenseLp) -> eqrec::lp::LinearProgram {
    let mut out = eqrec::lp::LinearProgram::new();
    for j in 0..lp.nvars() {
        out.add_var(format!("x{j}"), lp.lo[j], lp.hi[j], lp.c[j]);
    }
    let sparse = |row: &[f64]| -> Vec<(usize, f64)> {
        row.iter()
            .enumerate()
            .filter(|(_, &a)| a != 0.0)
            .map(|(j, &a)| (j, a))
            .collect()
    };
    for (row, rhs) in &lp.ub {
        out.add_le(sparse(row), *rhs);
    }
    for (row, rhs) in &lp.eq {
        out.add_eq(sparse(row), *rhs);
    }
    out
}

/// Max over vertices of `‖x̃_k‖_∞` for fixed gains, `k = 0..=T`.
pub fn vertex_profile(
    model: &SystemModel,
    word: &[usize],
    gains: &OracleGains,
    s0: &DVector<f64>,
    mu1: f64,
) -> Vec<f64> {
    let mut worst = vec![0.0f64; model.horizon() + 1];
    for xi in vertices(&box_dims(model, mu1)) {
        let e = rollout_errors(model, word, gains, s0, &noise_from_flat(model, &xi));
        for (w, x) in worst.iter_mut().zip(&e) {
            *w = w.max(x.amax());
        }
    }
    worst
}

/// Oracle view of the gains a certificate assigns to `word`.
pub fn gains_of_word(
    cert: &eqrec::synthesis::Certificate,
    word: &[usize],
) -> OracleGains {
    let tree = cert.tree().unwrap();
    let seq = eqrec::language::word_to_event_sequence(&DelayWord::new(word.to_vec()));
    let alpha = cert
        .sequences
        .iter()
        .position(|s| s == &seq)
        .expect("word belongs to the certified language");
    let (n, p, t) = (cert.n, cert.p, cert.horizon);
    let mut g = OracleGains::zeros(t, n, p);
    for (k, id) in tree.path(alpha).into_iter().enumerate() {
        let node = &cert.gains.nodes[id];
        for (i, b) in node.m_blocks.iter().enumerate() {
            g.m[k][i] = b.clone();
        }
        g.l[k] = node.l_block.clone();
        g.nu[k] = node.nu.clone();
    }
    g
}

pub fn scalar_model(a: f64, c: f64, t: usize, eta_w: Option<f64>, eta_v: f64) -> SystemModel {
    let s = |x: f64| DMatrix::from_element(1, 1, x);
    SystemModel::new(
        vec![s(a); t],
        vec![s(1.0); t],
        vec![s(c); t],
        eta_w.map(|_| vec![s(1.0); t]),
        vec![s(1.0); t],
        eta_w.unwrap_or(0.0),
        eta_v,
    )
    .unwrap()
}

// ---------------------------------------------------------------------------
// Stacked prediction against the rollout
// ---------------------------------------------------------------------------

/// One random instance: random plant, word, pattern-respecting gains, `L`,
/// `s0`, and noise. Returns the ∞-norm gap between the stacked prediction
/// and the direct rollout.
pub fn stacked_rollout_gap(seed: u64, n: usize, p: usize, t: usize, with_w: bool) -> f64 {
    use eqrec::model::stack_system;
    use eqrec::synthesis::build_response;
    let mut r = rng(seed);
    let nw = with_w.then(|| r.random_range(1..=n));
    let model = random_model(n, p, t, nw, 0.2, 0.1, &mut r);
    let tau_bar = r.random_range(0..=t);
    let word: Vec<usize> = (0..t).map(|_| r.random_range(0..=tau_bar)).collect();
    let mut gains = random_gains(&word, n, p, 0.8, &mut r);
    for k in 0..t {
        if available(&word, k, k) {
            gains.l[k] = random_matrix(n, p, 0.5, &mut r);
        }
    }
    let s0 = random_vector(n, 0.3, &mut r);
    let mu1 = r.random_range(0.05..1.0);
    let noise = random_noise(&model, mu1, &mut r);

    let direct = rollout_errors(&model, &word, &gains, &s0, &noise);
    let stacked = stack_system(&model);
    let resp = build_response(&model, &stacked, &gains.stacked_m(n, p), &gains.l).unwrap();
    let w = with_w.then(|| DVector::from_vec(noise.w.iter().flat_map(|x| x.iter().copied()).collect()));
    let v = DVector::from_vec(noise.v.iter().flat_map(|x| x.iter().copied()).collect());
    let predicted = resp.predict(&stacked, w.as_ref(), &v, &noise.x0_err, &s0, &gains.stacked_nu());
    let direct = DVector::from_vec(direct.iter().flat_map(|x| x.iter().copied()).collect());
    (predicted - direct).amax()
}

// ---------------------------------------------------------------------------
// Small robust-design instances
// ---------------------------------------------------------------------------

pub struct SmallInstance {
    pub name: &'static str,
    pub model: SystemModel,
    pub words: Vec<Vec<usize>>,
    pub mu1: f64,
    pub design: eqrec::synthesis::FixedDesign,
}

impl SmallInstance {
    pub fn language(&self) -> eqrec::language::DelayLanguage {
        let t = self.model.horizon();
        let tau_bar = self.words.iter().flatten().copied().max().unwrap_or(0).min(t);
        eqrec::language::DelayLanguage::new(
            t,
            tau_bar,
            self.words.iter().map(|w| DelayWord::new(w.clone())).collect(),
        )
        .unwrap()
    }

    pub fn uncertainty_dim(&self) -> usize {
        box_dims(&self.model, self.mu1).len()
    }

    pub fn l_blocks(&self) -> Vec<DMatrix<f64>> {
        self.design.l_blocks(&self.model).unwrap()
    }

    pub fn s0(&self) -> DVector<f64> {
        self.design.s0(&self.model).unwrap()
    }
}

/// Instances with total uncertainty dimension at most 12.
pub fn small_instances() -> Vec<SmallInstance> {
    use eqrec::synthesis::FixedDesign;
    let mut r = rng(7);
    let mut out = vec![
        SmallInstance {
            name: "scalar T=2 {00,10}",
            model: scalar_model(0.9, 1.0, 2, Some(0.1), 0.1),
            words: vec![vec![0, 0], vec![1, 0]],
            mu1: 0.5,
            design: FixedDesign::default(),
        },
        SmallInstance {
            name: "scalar T=2 max-delay 2",
            model: scalar_model(0.5, 1.0, 2, Some(0.05), 0.1),
            words: all_words(2, 2),
            mu1: 0.25,
            design: FixedDesign::default(),
        },
        SmallInstance {
            name: "scalar T=4 fixed L and s0",
            model: scalar_model(0.8, 0.7, 4, Some(0.1), 0.05),
            words: vec![vec![0, 0, 0, 0], vec![1, 0, 2, 0], vec![0, 1, 1, 0], vec![2, 2, 2, 2]],
            mu1: 0.4,
            design: FixedDesign {
                l_blocks: Some(vec![DMatrix::from_element(1, 1, 0.3); 4]),
                s0: Some(DVector::from_element(1, 0.05)),
            },
        },
    ];
    let m2 = random_model(2, 1, 3, Some(1), 0.1, 0.1, &mut r);
    out.push(SmallInstance {
        name: "n=2 p=1 T=3 max-delay 1",
        model: m2,
        words: all_words(3, 1),
        mu1: 0.6,
        design: FixedDesign {
            l_blocks: Some((0..3).map(|_| random_matrix(2, 1, 0.3, &mut r)).collect()),
            s0: Some(random_vector(2, 0.1, &mut r)),
        },
    });
    let m3 = random_model(2, 2, 2, Some(2), 0.05, 0.1, &mut r);
    out.push(SmallInstance {
        name: "n=2 p=2 T=2 max-delay 2",
        model: m3,
        words: all_words(2, 2),
        mu1: 0.4,
        design: FixedDesign::default(),
    });
    let m4 = random_model(2, 1, 4, Some(1), 0.05, 0.05, &mut r);
    out.push(SmallInstance {
        name: "n=2 p=1 T=4 word list",
        model: m4,
        words: vec![vec![0, 0, 0, 0], vec![0, 1, 0, 0], vec![1, 1, 1, 1], vec![0, 0, 3, 0], vec![2, 0, 0, 1]],
        mu1: 2.0,
        design: FixedDesign::default(),
    });
    out
}

#[derive(Debug, Clone, Copy)]
pub struct ExactnessResult {
    pub library: Option<f64>,
    pub vertex_sparse: Option<f64>,
    pub vertex_simplex: Option<f64>,
}

impl ExactnessResult {
    /// Largest relative gap between the library optimum and either vertex optimum.
    pub fn rel_gap(&self) -> f64 {
        let Some(lib) = self.library else {
            return if self.vertex_sparse.is_none() { 0.0 } else { f64::INFINITY };
        };
        [self.vertex_sparse, self.vertex_simplex]
            .into_iter()
            .map(|v| match v {
                Some(v) => (lib - v).abs() / lib.abs().max(1.0),
                None => f64::INFINITY,
            })
            .fold(0.0, f64::max)
    }
}

/// Robust LP optimum vs the vertex-enumeration optimum at the instance's `μ₁`
/// under uniform weights. The simplex route runs only when `simplex_ok`.
pub fn exactness(inst: &SmallInstance, simplex_ok: bool) -> ExactnessResult {
    use eqrec::language::reduce_language;
    use eqrec::lp::{solve_lp, LpStatus};
    use eqrec::synthesis::{assemble_robust_lp, CostWeights};
    let t = inst.model.horizon();
    let weights = CostWeights::uniform(t);
    let ev = reduce_language(&inst.language());
    let prog = assemble_robust_lp(&inst.model, &ev, inst.mu1, &inst.design, &weights).unwrap();
    let sol = solve_lp(&prog.lp).unwrap();
    let library = (sol.status == LpStatus::Optimal).then_some(sol.objective);

    let vp = vertex_program(&inst.model, &inst.words, inst.mu1, &inst.l_blocks(), &inst.s0(), 1.0, &weights.mu2);
    assert_eq!(vp.sequences.len(), ev.len(), "{}: sequence count", inst.name);
    let vsol = solve_lp(&to_linear_program(&vp.lp)).unwrap();
    let vertex_sparse = (vsol.status == LpStatus::Optimal).then_some(vsol.objective + vp.offset);
    let vertex_simplex = if simplex_ok {
        match simplex(&vp.lp) {
            SimplexOutcome::Optimal { objective, .. } => Some(objective + vp.offset),
            _ => None,
        }
    } else {
        vertex_sparse
    };
    ExactnessResult {
        library,
        vertex_sparse,
        vertex_simplex,
    }
}

/// Random pattern-respecting gains written into a certificate, then the
/// closed-form profile is compared to vertex maxima. Returns the largest gap.
pub fn closed_form_gap(inst: &SmallInstance, seed: u64) -> f64 {
    use eqrec::language::{reduce_language, word_to_event_sequence};
    use eqrec::synthesis::{worst_case_profile, GainSet};
    let lang = inst.language();
    let mut cert = blank_certificate(&inst.model, &lang, inst.mu1);
    let (n, p) = (inst.model.n(), inst.model.p());
    let tree = cert.tree().unwrap();
    let ev = reduce_language(&lang);
    assert_eq!(cert.gains, GainSet::zeros(&tree, n, p));
    let mut r = rng(seed);
    let l_blocks: Vec<DMatrix<f64>> = (0..inst.model.horizon()).map(|_| random_matrix(n, p, 0.4, &mut r)).collect();
    cert.s0 = random_vector(n, 0.2, &mut r);
    let mut filled = vec![false; tree.len()];
    for w in &inst.words {
        let alpha = ev.sequence_of_word(&DelayWord::new(w.clone())).unwrap();
        assert_eq!(ev.sequences()[alpha], word_to_event_sequence(&DelayWord::new(w.clone())));
        for (k, id) in tree.path(alpha).into_iter().enumerate() {
            if filled[id] {
                continue;
            }
            filled[id] = true;
            let node = &mut cert.gains.nodes[id];
            for i in 0..=k {
                node.m_blocks[i] = if available(w, k, i) {
                    random_matrix(n, p, 0.6, &mut r)
                } else {
                    DMatrix::zeros(n, p)
                };
            }
            node.l_block = if available(w, k, k) { l_blocks[k].clone() } else { DMatrix::zeros(n, p) };
            node.nu = random_vector(n, 0.2, &mut r);
        }
    }
    let mut gap = 0.0f64;
    for w in &inst.words {
        let alpha = ev.sequence_of_word(&DelayWord::new(w.clone())).unwrap();
        let closed = worst_case_profile(&inst.model, &cert, alpha).unwrap();
        let gains = gains_of_word(&cert, w);
        let vert = vertex_profile(&inst.model, w, &gains, &cert.s0, cert.mu1);
        assert_eq!(closed.len(), vert.len());
        for (a, b) in closed.iter().zip(&vert) {
            gap = gap.max((a - b).abs());
        }
    }
    gap
}

/// Certificate shell with zero gains and `μ₂ = μ₁`; bounds are not implied.
pub fn blank_certificate(
    model: &SystemModel,
    lang: &eqrec::language::DelayLanguage,
    mu1: f64,
) -> eqrec::synthesis::Certificate {
    use eqrec::language::{reduce_language, PrefixTree};
    use eqrec::synthesis::*;
    let ev = reduce_language(lang);
    let tree = PrefixTree::build(&ev);
    let t = model.horizon();
    Certificate {
        format: CERTIFICATE_FORMAT.into(),
        horizon: t,
        n: model.n(),
        p: model.p(),
        mu1,
        mu2: vec![vec![mu1; t + 1]; ev.len()],
        s0: DVector::zeros(model.n()),
        sequences: ev.sequences().to_vec(),
        gains: GainSet::zeros(&tree, model.n(), model.p()),
        objective: 0.0,
        weights: CostWeights::uniform(t),
        language_fingerprint: language_fingerprint(lang),
        model_fingerprint: model_fingerprint(model),
        solver: SolverMetadata {
            backend: "none".into(),
            lp_status: "none".into(),
            lp_objective: 0.0,
            primal_residual: 0.0,
            relative_gap: 0.0,
            iterations: 0,
            variables: 0,
            equalities: 0,
            inequalities: 0,
            mu1_search: Vec::new(),
        },
    }
}
