//! The robust design program at a fixed recovery level `μ₁`.
//!
//! With `L` and `s_0` fixed, the innovation `z̃_i` is an affine function of the
//! uncertainty `ξ = (w, v, x̃_0)` that does not depend on `M` or `ν`. The error
//! then obeys
//!
//! ```text
//! x̃_{k+1} = A_k x̃_k + W_k w_k + ν_k + Σ_i M_(k,i) z̃_i
//! ```
//!
//! so the coefficient matrix `R_k` of `x̃_k` with respect to `ξ` and its
//! constant part `c_k` are linear in the gains. Both are carried as LP
//! variables, one copy per prefix-tree node of depth `k` (every sequence
//! through that node has the same `x̃_k`). For a box-bounded `ξ` the worst
//! case of row `r` is `Σ_j b_j |R_k[r, j]| + |c_k[r]|`, which is encoded with
//! epigraph variables `t >= |R|` and a per-node level `ω_N`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::language::{build_prefix_tree, EventLanguage, PrefixTree, ROOT};
use crate::lp::{LinearProgram, Var};
use crate::model::SystemModel;

use super::gains::GainSet;
use super::layout::{gain_layout, Dims, GainLayout};
use super::CostWeights;

/// Fixed parts of the design that turn the program into an LP.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FixedDesign {
    /// Luenberger blocks `L_0 .. L_{T-1}`; zero when `None`.
    pub l_blocks: Option<Vec<DMatrix<f64>>>,
    /// Initial auxiliary state; zero when `None`.
    pub s0: Option<DVector<f64>>,
}

impl FixedDesign {
    pub fn l_blocks(&self, model: &SystemModel) -> Result<Vec<DMatrix<f64>>> {
        match &self.l_blocks {
            None => Ok(vec![DMatrix::zeros(model.n(), model.p()); model.horizon()]),
            Some(ls) => {
                if ls.len() != model.horizon()
                    || ls.iter().any(|l| l.shape() != (model.n(), model.p()))
                {
                    return Err(Error::ShapeMismatch(format!(
                        "fixed L needs {} blocks of {}x{}",
                        model.horizon(),
                        model.n(),
                        model.p()
                    )));
                }
                Ok(ls.clone())
            }
        }
    }

    pub fn s0(&self, model: &SystemModel) -> Result<DVector<f64>> {
        match &self.s0 {
            None => Ok(DVector::zeros(model.n())),
            Some(s) if s.len() == model.n() => Ok(s.clone()),
            Some(s) => Err(Error::ShapeMismatch(format!(
                "s0 has length {}, expected {}",
                s.len(),
                model.n()
            ))),
        }
    }
}

/// Uncertainty coordinates: `w` (T·nw), then `v` (T·p), then `x̃_0` (n).
#[derive(Debug, Clone)]
pub(crate) struct Uncertainty {
    pub dim: usize,
    pub w_offset: usize,
    pub v_offset: usize,
    pub x0_offset: usize,
    /// Columns with a nonzero radius, with that radius.
    pub active: Vec<(usize, f64)>,
}

impl Uncertainty {
    pub fn new(model: &SystemModel, mu1: f64) -> Self {
        let t = model.horizon();
        let nw = model.nw();
        let w_offset = 0;
        let v_offset = t * nw;
        let x0_offset = v_offset + t * model.p();
        let dim = x0_offset + model.n();
        let mut active = Vec::new();
        if model.eta_w() > 0.0 {
            active.extend((w_offset..v_offset).map(|j| (j, model.eta_w())));
        }
        if model.eta_v() > 0.0 {
            active.extend((v_offset..x0_offset).map(|j| (j, model.eta_v())));
        }
        if mu1 > 0.0 {
            active.extend((x0_offset..dim).map(|j| (j, mu1)));
        }
        Self {
            dim,
            w_offset,
            v_offset,
            x0_offset,
            active,
        }
    }
}

/// Affine maps of `e_k = x̃_k - s_k` and `z̃_k` along the tree, independent of `M` and `ν`.
#[derive(Debug, Clone)]
pub(crate) struct InnovationMaps {
    /// `z̃_{depth-1}` coefficient (`p x dim`) and constant, stored on the node of that step.
    pub z_coef: Vec<DMatrix<f64>>,
    pub z_const: Vec<DVector<f64>>,
}

impl InnovationMaps {
    pub fn build(
        model: &SystemModel,
        tree: &PrefixTree,
        layout: &GainLayout,
        unc: &Uncertainty,
        l_blocks: &[DMatrix<f64>],
        s0: &DVector<f64>,
    ) -> Self {
        let (n, p) = (model.n(), model.p());
        let nodes = tree.len();
        let mut e_coef = vec![DMatrix::zeros(n, unc.dim); nodes];
        let mut e_const = vec![DVector::zeros(n); nodes];
        let mut z_coef = vec![DMatrix::zeros(p, unc.dim); nodes];
        let mut z_const = vec![DVector::zeros(p); nodes];
        e_coef[ROOT]
            .view_mut((0, unc.x0_offset), (n, n))
            .fill_with_identity();
        e_const[ROOT] = -s0;
        // breadth-first numbering: parents come first
        for id in 1..nodes {
            let parent = tree.node(id).parent.expect("non-root node");
            let k = layout.nodes[id].step.expect("non-root node");
            let c = model.c(k);
            let mut zc = c * &e_coef[parent];
            zc.view_mut((0, unc.v_offset + k * p), (p, p))
                .copy_from(model.v(k));
            z_coef[id] = zc;
            z_const[id] = c * &e_const[parent];

            let l = if layout.nodes[id].on_time {
                l_blocks[k].clone()
            } else {
                DMatrix::zeros(n, p)
            };
            let phi = model.a(k) - &l * c;
            let mut ec = &phi * &e_coef[parent];
            if let Some(w) = model.w(k) {
                let nw = w.ncols();
                let mut cols = ec.view_mut((0, unc.w_offset + k * nw), (n, nw));
                cols += w;
            }
            let lv = &l * model.v(k);
            let mut cols = ec.view_mut((0, unc.v_offset + k * p), (n, p));
            cols -= &lv;
            e_coef[id] = ec;
            e_const[id] = &phi * &e_const[parent];
        }
        Self { z_coef, z_const }
    }
}

/// An assembled program together with the bookkeeping to read it back.
#[derive(Debug, Clone)]
pub struct RobustProgram {
    pub lp: LinearProgram,
    pub layout: GainLayout,
    pub tree: PrefixTree,
    pub mu1: f64,
    /// `μ₂,k^α` variables, `[α][k]` for `k = 0..=T`.
    pub mu2_vars: Vec<Vec<Var>>,
    /// Per-node worst-case level variable `ω_N` (root has none).
    pub level_vars: Vec<Option<Var>>,
}

pub fn assemble_robust_lp(
    model: &SystemModel,
    ev: &EventLanguage,
    mu1: f64,
    design: &FixedDesign,
    weights: &CostWeights,
) -> Result<RobustProgram> {
    let (n, p, t) = (model.n(), model.p(), model.horizon());
    if ev.horizon() != t {
        return Err(Error::ShapeMismatch(format!(
            "language horizon {} differs from model horizon {t}",
            ev.horizon()
        )));
    }
    if !(mu1 >= 0.0 && mu1.is_finite()) {
        return Err(Error::InvalidModel(format!("recovery level must be >= 0, got {mu1}")));
    }
    weights.check(t)?;
    let l_blocks = design.l_blocks(model)?;
    let s0 = design.s0(model)?;
    let tree = build_prefix_tree(ev);
    let layout = gain_layout(&tree, ev, Dims { n, p })?;
    let unc = Uncertainty::new(model, mu1);
    let maps = InnovationMaps::build(model, &tree, &layout, &unc, &l_blocks, &s0);

    let mut lp = LinearProgram::new();
    for id in 0..tree.len() {
        let node = &layout.nodes[id];
        for (i, block) in node.m_blocks.iter().enumerate() {
            if block.is_some() {
                for r in 0..n {
                    for q in 0..p {
                        lp.add_free(format!("M{id}_{i}[{r},{q}]"));
                    }
                }
            }
        }
        if node.nu.is_some() {
            for r in 0..n {
                lp.add_free(format!("nu{id}[{r}]"));
            }
        }
    }
    debug_assert_eq!(lp.num_vars(), layout.len());

    let mu2_vars: Vec<Vec<Var>> = (0..ev.len())
        .map(|a| {
            (0..=t)
                .map(|k| lp.add_var(format!("mu2[{a}][{k}]"), mu1, f64::INFINITY, weights.mu2[k]))
                .collect()
        })
        .collect();
    lp.set_offset(weights.mu1 * mu1);

    // Per node: variables for the active columns of R (row-major over active) and c.
    let na = unc.active.len();
    let mut r_vars: Vec<Vec<Var>> = vec![Vec::new(); tree.len()];
    let mut c_vars: Vec<Vec<Var>> = vec![Vec::new(); tree.len()];
    let mut level_vars = vec![None; tree.len()];
    let root_r = |r: usize, col: usize| -> f64 {
        if col >= unc.x0_offset && col - unc.x0_offset == r {
            1.0
        } else {
            0.0
        }
    };

    for id in 1..tree.len() {
        let node = tree.node(id);
        let parent = node.parent.expect("non-root node");
        let k = layout.nodes[id].step.expect("non-root node");
        let a = model.a(k);
        // ancestors at depth 1..=k+1 (this node last), each holding z̃ of its step
        let mut chain = Vec::with_capacity(k + 1);
        let mut cur = id;
        while cur != ROOT {
            chain.push(cur);
            cur = tree.node(cur).parent.expect("non-root node");
        }
        chain.reverse();

        let rv: Vec<Var> = (0..n * na)
            .map(|idx| lp.add_free(format!("R{id}[{},{}]", idx / na, unc.active[idx % na].0)))
            .collect();
        let cv: Vec<Var> = (0..n).map(|r| lp.add_free(format!("c{id}[{r}]"))).collect();

        for r in 0..n {
            for (ai, &(col, _)) in unc.active.iter().enumerate() {
                let mut terms = vec![(rv[r * na + ai], 1.0)];
                let mut rhs = 0.0;
                for j in 0..n {
                    let coef = a[(r, j)];
                    if coef == 0.0 {
                        continue;
                    }
                    if parent == ROOT {
                        rhs += coef * root_r(j, col);
                    } else {
                        terms.push((r_vars[parent][j * na + ai], -coef));
                    }
                }
                if let Some(w) = model.w(k) {
                    let nw = w.ncols();
                    let start = unc.w_offset + k * nw;
                    if (start..start + nw).contains(&col) {
                        rhs += w[(r, col - start)];
                    }
                }
                for (i, &anc) in chain.iter().enumerate() {
                    for q in 0..p {
                        let z = maps.z_coef[anc][(q, col)];
                        if z != 0.0 {
                            if let Some(var) = layout.m_var(id, i, r, q) {
                                terms.push((var, -z));
                            }
                        }
                    }
                }
                lp.add_eq(terms, rhs);
            }
            let mut terms = vec![(cv[r], 1.0)];
            if parent != ROOT {
                for j in 0..n {
                    if a[(r, j)] != 0.0 {
                        terms.push((c_vars[parent][j], -a[(r, j)]));
                    }
                }
            }
            terms.push((layout.nu_var(id, r).expect("nu block"), -1.0));
            for (i, &anc) in chain.iter().enumerate() {
                for q in 0..p {
                    let z = maps.z_const[anc][q];
                    if z != 0.0 {
                        if let Some(var) = layout.m_var(id, i, r, q) {
                            terms.push((var, -z));
                        }
                    }
                }
            }
            lp.add_eq(terms, 0.0);
        }

        let level_ub = if node.depth == t { mu1 } else { f64::INFINITY };
        let level = lp.add_var(format!("omega{id}"), 0.0, level_ub, 0.0);
        for r in 0..n {
            let mut bound_terms = Vec::with_capacity(na + 2);
            for (ai, &(col, radius)) in unc.active.iter().enumerate() {
                let tv = lp.add_var(format!("t{id}[{r},{col}]"), 0.0, f64::INFINITY, 0.0);
                let rvar = rv[r * na + ai];
                lp.add_le(vec![(rvar, 1.0), (tv, -1.0)], 0.0);
                lp.add_le(vec![(rvar, -1.0), (tv, -1.0)], 0.0);
                bound_terms.push((tv, radius));
            }
            let mut upper = bound_terms.clone();
            upper.extend([(cv[r], 1.0), (level, -1.0)]);
            lp.add_le(upper, 0.0);
            let mut lower = bound_terms;
            lower.extend([(cv[r], -1.0), (level, -1.0)]);
            lp.add_le(lower, 0.0);
        }
        for &alpha in &node.sequences {
            lp.add_le(vec![(level, 1.0), (mu2_vars[alpha][node.depth], -1.0)], 0.0);
        }
        r_vars[id] = rv;
        c_vars[id] = cv;
        level_vars[id] = Some(level);
    }

    Ok(RobustProgram {
        lp,
        layout,
        tree,
        mu1,
        mu2_vars,
        level_vars,
    })
}

impl RobustProgram {
    /// Reads the gains out of a solution vector.
    pub fn gains(&self, values: &[f64], design: &FixedDesign, model: &SystemModel) -> Result<GainSet> {
        let (n, p) = (model.n(), model.p());
        let l_blocks = design.l_blocks(model)?;
        let mut gains = GainSet::zeros(&self.tree, n, p);
        for (id, node) in gains.nodes.iter_mut().enumerate() {
            let slots = &self.layout.nodes[id];
            let Some(k) = slots.step else { continue };
            for (i, block) in node.m_blocks.iter_mut().enumerate() {
                for r in 0..n {
                    for q in 0..p {
                        if let Some(v) = self.layout.m_var(id, i, r, q) {
                            block[(r, q)] = values[v];
                        }
                    }
                }
            }
            for r in 0..n {
                node.nu[r] = values[self.layout.nu_var(id, r).expect("nu block")];
            }
            if slots.on_time {
                node.l_block = l_blocks[k].clone();
            }
        }
        Ok(gains)
    }

    pub fn mu2(&self, values: &[f64]) -> Vec<Vec<f64>> {
        self.mu2_vars
            .iter()
            .map(|row| row.iter().map(|&v| values[v]).collect())
            .collect()
    }
}
