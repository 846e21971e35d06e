//! Sparse linear programs and the interior-point backend that solves them.
//!
//! Problems are stated as
//!
//! ```text
//! minimize    c'x + offset
//! subject to  A_in x <= b_in
//!             A_eq x  = b_eq
//!             lo <= x <= hi
//! ```
//!
//! and handed to Clarabel as a conic program with a zero cone (equalities)
//! and a nonnegative cone (inequalities and finite bounds).

use std::fmt::Write as _;
use std::io::Write;

use clarabel::algebra::CscMatrix;
use clarabel::solver::{
    DefaultSettingsBuilder, DefaultSolver, IPSolver, NonnegativeConeT, SolverStatus, SupportedConeT,
    ZeroConeT,
};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Var = usize;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SparseRows {
    rows: Vec<Vec<(Var, f64)>>,
    rhs: Vec<f64>,
}

impl SparseRows {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn row(&self, i: usize) -> (&[(Var, f64)], f64) {
        (&self.rows[i], self.rhs[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[(Var, f64)], f64)> {
        self.rows.iter().map(Vec::as_slice).zip(self.rhs.iter().copied())
    }

    pub fn nnz(&self) -> usize {
        self.rows.iter().map(Vec::len).sum()
    }

    fn push(&mut self, mut terms: Vec<(Var, f64)>, rhs: f64) {
        terms.retain(|&(_, a)| a != 0.0);
        terms.sort_by_key(|&(v, _)| v);
        // merge duplicate variables
        let mut merged: Vec<(Var, f64)> = Vec::with_capacity(terms.len());
        for (v, a) in terms {
            match merged.last_mut() {
                Some((last, acc)) if *last == v => *acc += a,
                _ => merged.push((v, a)),
            }
        }
        merged.retain(|&(_, a)| a != 0.0);
        self.rows.push(merged);
        self.rhs.push(rhs);
    }

    fn activity(&self, i: usize, x: &[f64]) -> f64 {
        self.rows[i].iter().map(|&(v, a)| a * x[v]).sum()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LinearProgram {
    names: Vec<String>,
    lower: Vec<f64>,
    upper: Vec<f64>,
    cost: Vec<f64>,
    offset: f64,
    ineq: SparseRows,
    eq: SparseRows,
}

impl LinearProgram {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_var(&mut self, name: impl Into<String>, lower: f64, upper: f64, cost: f64) -> Var {
        debug_assert!(lower <= upper && !lower.is_nan() && !upper.is_nan() && cost.is_finite());
        self.names.push(name.into());
        self.lower.push(lower);
        self.upper.push(upper);
        self.cost.push(cost);
        self.names.len() - 1
    }

    pub fn add_free(&mut self, name: impl Into<String>) -> Var {
        self.add_var(name, f64::NEG_INFINITY, f64::INFINITY, 0.0)
    }

    /// `Σ terms <= rhs`
    pub fn add_le(&mut self, terms: Vec<(Var, f64)>, rhs: f64) {
        debug_assert!(terms.iter().all(|&(v, a)| v < self.names.len() && a.is_finite()));
        self.ineq.push(terms, rhs);
    }

    /// `Σ terms >= rhs`
    pub fn add_ge(&mut self, terms: Vec<(Var, f64)>, rhs: f64) {
        self.add_le(terms.into_iter().map(|(v, a)| (v, -a)).collect(), -rhs);
    }

    pub fn add_eq(&mut self, terms: Vec<(Var, f64)>, rhs: f64) {
        debug_assert!(terms.iter().all(|&(v, a)| v < self.names.len() && a.is_finite()));
        self.eq.push(terms, rhs);
    }

    pub fn set_offset(&mut self, offset: f64) {
        self.offset = offset;
    }

    pub fn num_vars(&self) -> usize {
        self.names.len()
    }

    pub fn name(&self, v: Var) -> &str {
        &self.names[v]
    }

    pub fn bounds(&self, v: Var) -> (f64, f64) {
        (self.lower[v], self.upper[v])
    }

    pub fn cost(&self) -> &[f64] {
        &self.cost
    }

    pub fn offset(&self) -> f64 {
        self.offset
    }

    pub fn inequalities(&self) -> &SparseRows {
        &self.ineq
    }

    pub fn equalities(&self) -> &SparseRows {
        &self.eq
    }

    pub fn objective_value(&self, x: &[f64]) -> f64 {
        self.offset + self.cost.iter().zip(x).map(|(c, x)| c * x).sum::<f64>()
    }

    /// Largest absolute violation over all rows and bounds.
    pub fn max_violation(&self, x: &[f64]) -> f64 {
        let mut worst = 0.0f64;
        for i in 0..self.ineq.len() {
            worst = worst.max(self.ineq.activity(i, x) - self.ineq.rhs[i]);
        }
        for i in 0..self.eq.len() {
            worst = worst.max((self.eq.activity(i, x) - self.eq.rhs[i]).abs());
        }
        for (v, &xv) in x.iter().enumerate() {
            worst = worst.max(self.lower[v] - xv).max(xv - self.upper[v]);
        }
        worst
    }

    /// Writes the program in CPLEX LP format.
    pub fn write_cplex_lp<W: Write>(&self, out: &mut W) -> std::io::Result<()> {
        let name = |v: Var| sanitize(&self.names[v], v);
        let expr = |terms: &[(Var, f64)]| {
            let mut s = String::new();
            for (i, &(v, a)) in terms.iter().enumerate() {
                if i > 0 || a < 0.0 {
                    s.push_str(if a < 0.0 { " - " } else { " + " });
                }
                let _ = write!(s, "{:?} {}", a.abs(), name(v));
            }
            if s.is_empty() {
                s.push_str("0 ");
                s.push_str(&name(0));
            }
            s
        };
        writeln!(out, "\\ objective offset {:?}", self.offset)?;
        writeln!(out, "Minimize")?;
        let obj: Vec<(Var, f64)> = self
            .cost
            .iter()
            .enumerate()
            .filter(|(_, &c)| c != 0.0)
            .map(|(v, &c)| (v, c))
            .collect();
        writeln!(out, " obj: {}", expr(&obj))?;
        writeln!(out, "Subject To")?;
        for (i, (terms, rhs)) in self.ineq.iter().enumerate() {
            writeln!(out, " in{i}: {} <= {rhs:?}", expr(terms))?;
        }
        for (i, (terms, rhs)) in self.eq.iter().enumerate() {
            writeln!(out, " eq{i}: {} = {rhs:?}", expr(terms))?;
        }
        writeln!(out, "Bounds")?;
        for v in 0..self.num_vars() {
            let (lo, hi) = (self.lower[v], self.upper[v]);
            match (lo.is_finite(), hi.is_finite()) {
                (false, false) => writeln!(out, " {} free", name(v))?,
                (true, false) => writeln!(out, " {} >= {lo:?}", name(v))?,
                (false, true) => writeln!(out, " -inf <= {} <= {hi:?}", name(v))?,
                (true, true) => writeln!(out, " {lo:?} <= {} <= {hi:?}", name(v))?,
            }
        }
        writeln!(out, "End")
    }
}

fn sanitize(name: &str, v: Var) -> String {
    let cleaned: String = name
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '_' { c } else { '_' })
        .collect();
    format!("x{v}_{cleaned}")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LpStatus {
    Optimal,
    Infeasible,
    Unbounded,
    /// The backend stopped without a trustworthy answer.
    NumericalFailure,
}

impl std::fmt::Display for LpStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LpStatus::Optimal => "optimal",
            LpStatus::Infeasible => "infeasible",
            LpStatus::Unbounded => "unbounded",
            LpStatus::NumericalFailure => "numerical_failure",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LpSolution {
    pub status: LpStatus,
    pub values: Vec<f64>,
    pub objective: f64,
    /// Largest absolute row or bound violation of `values`.
    pub primal_residual: f64,
    pub relative_gap: f64,
    pub iterations: u32,
    pub backend_status: String,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LpOptions {
    pub max_iter: u32,
    /// Target for the absolute row residual and relative duality gap.
    pub tolerance: f64,
}

impl Default for LpOptions {
    fn default() -> Self {
        Self {
            max_iter: 400,
            tolerance: 1e-7,
        }
    }
}

pub fn solve_lp(lp: &LinearProgram) -> Result<LpSolution> {
    solve_lp_with(lp, &LpOptions::default())
}

pub fn solve_lp_with(lp: &LinearProgram, opts: &LpOptions) -> Result<LpSolution> {
    let nvar = lp.num_vars();
    if nvar == 0 {
        return Err(Error::Solver("program has no variables".into()));
    }
    // Row order: equalities, inequalities, upper bounds, lower bounds.
    let mut columns: Vec<Vec<(usize, f64)>> = vec![Vec::new(); nvar];
    let mut b = Vec::new();
    let mut row = 0usize;
    for (terms, rhs) in lp.eq.iter() {
        for &(v, a) in terms {
            columns[v].push((row, a));
        }
        b.push(rhs);
        row += 1;
    }
    let n_eq = row;
    for (terms, rhs) in lp.ineq.iter() {
        for &(v, a) in terms {
            columns[v].push((row, a));
        }
        b.push(rhs);
        row += 1;
    }
    for v in 0..nvar {
        if lp.upper[v].is_finite() {
            columns[v].push((row, 1.0));
            b.push(lp.upper[v]);
            row += 1;
        }
    }
    for v in 0..nvar {
        if lp.lower[v].is_finite() {
            columns[v].push((row, -1.0));
            b.push(-lp.lower[v]);
            row += 1;
        }
    }
    let m = row;
    let mut colptr = Vec::with_capacity(nvar + 1);
    let mut rowval = Vec::new();
    let mut nzval = Vec::new();
    colptr.push(0);
    for col in &mut columns {
        col.sort_by_key(|&(r, _)| r);
        for &(r, a) in col.iter() {
            rowval.push(r);
            nzval.push(a);
        }
        colptr.push(rowval.len());
    }
    let a = CscMatrix::new(m, nvar, colptr, rowval, nzval);
    let p = CscMatrix::<f64>::zeros((nvar, nvar));
    let mut cones: Vec<SupportedConeT<f64>> = Vec::new();
    if n_eq > 0 {
        cones.push(ZeroConeT(n_eq));
    }
    if m > n_eq {
        cones.push(NonnegativeConeT(m - n_eq));
    }
    // A solve that the backend calls converged but that misses the absolute
    // row residual is repeated with tighter internal tolerances.
    let mut attempt = 0;
    let (values, backend_status, relative_gap, iterations, status) = loop {
        let tol = opts.tolerance * 0.1f64.powi(1 + 2 * attempt);
        let settings = DefaultSettingsBuilder::default()
            .verbose(false)
            .max_iter(opts.max_iter)
            .tol_gap_abs(tol)
            .tol_gap_rel(tol)
            .tol_feas(tol)
            .presolve_enable(true)
            .build()
            .map_err(|e| Error::Solver(format!("settings: {e:?}")))?;
        let mut solver = DefaultSolver::new(&p, &lp.cost, &a, &b, &cones, settings)
            .map_err(|e| Error::Solver(format!("setup: {e:?}")))?;
        solver.solve();
        let sol = &solver.solution;
        let primal_residual = lp.max_violation(&sol.x);
        let relative_gap = solver.info.gap_rel;
        let status = match sol.status {
            SolverStatus::Solved | SolverStatus::AlmostSolved => {
                if primal_residual <= opts.tolerance && relative_gap <= opts.tolerance {
                    LpStatus::Optimal
                } else {
                    LpStatus::NumericalFailure
                }
            }
            SolverStatus::PrimalInfeasible | SolverStatus::AlmostPrimalInfeasible => LpStatus::Infeasible,
            SolverStatus::DualInfeasible | SolverStatus::AlmostDualInfeasible => LpStatus::Unbounded,
            _ => LpStatus::NumericalFailure,
        };
        let converged = matches!(sol.status, SolverStatus::Solved | SolverStatus::AlmostSolved);
        if status == LpStatus::Optimal || !converged || attempt == 2 {
            break (sol.x.clone(), format!("{:?}", sol.status), relative_gap, sol.iterations, status);
        }
        attempt += 1;
    };
    let primal_residual = lp.max_violation(&values);
    Ok(LpSolution {
        status,
        objective: lp.objective_value(&values),
        values,
        primal_residual,
        relative_gap,
        iterations,
        backend_status,
    })
}
