use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::model::{block_diag, stack_phi_gamma, StackedSystem, SystemModel};

/// Maps of the stacked error `[x̃_0; ...; x̃_T]`:
///
/// ```text
/// x̃ = Θ w + Ψ v + Ξ x̃_0 + Υ s_0 + H ν
/// ```
#[derive(Debug, Clone, PartialEq)]
pub struct ResponseMatrices {
    /// `(I + H(M+L)C) Γ W`; absent when the plant has no process noise.
    pub theta: Option<DMatrix<f64>>,
    /// `(H(M+L)(I - CΓL) - ΓL) V`
    pub psi: DMatrix<f64>,
    /// `(I + H(M+L)C) Φ`
    pub xi: DMatrix<f64>,
    /// `A - Ξ`
    pub upsilon: DMatrix<f64>,
    pub phi: DMatrix<f64>,
    pub gamma: DMatrix<f64>,
}

pub fn build_response(
    model: &SystemModel,
    stacked: &StackedSystem,
    m: &DMatrix<f64>,
    l_blocks: &[DMatrix<f64>],
) -> Result<ResponseMatrices> {
    let (n, p, t) = (model.n(), model.p(), model.horizon());
    if m.shape() != (t * n, t * p) {
        return Err(Error::ShapeMismatch(format!(
            "M is {}x{}, expected {}x{}",
            m.nrows(),
            m.ncols(),
            t * n,
            t * p
        )));
    }
    let (phi, gamma) = stack_phi_gamma(model, l_blocks)?;
    let l = block_diag(&l_blocks.iter().collect::<Vec<_>>());
    let size = (t + 1) * n;
    let h_ml = &stacked.h * (m + &l);
    let g = DMatrix::<f64>::identity(size, size) + &h_ml * &stacked.c;
    let gamma_l = &gamma * &l;
    let theta = stacked.w.as_ref().map(|w| &g * &gamma * w);
    let inner = DMatrix::<f64>::identity(t * p, t * p) - &stacked.c * &gamma_l;
    let psi = (&h_ml * inner - &gamma_l) * &stacked.v;
    let xi = &g * &phi;
    let upsilon = &stacked.a - &xi;
    Ok(ResponseMatrices {
        theta,
        psi,
        xi,
        upsilon,
        phi,
        gamma,
    })
}

impl ResponseMatrices {
    /// `H ν + Υ s_0`
    pub fn offset(&self, stacked: &StackedSystem, nu: &DVector<f64>, s0: &DVector<f64>) -> DVector<f64> {
        &stacked.h * nu + &self.upsilon * s0
    }

    /// Worst-case `|x̃_r|` of every stacked row over the noise box and `‖x̃_0‖_∞ <= mu1`.
    pub fn row_worst_case(&self, offset: &DVector<f64>, eta_w: f64, eta_v: f64, mu1: f64) -> Vec<f64> {
        let l1 = |m: &DMatrix<f64>, r: usize| m.row(r).iter().map(|x| x.abs()).sum::<f64>();
        (0..self.xi.nrows())
            .map(|r| {
                let w = self.theta.as_ref().map_or(0.0, |th| eta_w * l1(th, r));
                w + eta_v * l1(&self.psi, r) + mu1 * l1(&self.xi, r) + offset[r].abs()
            })
            .collect()
    }

    /// Stacked error for one noise realization.
    pub fn predict(
        &self,
        stacked: &StackedSystem,
        w: Option<&DVector<f64>>,
        v: &DVector<f64>,
        x0_err: &DVector<f64>,
        s0: &DVector<f64>,
        nu: &DVector<f64>,
    ) -> DVector<f64> {
        let mut x = &self.psi * v + &self.xi * x0_err + self.offset(stacked, nu, s0);
        if let (Some(theta), Some(w)) = (&self.theta, w) {
            x += theta * w;
        }
        x
    }
}
