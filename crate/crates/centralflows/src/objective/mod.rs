//! Loss oracles: value, gradient, Hessian-vector products and third-derivative
//! contractions `∇_w[uᵀH(w)v]`.

mod mlp;
mod quadratic;
mod toy;

pub use mlp::{make_mlp, Mlp, MlpSpec};
pub use quadratic::{make_quadratic, Quadratic};
pub use toy::{make_eos_toy, EosToy, EosToyParams, ToyBlock};

use crate::error::{Error, Result};
use crate::linalg::{lobpcg_topk, LobpcgOptions, SymMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DerivativeMode {
    Analytic,
    FiniteDifference,
}

/// Immutable loss oracle. Implementations must be safe to share across threads.
pub trait Objective: Send + Sync {
    fn dim(&self) -> usize;
    fn loss(&self, w: &[f64]) -> f64;
    fn grad(&self, w: &[f64]) -> Vec<f64>;
    /// `H(w) v`
    fn hvp(&self, w: &[f64], v: &[f64]) -> Vec<f64>;
    /// `∇_w[uᵀ H(w) v]`, symmetric in `(u, v)`.
    fn third_bilinear(&self, w: &[f64], u: &[f64], v: &[f64]) -> Vec<f64>;
    fn derivative_mode(&self) -> DerivativeMode;
}

/// Materializes `H(w)` column by column from `hvp` and symmetrizes.
pub fn dense_hessian(obj: &dyn Objective, w: &[f64]) -> SymMatrix {
    let d = obj.dim();
    let mut e = vec![0.0; d];
    let cols: Vec<Vec<f64>> = (0..d)
        .map(|j| {
            e[j] = 1.0;
            let c = obj.hvp(w, &e);
            e[j] = 0.0;
            c
        })
        .collect();
    SymMatrix::from_fn(d, |i, j| 0.5 * (cols[j][i] + cols[i][j]))
}

/// Top Hessian eigenpair with the gap to the next eigenvalue.
#[derive(Debug, Clone)]
pub struct Sharpness {
    pub value: f64,
    pub vector: Vec<f64>,
    /// `λ₁ − λ₂`, or infinity in one dimension.
    pub gap: f64,
}

impl Sharpness {
    /// The top eigenvalue is treated as simple when it clears the next one by this much.
    pub const SIMPLE_GAP: f64 = 1e-8;

    pub fn is_simple(&self) -> bool {
        self.gap > Self::SIMPLE_GAP
    }
}

/// `S(w) = λ₁(H(w))` via the operator eigensolver on `hvp`.
pub fn sharpness(obj: &dyn Objective, w: &[f64]) -> Result<Sharpness> {
    let d = obj.dim();
    let k = d.min(2);
    let opts = LobpcgOptions { tol: 1e-10, ..Default::default() };
    let out = lobpcg_topk(&|v| obj.hvp(w, v), d, k, None, &opts)?;
    let vals = &out.pairs.values;
    Ok(Sharpness {
        value: vals[0],
        vector: out.pairs.vectors[0].clone(),
        gap: if k > 1 { vals[0] - vals[1] } else { f64::INFINITY },
    })
}

/// `∇S(w) = ∇_w[uᵀH(w)u]` for the top eigenvector `u`.
///
/// Errors when the top eigenvalue is clustered, since no single gradient exists.
pub fn grad_sharpness(obj: &dyn Objective, w: &[f64]) -> Result<Vec<f64>> {
    let s = sharpness(obj, w)?;
    if !s.is_simple() {
        return Err(Error::InvalidParam(format!("top eigenvalue clustered (gap {:e})", s.gap)));
    }
    Ok(obj.third_bilinear(w, &s.vector, &s.vector))
}

/// Finite-difference step for Hessian-vector products.
pub fn fd_step_hvp(w: &[f64]) -> f64 {
    1e-4 * (1.0 + crate::linalg::norm(w))
}

/// Finite-difference step for third-derivative contractions.
pub fn fd_step_third(w: &[f64]) -> f64 {
    1e-3 * (1.0 + crate::linalg::norm(w))
}

/// Central difference of a vector field along a unit direction, rescaled so
/// the result is homogeneous of degree one in `v`.
pub(crate) fn central_diff(f: impl Fn(&[f64]) -> Vec<f64>, w: &[f64], v: &[f64], h: f64) -> Vec<f64> {
    let nv = crate::linalg::norm(v);
    if nv == 0.0 {
        return vec![0.0; w.len()];
    }
    let wp: Vec<f64> = w.iter().zip(v).map(|(a, b)| a + h * b / nv).collect();
    let wm: Vec<f64> = w.iter().zip(v).map(|(a, b)| a - h * b / nv).collect();
    let fp = f(&wp);
    let fm = f(&wm);
    fp.iter().zip(&fm).map(|(p, m)| nv * (p - m) / (2.0 * h)).collect()
}
