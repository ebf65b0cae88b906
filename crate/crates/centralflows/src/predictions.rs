//! Time-averaged predictions of the central flow and the empirical
//! comparators they are checked against.

use crate::error::{Error, Result};
use crate::linalg::{dot, sym_eig_dense, SymMatrix};
use crate::objective::{sharpness, Objective};

/// Kernel half-width in bandwidths.
pub const SMOOTH_TRUNCATION: f64 = 8.0;

/// `L̄ = L + tr X` with `X` in a P-orthonormal basis.
pub fn predicted_loss_bar(loss_flow: f64, x: &SymMatrix) -> f64 {
    loss_flow + x.trace()
}

/// `‖∇L‖² + 4 tr((PU) X (PU)ᵀ)`
pub fn predicted_grad_norm_sq(gradnorm_sq_flow: f64, p: &[f64], u: &[Vec<f64>], x: &SymMatrix) -> f64 {
    let k = x.dim();
    let mut extra = 0.0;
    for q in 0..p.len() {
        let mut s = 0.0;
        for i in 0..k {
            for j in 0..k {
                s += u[i][q] * x.get(i, j) * u[j][q];
            }
        }
        extra += p[q] * p[q] * s;
    }
    gradnorm_sq_flow + 4.0 * extra
}

/// Eigendecomposition of the whitened covariance `P^{1/2} Σ P^{1/2}`.
#[derive(Debug, Clone, PartialEq)]
pub struct OscillationModel {
    /// Eigenvalues, descending, clamped at zero.
    pub lambda: Vec<f64>,
    /// Orthonormal directions in whitened coordinates.
    pub directions: Vec<Vec<f64>>,
    pub x: SymMatrix,
    pub p: Vec<f64>,
}

impl OscillationModel {
    /// Eigenvalues of `Σ` itself when `P` is a multiple of the identity.
    pub fn sigma_units(&self) -> Option<Vec<f64>> {
        let p0 = *self.p.first()?;
        self.p.iter().all(|&q| q == p0).then(|| self.lambda.iter().map(|l| l / p0).collect())
    }
}

/// `Ũ = P^{1/2}U` is orthonormal, so `P^{1/2}ΣP^{1/2} = ŨXŨᵀ` and its
/// eigenpairs are `(λ(X), Ũ·eigvec(X))`.
pub fn oscillation_variances(p: &[f64], u: &[Vec<f64>], x: &SymMatrix) -> Result<OscillationModel> {
    if u.len() != x.dim() || u.iter().any(|c| c.len() != p.len()) {
        return Err(Error::Shape("oscillation_variances: basis and X disagree".into()));
    }
    let e = sym_eig_dense(x)?;
    let sq: Vec<f64> = p.iter().map(|v| v.sqrt()).collect();
    let directions = e
        .vectors
        .iter()
        .map(|c| {
            let mut out = vec![0.0; p.len()];
            for (i, ci) in c.iter().enumerate() {
                for q in 0..p.len() {
                    out[q] += ci * sq[q] * u[i][q];
                }
            }
            out
        })
        .collect();
    Ok(OscillationModel {
        lambda: e.values.iter().map(|v| v.max(0.0)).collect(),
        directions,
        x: x.clone(),
        p: p.to_vec(),
    })
}

/// `(vᵢᵀ P^{1/2} (w_t − w(t)))²` for each direction.
pub fn measure_whitened_displacement(w_discrete: &[f64], w_flow: &[f64], p: &[f64], v: &[Vec<f64>]) -> Vec<f64> {
    let z: Vec<f64> = w_discrete.iter().zip(w_flow).zip(p).map(|((a, b), q)| (a - b) * q.sqrt()).collect();
    v.iter().map(|c| dot(c, &z).powi(2)).collect()
}

/// Gaussian-kernel smoothing with bandwidth `sigma` (in samples). The kernel
/// is truncated at [`SMOOTH_TRUNCATION`] bandwidths and renormalized over the
/// samples that exist, so edges are not wrapped. Non-finite samples are
/// skipped the same way.
pub fn gaussian_smooth(series: &[f64], sigma: f64) -> Result<Vec<f64>> {
    if !(sigma > 0.0) {
        return Err(Error::InvalidParam("smoothing bandwidth must be positive".into()));
    }
    let r = (SMOOTH_TRUNCATION * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-r..=r).map(|k| (-(k as f64).powi(2) / (2.0 * sigma * sigma)).exp()).collect();
    let n = series.len() as isize;
    Ok((0..n)
        .map(|i| {
            let (mut num, mut den) = (0.0, 0.0);
            for (kk, wk) in kernel.iter().enumerate() {
                let j = i + kk as isize - r;
                if j >= 0 && j < n && series[j as usize].is_finite() {
                    num += wk * series[j as usize];
                    den += wk;
                }
            }
            if den > 0.0 {
                num / den
            } else {
                f64::NAN
            }
        })
        .collect())
}

/// `ŵ_t = ¼(2w_t + w_{t−1} + w_{t+1})` for interior `t`.
pub fn second_order_midpoints(traj: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    if traj.len() < 3 {
        return Err(Error::Shape(format!("midpoints need at least 3 iterates (got {})", traj.len())));
    }
    Ok(traj
        .windows(3)
        .map(|w3| w3[1].iter().zip(&w3[0]).zip(&w3[2]).map(|((b, a), c)| 0.25 * (2.0 * b + a + c)).collect())
        .collect())
}

/// How far the curvature along a step departs from its linearization.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SubquadraticityRecord {
    /// `max |uᵀH(w)u − S̄ − ⟨∇S̄, w − w̄⟩| / |S̄|` over the segment.
    pub max_rel_deviation: f64,
    /// Mean signed deviation: positive means curvature grows faster than linear.
    pub mean_signed_deviation: f64,
}

/// Samples `uᵀH(w)u` on `[w_t, w_{t+1}]` with `u` the top eigenvector at the
/// midpoint and compares it with the first-order model around the midpoint.
pub fn subquadraticity_diagnostic(obj: &dyn Objective, w_t: &[f64], w_next: &[f64]) -> Result<SubquadraticityRecord> {
    const SAMPLES: usize = 9;
    let mid: Vec<f64> = w_t.iter().zip(w_next).map(|(a, b)| 0.5 * (a + b)).collect();
    let top = sharpness(obj, &mid)?;
    let u = &top.vector;
    let s_bar = dot(u, &obj.hvp(&mid, u));
    let grad_s = obj.third_bilinear(&mid, u, u);
    let scale = s_bar.abs().max(f64::MIN_POSITIVE);
    let (mut worst, mut mean) = (0.0_f64, 0.0);
    for i in 0..SAMPLES {
        let s = i as f64 / (SAMPLES - 1) as f64;
        let w: Vec<f64> = w_t.iter().zip(w_next).map(|(a, b)| a + s * (b - a)).collect();
        let actual = dot(u, &obj.hvp(&w, u));
        let dw: Vec<f64> = w.iter().zip(&mid).map(|(a, b)| a - b).collect();
        let dev = (actual - s_bar - dot(&grad_s, &dw)) / scale;
        worst = worst.max(dev.abs());
        mean += dev / SAMPLES as f64;
    }
    Ok(SubquadraticityRecord { max_rel_deviation: worst, mean_signed_deviation: mean })
}
