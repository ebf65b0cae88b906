use crate::error::Result;
use crate::objective::{sharpness, Objective};
use crate::optimizers::check_divergence;

/// Sharpness at which GD on `L + (τ/4)‖∇L‖²` loses stability:
/// the root of `ηS + ½ητS² = 2`, i.e. `(√(1+4τ/η) − 1)/τ`.
pub fn igr_saturation(eta: f64, tau: f64) -> f64 {
    ((1.0 + 4.0 * tau / eta).sqrt() - 1.0) / tau
}

/// One step of gradient descent with an explicit gradient-norm penalty:
/// `w ← w − η[∇L + (τ/2)H∇L]`.
pub fn igr_gd_step(w: &[f64], eta: f64, tau: f64, obj: &dyn Objective) -> Result<Vec<f64>> {
    let g = obj.grad(w);
    let hg = obj.hvp(w, &g);
    let wn: Vec<f64> = w.iter().zip(g.iter().zip(&hg)).map(|(wi, (gi, hi))| wi - eta * (gi + 0.5 * tau * hi)).collect();
    check_divergence(obj, &wn)?;
    Ok(wn)
}

/// Euler integration of `dw/dt = −η[∇L + (η/2)H∇L]`, taking
/// `m = ⌈2ηS + η²S²⌉` substeps per unit of time.
pub fn igr_flow_advance(w: &[f64], eta: f64, obj: &dyn Objective, duration: f64) -> Result<Vec<f64>> {
    let mut w = w.to_vec();
    let mut remaining = duration;
    while remaining > 1e-12 {
        let chunk = remaining.min(1.0);
        let s = sharpness(obj, &w)?.value.max(0.0);
        let m = ((2.0 * eta * s + (eta * s).powi(2)) * chunk).ceil().max(1.0) as usize;
        let h = chunk / m as f64;
        for _ in 0..m {
            let g = obj.grad(&w);
            let hg = obj.hvp(&w, &g);
            for ((wi, gi), hi) in w.iter_mut().zip(&g).zip(&hg) {
                *wi -= h * eta * (gi + 0.5 * eta * hi);
            }
            check_divergence(obj, &w)?;
        }
        remaining -= chunk;
    }
    Ok(w)
}
