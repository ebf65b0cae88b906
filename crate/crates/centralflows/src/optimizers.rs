//! GD, Scalar RMSProp and RMSProp as instances of one template: a diagonal
//! preconditioner `P(ν, t)` and an EMA state `ν` driven by a target `T(g)`.
//!
//! Discrete step: `ν ← β₂ν + (1−β₂)T(∇L(w))`, `t ← t + 1`, `w ← w − P(ν, t)⁻¹∇L(w)`.
//! Flow form: `dν/dt = γ[T(∇L) − ν]` with `γ = (1−β₂)/β₂`.

use crate::error::{Error, Result};
use crate::linalg::{lobpcg_topk, norm, EigenPairs, LobpcgOptions, CLUSTER_GAP};
use crate::objective::Objective;

/// Runs are halted once `‖w‖` or the loss passes this.
pub const DIVERGENCE_LIMIT: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodKind {
    Gd,
    ScalarRmsprop,
    Rmsprop,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Schedule {
    Constant,
    /// `η_t = η·min(1, t/steps)`
    LinearWarmup {
        steps: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MethodSpec {
    pub kind: MethodKind,
    pub eta: f64,
    pub beta2: f64,
    pub eps_adam: f64,
    pub bias_correction: bool,
    pub schedule: Schedule,
}

pub fn make_gd(eta: f64) -> Result<MethodSpec> {
    MethodSpec {
        kind: MethodKind::Gd,
        eta,
        beta2: 0.0,
        eps_adam: 0.0,
        bias_correction: false,
        schedule: Schedule::Constant,
    }
    .validated()
}

pub fn make_scalar_rmsprop(eta: f64, beta2: f64, bias_correction: bool) -> Result<MethodSpec> {
    MethodSpec {
        kind: MethodKind::ScalarRmsprop,
        eta,
        beta2,
        eps_adam: 0.0,
        bias_correction,
        schedule: Schedule::Constant,
    }
    .validated()
}

pub fn make_rmsprop(eta: f64, beta2: f64, eps_adam: f64, bias_correction: bool) -> Result<MethodSpec> {
    MethodSpec { kind: MethodKind::Rmsprop, eta, beta2, eps_adam, bias_correction, schedule: Schedule::Constant }
        .validated()
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct OptimizerState {
    pub nu: Vec<f64>,
    /// Step count, real-valued so flows can carry it continuously.
    pub t: f64,
}

impl MethodSpec {
    pub fn validated(self) -> Result<Self> {
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::InvalidParam(format!("eta must be positive (got {})", self.eta)));
        }
        if self.kind != MethodKind::Gd && !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::InvalidParam(format!("beta2 must lie in [0, 1) (got {})", self.beta2)));
        }
        if !(self.eps_adam >= 0.0 && self.eps_adam.is_finite()) {
            return Err(Error::InvalidParam("eps_adam must be ≥ 0".into()));
        }
        if let Schedule::LinearWarmup { steps } = self.schedule {
            if !(steps > 0.0 && steps.is_finite()) {
                return Err(Error::InvalidParam("warmup steps must be positive".into()));
            }
        }
        Ok(self)
    }

    pub fn name(&self) -> &'static str {
        match self.kind {
            MethodKind::Gd => "gd",
            MethodKind::ScalarRmsprop => "scalar_rmsprop",
            MethodKind::Rmsprop => "rmsprop",
        }
    }

    pub fn is_adaptive(&self) -> bool {
        self.kind != MethodKind::Gd
    }

    /// `γ = (1−β₂)/β₂`; infinite for `β₂ = 0`, zero for GD.
    pub fn gamma(&self) -> f64 {
        match self.kind {
            MethodKind::Gd => 0.0,
            _ if self.beta2 == 0.0 => f64::INFINITY,
            _ => (1.0 - self.beta2) / self.beta2,
        }
    }

    pub fn state_dim(&self, d: usize) -> usize {
        match self.kind {
            MethodKind::Gd => 0,
            MethodKind::ScalarRmsprop => 1,
            MethodKind::Rmsprop => d,
        }
    }

    /// State index that drives parameter coordinate `q`.
    #[inline]
    fn state_index(&self, q: usize) -> usize {
        match self.kind {
            MethodKind::Rmsprop => q,
            _ => 0,
        }
    }

    /// `T(g)`: `g⊙²` for RMSProp, `‖g‖²` for Scalar RMSProp.
    pub fn target(&self, g: &[f64]) -> Vec<f64> {
        match self.kind {
            MethodKind::Gd => Vec::new(),
            MethodKind::ScalarRmsprop => vec![crate::linalg::dot(g, g)],
            MethodKind::Rmsprop => g.iter().map(|x| x * x).collect(),
        }
    }

    /// Initial state at `w₀`: the target itself, or zero under bias correction.
    pub fn init_state(&self, g0: &[f64]) -> OptimizerState {
        let nu = if self.bias_correction { vec![0.0; self.state_dim(g0.len())] } else { self.target(g0) };
        OptimizerState { nu, t: 0.0 }
    }

    fn lr(&self, t: f64) -> f64 {
        match self.schedule {
            Schedule::Constant => self.eta,
            Schedule::LinearWarmup { steps } => self.eta * (t.max(1.0) / steps).min(1.0),
        }
    }

    fn d_lr(&self, t: f64) -> f64 {
        match self.schedule {
            Schedule::LinearWarmup { steps } if t.max(1.0) < steps && t > 1.0 => self.eta / steps,
            _ => 0.0,
        }
    }

    /// Bias-correction denominator `1 − β₂^t` (1 when off).
    fn bias(&self, t: f64) -> f64 {
        if self.bias_correction && self.is_adaptive() {
            1.0 - self.beta2.powf(t.max(1.0))
        } else {
            1.0
        }
    }

    fn d_bias(&self, t: f64) -> f64 {
        if self.bias_correction && self.is_adaptive() && t > 1.0 && self.beta2 > 0.0 {
            -self.beta2.powf(t) * self.beta2.ln()
        } else {
            0.0
        }
    }

    /// Diagonal of `P(ν, t)`.
    pub fn precond(&self, s: &OptimizerState, d: usize) -> Vec<f64> {
        let lr = self.lr(s.t);
        match self.kind {
            MethodKind::Gd => vec![1.0 / lr; d],
            _ => {
                let c = self.bias(s.t);
                (0..d).map(|q| ((s.nu[self.state_index(q)] / c).sqrt() + self.eps_adam) / lr).collect()
            }
        }
    }

    /// `∂p_q/∂ν_{idx(q)}`.
    pub fn dp_dnu(&self, s: &OptimizerState, d: usize) -> Vec<f64> {
        let lr = self.lr(s.t);
        match self.kind {
            MethodKind::Gd => vec![0.0; d],
            _ => {
                let c = self.bias(s.t);
                (0..d).map(|q| 1.0 / (2.0 * lr * (s.nu[self.state_index(q)] * c).sqrt())).collect()
            }
        }
    }

    /// `∂p_q/∂t` from warmup and bias correction.
    pub fn dp_dt(&self, s: &OptimizerState, d: usize) -> Vec<f64> {
        let lr = self.lr(s.t);
        let dlr = self.d_lr(s.t);
        let p = self.precond(s, d);
        let mut out: Vec<f64> = p.iter().map(|pq| -pq * dlr / lr).collect();
        let dc = self.d_bias(s.t);
        if dc != 0.0 {
            let c = self.bias(s.t);
            for (q, o) in out.iter_mut().enumerate() {
                let nu = s.nu[self.state_index(q)];
                *o += -0.5 * nu.sqrt() * c.powf(-1.5) * dc / lr;
            }
        }
        out
    }

    /// Per-coordinate copy of a state vector: entry `q` is `z[idx(q)]`.
    pub fn expand_state(&self, z: &[f64], d: usize) -> Vec<f64> {
        match self.kind {
            MethodKind::Gd => vec![0.0; d],
            _ => (0..d).map(|q| z[self.state_index(q)]).collect(),
        }
    }

    /// Sums a per-coordinate vector into state coordinates.
    pub fn to_state(&self, per_coord: &[f64]) -> Vec<f64> {
        match self.kind {
            MethodKind::Gd => Vec::new(),
            MethodKind::ScalarRmsprop => vec![per_coord.iter().sum()],
            MethodKind::Rmsprop => per_coord.to_vec(),
        }
    }
}

/// One discrete step. Errors with [`Error::Diverged`] when the iterate blows up.
pub fn step_discrete(
    m: &MethodSpec,
    w: &[f64],
    s: &OptimizerState,
    obj: &dyn Objective,
) -> Result<(Vec<f64>, OptimizerState)> {
    let g = obj.grad(w);
    if !crate::linalg::all_finite(&g) {
        return Err(Error::Diverged("non-finite gradient".into()));
    }
    let mut ns = s.clone();
    if m.is_adaptive() {
        let tgt = m.target(&g);
        for (n, t) in ns.nu.iter_mut().zip(&tgt) {
            *n = m.beta2 * *n + (1.0 - m.beta2) * t;
        }
    }
    ns.t += 1.0;
    let p = m.precond(&ns, w.len());
    let wn: Vec<f64> = w.iter().zip(&g).zip(&p).map(|((wi, gi), pi)| wi - gi / pi).collect();
    check_divergence(obj, &wn)?;
    Ok((wn, ns))
}

pub fn check_divergence(obj: &dyn Objective, w: &[f64]) -> Result<()> {
    let nw = norm(w);
    if !nw.is_finite() || nw > DIVERGENCE_LIMIT {
        return Err(Error::Diverged(format!("‖w‖ = {nw:e}")));
    }
    let l = obj.loss(w);
    if !l.is_finite() || l.abs() > DIVERGENCE_LIMIT {
        return Err(Error::Diverged(format!("loss = {l:e}")));
    }
    Ok(())
}

/// Top eigenpairs of `P^{-1/2} H P^{-1/2}` mapped back so that `UᵀPU = I`.
#[derive(Debug, Clone)]
pub struct CriticalBasis {
    /// `U = P^{-1/2}Ũ`, P-orthonormal columns.
    pub u: Vec<Vec<f64>>,
    /// Euclidean-orthonormal eigenvectors of the effective Hessian.
    pub u_tilde: Vec<Vec<f64>>,
    /// Effective-Hessian eigenvalues, descending, for every computed pair.
    pub d: Vec<f64>,
    /// Leading pairs above `2 − τ`, widened to whole clusters.
    pub k_unstable: usize,
    /// Pairs above the tracking threshold.
    pub n_tracked: usize,
    pub p: Vec<f64>,
    /// Some computed pair shares its eigenvalue with a neighbour.
    pub clustered: bool,
}

impl CriticalBasis {
    pub fn eff_sharpness(&self) -> f64 {
        self.d.first().copied().unwrap_or(0.0)
    }

    /// The first `k_unstable` columns of `U`.
    pub fn unstable(&self) -> &[Vec<f64>] {
        &self.u[..self.k_unstable]
    }

    pub fn pairs(&self) -> EigenPairs {
        EigenPairs { values: self.d.clone(), vectors: self.u.clone(), metric: Some(self.p.clone()) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BasisOptions {
    pub tau: f64,
    pub track_thresh: f64,
    pub eig: LobpcgOptions,
}

impl Default for BasisOptions {
    fn default() -> Self {
        Self { tau: 0.05, track_thresh: 1.5, eig: LobpcgOptions { tol: 1e-10, ..Default::default() } }
    }
}

/// Effective-Hessian eigenbasis at `(w, ν)`. The number of computed pairs
/// doubles until the smallest one falls below both thresholds.
pub fn critical_basis(
    m: &MethodSpec,
    w: &[f64],
    s: &OptimizerState,
    obj: &dyn Objective,
    opts: &BasisOptions,
    warm: Option<&[Vec<f64>]>,
) -> Result<CriticalBasis> {
    let d = w.len();
    let p = m.precond(s, d);
    if p.iter().any(|&x| !(x > 0.0 && x.is_finite())) {
        return Err(Error::NonFinite("preconditioner"));
    }
    let isq: Vec<f64> = p.iter().map(|x| 1.0 / x.sqrt()).collect();
    let apply = |v: &[f64]| -> Vec<f64> {
        let sv: Vec<f64> = v.iter().zip(&isq).map(|(a, b)| a * b).collect();
        obj.hvp(w, &sv).iter().zip(&isq).map(|(a, b)| a * b).collect()
    };
    let floor = opts.track_thresh.min(2.0 - opts.tau);
    let mut want = warm.map_or(1, |c| c.len() + 1).clamp(1, d);
    let out = loop {
        let out = lobpcg_topk(&apply, d, want, warm, &opts.eig)?;
        if want == d || *out.pairs.values.last().unwrap() <= floor {
            break out;
        }
        want = (2 * want).min(d);
    };
    let vals = out.pairs.values;
    let mut k = vals.iter().take_while(|&&v| v > 2.0 - opts.tau).count();
    while k > 0 && k < vals.len() && vals[k - 1] - vals[k] < CLUSTER_GAP {
        k += 1;
    }
    let n_tracked = vals.iter().filter(|&&v| v > opts.track_thresh).count();
    let clustered = vals.windows(2).any(|p| p[0] - p[1] < CLUSTER_GAP);
    let u_tilde = out.pairs.vectors;
    let u = u_tilde.iter().map(|c| c.iter().zip(&isq).map(|(a, b)| a * b).collect()).collect();
    Ok(CriticalBasis { u, u_tilde, d: vals, k_unstable: k, n_tracked, p, clustered })
}

/// `λ₁(P^{-1/2} H P^{-1/2})`
pub fn effective_sharpness(m: &MethodSpec, w: &[f64], s: &OptimizerState, obj: &dyn Objective) -> Result<f64> {
    let opts = BasisOptions { track_thresh: f64::INFINITY, tau: f64::NEG_INFINITY, ..Default::default() };
    Ok(critical_basis(m, w, s, obj, &opts, None)?.eff_sharpness())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::SymMatrix;
    use crate::objective::{make_eos_toy, make_quadratic, EosToyParams};

    #[test]
    fn gd_precond_is_inverse_lr() {
        let m = make_gd(0.01).unwrap();
        let s = m.init_state(&[1.0, 2.0]);
        let p = m.precond(&s, 2);
        assert_eq!(p, vec![100.0, 100.0]);
        assert!((2.0 / p[0] - 0.02).abs() < 1e-15);
    }

    #[test]
    fn rmsprop_effective_steps() {
        let m = make_rmsprop(1.0, 0.9, 0.0, false).unwrap();
        let p = m.precond(&OptimizerState { nu: vec![4.0, 9.0], t: 1.0 }, 2);
        assert_eq!(p.iter().map(|x| 1.0 / x).collect::<Vec<_>>(), vec![0.5, 1.0 / 3.0]);
    }

    #[test]
    fn invalid_hyperparameters() {
        assert!(make_gd(0.0).is_err());
        assert!(make_gd(f64::NAN).is_err());
        assert!(make_scalar_rmsprop(0.1, 1.0, false).is_err());
        assert!(make_rmsprop(0.1, 0.9, -1.0, false).is_err());
    }

    #[test]
    fn gd_quadratic_steps() {
        let q = make_quadratic(SymMatrix::from_diag(&[2.0]), vec![0.0]).unwrap();
        let m = make_gd(0.5).unwrap();
        let (w1, _) = step_discrete(&m, &[1.0], &m.init_state(&[2.0]), &q).unwrap();
        assert_eq!(w1, vec![0.0]);

        let q = make_quadratic(SymMatrix::from_diag(&[300.0]), vec![0.0]).unwrap();
        let m = make_gd(0.01).unwrap();
        let s = m.init_state(&[30.0]);
        let (w1, s) = step_discrete(&m, &[0.1], &s, &q).unwrap();
        let (w2, _) = step_discrete(&m, &w1, &s, &q).unwrap();
        assert!((w1[0] + 0.2).abs() < 1e-15 && (w2[0] - 0.4).abs() < 1e-15);
    }

    #[test]
    fn ngd_limit() {
        let t = make_eos_toy(EosToyParams::single(0.01, 300.0)).unwrap();
        let m = make_scalar_rmsprop(0.1, 0.0, false).unwrap();
        let w = [0.5, 150.0];
        let g = t.grad(&w);
        let s = OptimizerState { nu: vec![123.0], t: 0.0 };
        let (w1, s1) = step_discrete(&m, &w, &s, &t).unwrap();
        assert_eq!(s1.nu[0], crate::linalg::dot(&g, &g));
        let gn = norm(&g);
        for i in 0..2 {
            assert!((w[i] - w1[i] - 0.1 * g[i] / gn).abs() < 1e-15 * (1.0 + w[i].abs()));
        }
    }

    #[test]
    fn bias_correction_cancels_on_first_step() {
        let m = make_rmsprop(0.1, 0.99, 0.0, true).unwrap();
        let t = make_eos_toy(EosToyParams::single(0.01, 300.0)).unwrap();
        let w = [0.5, 150.0];
        let g = t.grad(&w);
        let (_, s1) = step_discrete(&m, &w, &m.init_state(&g), &t).unwrap();
        let p = m.precond(&s1, 2);
        for q in 0..2 {
            assert!((p[q] * 0.1 - g[q].abs()).abs() <= 1e-12 * g[q].abs());
        }
    }

    #[test]
    fn divergence_detected() {
        let q = make_quadratic(SymMatrix::from_diag(&[300.0]), vec![0.0]).unwrap();
        let m = make_gd(0.01).unwrap();
        let mut w = vec![1.0];
        let mut s = m.init_state(&[300.0]);
        let mut diverged = false;
        for _ in 0..100 {
            match step_discrete(&m, &w, &s, &q) {
                Ok((a, b)) => {
                    w = a;
                    s = b;
                }
                Err(Error::Diverged(_)) => {
                    diverged = true;
                    break;
                }
                Err(e) => panic!("{e}"),
            }
        }
        assert!(diverged);
    }

    #[test]
    fn basis_on_toy_at_eos() {
        let t = make_eos_toy(EosToyParams::single(0.01, 300.0)).unwrap();
        let m = make_gd(0.01).unwrap();
        let s = m.init_state(&[0.0, 0.0]);
        let b = critical_basis(&m, &[0.0, 200.0], &s, &t, &BasisOptions::default(), None).unwrap();
        assert!((b.eff_sharpness() - 2.0).abs() < 1e-12);
        assert_eq!(b.k_unstable, 1);
        assert!((b.u[0][0] - 0.1).abs() < 1e-12 && b.u[0][1].abs() < 1e-12);
        let q = make_quadratic(SymMatrix::from_diag(&[1.0, 3.0]), vec![0.0, 0.0]).unwrap();
        let m = make_gd(0.1).unwrap();
        let b = critical_basis(&m, &[1.0, 1.0], &s, &q, &BasisOptions::default(), None).unwrap();
        assert!((b.eff_sharpness() - 0.3).abs() < 1e-12);
        assert_eq!(b.k_unstable, 0);
    }

    #[test]
    fn rmsprop_diagonal_effective_eigenvalue() {
        let q = make_quadratic(SymMatrix::from_diag(&[40.0, 1.0, 1.0]), vec![0.0; 3]).unwrap();
        let m = make_rmsprop(1.0, 0.9, 0.0, false).unwrap();
        let s = OptimizerState { nu: vec![400.0, 400.0, 400.0], t: 1.0 };
        assert!((effective_sharpness(&m, &[0.0; 3], &s, &q).unwrap() - 2.0).abs() < 1e-12);
    }
}
