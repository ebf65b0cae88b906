//! Stable, central, IGR and projected flows.
//!
//! The central flow is integrated by linearizing the stability constraint
//! `Uᵀ(2P − H)U ⪰ 0` over one Euler substep, which turns each substep into an
//! SDCP for the oscillation covariance `X` (in the P-orthonormal basis `U`).

mod igr;
mod projection;

pub use igr::{igr_flow_advance, igr_gd_step, igr_saturation};
pub use projection::project_tangent_cone;

use crate::error::{Error, Result};
use crate::linalg::{dot, LobpcgOptions, SymMatrix};
use crate::objective::Objective;
use crate::optimizers::{check_divergence, critical_basis, BasisOptions, CriticalBasis, MethodSpec, OptimizerState};
use crate::sdcp::{solve_sdcp, SdcpOptions, SdcpProblem};

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct FlowOptions {
    /// Central-flow substep length.
    pub eps: f64,
    /// Eigenvalues of `P⁻¹H` above `2 − τ` enter the SDCP.
    pub tau: f64,
    pub track_thresh: f64,
    /// Stable and central flows stop once `S^eff` reaches this.
    pub terminate_at: f64,
    /// Zero `∇H` in `β` and in `dw/dt`, leaving only the effect of
    /// oscillations on `ν` to keep the flow stable.
    pub ablate_curvature: bool,
    pub sdcp: SdcpOptions,
    pub eig: LobpcgOptions,
}

impl Default for FlowOptions {
    fn default() -> Self {
        Self {
            eps: 0.25,
            tau: 0.05,
            track_thresh: 1.5,
            terminate_at: 100.0,
            ablate_curvature: false,
            sdcp: SdcpOptions::default(),
            eig: LobpcgOptions { tol: 1e-10, ..Default::default() },
        }
    }
}

impl FlowOptions {
    pub fn basis(&self) -> BasisOptions {
        BasisOptions { tau: self.tau, track_thresh: self.track_thresh, eig: self.eig }
    }
}

/// What happened during one Euler substep.
#[derive(Debug, Clone, PartialEq)]
pub struct SubstepLog {
    pub eps: f64,
    pub loss_before: f64,
    pub loss_after: f64,
    pub gradnorm_sq: f64,
    /// `⟨∇L, P⁻¹∇L⟩`, the stable-flow loss decrease rate.
    pub precond_gradnorm_sq: f64,
    pub k: usize,
    pub eff_sharpness: f64,
    pub trace_x: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FlowDiagnostics {
    pub substeps: usize,
    /// Substeps at which the number of unstable eigenvalues changed.
    pub breakpoints: usize,
    pub sdcp_unconverged: usize,
    pub sdcp_regularized: usize,
    pub max_asymmetry: f64,
    /// Largest effective sharpness seen at any substep.
    pub max_eff_sharpness: f64,
    /// Substeps where the stationary EMA could not be certified.
    pub stationary_failures: usize,
    /// Substeps of the most recent advance only.
    pub log: Vec<SubstepLog>,
}

#[derive(Debug, Clone)]
pub struct FlowState {
    pub w: Vec<f64>,
    pub state: OptimizerState,
    pub time: f64,
    /// Oscillation covariance in the P-orthonormal basis of the last substep.
    pub x: SymMatrix,
    pub basis: Option<CriticalBasis>,
    /// Reason the flow stopped, if it did.
    pub terminated: Option<String>,
    pub diag: FlowDiagnostics,
    /// Last Algorithm-1 factor, reused as a warm start by the stationary flow.
    pub stationary_factor: Option<Vec<Vec<f64>>>,
}

impl FlowState {
    pub fn new(w: Vec<f64>, state: OptimizerState) -> Self {
        let time = state.t;
        Self {
            w,
            state,
            time,
            x: SymMatrix::zeros(0),
            basis: None,
            terminated: None,
            diag: FlowDiagnostics::default(),
            stationary_factor: None,
        }
    }

    fn warm(&self) -> Option<Vec<Vec<f64>>> {
        self.basis.as_ref().map(|b| b.u_tilde[..b.n_tracked.max(b.k_unstable).max(1).min(b.u_tilde.len())].to_vec())
    }

    /// `Σ = U X Uᵀ` applied to a vector, in Euclidean coordinates.
    pub fn sigma_apply(&self, v: &[f64]) -> Vec<f64> {
        let Some(b) = &self.basis else { return vec![0.0; v.len()] };
        let k = self.x.dim();
        let c: Vec<f64> = (0..k).map(|i| dot(&b.u[i], v)).collect();
        let xc = self.x.matvec(&c);
        let mut out = vec![0.0; v.len()];
        for i in 0..k {
            crate::linalg::axpy(xc[i], &b.u[i], &mut out);
        }
        out
    }
}

/// `∇H_U` as its `k(k+1)/2` slabs `∇_w[u_iᵀH(w)u_j]`, `i ≤ j`.
#[derive(Debug, Clone, PartialEq)]
pub struct NablaHU {
    k: usize,
    slabs: Vec<Vec<f64>>,
}

impl NablaHU {
    pub fn k(&self) -> usize {
        self.k
    }

    fn index(&self, i: usize, j: usize) -> usize {
        let (i, j) = if i <= j { (i, j) } else { (j, i) };
        i * self.k - i * (i + 1) / 2 + j
    }

    pub fn slab(&self, i: usize, j: usize) -> &[f64] {
        &self.slabs[self.index(i, j)]
    }

    /// `∇H_U[v]_ij = ⟨∇_w[u_iᵀHu_j], v⟩`
    pub fn apply(&self, v: &[f64]) -> SymMatrix {
        SymMatrix::from_fn(self.k, |i, j| dot(self.slab(i, j), v))
    }

    /// `∇H_Uᵀ[X] = Σ_ij X_ij ∇_w[u_iᵀHu_j]`
    pub fn adjoint(&self, x: &SymMatrix) -> Vec<f64> {
        let d = self.slabs.first().map_or(0, |s| s.len());
        let mut out = vec![0.0; d];
        for i in 0..self.k {
            for j in i..self.k {
                let c = if i == j { x.get(i, i) } else { 2.0 * x.get(i, j) };
                crate::linalg::axpy(c, self.slab(i, j), &mut out);
            }
        }
        out
    }
}

pub fn compute_nabla_hu(obj: &dyn Objective, w: &[f64], u: &[Vec<f64>]) -> Result<NablaHU> {
    if u.iter().any(|c| !crate::linalg::all_finite(c)) {
        return Err(Error::NonFinite("basis columns"));
    }
    let k = u.len();
    let mut slabs = Vec::with_capacity(crate::linalg::svec_len(k));
    for i in 0..k {
        for j in i..k {
            slabs.push(obj.third_bilinear(w, &u[i], &u[j]));
        }
    }
    Ok(NablaHU { k, slabs })
}

/// `∇P_U[z]_ij = Σ_q u_iq u_jq z_q` for a per-coordinate change `z` of the diagonal of `P`.
fn nabla_p(u: &[Vec<f64>], z: &[f64]) -> SymMatrix {
    SymMatrix::from_fn(u.len(), |i, j| u[i].iter().zip(&u[j]).zip(z).map(|((a, b), c)| a * b * c).sum())
}

/// `diag(P U X Uᵀ P)`
fn lifted_diag(u: &[Vec<f64>], p: &[f64], x: &SymMatrix) -> Vec<f64> {
    let k = u.len();
    (0..p.len())
        .map(|q| {
            let mut s = 0.0;
            for i in 0..k {
                for j in 0..k {
                    s += u[i][q] * x.get(i, j) * u[j][q];
                }
            }
            p[q] * p[q] * s
        })
        .collect()
}

/// `α_U` and `β_U` for the preconditioned template:
///
/// `α_U = ∇H_U[P⁻¹g] + 2∇P_U[γ(T(g) − ν)] + 2∂_t P_U`
/// `β_U[X] = ½∇H_U[P⁻¹∇H_Uᵀ[X]] + 4γ∇P_U[∇²T_PU[X]]`
///
/// with `∇²T_PU[X] = 2 diag(PUXUᵀP)` summed into state coordinates. For
/// `β₂ = 0` both are divided by `γ` and only the `T` terms survive.
pub fn assemble_alpha_beta(
    m: &MethodSpec,
    s: &OptimizerState,
    u: &[Vec<f64>],
    g: &[f64],
    nabla: &NablaHU,
    ablate_curvature: bool,
) -> Result<SdcpProblem> {
    let d = g.len();
    if u.is_empty() {
        return Err(Error::InvalidParam("empty critical basis".into()));
    }
    let p = m.precond(s, d);
    let dp = m.dp_dnu(s, d);
    let gamma = m.gamma();
    let instant = gamma.is_infinite();
    let drift: Vec<f64> = m.target(g).iter().zip(&s.nu).map(|(t, n)| t - n).collect();
    let drift_c = m.expand_state(&drift, d);
    let dp_drift: Vec<f64> = dp.iter().zip(&drift_c).map(|(a, b)| a * b).collect();
    let alpha = if instant {
        nabla_p(u, &dp_drift).scaled(2.0)
    } else {
        let pinv_g: Vec<f64> = g.iter().zip(&p).map(|(a, b)| a / b).collect();
        let mut a = nabla.apply(&pinv_g);
        if m.is_adaptive() {
            a = a.add(&nabla_p(u, &dp_drift).scaled(2.0 * gamma));
            let dt = m.dp_dt(s, d);
            if dt.iter().any(|&v| v != 0.0) {
                a = a.add(&nabla_p(u, &dt).scaled(2.0));
            }
        }
        a
    };
    let beta = |x: &SymMatrix| -> SymMatrix {
        let mut out = SymMatrix::zeros(u.len());
        if !instant && !ablate_curvature {
            let adj = nabla.adjoint(x);
            let v: Vec<f64> = adj.iter().zip(&p).map(|(a, b)| a / b).collect();
            out = nabla.apply(&v).scaled(0.5);
        }
        if m.is_adaptive() {
            let hess: Vec<f64> = m.to_state(&lifted_diag(u, &p, x)).iter().map(|v| 2.0 * v).collect();
            let z: Vec<f64> = dp.iter().zip(m.expand_state(&hess, d)).map(|(a, b)| a * b).collect();
            let c = if instant { 4.0 } else { 4.0 * gamma };
            out = out.add(&nabla_p(u, &z).scaled(c));
        }
        out
    };
    SdcpProblem::from_operator(alpha, beta)
}

fn terminated_by(fs: &mut FlowState, seff: f64, limit: f64) -> bool {
    if seff >= limit {
        fs.terminated = Some(format!("effective sharpness {seff:.3} reached {limit}"));
        true
    } else {
        false
    }
}

/// One stable-flow Euler substep: `w ← w − hP⁻¹∇L`, `ν ← ν + hγ(T − ν)`,
/// with `ν := T` when `β₂ = 0`.
fn stable_substep(m: &MethodSpec, fs: &mut FlowState, obj: &dyn Objective, g: &[f64], h: f64) -> Result<()> {
    let d = g.len();
    let p = m.precond(&fs.state, d);
    for ((wi, gi), pi) in fs.w.iter_mut().zip(g).zip(&p) {
        *wi -= h * gi / pi;
    }
    if m.is_adaptive() {
        if m.gamma().is_infinite() {
            fs.state.nu = m.target(&obj.grad(&fs.w));
        } else {
            let gamma = m.gamma();
            let tgt = m.target(g);
            for (n, t) in fs.state.nu.iter_mut().zip(&tgt) {
                *n += h * gamma * (t - *n);
            }
        }
    }
    fs.state.t += h;
    fs.time += h;
    Ok(())
}

fn log_substep(fs: &mut FlowState, entry: SubstepLog) {
    fs.diag.substeps += 1;
    fs.diag.max_eff_sharpness = fs.diag.max_eff_sharpness.max(entry.eff_sharpness);
    fs.diag.log.push(entry);
}

/// Euler integration of the stable flow, re-choosing the substep count
/// `max(4, ⌈2 S^eff⌉)` at the start of every unit of time.
pub fn stable_flow_advance(
    m: &MethodSpec,
    fs: &mut FlowState,
    obj: &dyn Objective,
    duration: f64,
    opts: &FlowOptions,
) -> Result<()> {
    fs.diag.log.clear();
    let mut remaining = duration;
    while remaining > 1e-12 && fs.terminated.is_none() {
        let chunk = remaining.min(1.0);
        let warm = fs.warm();
        let basis = critical_basis(m, &fs.w, &fs.state, obj, &opts.basis(), warm.as_deref())?;
        let seff = basis.eff_sharpness();
        fs.basis = Some(basis);
        if terminated_by(fs, seff, opts.terminate_at) {
            break;
        }
        let n = ((4.0_f64).max((2.0 * seff).ceil()) * chunk).ceil().max(1.0) as usize;
        let h = chunk / n as f64;
        for _ in 0..n {
            let g = obj.grad(&fs.w);
            let before = obj.loss(&fs.w);
            let pg = pgrad(m, &fs.state, &g);
            stable_substep(m, fs, obj, &g, h)?;
            check_divergence(obj, &fs.w)?;
            let after = obj.loss(&fs.w);
            log_substep(
                fs,
                SubstepLog {
                    eps: h,
                    loss_before: before,
                    loss_after: after,
                    gradnorm_sq: dot(&g, &g),
                    precond_gradnorm_sq: pg,
                    k: 0,
                    eff_sharpness: seff,
                    trace_x: 0.0,
                },
            );
        }
        remaining -= chunk;
    }
    fs.x = SymMatrix::zeros(0);
    Ok(())
}

fn pgrad(m: &MethodSpec, s: &OptimizerState, g: &[f64]) -> f64 {
    let p = m.precond(s, g.len());
    g.iter().zip(&p).map(|(a, b)| a * a / b).sum()
}

/// DCP time-stepping of the central flow. Each substep refreshes the
/// critical basis, solves `X = SDCP(2I − D + εα_U, εβ_U)` and takes
///
/// `w ← w − εP⁻¹[∇L + ½∇H_Uᵀ[X]]`, `ν ← ν + εγ[T − ν + 4 diag(PUXUᵀP)]`.
///
/// With no unstable eigenvalue the substep is exactly a stable-flow substep.
pub fn central_flow_advance(
    m: &MethodSpec,
    fs: &mut FlowState,
    obj: &dyn Objective,
    duration: f64,
    opts: &FlowOptions,
) -> Result<()> {
    if m.is_adaptive() && m.gamma().is_infinite() {
        return Err(Error::InvalidParam("central flow needs beta2 > 0".into()));
    }
    if !(opts.eps > 0.0) || !(opts.tau > 0.0) {
        return Err(Error::InvalidParam("eps and tau must be positive".into()));
    }
    fs.diag.log.clear();
    let n = (duration / opts.eps).round() as usize;
    if n == 0 {
        return Ok(());
    }
    let h = duration / n as f64;
    for _ in 0..n {
        if fs.terminated.is_some() {
            break;
        }
        central_substep(m, fs, obj, h, opts, true)?;
    }
    Ok(())
}

/// One central-flow substep of length `h`. With `update_nu` false the state
/// is left for the caller to set.
pub(crate) fn central_substep(
    m: &MethodSpec,
    fs: &mut FlowState,
    obj: &dyn Objective,
    h: f64,
    opts: &FlowOptions,
    update_nu: bool,
) -> Result<()> {
    let d = fs.w.len();
    let warm = fs.warm();
    let prev_k = fs.basis.as_ref().map(|b| b.k_unstable);
    let basis = critical_basis(m, &fs.w, &fs.state, obj, &opts.basis(), warm.as_deref())?;
    let seff = basis.eff_sharpness();
    let k = basis.k_unstable;
    if prev_k.is_some_and(|pk| pk != k) {
        fs.diag.breakpoints += 1;
    }
    fs.basis = Some(basis);
    if terminated_by(fs, seff, opts.terminate_at) {
        return Ok(());
    }
    let g = obj.grad(&fs.w);
    let before = obj.loss(&fs.w);
    let pg = pgrad(m, &fs.state, &g);
    if k == 0 {
        fs.x = SymMatrix::zeros(0);
        if update_nu {
            stable_substep(m, fs, obj, &g, h)?;
        } else {
            let p = m.precond(&fs.state, d);
            for ((wi, gi), pi) in fs.w.iter_mut().zip(&g).zip(&p) {
                *wi -= h * gi / pi;
            }
            fs.state.t += h;
            fs.time += h;
        }
    } else {
        let basis = fs.basis.as_ref().unwrap();
        let u = basis.unstable().to_vec();
        let dvals = basis.d[..k].to_vec();
        let nabla = compute_nabla_hu(obj, &fs.w, &u)?;
        let prob = assemble_alpha_beta(m, &fs.state, &u, &g, &nabla, opts.ablate_curvature)?;
        let c = SymMatrix::from_diag(&dvals.iter().map(|v| 2.0 - v).collect::<Vec<_>>()).add(&prob.alpha.scaled(h));
        let mut beta = prob.beta.clone();
        beta.data.iter_mut().for_each(|v| *v *= h);
        let sub = SdcpProblem::new(c, beta)?;
        let sol = solve_sdcp(&sub, &opts.sdcp)?;
        fs.diag.max_asymmetry = fs.diag.max_asymmetry.max(prob.asymmetry);
        if !sol.converged {
            fs.diag.sdcp_unconverged += 1;
        }
        if sol.regularized {
            fs.diag.sdcp_regularized += 1;
        }
        let x = sol.x;
        let p = m.precond(&fs.state, d);
        let mut force = g.clone();
        if !opts.ablate_curvature {
            crate::linalg::axpy(0.5, &nabla.adjoint(&x), &mut force);
        }
        let dnu = if m.is_adaptive() && update_nu {
            let gamma = m.gamma();
            let lifted = m.to_state(&lifted_diag(&u, &p, &x));
            let tgt = m.target(&g);
            Some(
                tgt.iter()
                    .zip(&fs.state.nu)
                    .zip(&lifted)
                    .map(|((t, n), l)| gamma * (t - n + 4.0 * l))
                    .collect::<Vec<f64>>(),
            )
        } else {
            None
        };
        for ((wi, fi), pi) in fs.w.iter_mut().zip(&force).zip(&p) {
            *wi -= h * fi / pi;
        }
        if let Some(dnu) = dnu {
            for (n, dn) in fs.state.nu.iter_mut().zip(&dnu) {
                *n += h * dn;
            }
        }
        fs.state.t += h;
        fs.time += h;
        fs.x = x;
    }
    check_divergence(obj, &fs.w)?;
    let after = obj.loss(&fs.w);
    let trace_x = fs.x.trace();
    log_substep(
        fs,
        SubstepLog {
            eps: h,
            loss_before: before,
            loss_after: after,
            gradnorm_sq: dot(&g, &g),
            precond_gradnorm_sq: pg,
            k,
            eff_sharpness: seff,
            trace_x,
        },
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objective::{make_eos_toy, make_quadratic, EosToyParams};
    use crate::optimizers::{make_gd, make_scalar_rmsprop};

    #[test]
    fn nabla_hu_on_toy_and_quadratic() {
        let t = make_eos_toy(EosToyParams::single(0.01, 300.0)).unwrap();
        let n = compute_nabla_hu(&t, &[0.0, 200.0], &[vec![1.0, 0.0]]).unwrap();
        assert_eq!(n.slab(0, 0), &[0.0, 1.0]);
        let q = make_quadratic(SymMatrix::from_diag(&[1.0, 3.0]), vec![0.0, 0.0]).unwrap();
        let n = compute_nabla_hu(&q, &[1.0, 1.0], &[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert!(n.slabs.iter().all(|s| s.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn gd_alpha_beta_at_toy_eos() {
        let t = make_eos_toy(EosToyParams::single(0.01, 300.0)).unwrap();
        let m = make_gd(0.01).unwrap();
        let w = [0.0, 200.0];
        let s = m.init_state(&[0.0, 0.0]);
        let u = vec![vec![0.1, 0.0]];
        let nabla = compute_nabla_hu(&t, &w, &u).unwrap();
        let p = assemble_alpha_beta(&m, &s, &u, &t.grad(&w), &nabla, false).unwrap();
        // orthonormal-basis values scaled by η and η²
        assert!((p.alpha.get(0, 0) - 0.01 * -1e-2).abs() < 1e-18);
        assert!((p.beta.get(0, 0) - 1e-4 * 5e-3).abs() < 1e-18);
        assert!((-p.alpha.get(0, 0) / p.beta.get(0, 0) * 0.01 - 2.0).abs() < 1e-12);
    }

    #[test]
    fn stable_flow_duration_zero_is_identity() {
        let q = make_quadratic(SymMatrix::from_diag(&[1.0, 3.0]), vec![0.0, 0.0]).unwrap();
        let m = make_gd(0.1).unwrap();
        let mut fs = FlowState::new(vec![1.0, 1.0], m.init_state(&[1.0, 3.0]));
        stable_flow_advance(&m, &mut fs, &q, 0.0, &FlowOptions::default()).unwrap();
        assert_eq!(fs.w, vec![1.0, 1.0]);
        central_flow_advance(&m, &mut fs, &q, 0.0, &FlowOptions::default()).unwrap();
        assert_eq!(fs.w, vec![1.0, 1.0]);
    }

    #[test]
    fn ngd_stable_flow_snaps_nu() {
        let t = make_eos_toy(EosToyParams::single(0.01, 300.0)).unwrap();
        let m = make_scalar_rmsprop(0.01, 0.0, false).unwrap();
        let w = vec![0.5, 100.0];
        let mut fs = FlowState::new(w.clone(), OptimizerState { nu: vec![1.0], t: 0.0 });
        stable_flow_advance(&m, &mut fs, &t, 1.0, &FlowOptions::default()).unwrap();
        let g = t.grad(&fs.w);
        assert_eq!(fs.state.nu[0], dot(&g, &g));
    }

    #[test]
    fn central_flow_rejects_instant_ema() {
        let t = make_eos_toy(EosToyParams::single(0.01, 300.0)).unwrap();
        let m = make_scalar_rmsprop(0.01, 0.0, false).unwrap();
        let mut fs = FlowState::new(vec![0.5, 100.0], OptimizerState { nu: vec![1.0], t: 0.0 });
        assert!(central_flow_advance(&m, &mut fs, &t, 1.0, &FlowOptions::default()).is_err());
    }

    #[test]
    fn leaving_eos_follows_gradient_flow() {
        // y* below 2/η: α > 0 at the boundary so X = 0
        let t = make_eos_toy(EosToyParams::single(0.01, 150.0)).unwrap();
        let m = make_gd(0.01).unwrap();
        let mut fs = FlowState::new(vec![0.0, 200.0], m.init_state(&[0.0, 0.0]));
        central_flow_advance(&m, &mut fs, &t, 0.25, &FlowOptions::default()).unwrap();
        assert_eq!(fs.x.trace(), 0.0);
        assert!(fs.w[1] < 200.0);
        for _ in 0..50 {
            central_flow_advance(&m, &mut fs, &t, 1.0, &FlowOptions::default()).unwrap();
        }
        assert!(fs.w[1] < 200.0 && fs.w[1] > 150.0);
        assert!(fs.diag.log.iter().all(|l| l.k == 0 || l.trace_x == 0.0));
    }
}
