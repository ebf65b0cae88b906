//! RMSProp's stationary EMA `ν̄(w)`: the unique `ν` with `dν/dt = 0` at
//! fixed weights, found by the fixed-point iteration on a low-rank factor
//! `D` of the oscillation covariance (`Σ̄ = DDᵀ`).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::flows::{central_substep, FlowOptions, FlowState};
use crate::linalg::{cosine, dot, lobpcg_topk, norm, sym_eig_dense, LobpcgOptions, SymMatrix};
use crate::objective::Objective;
use crate::optimizers::{MethodKind, MethodSpec, Schedule};

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct StationaryOptions {
    /// Columns of `D`. `None` lets the stationary flow use `k_tracked + 2`.
    pub rank: Option<usize>,
    pub nsteps: usize,
    /// Stop once `‖ν − ν_prev‖ / ‖ν‖` falls below this.
    pub tol_nu: f64,
    pub seed: u64,
    /// Slack on the `λ_max(P^{-1/2}HP^{-1/2}) ≤ 2` check.
    pub stability_tol: f64,
}

impl Default for StationaryOptions {
    fn default() -> Self {
        Self { rank: None, nsteps: 5000, tol_nu: 1e-10, seed: 0, stability_tol: 1e-6 }
    }
}

/// Rank used when none is configured and nothing is tracked.
pub const DEFAULT_RANK: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum StationaryFailure {
    MoreStepsNeeded,
    HigherRankNeeded,
}

impl std::fmt::Display for StationaryFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::MoreStepsNeeded => "more steps needed",
            Self::HigherRankNeeded => "higher r needed",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StationaryResult {
    pub nu_bar: Vec<f64>,
    /// Columns of `D`, each of length `d`.
    pub d_factor: Vec<Vec<f64>>,
    /// `√ν̄ / η`.
    pub p_bar: Vec<f64>,
    pub eta: f64,
    pub converged: bool,
    pub stability_ok: bool,
    /// Last relative change in `ν`.
    pub rel_change: f64,
    /// `λ_max(P̄^{-1/2} H P̄^{-1/2})`.
    pub top_eig: f64,
    pub iterations: usize,
    pub failure: Option<StationaryFailure>,
}

impl StationaryResult {
    pub fn ok(&self) -> bool {
        self.converged && self.stability_ok
    }

    /// `diag Σ̄`.
    pub fn sigma_diag(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.nu_bar.len()];
        for c in &self.d_factor {
            for (o, v) in out.iter_mut().zip(c) {
                *o += v * v;
            }
        }
        out
    }

    /// `diag Z` with `Z = (2/η²) Σ̄`, the dual variable of the convex program.
    pub fn z_diag(&self) -> Vec<f64> {
        let c = 2.0 / (self.eta * self.eta);
        self.sigma_diag().iter().map(|v| c * v).collect()
    }

    /// `⟨Z, H⟩`.
    pub fn z_dot_h(&self, obj: &dyn Objective, w: &[f64]) -> f64 {
        let c = 2.0 / (self.eta * self.eta);
        self.d_factor.iter().map(|col| c * dot(col, &obj.hvp(w, col))).sum()
    }

    pub fn trace_p(&self) -> f64 {
        self.p_bar.iter().sum()
    }
}

/// Algorithm 1 at `w`: repeat `ν ← g⊙² + rowsum((HD)⊙²)`,
/// `D ← (η/2) diag(ν^{-1/2}) HD` from a seeded standard-normal `D`, then
/// check stability of `P̄ = diag(√ν/η)`. `warm` replaces the random start;
/// warm columns that have collapsed to zero are redrawn.
pub fn stationary_nu(
    obj: &dyn Objective,
    w: &[f64],
    eta: f64,
    rank: usize,
    opts: &StationaryOptions,
    warm: Option<&[Vec<f64>]>,
) -> Result<StationaryResult> {
    let g = obj.grad(w);
    fixed_point(obj, w, &g, eta, rank, opts, warm)
}

/// Large-`η` limit: the same iteration with `g := 0`, whose `P̂` is the
/// minimum-trace diagonal `P` with `H ⪯ 2P`, and `Ẑ = (2/η²)Σ̄` its dual.
pub fn min_trace_preconditioner(
    obj: &dyn Objective,
    w: &[f64],
    eta: f64,
    rank: usize,
    opts: &StationaryOptions,
) -> Result<StationaryResult> {
    let g = vec![0.0; w.len()];
    fixed_point(obj, w, &g, eta, rank, opts, None)
}

fn fixed_point(
    obj: &dyn Objective,
    w: &[f64],
    g: &[f64],
    eta: f64,
    rank: usize,
    opts: &StationaryOptions,
    warm: Option<&[Vec<f64>]>,
) -> Result<StationaryResult> {
    let d = w.len();
    if rank == 0 {
        return Err(Error::InvalidParam("stationary rank must be at least 1".into()));
    }
    if !(eta > 0.0) || !eta.is_finite() {
        return Err(Error::InvalidParam(format!("learning rate must be positive (got {eta})")));
    }
    if g.len() != d || obj.dim() != d {
        return Err(Error::Shape("stationary_nu: gradient length".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let fresh = |rng: &mut ChaCha8Rng| (0..d).map(|_| rng.sample(StandardNormal)).collect::<Vec<f64>>();
    let mut dm: Vec<Vec<f64>> = (0..rank)
        .map(|j| match warm.and_then(|wm| wm.get(j)) {
            Some(c) if c.len() == d && norm(c) > 1e-6 * eta => c.clone(),
            _ => fresh(&mut rng),
        })
        .collect();
    let g2: Vec<f64> = g.iter().map(|v| v * v).collect();
    let mut nu = g2.clone();
    let mut rel_change = f64::INFINITY;
    let mut iterations = 0;
    for i in 0..opts.nsteps {
        let hd: Vec<Vec<f64>> = dm.iter().map(|c| obj.hvp(w, c)).collect();
        let mut next = g2.clone();
        for col in &hd {
            for (n, v) in next.iter_mut().zip(col) {
                *n += v * v;
            }
        }
        if !crate::linalg::all_finite(&next) {
            return Err(Error::NonFinite("stationary ν"));
        }
        let scale: Vec<f64> = next.iter().map(|n| if *n > 0.0 { 0.5 * eta / n.sqrt() } else { 0.0 }).collect();
        dm = hd.iter().map(|col| col.iter().zip(&scale).map(|(v, s)| v * s).collect()).collect();
        iterations = i + 1;
        if i > 0 {
            let diff: f64 = next.iter().zip(&nu).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            let nn = norm(&next);
            rel_change = if nn > 0.0 { diff / nn } else { 0.0 };
        }
        nu = next;
        if rel_change < opts.tol_nu {
            break;
        }
    }
    let p_bar: Vec<f64> = nu.iter().map(|v| v.sqrt() / eta).collect();
    let top_eig = whitened_top(obj, w, &p_bar)?;
    let converged = rel_change < opts.tol_nu;
    let stability_ok = top_eig <= 2.0 * (1.0 + opts.stability_tol);
    let failure = if !converged {
        Some(StationaryFailure::MoreStepsNeeded)
    } else if !stability_ok {
        Some(StationaryFailure::HigherRankNeeded)
    } else {
        None
    };
    Ok(StationaryResult {
        nu_bar: nu,
        d_factor: dm,
        p_bar,
        eta,
        converged,
        stability_ok,
        rel_change,
        top_eig,
        iterations,
        failure,
    })
}

/// `λ_max(P^{-1/2} H P^{-1/2})` over the coordinates with `p > 0`.
fn whitened_top(obj: &dyn Objective, w: &[f64], p: &[f64]) -> Result<f64> {
    let s: Vec<f64> = p.iter().map(|v| if *v > 0.0 { 1.0 / v.sqrt() } else { 0.0 }).collect();
    let apply = |v: &[f64]| {
        let sv: Vec<f64> = v.iter().zip(&s).map(|(a, b)| a * b).collect();
        obj.hvp(w, &sv).iter().zip(&s).map(|(a, b)| a * b).collect::<Vec<f64>>()
    };
    let out = lobpcg_topk(&apply, w.len(), 1, None, &LobpcgOptions { tol: 1e-10, ..Default::default() })?;
    Ok(out.pairs.values[0])
}

/// KKT residuals of the convex program at a stationary result, with
/// `p = √ν̄/η` and `Z = (2/η²)Σ̄`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct StationaryKkt {
    /// `max_i |1 − g_i²/(η²p_i²) − 2Z_ii|`.
    pub stationarity: f64,
    /// `max(0, −λ_min(Z))`.
    pub dual_psd: f64,
    /// `max(0, λ_max(H − 2P)) / max(1, max p)`.
    pub primal_psd: f64,
    /// `|⟨2P − H, Z⟩| / max(1, tr P)`.
    pub complementarity: f64,
}

impl StationaryKkt {
    pub fn max(&self) -> f64 {
        self.stationarity.max(self.dual_psd).max(self.primal_psd).max(self.complementarity)
    }
}

pub fn verify_stationary_kkt(obj: &dyn Objective, w: &[f64], eta: f64, r: &StationaryResult) -> Result<StationaryKkt> {
    let g = obj.grad(w);
    let p = &r.p_bar;
    let z = r.sigma_diag().iter().map(|v| 2.0 * v / (eta * eta)).collect::<Vec<f64>>();
    let mut stationarity = 0.0_f64;
    for i in 0..p.len() {
        if p[i] == 0.0 && g[i] == 0.0 {
            continue;
        }
        let t = 1.0 - g[i] * g[i] / (eta * eta * p[i] * p[i]) - 2.0 * z[i];
        stationarity = stationarity.max(t.abs());
    }
    let cz = 2.0 / (eta * eta);
    let k = r.d_factor.len();
    let gram = SymMatrix::from_fn(k, |i, j| cz * dot(&r.d_factor[i], &r.d_factor[j]));
    let dual_psd = if k == 0 { 0.0 } else { (-sym_eig_dense(&gram)?.values.last().copied().unwrap_or(0.0)).max(0.0) };
    let apply = |v: &[f64]| {
        obj.hvp(w, v).iter().zip(v.iter().zip(p)).map(|(h, (vi, pi))| h - 2.0 * pi * vi).collect::<Vec<f64>>()
    };
    let top = lobpcg_topk(&apply, w.len(), 1, None, &LobpcgOptions { tol: 1e-10, ..Default::default() })?;
    let pmax = p.iter().cloned().fold(1.0, f64::max);
    let primal_psd = top.pairs.values[0].max(0.0) / pmax;
    let comp: f64 = r
        .d_factor
        .iter()
        .map(|c| {
            let hc = obj.hvp(w, c);
            cz * c.iter().zip(&hc).zip(p).map(|((ci, hi), pi)| ci * (2.0 * pi * ci - hi)).sum::<f64>()
        })
        .sum();
    let complementarity = comp.abs() / r.trace_p().max(1.0);
    Ok(StationaryKkt { stationarity, dual_psd, primal_psd, complementarity })
}

/// Cosine similarity between the running EMA and its stationary value.
pub fn nu_cosine(nu: &[f64], nu_bar: &[f64]) -> f64 {
    cosine(nu, nu_bar)
}

fn check_method(m: &MethodSpec) -> Result<()> {
    let plain = m.kind == MethodKind::Rmsprop
        && m.eps_adam == 0.0
        && !m.bias_correction
        && matches!(m.schedule, Schedule::Constant)
        && m.beta2 > 0.0;
    if plain {
        Ok(())
    } else {
        Err(Error::InvalidParam(
            "stationary flow needs plain RMSProp (eps = 0, no bias correction, constant lr, beta2 > 0)".into(),
        ))
    }
}

/// Central-flow substeps with `ν` pinned to `ν̄(w)`, recomputed before every
/// substep. When Algorithm 1 fails the last certified `ν̄` is kept and the
/// failure is counted in the diagnostics.
pub fn stationary_flow_advance(
    m: &MethodSpec,
    fs: &mut FlowState,
    obj: &dyn Objective,
    duration: f64,
    opts: &FlowOptions,
    sopts: &StationaryOptions,
) -> Result<()> {
    check_method(m)?;
    if !(opts.eps > 0.0) {
        return Err(Error::InvalidParam("eps must be positive".into()));
    }
    fs.diag.log.clear();
    let n = (duration / opts.eps).round() as usize;
    if n == 0 {
        return Ok(());
    }
    let h = duration / n as f64;
    let d = fs.w.len();
    for _ in 0..n {
        if fs.terminated.is_some() {
            break;
        }
        let rank =
            sopts.rank.unwrap_or_else(|| fs.basis.as_ref().map_or(DEFAULT_RANK, |b| b.n_tracked + 2)).clamp(1, d);
        let res = stationary_nu(obj, &fs.w, m.eta, rank, sopts, fs.stationary_factor.as_deref())?;
        if res.ok() || fs.stationary_factor.is_none() {
            fs.state.nu = res.nu_bar;
            fs.stationary_factor = Some(res.d_factor);
        }
        if res.failure.is_some() {
            fs.diag.stationary_failures += 1;
        }
        central_substep(m, fs, obj, h, opts, false)?;
    }
    Ok(())
}
