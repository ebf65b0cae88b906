//! End-to-end acceptance criteria. Every criterion prints one PASS/FAIL line;
//! the test fails if any criterion does.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use centralflows::flows::{
    assemble_alpha_beta, central_flow_advance, compute_nabla_hu, igr_gd_step, igr_saturation, stable_flow_advance,
    FlowOptions, FlowState,
};
use centralflows::harness::{
    invariant_checks, random_sdcp, run_check, run_experiment, ExperimentConfig, FlowKind, ObjectiveKind,
};
use centralflows::linalg::{dot, lobpcg_topk, norm, sym_eig_dense, LobpcgOptions, SymMatrix};
use centralflows::objective::{
    make_eos_toy, make_mlp, make_quadratic, sharpness, DerivativeMode, EosToy, EosToyParams, MlpSpec, Objective,
};
use centralflows::optimizers::{
    critical_basis, make_gd, make_scalar_rmsprop, step_discrete, BasisOptions, MethodKind, MethodSpec, OptimizerState,
};
use centralflows::predictions::{gaussian_smooth, second_order_midpoints};
use centralflows::sdcp::{kkt_residuals, solve_sdcp, SdcpOptions};
use centralflows::stationary::{min_trace_preconditioner, stationary_nu, verify_stationary_kkt, StationaryOptions};

type Outcome = (bool, String);
type Criterion<'a> = (&'static str, Box<dyn Fn() -> Outcome + 'a>);

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn shipped(name: &str) -> ExperimentConfig {
    ExperimentConfig::from_path(&configs_dir().join(name)).expect("shipped config parses")
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(f64::MIN_POSITIVE)
}

fn gauss(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// Top eigenpair of the toy block `[[y, x], [x, a]]` and `∇S = (2v₀v₁, v₀²)`.
fn toy_top(a: f64, x: f64, y: f64) -> (f64, [f64; 2]) {
    let lam = 0.5 * ((y + a) + ((y - a).powi(2) + 4.0 * x * x).sqrt());
    let (v0, v1) = (lam - a, x);
    let n = (v0 * v0 + v1 * v1).sqrt();
    let (v0, v1) = (v0 / n, v1 / n);
    (lam, [2.0 * v0 * v1, v0 * v0])
}

/// `σ²` in Euclidean units along the single unstable direction, through the
/// general basis, `∇H_U`, `α/β` assembly and SDCP path.
fn general_sigma2(m: &MethodSpec, s: &OptimizerState, obj: &dyn Objective, w: &[f64]) -> Option<(usize, f64)> {
    let b = critical_basis(m, w, s, obj, &BasisOptions::default(), None).ok()?;
    let u = b.unstable().to_vec();
    if u.is_empty() {
        return Some((0, 0.0));
    }
    let nabla = compute_nabla_hu(obj, w, &u).ok()?;
    let p = assemble_alpha_beta(m, s, &u, &obj.grad(w), &nabla, false).ok()?;
    let x = solve_sdcp(&p, &SdcpOptions::default()).ok()?.x;
    let trace: f64 = (0..u.len()).map(|i| (0..u.len()).map(|j| x.get(i, j) * dot(&u[i], &u[j])).sum::<f64>()).sum();
    Some((u.len(), trace))
}

fn c1_sdcp() -> Outcome {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut worst_kkt, mut worst_1d, mut worst_restart) = (0.0_f64, 0.0_f64, 0.0_f64);
    for i in 0..500 {
        let k = 1 + i % 5;
        let p = random_sdcp(&mut rng, k).unwrap();
        let sol = solve_sdcp(&p, &SdcpOptions::default()).unwrap();
        worst_kkt = worst_kkt.max(kkt_residuals(&p, &sol.x).unwrap().max());
        if k == 1 {
            let (a, b) = (p.alpha.get(0, 0), p.beta.get(0, 0));
            let want = (-a / b).max(0.0);
            let err = if want == 0.0 { sol.x.get(0, 0).abs() } else { rel(sol.x.get(0, 0), want) };
            worst_1d = worst_1d.max(err);
        } else {
            let r1 = solve_sdcp(&p, &SdcpOptions { seed: Some(2 * i as u64), ..Default::default() }).unwrap();
            let r2 = solve_sdcp(&p, &SdcpOptions { seed: Some(2 * i as u64 + 1), ..Default::default() }).unwrap();
            let diff = r1.x.sub(&r2.x).frobenius() / r1.x.frobenius().max(1.0);
            worst_restart = worst_restart.max(diff);
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    (
        worst_kkt <= 1e-8 && worst_1d <= 1e-12 && worst_restart <= 1e-8 && secs < 30.0,
        format!("KKT {worst_kkt:.1e}, k=1 vs closed form {worst_1d:.1e}, restarts {worst_restart:.1e}, {secs:.2}s"),
    )
}

fn c2_closed_form_sigma() -> Outcome {
    let (a, y_star) = (0.01, 300.0);
    let toy = make_eos_toy(EosToyParams::single(a, y_star)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut worst, mut sharpening, mut zero_ok, mut k_ok) = (0.0_f64, 0, true, true);
    for _ in 0..100 {
        let w = [rng.random_range(-0.5..0.5), rng.random_range(50.0..290.0)];
        let (s, grad_s) = toy_top(a, w[0], w[1]);
        let m = make_gd(2.0 / s).unwrap();
        let state = m.init_state(&[0.0, 0.0]);
        let Some((k, sigma2)) = general_sigma2(&m, &state, &toy, &w) else { return (false, "solver error".into()) };
        k_ok &= k == 1;
        let g = toy.grad(&w);
        let push = -dot(&grad_s, &g);
        if push > 0.0 {
            sharpening += 1;
            worst = worst.max(rel(sigma2, 2.0 * push / dot(&grad_s, &grad_s)));
        } else {
            zero_ok &= sigma2 == 0.0;
        }
    }
    (
        k_ok && zero_ok && worst <= 1e-8 && sharpening > 0 && sharpening < 100,
        format!(
            "{sharpening} sharpening points, max rel error {worst:.1e}; Σ = 0 at the other {}: {zero_ok}",
            100 - sharpening
        ),
    )
}

fn c3_sharpness_lock() -> Outcome {
    let t0 = Instant::now();
    let toy = make_eos_toy(EosToyParams::single(0.01, 300.0)).unwrap();
    let m = make_gd(0.01).unwrap();
    let opts = FlowOptions { eps: 0.25, ..Default::default() };
    let mut fs = FlowState::new(vec![0.5, 198.0], m.init_state(&[0.0, 0.0]));
    let mut s = Vec::new();
    for _ in 0..1500 {
        central_flow_advance(&m, &mut fs, &toy, 1.0, &opts).unwrap();
        s.push(sharpness(&toy, &fs.w).unwrap().value);
    }
    let Some(first) = s.iter().position(|&v| (v - 200.0).abs() <= 0.2) else {
        return (false, "never reached 200".into());
    };
    let held = s[first..].iter().take_while(|&&v| (v - 200.0).abs() <= 0.2).count();
    let secs = t0.elapsed().as_secs_f64();
    (
        held >= 1000 && secs < 10.0,
        format!("reached 200 at t={}, held within 0.2 for {held} steps, {secs:.2}s", first + 1),
    )
}

fn c4_props() -> Outcome {
    let mut lines = Vec::new();
    let mut ok = true;
    let mut runs = 0;
    let mut entries: Vec<_> = std::fs::read_dir(configs_dir()).unwrap().map(|e| e.unwrap().path()).collect();
    entries.sort();
    for path in entries.iter().filter(|p| p.extension().is_some_and(|e| e == "toml")) {
        let mut cfg = ExperimentConfig::from_path(path).unwrap();
        if cfg.objective.kind == ObjectiveKind::Mlp {
            cfg.run.steps = cfg.run.steps.min(60);
        }
        if cfg.method.kind != MethodKind::Gd || !cfg.run.flows.contains(&FlowKind::Central) {
            continue;
        }
        let e = run_experiment(&cfg).unwrap();
        runs += 1;
        let st = e.substep_stats[&FlowKind::Central];
        ok &= invariant_checks(&e).iter().all(|o| o.passed) && st.substeps > 0;
        lines.push(format!(
            "{} ({} substeps, ΔL⁺ {:.0e}, excess {:.0e})",
            cfg.output.name, st.substeps, st.max_loss_increase, st.max_slowdown_excess
        ));
    }
    (ok && runs >= 2, lines.join("; "))
}

fn c5_stable_reduction() -> Outcome {
    let q = make_quadratic(SymMatrix::from_diag(&[1.0, 3.0]), vec![1.0, 1.0]).unwrap();
    let m = make_gd(0.1).unwrap();
    let opts = FlowOptions::default();
    let start = vec![2.0, -1.0];
    let mut central = FlowState::new(start.clone(), m.init_state(&q.grad(&start)));
    let mut stable = central.clone();
    let (mut worst, mut sigma_zero) = (0.0_f64, true);
    for _ in 0..500 {
        central_flow_advance(&m, &mut central, &q, 1.0, &opts).unwrap();
        stable_flow_advance(&m, &mut stable, &q, 1.0, &opts).unwrap();
        worst = worst.max(norm(&centralflows::linalg::sub(&central.w, &stable.w)));
        sigma_zero &= central.x.trace() == 0.0 && central.diag.log.iter().all(|l| l.k == 0);
    }
    (worst <= 1e-12 && sigma_zero, format!("max ‖w_central − w_stable‖ {worst:.1e}, Σ ≡ 0: {sigma_zero}"))
}

fn toy_gd_run() -> centralflows::harness::Experiment {
    run_experiment(&shipped("toy_gd.toml")).unwrap()
}

fn c6_tracking(e: &centralflows::harness::Experiment) -> Outcome {
    let last = e.records.last().unwrap();
    let (dc, ds) = (last.dist_central.unwrap(), last.dist_stable.unwrap());
    let Some(win) = e.eos_window(200) else { return (false, "no EOS window".into()) };
    let loss: Vec<f64> = e.records.iter().map(|r| r.loss_discrete).collect();
    let smooth = gaussian_smooth(&loss, e.config.run.smoothing_bandwidth).unwrap();
    let worst = win.clone().map(|i| rel(smooth[i], e.records[i].loss_bar_pred.unwrap())).fold(0.0, f64::max);
    (
        e.records.len() == 2001 && dc <= 0.1 * ds && worst <= 0.2,
        format!(
            "final distance {dc:.3} vs gradient flow {ds:.3}; smoothed loss vs L̄ max rel {worst:.3} over rows {win:?}"
        ),
    )
}

fn c7_covariance(e: &centralflows::harness::Experiment) -> Outcome {
    let Some(win) = e.eos_window(200) else { return (false, "no EOS window".into()) };
    let disp: Vec<f64> = e
        .records
        .iter()
        .map(|r| r.whitened_disp.as_ref().and_then(|v| v.first().copied()).unwrap_or(f64::NAN))
        .collect();
    let smooth = gaussian_smooth(&disp, e.config.run.smoothing_bandwidth).unwrap();
    let mut worst = 0.0_f64;
    for i in win.clone() {
        let Some(lam) = e.records[i].sigma_eigs.as_ref().and_then(|v| v.first().copied()) else {
            return (false, format!("row {i} has no Λ"));
        };
        worst = worst.max(rel(smooth[i], lam));
    }
    (worst <= 0.25, format!("smoothed displacement vs Λ₁ max rel {worst:.3} over rows {win:?}"))
}

fn c8_scalar_rmsprop() -> Outcome {
    let e = run_experiment(&shipped("toy_scalar_rmsprop.toml")).unwrap();
    let Some(win) = e.eos_window(200) else { return (false, "no EOS window".into()) };
    let es: Vec<f64> = e.records.iter().map(|r| r.eff_sharpness_discrete_midpoint.unwrap_or(f64::NAN)).collect();
    let smooth = gaussian_smooth(&es, e.config.run.smoothing_bandwidth).unwrap();
    let (lo, hi) =
        win.clone().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), i| (l.min(smooth[i]), h.max(smooth[i])));
    let central: Vec<f64> = win
        .clone()
        .filter(|&i| e.records[i].k_unstable.unwrap_or(0) >= 1)
        .filter_map(|i| e.records[i].eff_sharpness_central)
        .collect();
    let dev = central.iter().fold(0.0_f64, |m, s| m.max((s - 2.0).abs()));
    (
        lo >= 1.9 && hi <= 2.1 && !central.is_empty() && dev <= 1e-8,
        format!(
            "discrete smoothed ηS/√ν in [{lo:.5}, {hi:.5}]; central |ηS/√ν − 2| ≤ {dev:.1e} on {} EOS rows",
            central.len()
        ),
    )
}

fn c9_ngd() -> Outcome {
    let (a, eta) = (0.01, 1.0);
    let toy = make_eos_toy(EosToyParams::single(a, 300.0)).unwrap();
    let m = make_scalar_rmsprop(eta, 0.0, false).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst = 0.0_f64;
    for _ in 0..50 {
        let w = [rng.random_range(-0.1..0.1), rng.random_range(100.0..290.0)];
        let (s, _) = toy_top(a, w[0], w[1]);
        let state = OptimizerState { nu: vec![eta * eta * s * s / 4.0], t: 0.0 };
        let Some((1, sigma2)) = general_sigma2(&m, &state, &toy, &w) else {
            return (false, "k ≠ 1 or solver error".into());
        };
        let g = toy.grad(&w);
        worst = worst.max(rel(sigma2, eta * eta / 4.0 - dot(&g, &g) / (s * s)));
    }
    (worst <= 1e-10, format!("max rel error vs η²/4 − ‖∇L‖²/S²: {worst:.1e}"))
}

/// `tr Σ(0)` and `dS/dt|₀` for Scalar RMSProp started at effective sharpness 2.
fn prop3_point(obj: &EosToy, w: &[f64], eta: f64, beta2: f64) -> Option<(usize, f64, f64)> {
    let m = make_scalar_rmsprop(eta, beta2, false).ok()?;
    let s = sharpness(obj, w).ok()?.value;
    let state = OptimizerState { nu: vec![eta * eta * s * s / 4.0], t: 0.0 };
    let b = critical_basis(&m, w, &state, obj, &BasisOptions::default(), None).ok()?;
    let u = b.unstable().to_vec();
    let nabla = compute_nabla_hu(obj, w, &u).ok()?;
    let g = obj.grad(w);
    let x = solve_sdcp(&assemble_alpha_beta(&m, &state, &u, &g, &nabla, false).ok()?, &SdcpOptions::default()).ok()?.x;
    let k = u.len();
    let trace: f64 = (0..k).map(|i| (0..k).map(|j| x.get(i, j) * dot(&u[i], &u[j])).sum::<f64>()).sum();
    let push = nabla.adjoint(&x);
    let p = m.precond(&state, w.len());
    let dw: Vec<f64> = (0..w.len()).map(|q| -(g[q] + 0.5 * push[q]) / p[q]).collect();
    // derivative of the top eigenvalue of a tied cluster: λ_max of the projected derivative
    let ut = &b.u_tilde[..k];
    let dh = SymMatrix::from_fn(k, |i, j| dot(&obj.third_bilinear(w, &ut[i], &ut[j]), &dw));
    Some((k, trace, dh.max_eig().ok()?))
}

fn c10_prop3() -> Outcome {
    let etas = [0.002, 0.004, 0.006, 0.008, 0.01, 0.015, 0.02, 0.03];
    let cases = [
        ("k=1", make_eos_toy(EosToyParams::single(0.01, 300.0)).unwrap(), vec![0.001, 200.0], 1),
        (
            "k=2",
            make_eos_toy(EosToyParams::two_block(0.01, 300.0, 0.02, 280.0)).unwrap(),
            vec![0.0, 200.0, 0.0, 200.0],
            2,
        ),
    ];
    let mut ok = true;
    let mut lines = Vec::new();
    for (name, toy, w, want_k) in &cases {
        let mut pts = Vec::new();
        for &eta in &etas {
            match prop3_point(toy, w, eta, 0.9) {
                Some(p) => pts.push(p),
                None => return (false, format!("{name}: solver error at η={eta}")),
            }
        }
        let k_ok = pts.iter().all(|p| p.0 == *want_k);
        let tr_up = pts.windows(2).all(|p| p[1].1 >= p[0].1 * (1.0 - 1e-12));
        let ds_down = pts.windows(2).all(|p| p[1].2 <= p[0].2 + 1e-12 * p[0].2.abs().max(1.0));
        // small η lets ν outrun the gradient, so Σ may start at zero
        let active = pts[7].1 > 0.0 && pts[7].1 > pts[0].1;
        ok &= k_ok && tr_up && ds_down && active;
        lines.push(format!("{name}: tr Σ {:.3e}→{:.3e}, dS/dt {:.3e}→{:.3e}", pts[0].1, pts[7].1, pts[0].2, pts[7].2));
    }
    (ok, lines.join("; "))
}

fn random_pd(rng: &mut ChaCha8Rng, d: usize) -> SymMatrix {
    let b: Vec<Vec<f64>> = (0..d).map(|_| gauss(rng, d)).collect();
    SymMatrix::from_fn(d, |i, j| dot(&b[i], &b[j]) / d as f64 + if i == j { 0.5 } else { 0.0 })
}

/// Minimizes `p₁ + p₂ + (g₁²/p₁ + g₂²/p₂)/η²` over `2P ⪰ H` on successively
/// finer 400×400 log grids.
fn grid_oracle(h: &SymMatrix, g: &[f64], eta: f64) -> f64 {
    let f = |p1: f64, p2: f64| -> f64 {
        let (a, b) = (2.0 * p1 - h.get(0, 0), 2.0 * p2 - h.get(1, 1));
        if a < 0.0 || b < 0.0 || a * b < h.get(0, 1).powi(2) {
            return f64::INFINITY;
        }
        p1 + p2 + (g[0] * g[0] / p1 + g[1] * g[1] / p2) / (eta * eta)
    };
    let (mut lo, mut hi) = ([1e-3_f64, 1e-3_f64], [1e3_f64, 1e3_f64]);
    let mut best = (f64::INFINITY, 1.0, 1.0);
    for _ in 0..12 {
        let n = 400;
        let at = |i: usize, d: usize| (lo[d].ln() + (hi[d].ln() - lo[d].ln()) * i as f64 / (n - 1) as f64).exp();
        for i in 0..n {
            for j in 0..n {
                let (p1, p2) = (at(i, 0), at(j, 1));
                let v = f(p1, p2);
                if v < best.0 {
                    best = (v, p1, p2);
                }
            }
        }
        let step = [(hi[0] / lo[0]).ln() / (n - 1) as f64, (hi[1] / lo[1]).ln() / (n - 1) as f64];
        lo = [best.1 * (-4.0 * step[0]).exp(), best.2 * (-4.0 * step[1]).exp()];
        hi = [best.1 * (4.0 * step[0]).exp(), best.2 * (4.0 * step[1]).exp()];
    }
    best.0
}

fn c11_stationary() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let opts = StationaryOptions { nsteps: 20_000, tol_nu: 1e-13, ..Default::default() };
    let mut lines = Vec::new();
    let mut ok = true;

    let h6 = random_pd(&mut rng, 6);
    let q6 = make_quadratic(h6.clone(), gauss(&mut rng, 6)).unwrap();
    let w6 = vec![0.0; 6];
    let eta = 0.5;
    let r = stationary_nu(&q6, &w6, eta, 6, &opts, None).unwrap();
    let kkt = verify_stationary_kkt(&q6, &w6, eta, &r).unwrap().max();
    ok &= r.ok() && kkt <= 1e-6;
    lines.push(format!("d=6 KKT {kkt:.1e}"));

    let mlp = make_mlp(&MlpSpec::default()).unwrap();
    let wm = mlp.initial_params();
    let r = stationary_nu(&mlp, &wm, 0.1, 6, &opts, None).unwrap();
    let kkt = verify_stationary_kkt(&mlp, &wm, 0.1, &r).unwrap().max();
    ok &= r.ok() && kkt <= 1e-6;
    lines.push(format!("MLP d={} KKT {kkt:.1e} ({} iterations)", mlp.dim(), r.iterations));

    let h2 = SymMatrix::from_rows(&[vec![3.0, 1.5], vec![1.5, 2.0]]).unwrap();
    let g2 = [0.3, -0.2];
    let q2 = make_quadratic(h2.clone(), g2.iter().map(|v| -v).collect()).unwrap();
    let eta2 = 0.5;
    let r = stationary_nu(&q2, &[0.0, 0.0], eta2, 2, &opts, None).unwrap();
    let p = &r.p_bar;
    let alg = p[0] + p[1] + (g2[0] * g2[0] / p[0] + g2[1] * g2[1] / p[1]) / (eta2 * eta2);
    let grid = grid_oracle(&h2, &g2, eta2);
    let gap = rel(alg, grid);
    ok &= r.ok() && gap <= 1e-4;
    lines.push(format!("d=2 objective {alg:.8} vs grid {grid:.8} (rel {gap:.1e})"));

    let a = min_trace_preconditioner(&q6, &w6, 0.5, 6, &opts).unwrap();
    let b = min_trace_preconditioner(&q6, &w6, 3.0, 6, &opts).unwrap();
    let dual = rel(a.trace_p(), a.z_dot_h(&q6, &w6));
    let inv = a.p_bar.iter().zip(&b.p_bar).map(|(x, y)| rel(*y, *x)).fold(0.0, f64::max);
    ok &= a.ok() && b.ok() && dual <= 1e-6 && inv <= 1e-10;
    lines.push(format!("min-trace tr P̂ vs ⟨Ẑ,H⟩ rel {dual:.1e}, η-invariance {inv:.1e}"));
    (ok, lines.join("; "))
}

/// Hands out `∇L = (√t)` on the `t`-th call, so the squared gradient seen by
/// step `t` is `t`.
struct Clock(AtomicU64);

impl Objective for Clock {
    fn dim(&self) -> usize {
        1
    }
    fn loss(&self, _: &[f64]) -> f64 {
        0.0
    }
    fn grad(&self, _: &[f64]) -> Vec<f64> {
        vec![(self.0.fetch_add(1, Ordering::SeqCst) as f64 + 1.0).sqrt()]
    }
    fn hvp(&self, _: &[f64], _: &[f64]) -> Vec<f64> {
        vec![0.0]
    }
    fn third_bilinear(&self, _: &[f64], _: &[f64], _: &[f64]) -> Vec<f64> {
        vec![0.0]
    }
    fn derivative_mode(&self) -> DerivativeMode {
        DerivativeMode::Analytic
    }
}

fn c12_ema_lag() -> Outcome {
    let mut worst = 0.0_f64;
    let mut lines = Vec::new();
    for beta2 in [0.5, 0.9, 0.99] {
        let lag = beta2 / (1.0 - beta2);
        let m = make_scalar_rmsprop(1.0, beta2, false).unwrap();
        let clock = Clock(AtomicU64::new(0));
        let (mut w, mut s) = (vec![0.0], OptimizerState { nu: vec![0.0], t: 0.0 });
        for _ in 0..4000 {
            (w, s) = step_discrete(&m, &w, &s, &clock).unwrap();
        }
        let discrete = (4000.0 - s.nu[0]) / lag - 1.0;

        // the flow's EMA on a constant target, against its exponential solution
        let c = make_quadratic(SymMatrix::from_diag(&[0.0]), vec![-2.0]).unwrap();
        let mut fs = FlowState::new(vec![0.0], OptimizerState { nu: vec![1.0], t: 0.0 });
        stable_flow_advance(&m, &mut fs, &c, 1.0 / m.gamma(), &FlowOptions::default()).unwrap();
        let flow = rel(fs.state.nu[0] - 4.0, -3.0 * (-1.0_f64).exp());

        // ν' = γ(t − ν) has steady state ν = t − 1/γ
        let continuous = rel(1.0 / m.gamma(), lag);
        worst = worst.max(discrete.abs()).max(continuous);
        lines
            .push(format!("β₂={beta2}: discrete {discrete:.1e}, 1/γ {continuous:.1e}, flow EMA vs e^(−γt) {flow:.1e}"));
        if flow > 0.3 {
            return (false, lines.join("; "));
        }
    }
    (worst <= 1e-6, lines.join("; "))
}

fn c13_lobpcg() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let d = 200;
    let a = SymMatrix::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
    let mut a = a.add(&a.scaled(1.0)).scaled(0.5);
    a.symmetrize();
    let dense = sym_eig_dense(&a).unwrap();
    // residual 1e-6·|λ| already puts eigenvalues within ~1e-9
    let opts = LobpcgOptions { tol: 1e-6, max_iter: 2000, ..Default::default() };
    let cold = lobpcg_topk(&|v: &[f64]| a.matvec(v), d, 5, None, &opts).unwrap();
    let err = (0..5).map(|i| (cold.pairs.values[i] - dense.values[i]).abs()).fold(0.0, f64::max);
    let e = SymMatrix::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
    let mut b = a.add(&e.add(&e).scaled(0.5e-3));
    b.symmetrize();
    let cold_b = lobpcg_topk(&|v: &[f64]| b.matvec(v), d, 5, None, &opts).unwrap();
    let warm_b = lobpcg_topk(&|v: &[f64]| b.matvec(v), d, 5, Some(&cold.block), &opts).unwrap();
    (
        err <= 1e-8 && cold.converged && warm_b.converged && 2 * warm_b.iterations <= cold_b.iterations,
        format!("top-5 error {err:.1e}; perturbed: cold {} iterations, warm {}", cold_b.iterations, warm_b.iterations),
    )
}

fn c14_mlp_derivatives() -> Outcome {
    let mlp = make_mlp(&MlpSpec::default()).unwrap();
    let d = mlp.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let (mut eg, mut eh, mut et) = (0.0_f64, 0.0_f64, 0.0_f64);
    let rich = |f: &dyn Fn(f64) -> Vec<f64>, h: f64| -> Vec<f64> {
        // fourth-order central difference
        let (p1, m1, p2, m2) = (f(h), f(-h), f(2.0 * h), f(-2.0 * h));
        (0..p1.len()).map(|i| (8.0 * (p1[i] - m1[i]) - (p2[i] - m2[i])) / (12.0 * h)).collect()
    };
    let dist = |a: &[f64], b: &[f64]| norm(&centralflows::linalg::sub(a, b)) / norm(b).max(1e-300);
    for _ in 0..20 {
        let w: Vec<f64> = mlp.initial_params().iter().zip(gauss(&mut rng, d)).map(|(a, n)| a + 0.3 * n).collect();
        let at = |z: &[f64], t: f64| -> Vec<f64> { w.iter().zip(z).map(|(a, b)| a + t * b).collect() };
        let fd_grad: Vec<f64> = (0..d)
            .map(|i| {
                let mut e = vec![0.0; d];
                e[i] = 1.0;
                rich(&|t| vec![mlp.loss(&at(&e, t))], 1e-3)[0]
            })
            .collect();
        eg = eg.max(dist(&mlp.grad(&w), &fd_grad));
        let v = gauss(&mut rng, d);
        let fd_hvp = rich(&|t| mlp.grad(&at(&v, t)), 1e-3);
        eh = eh.max(dist(&mlp.hvp(&w, &v), &fd_hvp));
        let (u, z) = (gauss(&mut rng, d), gauss(&mut rng, d));
        let fd_third = rich(
            &|t| {
                let wz = at(&z, t);
                let hv = rich(&|r| mlp.grad(&wz.iter().zip(&v).map(|(a, b)| a + r * b).collect::<Vec<_>>()), 1e-3);
                vec![dot(&u, &hv)]
            },
            1e-2,
        )[0];
        et = et.max(rel(dot(&mlp.third_bilinear(&w, &u, &v), &z), fd_third));
    }
    (eg <= 1e-6 && eh <= 1e-5 && et <= 1e-3, format!("max rel error: gradient {eg:.1e}, hvp {eh:.1e}, third {et:.1e}"))
}

fn c15_igr() -> Outcome {
    let (eta, tau) = (0.01, 0.04);
    let target = igr_saturation(eta, tau);
    let toy = make_eos_toy(EosToyParams::single(0.003, 300.0)).unwrap();
    let mut w = vec![0.5, 74.0];
    let mut traj = vec![w.clone()];
    for _ in 0..8000 {
        w = igr_gd_step(&w, eta, tau, &toy).unwrap();
        traj.push(w.clone());
    }
    let mids = second_order_midpoints(&traj).unwrap();
    let late = &mids[mids.len() / 2..];
    let mean = late.iter().map(|m| sharpness(&toy, m).unwrap().value).sum::<f64>() / late.len() as f64;
    (
        rel(mean, 78.08) <= 0.02,
        format!("mean midpoint sharpness over the last 4000 steps {mean:.3}, threshold {target:.4}"),
    )
}

fn c16_determinism() -> Outcome {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ra = run_check(0, a.path()).unwrap();
    let rb = run_check(0, b.path()).unwrap();
    let mut names: Vec<_> = std::fs::read_dir(a.path())
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .filter(|n| n.to_string_lossy().ends_with(".csv"))
        .collect();
    names.sort();
    let same = !names.is_empty()
        && names.iter().all(|n| std::fs::read(a.path().join(n)).unwrap() == std::fs::read(b.path().join(n)).unwrap());
    (same && ra.all_passed() && rb.all_passed(), format!("{} CSV files identical: {same}", names.len()))
}

#[test]
fn acceptance() {
    let toy = toy_gd_run();
    let criteria: Vec<Criterion> = vec![
        ("SDCP certification", Box::new(c1_sdcp)),
        ("closed-form σ²", Box::new(c2_closed_form_sigma)),
        ("sharpness lock", Box::new(c3_sharpness_lock)),
        ("loss monotone and slowdown bound", Box::new(c4_props)),
        ("stable-regime reduction", Box::new(c5_stable_reduction)),
        ("tracking and L̄", Box::new(|| c6_tracking(&toy))),
        ("oscillation covariance", Box::new(|| c7_covariance(&toy))),
        ("Scalar RMSProp equilibration", Box::new(c8_scalar_rmsprop)),
        ("NGD limit", Box::new(c9_ngd)),
        ("monotonicity in η", Box::new(c10_prop3)),
        ("stationary preconditioner", Box::new(c11_stationary)),
        ("EMA time lag", Box::new(c12_ema_lag)),
        ("eigensolver", Box::new(c13_lobpcg)),
        ("derivative oracles", Box::new(c14_mlp_derivatives)),
        ("IGR saturation", Box::new(c15_igr)),
        ("determinism", Box::new(c16_determinism)),
    ];
    let mut failed = Vec::new();
    for (i, (name, run)) in criteria.iter().enumerate() {
        let (pass, detail) = run();
        println!("{} {:>2} {name}: {detail}", if pass { "PASS" } else { "FAIL" }, i + 1);
        if !pass {
            failed.push(i + 1);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
