use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::config::ExperimentConfig;
use super::run::{run_experiment, Experiment};
use crate::error::Result;
use crate::harness::FlowKind;
use crate::linalg::{svec_len, Mat, SymMatrix};
use crate::sdcp::{kkt_residuals, solve_sdcp, SdcpOptions, SdcpProblem};

const TOY_GD: &str = r#"
[objective]
kind = "eos_toy"
start = [4.472, 199.5]
[objective.toy]
a = 0.1
y_star = 300.0
[method]
kind = "gd"
eta = 0.01
[run]
steps = 2000
flows = ["stable", "central"]
[output]
name = "toy_gd"
"#;

const QUAD_GD: &str = r#"
[objective]
kind = "quadratic"
start = [2.0, -1.0]
[objective.quadratic]
h = [[1.0, 0.0], [0.0, 3.0]]
b = [1.0, 1.0]
[method]
kind = "gd"
eta = 0.1
[run]
steps = 500
flows = ["stable", "central", "igr"]
[output]
name = "quad_gd_stable"
"#;

const TOY_SCALAR: &str = r#"
[objective]
kind = "eos_toy"
start = [0.5, 199.5]
[objective.toy]
a = 0.1
y_star = 300.0
[method]
kind = "scalar_rmsprop"
eta = 1.0
beta2 = 0.99
[run]
steps = 2000
flows = ["central"]
[output]
name = "toy_scalar_rmsprop"
"#;

const TOY_RMSPROP: &str = r#"
[objective]
kind = "eos_toy"
start = [0.5, 198.0]
[objective.toy]
a = 0.001
y_star = 300.0
[method]
kind = "rmsprop"
eta = 1.0
beta2 = 0.99
[run]
steps = 300
flows = ["central", "stationary"]
nu_cosine = true
[output]
name = "toy_rmsprop"
"#;

/// The configs `check` runs, with `run.seed` set to `seed`.
pub fn canonical_configs(seed: u64) -> Vec<ExperimentConfig> {
    [TOY_GD, QUAD_GD, TOY_SCALAR, TOY_RMSPROP]
        .iter()
        .map(|text| {
            let mut c: ExperimentConfig = text.parse().expect("built-in config");
            c.run.seed = seed;
            c
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Default)]
pub struct CheckReport {
    pub outcomes: Vec<CheckOutcome>,
}

impl CheckReport {
    pub fn all_passed(&self) -> bool {
        !self.outcomes.is_empty() && self.outcomes.iter().all(|o| o.passed)
    }

    fn push(&mut self, name: &str, passed: bool, detail: String) {
        self.outcomes.push(CheckOutcome { name: name.to_string(), passed, detail });
    }
}

fn col(e: &Experiment, f: impl Fn(&super::TrajectoryRecord) -> Option<f64>) -> Vec<f64> {
    e.records.iter().filter_map(f).collect()
}

/// Random SDCP with `β` positive definite on `Sym(k)`.
pub fn random_sdcp(rng: &mut ChaCha8Rng, k: usize) -> Result<SdcpProblem> {
    let alpha = SymMatrix::from_fn(k, |_, _| rng.sample(StandardNormal));
    let m = svec_len(k);
    let mut b = Mat::zeros(m, m);
    for i in 0..m {
        for j in 0..m {
            b.set(i, j, rng.sample(StandardNormal));
        }
    }
    let mut beta = Mat::zeros(m, m);
    for i in 0..m {
        for j in 0..m {
            let s: f64 = (0..m).map(|l| b.get(i, l) * b.get(j, l)).sum();
            beta.set(i, j, s / m as f64 + if i == j { 0.1 } else { 0.0 });
        }
    }
    SdcpProblem::new(alpha, beta)
}

/// Checks that hold on any run: every row finite unless flagged, and for
/// GD the central flow never increases the loss nor outpaces the stable flow.
pub fn invariant_checks(e: &Experiment) -> Vec<CheckOutcome> {
    let name = &e.config.output.name;
    let finite = e.records.iter().all(|r| r.is_finite() || !r.flags.is_empty());
    let mut out = vec![CheckOutcome {
        name: format!("{name}: finite rows"),
        passed: finite,
        detail: format!("{} rows", e.records.len()),
    }];
    if e.config.method.kind == crate::optimizers::MethodKind::Gd {
        if let Some(st) = e.substep_stats.get(&FlowKind::Central) {
            out.push(CheckOutcome {
                name: format!("{name}: central flow descends no faster than the stable flow"),
                passed: st.max_loss_increase <= 1e-10 && st.max_slowdown_excess <= 1e-6,
                detail: format!(
                    "max loss increase {:e}, max slowdown excess {:e}",
                    st.max_loss_increase, st.max_slowdown_excess
                ),
            });
        }
    }
    out
}

/// Runs the canonical configs, writes their CSV/JSON into `out`, and checks
/// the invariants that must hold on every run.
pub fn run_check(seed: u64, out: &Path) -> Result<CheckReport> {
    let mut report = CheckReport::default();
    let mut runs = Vec::new();
    for c in canonical_configs(seed) {
        let e = run_experiment(&c)?;
        e.emit(out)?;
        report.outcomes.extend(invariant_checks(&e));
        runs.push(e);
    }

    let toy = &runs[0];
    let last = toy.records.last().unwrap();
    let (dc, ds) = (last.dist_central.unwrap_or(f64::INFINITY), last.dist_stable.unwrap_or(0.0));
    report.push(
        "toy_gd: central flow tracks GD",
        dc <= 0.1 * ds,
        format!("final distance {dc:.4e} vs gradient flow {ds:.4e}"),
    );
    let lock = toy.eos_window(0).map(|r| {
        toy.records[r].iter().filter_map(|x| x.eff_sharpness_central).fold(0.0_f64, |m, s| m.max((s - 2.0).abs()))
    });
    report.push(
        "toy_gd: effective sharpness held at 2",
        lock.is_some_and(|v| v <= 0.01),
        format!("max |ηS − 2| over EOS {lock:?}"),
    );

    let quad = &runs[1];
    let worst = quad
        .records
        .iter()
        .map(|r| (r.loss_central.unwrap_or(f64::NAN) - r.loss_stable.unwrap_or(f64::NAN)).abs())
        .fold(0.0_f64, f64::max);
    let zero = quad.records.iter().all(|r| r.k_unstable.unwrap_or(0) == 0);
    report.push(
        "quad_gd_stable: central equals stable flow",
        worst <= 1e-12 && zero,
        format!("max loss gap {worst:e}"),
    );

    let scalar = &runs[2];
    let es: Vec<f64> = scalar
        .eos_window(200)
        .map(|r| {
            scalar.records[r]
                .iter()
                .filter(|x| x.k_unstable.unwrap_or(0) >= 1)
                .filter_map(|x| x.eff_sharpness_central)
                .collect()
        })
        .unwrap_or_default();
    let dev = es.iter().fold(0.0_f64, |m, s| m.max((s - 2.0).abs()));
    report.push(
        "toy_scalar_rmsprop: η/√ν = 2/S at EOS",
        !es.is_empty() && dev <= 1e-8,
        format!("{} EOS rows, max deviation {dev:e}", es.len()),
    );

    let rms = &runs[3];
    let cos = col(rms, |r| r.nu_cos_stationary);
    let ok = !cos.is_empty() && cos.iter().all(|c| (-1.0 - 1e-12..=1.0 + 1e-12).contains(c));
    report.push("toy_rmsprop: ν cosine reported", ok, format!("{} rows", cos.len()));

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0_f64;
    for i in 0..100 {
        let p = random_sdcp(&mut rng, 1 + i % 5)?;
        let sol = solve_sdcp(&p, &SdcpOptions::default())?;
        worst = worst.max(kkt_residuals(&p, &sol.x)?.max());
    }
    report.push("sdcp: random problems certified", worst <= 1e-8, format!("worst KKT residual {worst:e}"));
    Ok(report)
}
