use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::config::{ExperimentConfig, FlowKind};
use super::record::{write_csv, TrajectoryRecord, SCHEMA_VERSION};
use crate::error::{Error, Result};
use crate::flows::{central_flow_advance, igr_flow_advance, stable_flow_advance, FlowOptions, FlowState};
use crate::linalg::{dot, lobpcg_topk, norm, sub, CLUSTER_GAP};
use crate::objective::Objective;
use crate::optimizers::{effective_sharpness, step_discrete, MethodSpec, OptimizerState, DIVERGENCE_LIMIT};
use crate::predictions::{
    measure_whitened_displacement, oscillation_variances, predicted_grad_norm_sq, predicted_loss_bar, SMOOTH_TRUNCATION,
};
use crate::stationary::{nu_cosine, stationary_flow_advance, stationary_nu, StationaryOptions, DEFAULT_RANK};

/// Per-substep checks along the central flow: the loss never increases and
/// never drops faster than the stable flow would make it.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct SubstepStats {
    pub substeps: usize,
    /// `max (L_after − L_before) / max(1, |L_before|)`.
    pub max_loss_increase: f64,
    /// `max (−ΔL/ε − ⟨∇L, P⁻¹∇L⟩) / max(⟨∇L, P⁻¹∇L⟩, floor)`, where the floor
    /// covers rounding in `ΔL`.
    pub max_slowdown_excess: f64,
    pub sdcp_unconverged: usize,
    pub sdcp_regularized: usize,
    pub breakpoints: usize,
    pub stationary_failures: usize,
}

impl SubstepStats {
    fn absorb(&mut self, fs: &FlowState) {
        for e in &fs.diag.log {
            self.substeps += 1;
            let inc = (e.loss_after - e.loss_before) / e.loss_before.abs().max(1.0);
            self.max_loss_increase = self.max_loss_increase.max(inc);
            // loss differences near a minimizer are pure rounding
            let floor = 1e-8 * e.loss_before.abs().max(1.0) / e.eps;
            let rate = -(e.loss_after - e.loss_before) / e.eps;
            let excess = (rate - e.precond_gradnorm_sq) / e.precond_gradnorm_sq.max(floor);
            self.max_slowdown_excess = self.max_slowdown_excess.max(excess);
        }
    }

    fn finish(&mut self, fs: &FlowState) {
        self.sdcp_unconverged = fs.diag.sdcp_unconverged;
        self.sdcp_regularized = fs.diag.sdcp_regularized;
        self.breakpoints = fs.diag.breakpoints;
        self.stationary_failures = fs.diag.stationary_failures;
    }
}

/// Output of [`run_experiment`].
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub records: Vec<TrajectoryRecord>,
    /// Why the discrete run stopped early, if it did.
    pub termination: Option<String>,
    /// Flow stops and divergences, in order.
    pub flow_events: Vec<String>,
    pub substep_stats: BTreeMap<FlowKind, SubstepStats>,
    /// Discrete iterate and flow weights after the last row.
    pub final_weights: BTreeMap<String, Vec<f64>>,
}

struct Slot {
    kind: FlowKind,
    fs: FlowState,
    active: bool,
    stats: SubstepStats,
}

fn advance(
    slot: &mut Slot,
    m: &MethodSpec,
    obj: &dyn Objective,
    fopts: &FlowOptions,
    sopts: &StationaryOptions,
) -> Result<()> {
    let fs = &mut slot.fs;
    match slot.kind {
        FlowKind::Stable => stable_flow_advance(m, fs, obj, 1.0, fopts)?,
        FlowKind::Central => central_flow_advance(m, fs, obj, 1.0, fopts)?,
        FlowKind::Stationary => stationary_flow_advance(m, fs, obj, 1.0, fopts, sopts)?,
        FlowKind::Igr => {
            fs.w = igr_flow_advance(&fs.w, m.eta, obj, 1.0)?;
            fs.time += 1.0;
        }
    }
    slot.stats.absorb(fs);
    Ok(())
}

/// Adaptive runs with `β₂` below this get a warning event.
pub const LOW_BETA2: f64 = 0.5;

/// Warm start, then per step: one row of metrics, one discrete step and a
/// unit-time advance of every enabled flow. A flow that stops or diverges
/// is dropped with a flag; a diverging discrete run ends the output.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Experiment> {
    cfg.validate()?;
    let m = cfg.method_spec()?;
    let (obj, w0) = cfg.build_objective()?;
    let obj = obj.as_ref();
    let fopts = cfg.flow_options();
    let sopts = cfg.stationary_options();
    let d = w0.len();

    let mut w = w0;
    let mut s = m.init_state(&obj.grad(&w));
    let mut prev: Option<Vec<f64>> = None;
    for _ in 0..cfg.run.warm_start_steps {
        let (wn, sn) = step_discrete(&m, &w, &s, obj)?;
        prev = Some(std::mem::replace(&mut w, wn));
        s = sn;
    }
    let step0 = cfg.run.warm_start_steps as u64;

    let mut kinds = cfg.run.flows.clone();
    kinds.sort();
    kinds.dedup();
    let mut slots: Vec<Slot> = kinds
        .iter()
        .map(|&kind| Slot {
            kind,
            fs: FlowState::new(w.clone(), s.clone()),
            active: true,
            stats: SubstepStats::default(),
        })
        .collect();

    let mut records: Vec<TrajectoryRecord> = Vec::with_capacity(cfg.run.steps + 1);
    let mut flow_events = Vec::new();
    if m.is_adaptive() && m.beta2 < LOW_BETA2 && kinds.contains(&FlowKind::Central) {
        flow_events.push(format!("beta2 = {} is below {LOW_BETA2}; the central flow may not track this run", m.beta2));
    }
    let mut pending: Vec<String> = Vec::new();
    let mut termination = None;
    let mut top_warm: Option<Vec<Vec<f64>>> = None;
    let mut nu_factor: Option<Vec<Vec<f64>>> = None;

    for t in 0..=cfg.run.steps {
        let mut rec = row(&m, obj, &w, &slots, &fopts, &mut top_warm)?;
        rec.step = step0 + t as u64;
        rec.time = rec.step as f64;
        if cfg.run.nu_cosine {
            if let Some(c) = slots.iter().find(|x| x.kind == FlowKind::Central && x.active) {
                let rank = c.fs.basis.as_ref().map_or(DEFAULT_RANK, |b| b.n_tracked + 2).clamp(1, d);
                let bar = stationary_nu(obj, &c.fs.w, m.eta, rank, &sopts, nu_factor.as_deref())?;
                rec.nu_cos_stationary = Some(nu_cosine(&c.fs.state.nu, &bar.nu_bar));
                nu_factor = Some(bar.d_factor);
            }
        }
        for f in pending.drain(..) {
            rec.push_flag(&f);
        }
        records.push(rec);
        if t == cfg.run.steps {
            break;
        }

        let (wn, sn) = match step_discrete(&m, &w, &s, obj) {
            Ok(x) => x,
            Err(Error::Diverged(msg)) => {
                let reason = format!("discrete run diverged after step {}: {msg}", step0 + t as u64);
                records.last_mut().unwrap().push_flag("discrete:diverged");
                termination = Some(reason);
                break;
            }
            Err(e) => return Err(e),
        };
        if let Some(wp) = &prev {
            let mid: Vec<f64> = w.iter().zip(wp).zip(&wn).map(|((b, a), c)| 0.25 * (2.0 * b + a + c)).collect();
            let es = effective_sharpness(&m, &mid, &sn, obj)?;
            records.last_mut().unwrap().eff_sharpness_discrete_midpoint = Some(es);
        }
        prev = Some(std::mem::replace(&mut w, wn));
        s = sn;

        for slot in slots.iter_mut().filter(|x| x.active) {
            let name = slot.kind.name();
            match advance(slot, &m, obj, &fopts, &sopts) {
                Ok(()) => {
                    if let Some(why) = &slot.fs.terminated {
                        slot.active = false;
                        pending.push(format!("{name}:terminated"));
                        flow_events.push(format!("{name} flow stopped at t = {}: {why}", slot.fs.time));
                    }
                }
                Err(Error::Diverged(msg)) => {
                    slot.active = false;
                    pending.push(format!("{name}:diverged"));
                    flow_events.push(format!("{name} flow diverged near t = {}: {msg}", slot.fs.time));
                }
                Err(e) => return Err(e),
            }
        }
    }
    if let Some(last) = records.last_mut() {
        for f in pending.drain(..) {
            last.push_flag(&f);
        }
    }

    let mut final_weights = BTreeMap::new();
    final_weights.insert("discrete".to_string(), w);
    let mut substep_stats = BTreeMap::new();
    for mut slot in slots {
        slot.stats.finish(&slot.fs);
        substep_stats.insert(slot.kind, slot.stats);
        final_weights.insert(slot.kind.name().to_string(), slot.fs.w);
    }
    Ok(Experiment { config: cfg.clone(), records, termination, flow_events, substep_stats, final_weights })
}

fn row(
    m: &MethodSpec,
    obj: &dyn Objective,
    w: &[f64],
    slots: &[Slot],
    fopts: &FlowOptions,
    top_warm: &mut Option<Vec<Vec<f64>>>,
) -> Result<TrajectoryRecord> {
    let d = w.len();
    let g = obj.grad(w);
    let mut rec = TrajectoryRecord {
        time: 0.0,
        loss_discrete: obj.loss(w),
        gradnorm_sq_discrete: dot(&g, &g),
        ..Default::default()
    };
    let top = lobpcg_topk(&|v: &[f64]| obj.hvp(w, v), d, d.min(3), top_warm.as_deref(), &fopts.eig)?;
    rec.sharpness_discrete = top.pairs.values[0];
    rec.hessian_top_eigs = top.pairs.values.clone();
    *top_warm = Some(top.block.clone());

    for slot in slots.iter().filter(|x| x.active) {
        let fs = &slot.fs;
        let loss = obj.loss(&fs.w);
        let dist = norm(&sub(w, &fs.w));
        match slot.kind {
            FlowKind::Stable => {
                rec.loss_stable = Some(loss);
                rec.dist_stable = Some(dist);
                rec.eff_sharpness_stable = Some(effective_sharpness(m, &fs.w, &fs.state, obj)?);
            }
            FlowKind::Central => {
                rec.loss_central = Some(loss);
                rec.dist_central = Some(dist);
                rec.eff_sharpness_central = Some(effective_sharpness(m, &fs.w, &fs.state, obj)?);
                let gc = obj.grad(&fs.w);
                let gn = dot(&gc, &gc);
                rec.gradnorm_sq_central = Some(gn);
                rec.loss_bar_pred = Some(predicted_loss_bar(loss, &fs.x));
                rec.gradnorm_sq_pred = Some(gn);
                rec.sigma_eigs = Some(Vec::new());
                rec.whitened_disp = Some(Vec::new());
                if let Some(b) = &fs.basis {
                    rec.k_unstable = Some(b.k_unstable);
                    if fs.x.dim() > 0 && fs.x.dim() == b.k_unstable {
                        let u = b.unstable();
                        rec.gradnorm_sq_pred = Some(predicted_grad_norm_sq(gn, &b.p, u, &fs.x));
                        let model = oscillation_variances(&b.p, u, &fs.x)?;
                        rec.whitened_disp = Some(measure_whitened_displacement(w, &fs.w, &b.p, &model.directions));
                        rec.sigma_eigs = Some(model.lambda);
                    }
                }
            }
            FlowKind::Stationary => {
                rec.loss_stationary = Some(loss);
                rec.dist_stationary = Some(dist);
            }
            FlowKind::Igr => {
                rec.loss_igr = Some(loss);
                rec.dist_igr = Some(dist);
            }
        }
    }
    Ok(rec)
}

/// Resolved configuration and library constants written next to the CSV.
#[derive(Debug, Clone, Serialize)]
pub struct Metadata<'a> {
    pub schema_version: u32,
    pub crate_version: &'static str,
    pub config: &'a ExperimentConfig,
    pub constants: Constants,
    pub rows: usize,
    pub termination: &'a Option<String>,
    pub flow_events: &'a [String],
    pub substep_stats: BTreeMap<&'static str, SubstepStats>,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct Constants {
    pub eps: f64,
    pub tau: f64,
    pub track_thresh: f64,
    pub terminate_at: f64,
    pub smoothing_bandwidth: f64,
    pub smoothing_truncation: f64,
    pub cluster_gap: f64,
    pub divergence_limit: f64,
    pub sdcp_tol: f64,
    pub eig_tol: f64,
    pub stationary_nsteps: usize,
    pub stationary_tol_nu: f64,
}

impl Experiment {
    pub fn metadata(&self) -> Metadata<'_> {
        let c = &self.config;
        Metadata {
            schema_version: SCHEMA_VERSION,
            crate_version: env!("CARGO_PKG_VERSION"),
            config: c,
            constants: Constants {
                eps: c.flow.eps,
                tau: c.flow.tau,
                track_thresh: c.flow.track_thresh,
                terminate_at: c.flow.terminate_at,
                smoothing_bandwidth: c.run.smoothing_bandwidth,
                smoothing_truncation: SMOOTH_TRUNCATION,
                cluster_gap: CLUSTER_GAP,
                divergence_limit: DIVERGENCE_LIMIT,
                sdcp_tol: c.flow.sdcp.tol,
                eig_tol: c.flow.eig.tol,
                stationary_nsteps: c.stationary.nsteps,
                stationary_tol_nu: c.stationary.tol_nu,
            },
            rows: self.records.len(),
            termination: &self.termination,
            flow_events: &self.flow_events,
            substep_stats: self.substep_stats.iter().map(|(k, v)| (k.name(), *v)).collect(),
        }
    }

    /// Writes `<dir>/<name>.csv` and `<dir>/<name>.json`, returning both paths.
    pub fn emit(&self, dir: &Path) -> Result<(PathBuf, PathBuf)> {
        if self.records.is_empty() {
            return Err(Error::Csv("no records to write".into()));
        }
        std::fs::create_dir_all(dir)?;
        let csv_path = dir.join(format!("{}.csv", self.config.output.name));
        let json_path = dir.join(format!("{}.json", self.config.output.name));
        write_csv(std::io::BufWriter::new(std::fs::File::create(&csv_path)?), &self.records)?;
        let json = serde_json::to_string_pretty(&self.metadata()).map_err(|e| Error::Csv(e.to_string()))?;
        std::fs::write(&json_path, json + "\n")?;
        Ok((csv_path, json_path))
    }

    /// Rows from the first with an unstable direction, shrunk by `margin`
    /// on both sides.
    pub fn eos_window(&self, margin: usize) -> Option<std::ops::Range<usize>> {
        let first = self.records.iter().position(|r| r.k_unstable.is_some_and(|k| k >= 1))?;
        let (lo, hi) = (first + margin, self.records.len().saturating_sub(margin));
        (lo < hi).then_some(lo..hi)
    }
}

/// State after `warm_start_steps` discrete steps, shared by every process.
pub fn warm_start(cfg: &ExperimentConfig) -> Result<(Vec<f64>, OptimizerState)> {
    let m = cfg.method_spec()?;
    let (obj, mut w) = cfg.build_objective()?;
    let mut s = m.init_state(&obj.grad(&w));
    for _ in 0..cfg.run.warm_start_steps {
        let (wn, sn) = step_discrete(&m, &w, &s, obj.as_ref())?;
        w = wn;
        s = sn;
    }
    Ok((w, s))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(extra: &str) -> ExperimentConfig {
        format!(
            r#"
[objective]
kind = "quadratic"
start = [2.0, -1.0]
[objective.quadratic]
h = [[1.0, 0.0], [0.0, 3.0]]
b = [1.0, 1.0]
[method]
kind = "gd"
eta = 0.1
{extra}"#
        )
        .parse()
        .unwrap()
    }

    #[test]
    fn stable_regime_flows_agree() {
        let e = run_experiment(&cfg("[run]\nsteps = 50\nflows = [\"central\", \"stable\", \"igr\"]\n")).unwrap();
        assert_eq!(e.records.len(), 51);
        for r in &e.records {
            assert!(r.is_finite());
            assert_eq!(r.loss_central, r.loss_stable);
            assert!(r.k_unstable.unwrap_or(0) == 0);
            assert_eq!(r.sigma_eigs.as_deref(), Some(&[][..]));
            assert_eq!(r.loss_bar_pred, r.loss_central);
        }
        assert!(e.records[0].eff_sharpness_discrete_midpoint.is_none());
        assert!(e.records[1].eff_sharpness_discrete_midpoint.is_some());
        assert!(e.records[50].eff_sharpness_discrete_midpoint.is_none());
        assert_eq!(e.final_weights["central"], e.final_weights["stable"]);
    }

    #[test]
    fn warm_start_shared() {
        let c = cfg("[run]\nsteps = 3\nwarm_start_steps = 4\n");
        let (w, _) = warm_start(&c).unwrap();
        let e = run_experiment(&c).unwrap();
        assert_eq!(e.records[0].step, 4);
        assert_eq!(e.records[0].dist_central, Some(0.0));
        assert_eq!(e.records[0].dist_stable, Some(0.0));
        let (obj, _) = c.build_objective().unwrap();
        assert_eq!(e.records[0].loss_discrete, obj.loss(&w));
        assert!(e.records[0].eff_sharpness_discrete_midpoint.is_some());
    }

    #[test]
    fn low_beta2_is_reported() {
        let mut c = cfg("[run]\nsteps = 2\n");
        c.method.kind = crate::optimizers::MethodKind::ScalarRmsprop;
        c.method.beta2 = 0.3;
        let e = run_experiment(&c).unwrap();
        assert!(e.flow_events.iter().any(|f| f.starts_with("beta2 = 0.3 ")));
        c.method.beta2 = 0.9;
        assert!(run_experiment(&c).unwrap().flow_events.is_empty());
    }

    #[test]
    fn divergence_truncates() {
        let mut c = cfg("[run]\nsteps = 2000\nflows = []\n");
        c.method.eta = 1.0;
        let e = run_experiment(&c).unwrap();
        assert!(e.termination.is_some());
        assert!(e.records.len() < 2001);
        assert!(e.records.last().unwrap().flags.contains("discrete:diverged"));
    }

    #[test]
    fn emit_writes_both_files() {
        let dir = tempfile::tempdir().unwrap();
        let e = run_experiment(&cfg("[run]\nsteps = 5\n")).unwrap();
        let (c, j) = e.emit(dir.path()).unwrap();
        let back = super::super::record::read_csv(std::fs::File::open(c).unwrap()).unwrap();
        assert_eq!(back, e.records);
        let meta: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(j).unwrap()).unwrap();
        assert_eq!(meta["constants"]["eps"], 0.25);
        assert_eq!(meta["constants"]["tau"], 0.05);
        assert_eq!(meta["schema_version"], 1);
    }
}
