use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flows::FlowOptions;
use crate::linalg::SymMatrix;
use crate::objective::{make_eos_toy, make_mlp, make_quadratic, EosToyParams, MlpSpec, Objective};
use crate::optimizers::{make_gd, make_rmsprop, make_scalar_rmsprop, MethodKind, MethodSpec, Schedule};
use crate::stationary::StationaryOptions;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlowKind {
    Stable,
    Central,
    Stationary,
    Igr,
}

impl FlowKind {
    pub const ALL: [FlowKind; 4] = [FlowKind::Stable, FlowKind::Central, FlowKind::Stationary, FlowKind::Igr];

    pub fn name(self) -> &'static str {
        match self {
            FlowKind::Stable => "stable",
            FlowKind::Central => "central",
            FlowKind::Stationary => "stationary",
            FlowKind::Igr => "igr",
        }
    }
}

impl FromStr for FlowKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FlowKind::ALL
            .into_iter()
            .find(|k| k.name() == s.trim())
            .ok_or_else(|| Error::Config(format!("unknown flow '{s}' (expected stable, central, stationary or igr)")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveKind {
    EosToy,
    Quadratic,
    Mlp,
}

/// `L(w) = ½wᵀHw − bᵀw`, `H` given by rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadraticSpec {
    pub h: Vec<Vec<f64>>,
    pub b: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectiveConfig {
    pub kind: ObjectiveKind,
    /// Initial weights. Defaults to zeros for a quadratic and to the seeded
    /// initialization for the MLP; required for the toy.
    #[serde(default)]
    pub start: Option<Vec<f64>>,
    #[serde(default)]
    pub toy: Option<EosToyParams>,
    #[serde(default)]
    pub quadratic: Option<QuadraticSpec>,
    #[serde(default)]
    pub mlp: Option<MlpSpec>,
}

fn default_beta2() -> f64 {
    0.99
}

fn default_schedule() -> Schedule {
    Schedule::Constant
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodConfig {
    pub kind: MethodKind,
    pub eta: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default)]
    pub eps_adam: f64,
    #[serde(default)]
    pub bias_correction: bool,
    #[serde(default = "default_schedule")]
    pub schedule: Schedule,
}

impl MethodConfig {
    pub fn spec(&self) -> Result<MethodSpec> {
        let m = match self.kind {
            MethodKind::Gd => make_gd(self.eta)?,
            MethodKind::ScalarRmsprop => make_scalar_rmsprop(self.eta, self.beta2, self.bias_correction)?,
            MethodKind::Rmsprop => make_rmsprop(self.eta, self.beta2, self.eps_adam, self.bias_correction)?,
        };
        MethodSpec { schedule: self.schedule, ..m }.validated()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Discrete steps after the warm start; one row is written per step.
    pub steps: usize,
    /// Discrete steps taken before any flow is started.
    pub warm_start_steps: usize,
    pub flows: Vec<FlowKind>,
    /// Gaussian bandwidth (in steps) used by the analysis passes.
    pub smoothing_bandwidth: f64,
    /// Report the cosine between the central flow's `ν` and `ν̄(w)`.
    pub nu_cosine: bool,
    /// Seeds the MLP data and initialization, eigensolver starts and
    /// Algorithm 1.
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            warm_start_steps: 0,
            flows: vec![FlowKind::Stable, FlowKind::Central],
            smoothing_bandwidth: 50.0,
            nu_cosine: false,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
    /// File stem for `<name>.csv` and `<name>.json`.
    pub name: String,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { dir: PathBuf::from("out"), name: "run".into() }
    }
}

/// Grammar (TOML):
///
/// ```toml
/// [objective]
/// kind = "eos_toy"            # eos_toy | quadratic | mlp
/// start = [0.5, 198.0]
/// [objective.toy]
/// a = 0.01
/// y_star = 300.0
///
/// [method]
/// kind = "gd"                 # gd | scalar_rmsprop | rmsprop
/// eta = 0.01
///
/// [run]
/// steps = 2000
/// flows = ["stable", "central"]
///
/// [flow]                      # eps, tau, track_thresh, terminate_at, ...
/// [stationary]                # rank, nsteps, tol_nu, ...
/// [output]                    # dir, name
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub objective: ObjectiveConfig,
    pub method: MethodConfig,
    #[serde(default)]
    pub run: RunConfig,
    #[serde(default)]
    pub flow: FlowOptions,
    #[serde(default)]
    pub stationary: StationaryOptions,
    #[serde(default)]
    pub output: OutputConfig,
}

impl FromStr for ExperimentConfig {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(s).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

impl ExperimentConfig {
    pub fn from_path(path: &Path) -> Result<Self> {
        std::fs::read_to_string(path)?.parse()
    }

    pub fn from_value(v: toml::Value) -> Result<Self> {
        let cfg: ExperimentConfig =
            v.try_into().map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.run.steps == 0 {
            return Err(Error::Config("run.steps must be at least 1".into()));
        }
        if !(self.run.smoothing_bandwidth > 0.0) {
            return Err(Error::Config("run.smoothing_bandwidth must be positive".into()));
        }
        let m = self.method.spec()?;
        let flows = &self.run.flows;
        let has = |k: FlowKind| flows.contains(&k);
        if has(FlowKind::Igr) && m.kind != MethodKind::Gd {
            return Err(Error::Config("the igr flow models plain gradient descent".into()));
        }
        if has(FlowKind::Stationary) && m.kind != MethodKind::Rmsprop {
            return Err(Error::Config("the stationary flow needs method.kind = \"rmsprop\"".into()));
        }
        if has(FlowKind::Central) && m.is_adaptive() && m.beta2 == 0.0 {
            return Err(Error::Config("the central flow needs beta2 > 0".into()));
        }
        if self.run.nu_cosine && m.kind != MethodKind::Rmsprop {
            return Err(Error::Config("run.nu_cosine needs method.kind = \"rmsprop\"".into()));
        }
        let section = match self.objective.kind {
            ObjectiveKind::EosToy => self.objective.toy.is_some(),
            ObjectiveKind::Quadratic => self.objective.quadratic.is_some(),
            ObjectiveKind::Mlp => true,
        };
        if !section {
            return Err(Error::Config(format!("missing [objective.{}] section", self.objective_section())));
        }
        if self.objective.kind == ObjectiveKind::EosToy && self.objective.start.is_none() {
            return Err(Error::Config("objective.start is required for the toy".into()));
        }
        Ok(())
    }

    fn objective_section(&self) -> &'static str {
        match self.objective.kind {
            ObjectiveKind::EosToy => "toy",
            ObjectiveKind::Quadratic => "quadratic",
            ObjectiveKind::Mlp => "mlp",
        }
    }

    /// The loss oracle and the initial weights.
    pub fn build_objective(&self) -> Result<(Box<dyn Objective>, Vec<f64>)> {
        let o = &self.objective;
        let (obj, default_start): (Box<dyn Objective>, Option<Vec<f64>>) = match o.kind {
            ObjectiveKind::EosToy => {
                (Box::new(make_eos_toy(o.toy.clone().unwrap_or_else(|| EosToyParams::single(0.01, 300.0)))?), None)
            }
            ObjectiveKind::Quadratic => {
                let q = o.quadratic.as_ref().ok_or_else(|| Error::Config("missing [objective.quadratic]".into()))?;
                let h = SymMatrix::from_rows(&q.h)?;
                let n = q.b.len();
                (Box::new(make_quadratic(h, q.b.clone())?), Some(vec![0.0; n]))
            }
            ObjectiveKind::Mlp => {
                let spec = MlpSpec { seed: self.run.seed, ..o.mlp.clone().unwrap_or_default() };
                let mlp = make_mlp(&spec)?;
                let init = mlp.initial_params();
                (Box::new(mlp), Some(init))
            }
        };
        let start =
            o.start.clone().or(default_start).ok_or_else(|| Error::Config("objective.start is required".into()))?;
        if start.len() != obj.dim() {
            return Err(Error::Config(format!(
                "objective.start has length {} but the objective has {} parameters",
                start.len(),
                obj.dim()
            )));
        }
        Ok((obj, start))
    }

    pub fn method_spec(&self) -> Result<MethodSpec> {
        self.method.spec()
    }

    /// Flow options with the run seed threaded into the eigensolver.
    pub fn flow_options(&self) -> FlowOptions {
        let mut f = self.flow;
        f.eig.seed ^= self.run.seed;
        f
    }

    pub fn stationary_options(&self) -> StationaryOptions {
        StationaryOptions { seed: self.stationary.seed ^ self.run.seed, ..self.stationary }
    }
}

/// Sets `key` (dotted path) in a parsed config to `raw`, read as a TOML
/// literal when it parses as one and as a bare string otherwise.
pub fn set_dotted(root: &mut toml::Value, key: &str, raw: &str) -> Result<()> {
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad key '{key}'")));
    }
    let mut cur = root;
    for p in &parts[..parts.len() - 1] {
        let table = cur.as_table_mut().ok_or_else(|| Error::Config(format!("'{key}' does not name a table path")))?;
        cur = table.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    let table = cur.as_table_mut().ok_or_else(|| Error::Config(format!("'{key}' does not name a table path")))?;
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}
