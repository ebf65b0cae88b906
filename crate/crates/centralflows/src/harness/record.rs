use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Bumped whenever a column is added, removed, renamed or reordered.
pub const SCHEMA_VERSION: u32 = 1;

pub const COLUMNS: [&str; 26] = [
    "step",
    "time",
    "loss_discrete",
    "loss_central",
    "loss_stable",
    "loss_stationary",
    "loss_igr",
    "loss_bar_pred",
    "gradnorm_sq_discrete",
    "gradnorm_sq_central",
    "gradnorm_sq_pred",
    "eff_sharpness_discrete_midpoint",
    "eff_sharpness_central",
    "eff_sharpness_stable",
    "sharpness_discrete",
    "hessian_top_eigs",
    "k_unstable",
    "sigma_eigs",
    "whitened_disp",
    "dist_central",
    "dist_stable",
    "dist_stationary",
    "dist_igr",
    "nu_cos_stationary",
    "flags",
    "schema",
];

/// One row per discrete step. Flow columns are empty when the flow is not
/// enabled or has stopped. `sigma_eigs` and `whitened_disp` are in whitened
/// coordinates `P^{1/2}(·)` of the central flow's preconditioner.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub step: u64,
    pub time: f64,
    pub loss_discrete: f64,
    pub loss_central: Option<f64>,
    pub loss_stable: Option<f64>,
    pub loss_stationary: Option<f64>,
    pub loss_igr: Option<f64>,
    pub loss_bar_pred: Option<f64>,
    pub gradnorm_sq_discrete: f64,
    pub gradnorm_sq_central: Option<f64>,
    pub gradnorm_sq_pred: Option<f64>,
    /// At the second-order midpoint; filled one step late, empty on the
    /// first and last rows.
    pub eff_sharpness_discrete_midpoint: Option<f64>,
    pub eff_sharpness_central: Option<f64>,
    pub eff_sharpness_stable: Option<f64>,
    pub sharpness_discrete: f64,
    pub hessian_top_eigs: Vec<f64>,
    pub k_unstable: Option<usize>,
    pub sigma_eigs: Option<Vec<f64>>,
    pub whitened_disp: Option<Vec<f64>>,
    pub dist_central: Option<f64>,
    pub dist_stable: Option<f64>,
    pub dist_stationary: Option<f64>,
    pub dist_igr: Option<f64>,
    pub nu_cos_stationary: Option<f64>,
    /// `;`-separated events such as `central:terminated`.
    pub flags: String,
}

fn num(v: f64) -> String {
    format!("{v:?}")
}

fn opt(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

fn list(v: &[f64]) -> Result<String> {
    serde_json::to_string(v).map_err(|e| Error::Csv(e.to_string()))
}

fn parse_num(col: &str, s: &str) -> Result<f64> {
    s.trim().parse().map_err(|_| Error::Csv(format!("column {col}: not a number: '{s}'")))
}

fn parse_opt(col: &str, s: &str) -> Result<Option<f64>> {
    if s.is_empty() {
        Ok(None)
    } else {
        parse_num(col, s).map(Some)
    }
}

fn parse_list(col: &str, s: &str) -> Result<Vec<f64>> {
    serde_json::from_str(s).map_err(|e| Error::Csv(format!("column {col}: {e}")))
}

fn parse_opt_list(col: &str, s: &str) -> Result<Option<Vec<f64>>> {
    if s.is_empty() {
        Ok(None)
    } else {
        parse_list(col, s).map(Some)
    }
}

impl TrajectoryRecord {
    pub fn push_flag(&mut self, flag: &str) {
        if !self.flags.is_empty() {
            self.flags.push(';');
        }
        self.flags.push_str(flag);
    }

    /// Whether every numeric field is finite.
    pub fn is_finite(&self) -> bool {
        let scalars = [
            Some(self.time),
            Some(self.loss_discrete),
            self.loss_central,
            self.loss_stable,
            self.loss_stationary,
            self.loss_igr,
            self.loss_bar_pred,
            Some(self.gradnorm_sq_discrete),
            self.gradnorm_sq_central,
            self.gradnorm_sq_pred,
            self.eff_sharpness_discrete_midpoint,
            self.eff_sharpness_central,
            self.eff_sharpness_stable,
            Some(self.sharpness_discrete),
            self.dist_central,
            self.dist_stable,
            self.dist_stationary,
            self.dist_igr,
            self.nu_cos_stationary,
        ];
        scalars.iter().flatten().all(|v| v.is_finite())
            && self.hessian_top_eigs.iter().all(|v| v.is_finite())
            && self.sigma_eigs.iter().flatten().all(|v| v.is_finite())
            && self.whitened_disp.iter().flatten().all(|v| v.is_finite())
    }

    pub fn to_row(&self) -> Result<Vec<String>> {
        Ok(vec![
            self.step.to_string(),
            num(self.time),
            num(self.loss_discrete),
            opt(self.loss_central),
            opt(self.loss_stable),
            opt(self.loss_stationary),
            opt(self.loss_igr),
            opt(self.loss_bar_pred),
            num(self.gradnorm_sq_discrete),
            opt(self.gradnorm_sq_central),
            opt(self.gradnorm_sq_pred),
            opt(self.eff_sharpness_discrete_midpoint),
            opt(self.eff_sharpness_central),
            opt(self.eff_sharpness_stable),
            num(self.sharpness_discrete),
            list(&self.hessian_top_eigs)?,
            self.k_unstable.map(|k| k.to_string()).unwrap_or_default(),
            self.sigma_eigs.as_deref().map(list).transpose()?.unwrap_or_default(),
            self.whitened_disp.as_deref().map(list).transpose()?.unwrap_or_default(),
            opt(self.dist_central),
            opt(self.dist_stable),
            opt(self.dist_stationary),
            opt(self.dist_igr),
            opt(self.nu_cos_stationary),
            self.flags.clone(),
            SCHEMA_VERSION.to_string(),
        ])
    }

    pub fn from_row(row: &csv::StringRecord) -> Result<Self> {
        if row.len() != COLUMNS.len() {
            return Err(Error::Csv(format!("expected {} fields, found {}", COLUMNS.len(), row.len())));
        }
        let f = |i: usize| &row[i];
        if f(25).trim() != SCHEMA_VERSION.to_string() {
            return Err(Error::Csv(format!("schema version '{}' is not {SCHEMA_VERSION}", f(25))));
        }
        let c = COLUMNS;
        Ok(Self {
            step: f(0).trim().parse().map_err(|_| Error::Csv(format!("column step: '{}'", f(0))))?,
            time: parse_num(c[1], f(1))?,
            loss_discrete: parse_num(c[2], f(2))?,
            loss_central: parse_opt(c[3], f(3))?,
            loss_stable: parse_opt(c[4], f(4))?,
            loss_stationary: parse_opt(c[5], f(5))?,
            loss_igr: parse_opt(c[6], f(6))?,
            loss_bar_pred: parse_opt(c[7], f(7))?,
            gradnorm_sq_discrete: parse_num(c[8], f(8))?,
            gradnorm_sq_central: parse_opt(c[9], f(9))?,
            gradnorm_sq_pred: parse_opt(c[10], f(10))?,
            eff_sharpness_discrete_midpoint: parse_opt(c[11], f(11))?,
            eff_sharpness_central: parse_opt(c[12], f(12))?,
            eff_sharpness_stable: parse_opt(c[13], f(13))?,
            sharpness_discrete: parse_num(c[14], f(14))?,
            hessian_top_eigs: parse_list(c[15], f(15))?,
            k_unstable: if f(16).is_empty() {
                None
            } else {
                Some(f(16).trim().parse().map_err(|_| Error::Csv(format!("column k_unstable: '{}'", f(16))))?)
            },
            sigma_eigs: parse_opt_list(c[17], f(17))?,
            whitened_disp: parse_opt_list(c[18], f(18))?,
            dist_central: parse_opt(c[19], f(19))?,
            dist_stable: parse_opt(c[20], f(20))?,
            dist_stationary: parse_opt(c[21], f(21))?,
            dist_igr: parse_opt(c[22], f(22))?,
            nu_cos_stationary: parse_opt(c[23], f(23))?,
            flags: f(24).to_string(),
        })
    }
}

pub fn write_csv<W: Write>(out: W, records: &[TrajectoryRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let err = |e: csv::Error| Error::Csv(e.to_string());
    w.write_record(COLUMNS).map_err(err)?;
    for r in records {
        w.write_record(r.to_row()?).map_err(err)?;
    }
    w.flush()?;
    Ok(())
}

/// Parses a schema-v1 CSV. The header must match [`COLUMNS`] exactly.
pub fn read_csv<R: Read>(input: R) -> Result<Vec<TrajectoryRecord>> {
    let mut r = csv::ReaderBuilder::new().has_headers(true).flexible(true).from_reader(input);
    let header = r.headers().map_err(|e| Error::Csv(e.to_string()))?.clone();
    if header.iter().ne(COLUMNS.iter().copied()) {
        return Err(Error::Csv("header does not match schema version 1".into()));
    }
    r.records().map(|row| TrajectoryRecord::from_row(&row.map_err(|e| Error::Csv(e.to_string()))?)).collect()
}
