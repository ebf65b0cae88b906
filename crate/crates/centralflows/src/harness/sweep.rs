use std::path::Path;

use rayon::prelude::*;

use super::config::{set_dotted, ExperimentConfig};
use super::run::{run_experiment, Experiment};
use crate::error::{Error, Result};

/// One `--vary key=v1,v2,...` argument.
#[derive(Debug, Clone, PartialEq)]
pub struct Variation {
    pub key: String,
    pub values: Vec<String>,
}

impl std::str::FromStr for Variation {
    type Err = Error;

    /// Splits values on commas outside brackets and quotes, so
    /// `run.flows=["stable","central"],["central"]` gives two values.
    fn from_str(s: &str) -> Result<Self> {
        let (key, rest) =
            s.split_once('=').ok_or_else(|| Error::Config(format!("expected key=v1,v2,... (got '{s}')")))?;
        let mut values = Vec::new();
        let (mut depth, mut quoted, mut cur) = (0i32, false, String::new());
        for ch in rest.chars() {
            match ch {
                '"' => quoted = !quoted,
                '[' | '{' if !quoted => depth += 1,
                ']' | '}' if !quoted => depth -= 1,
                ',' if !quoted && depth == 0 => {
                    values.push(std::mem::take(&mut cur));
                    continue;
                }
                _ => {}
            }
            cur.push(ch);
        }
        values.push(cur);
        let values: Vec<String> = values.into_iter().map(|v| v.trim().to_string()).collect();
        if key.trim().is_empty() || values.iter().any(|v| v.is_empty()) {
            return Err(Error::Config(format!("empty key or value in '{s}'")));
        }
        Ok(Variation { key: key.trim().to_string(), values })
    }
}

fn label_part(key: &str, value: &str) -> String {
    format!("{key}={value}")
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || "._=-".contains(c) { c } else { '_' })
        .collect()
}

/// Cartesian product of the variations applied to `base`. Each config's
/// output name gets a `__key=value` suffix per varied key.
pub fn expand(base: &toml::Value, vary: &[Variation]) -> Result<Vec<ExperimentConfig>> {
    let mut combos: Vec<Vec<(String, String)>> = vec![Vec::new()];
    for v in vary {
        combos = combos
            .into_iter()
            .flat_map(|c| {
                v.values.iter().map(move |val| {
                    let mut c = c.clone();
                    c.push((v.key.clone(), val.clone()));
                    c
                })
            })
            .collect();
    }
    let base_name = ExperimentConfig::from_value(base.clone())?.output.name;
    combos
        .into_iter()
        .map(|combo| {
            let mut val = base.clone();
            let mut name = base_name.clone();
            for (k, v) in &combo {
                set_dotted(&mut val, k, v)?;
                name.push_str("__");
                name.push_str(&label_part(k, v));
            }
            set_dotted(&mut val, "output.name", &format!("\"{name}\""))?;
            ExperimentConfig::from_value(val)
        })
        .collect()
}

/// Runs independent configs in parallel and writes each one's files to
/// `out` (or its own `output.dir`). Results keep the input order.
pub fn run_sweep(configs: &[ExperimentConfig], out: Option<&Path>) -> Vec<Result<Experiment>> {
    configs
        .par_iter()
        .map(|c| {
            let e = run_experiment(c)?;
            e.emit(out.unwrap_or(&c.output.dir))?;
            Ok(e)
        })
        .collect()
}
