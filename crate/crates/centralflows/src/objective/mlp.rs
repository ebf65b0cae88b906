use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{central_diff, fd_step_hvp, fd_step_third, DerivativeMode, Objective};
use crate::error::{Error, Result};

pub const MAX_PARAMS: usize = 2000;

/// Tiny tanh regression network on a seeded synthetic dataset.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct MlpSpec {
    /// Layer widths including input and output, e.g. `[2, 24, 5, 1]`.
    pub widths: Vec<usize>,
    /// Widths of the random teacher that labels the inputs. Must share the
    /// input and output widths of the student.
    pub teacher_widths: Vec<usize>,
    pub samples: usize,
    pub seed: u64,
    /// Label every sample with zero instead of the teacher output.
    pub zero_targets: bool,
}

impl Default for MlpSpec {
    fn default() -> Self {
        Self { widths: vec![2, 24, 5, 1], teacher_widths: vec![2, 8, 1], samples: 32, seed: 0, zero_targets: false }
    }
}

#[derive(Debug, Clone)]
pub struct Mlp {
    widths: Vec<usize>,
    inputs: Vec<Vec<f64>>,
    targets: Vec<Vec<f64>>,
    init: Vec<f64>,
}

pub fn make_mlp(spec: &MlpSpec) -> Result<Mlp> {
    if spec.widths.len() < 2 || spec.widths.contains(&0) {
        return Err(Error::InvalidParam("mlp: need at least two nonzero widths".into()));
    }
    let d = param_count(&spec.widths);
    if d > MAX_PARAMS {
        return Err(Error::InvalidParam(format!("mlp: {d} parameters exceeds {MAX_PARAMS}")));
    }
    if spec.samples == 0 {
        return Err(Error::InvalidParam("mlp: need at least one sample".into()));
    }
    let n_in = spec.widths[0];
    let n_out = *spec.widths.last().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let inputs: Vec<Vec<f64>> =
        (0..spec.samples).map(|_| (0..n_in).map(|_| rng.random_range(-1.0..=1.0)).collect()).collect();
    let targets = if spec.zero_targets {
        vec![vec![0.0; n_out]; spec.samples]
    } else {
        let tw = &spec.teacher_widths;
        if tw.len() < 2 || tw[0] != n_in || *tw.last().unwrap() != n_out || tw.contains(&0) {
            return Err(Error::InvalidParam("mlp: teacher widths must match student input/output".into()));
        }
        let teacher = random_params(tw, &mut rng);
        inputs.iter().map(|x| forward(tw, &teacher, x).0.pop().unwrap()).collect()
    };
    let init = random_params(&spec.widths, &mut rng);
    let mlp = Mlp { widths: spec.widths.clone(), inputs, targets, init };
    if !mlp.loss(&mlp.init).is_finite() || !crate::linalg::all_finite(&mlp.targets.concat()) {
        return Err(Error::NonFinite("mlp activations"));
    }
    Ok(mlp)
}

fn param_count(widths: &[usize]) -> usize {
    widths.windows(2).map(|p| p[1] * (p[0] + 1)).sum()
}

/// `N(0, 1/fan_in)` weights, zero biases. Layout per layer: `W` row-major (out × in), then `b`.
fn random_params(widths: &[usize], rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut out = Vec::with_capacity(param_count(widths));
    for p in widths.windows(2) {
        let s = 1.0 / (p[0] as f64).sqrt();
        out.extend((0..p[0] * p[1]).map(|_| s * rng.sample::<f64, _>(StandardNormal)));
        out.extend(std::iter::repeat_n(0.0, p[1]));
    }
    out
}

/// Activations per layer (input first) and pre-activations per layer.
fn forward(widths: &[usize], w: &[f64], x: &[f64]) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let nl = widths.len() - 1;
    let mut acts = vec![x.to_vec()];
    let mut pre = Vec::with_capacity(nl);
    let mut off = 0;
    for l in 0..nl {
        let (ni, no) = (widths[l], widths[l + 1]);
        let a = &acts[l];
        let z: Vec<f64> = (0..no)
            .map(|o| {
                let row = &w[off + o * ni..off + (o + 1) * ni];
                row.iter().zip(a).map(|(p, q)| p * q).sum::<f64>() + w[off + ni * no + o]
            })
            .collect();
        off += no * (ni + 1);
        let a_next = if l + 1 == nl { z.clone() } else { z.iter().map(|v| v.tanh()).collect() };
        pre.push(z);
        acts.push(a_next);
    }
    (acts, pre)
}

impl Mlp {
    /// Seeded initial parameters.
    pub fn initial_params(&self) -> Vec<f64> {
        self.init.clone()
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn samples(&self) -> usize {
        self.inputs.len()
    }

    /// Range of parameter indices holding the final layer (weights and biases).
    pub fn final_layer(&self) -> std::ops::Range<usize> {
        let d = param_count(&self.widths);
        let p = &self.widths[self.widths.len() - 2..];
        d - p[1] * (p[0] + 1)..d
    }
}

impl Objective for Mlp {
    fn dim(&self) -> usize {
        param_count(&self.widths)
    }

    fn loss(&self, w: &[f64]) -> f64 {
        let n = self.inputs.len() as f64;
        self.inputs
            .iter()
            .zip(&self.targets)
            .map(|(x, y)| {
                let (acts, _) = forward(&self.widths, w, x);
                acts.last().unwrap().iter().zip(y).map(|(f, t)| (f - t).powi(2)).sum::<f64>()
            })
            .sum::<f64>()
            / (2.0 * n)
    }

    fn grad(&self, w: &[f64]) -> Vec<f64> {
        let nl = self.widths.len() - 1;
        let n = self.inputs.len() as f64;
        let mut g = vec![0.0; w.len()];
        let offsets: Vec<usize> = self
            .widths
            .windows(2)
            .scan(0, |o, p| {
                let cur = *o;
                *o += p[1] * (p[0] + 1);
                Some(cur)
            })
            .collect();
        for (x, y) in self.inputs.iter().zip(&self.targets) {
            let (acts, pre) = forward(&self.widths, w, x);
            let mut delta: Vec<f64> = acts[nl].iter().zip(y).map(|(f, t)| (f - t) / n).collect();
            for l in (0..nl).rev() {
                let (ni, no) = (self.widths[l], self.widths[l + 1]);
                let off = offsets[l];
                if l + 1 != nl {
                    for (dv, z) in delta.iter_mut().zip(&pre[l]) {
                        let t = z.tanh();
                        *dv *= 1.0 - t * t;
                    }
                }
                for o in 0..no {
                    for i in 0..ni {
                        g[off + o * ni + i] += delta[o] * acts[l][i];
                    }
                    g[off + ni * no + o] += delta[o];
                }
                if l > 0 {
                    delta = (0..ni).map(|i| (0..no).map(|o| w[off + o * ni + i] * delta[o]).sum()).collect();
                }
            }
        }
        g
    }

    fn hvp(&self, w: &[f64], v: &[f64]) -> Vec<f64> {
        central_diff(|p| self.grad(p), w, v, fd_step_hvp(w))
    }

    fn third_bilinear(&self, w: &[f64], u: &[f64], v: &[f64]) -> Vec<f64> {
        // ∇_w[uᵀH(w)v] = D_u(H(w)v) by symmetry of the third derivative
        central_diff(|p| self.hvp(p, v), w, u, fd_step_third(w))
    }

    fn derivative_mode(&self) -> DerivativeMode {
        DerivativeMode::FiniteDifference
    }
}
