use super::{DerivativeMode, Objective};
use crate::error::{Error, Result};

/// Progressive-sharpening toy.
///
/// Each block contributes `½·y·x² + (a/2)(y − y*)²` on its own coordinates
/// `(x, y)`, so the curvature along `x` is `y` and the gradient flow drives it
/// towards `y*`. The Hessian of a block is `[[y, x], [x, a]]` and its only
/// nonzero third derivatives are `∂H_xx/∂y = 1` and `∂H_xy/∂x = 1`.
///
/// Coordinates are laid out `[x₀, y₀, x₁, y₁, …]`.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EosToyParams {
    pub a: f64,
    pub y_star: f64,
    #[serde(default)]
    pub extra_blocks: Vec<ToyBlock>,
    /// Adds `(c/2)·Σ x_b²`, raising every `x` curvature by `c`.
    #[serde(default)]
    pub floor: f64,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ToyBlock {
    pub a: f64,
    pub y_star: f64,
    /// Constant cross-curvature `κ·x₀·x_b` with the base block. Zero keeps
    /// the blocks independent.
    #[serde(default)]
    pub coupling: f64,
}

impl EosToyParams {
    pub fn single(a: f64, y_star: f64) -> Self {
        Self { a, y_star, extra_blocks: Vec::new(), floor: 0.0 }
    }

    pub fn two_block(a: f64, y_star: f64, a2: f64, y_star2: f64) -> Self {
        Self { a, y_star, extra_blocks: vec![ToyBlock { a: a2, y_star: y_star2, coupling: 0.0 }], floor: 0.0 }
    }
}

#[derive(Debug, Clone)]
pub struct EosToy {
    a: Vec<f64>,
    y_star: Vec<f64>,
    coupling: Vec<f64>,
    floor: f64,
}

pub fn make_eos_toy(p: EosToyParams) -> Result<EosToy> {
    let mut a = vec![p.a];
    let mut y_star = vec![p.y_star];
    let mut coupling = vec![0.0];
    for b in &p.extra_blocks {
        a.push(b.a);
        y_star.push(b.y_star);
        coupling.push(b.coupling);
    }
    for (i, (&ai, &yi)) in a.iter().zip(&y_star).enumerate() {
        if !(ai > 0.0 && ai.is_finite()) || !(yi > 0.0 && yi.is_finite()) {
            return Err(Error::InvalidParam(format!("toy block {i}: need a > 0 and y_star > 0")));
        }
    }
    if !(p.floor >= 0.0 && p.floor.is_finite()) || coupling.iter().any(|c| !c.is_finite()) {
        return Err(Error::InvalidParam("toy floor must be ≥ 0 and couplings finite".into()));
    }
    Ok(EosToy { a, y_star, coupling, floor: p.floor })
}

impl EosToy {
    pub fn blocks(&self) -> usize {
        self.a.len()
    }
}

impl Objective for EosToy {
    fn dim(&self) -> usize {
        2 * self.a.len()
    }

    fn loss(&self, w: &[f64]) -> f64 {
        let mut l = 0.0;
        for b in 0..self.blocks() {
            let (x, y) = (w[2 * b], w[2 * b + 1]);
            l += 0.5 * y * x * x + 0.5 * self.a[b] * (y - self.y_star[b]).powi(2) + 0.5 * self.floor * x * x;
            if b > 0 {
                l += self.coupling[b] * w[0] * x;
            }
        }
        l
    }

    fn grad(&self, w: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; w.len()];
        for b in 0..self.blocks() {
            let (x, y) = (w[2 * b], w[2 * b + 1]);
            g[2 * b] += (y + self.floor) * x;
            g[2 * b + 1] = 0.5 * x * x + self.a[b] * (y - self.y_star[b]);
            if b > 0 {
                g[0] += self.coupling[b] * x;
                g[2 * b] += self.coupling[b] * w[0];
            }
        }
        g
    }

    fn hvp(&self, w: &[f64], v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; w.len()];
        for b in 0..self.blocks() {
            let (x, y) = (w[2 * b], w[2 * b + 1]);
            let (vx, vy) = (v[2 * b], v[2 * b + 1]);
            out[2 * b] += (y + self.floor) * vx + x * vy;
            out[2 * b + 1] = x * vx + self.a[b] * vy;
            if b > 0 {
                out[0] += self.coupling[b] * vx;
                out[2 * b] += self.coupling[b] * v[0];
            }
        }
        out
    }

    fn third_bilinear(&self, _w: &[f64], u: &[f64], v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; u.len()];
        for b in 0..self.blocks() {
            out[2 * b] = u[2 * b] * v[2 * b + 1] + u[2 * b + 1] * v[2 * b];
            out[2 * b + 1] = u[2 * b] * v[2 * b];
        }
        out
    }

    fn derivative_mode(&self) -> DerivativeMode {
        DerivativeMode::Analytic
    }
}
