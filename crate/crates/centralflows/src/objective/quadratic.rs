use super::{DerivativeMode, Objective};
use crate::error::{Error, Result};
use crate::linalg::{dot, SymMatrix};

/// `L(w) = ½wᵀHw − bᵀw`.
#[derive(Debug, Clone)]
pub struct Quadratic {
    h: SymMatrix,
    b: Vec<f64>,
}

pub fn make_quadratic(h: SymMatrix, b: Vec<f64>) -> Result<Quadratic> {
    if h.dim() != b.len() {
        return Err(Error::Shape(format!("H is {0}×{0} but b has length {1}", h.dim(), b.len())));
    }
    if !h.is_finite() || !crate::linalg::all_finite(&b) {
        return Err(Error::NonFinite("quadratic coefficients"));
    }
    Ok(Quadratic { h, b })
}

impl Quadratic {
    pub fn hessian(&self) -> &SymMatrix {
        &self.h
    }
}

impl Objective for Quadratic {
    fn dim(&self) -> usize {
        self.b.len()
    }

    fn loss(&self, w: &[f64]) -> f64 {
        0.5 * dot(w, &self.h.matvec(w)) - dot(&self.b, w)
    }

    fn grad(&self, w: &[f64]) -> Vec<f64> {
        self.h.matvec(w).iter().zip(&self.b).map(|(hw, b)| hw - b).collect()
    }

    fn hvp(&self, _w: &[f64], v: &[f64]) -> Vec<f64> {
        self.h.matvec(v)
    }

    fn third_bilinear(&self, w: &[f64], _u: &[f64], _v: &[f64]) -> Vec<f64> {
        vec![0.0; w.len()]
    }

    fn derivative_mode(&self) -> DerivativeMode {
        DerivativeMode::Analytic
    }
}
