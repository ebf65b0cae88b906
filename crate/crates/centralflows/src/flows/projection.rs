use super::compute_nabla_hu;
use crate::error::Result;
use crate::linalg::{axpy, SymMatrix};
use crate::objective::Objective;
use crate::sdcp::{solve_sdcp, SdcpOptions, SdcpProblem};

/// Euclidean projection of `v` onto the tangent cone `{z : ∇H_Ũ[z] ⪯ 0}` of
/// the stable region, for orthonormal critical directions `Ũ`.
///
/// The multiplier `Λ` solves `0 ⪯ Λ ⊥ −∇H_Ũ[v] + ∇H_Ũ∇H_Ũᵀ[Λ] ⪰ 0` and the
/// projection is `v − ∇H_Ũᵀ[Λ]`, i.e. `v − ½∇H_Ũᵀ[Σ]` with `Σ = 2Λ`.
pub fn project_tangent_cone(v: &[f64], w: &[f64], obj: &dyn Objective, u_tilde: &[Vec<f64>]) -> Result<Vec<f64>> {
    if u_tilde.is_empty() {
        return Ok(v.to_vec());
    }
    let nabla = compute_nabla_hu(obj, w, u_tilde)?;
    let alpha: SymMatrix = nabla.apply(v).scaled(-1.0);
    let prob = SdcpProblem::from_operator(alpha, |x| nabla.apply(&nabla.adjoint(x)))?;
    let sol = solve_sdcp(&prob, &SdcpOptions::default())?;
    let mut out = v.to_vec();
    axpy(-1.0, &nabla.adjoint(&sol.x), &mut out);
    Ok(out)
}
