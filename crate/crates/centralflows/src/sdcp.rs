//! Semidefinite complementarity problems `0 ⪯ X ⊥ α + β[X] ⪰ 0` over Sym(R^k).
//!
//! With `β` positive definite these are the KKT conditions of the convex
//! program `min ⟨α, X⟩ + ½⟨X, β[X]⟩ s.t. X ⪰ 0`, which has a unique solution.
//! The solver tries the cheap exact cases first (k = 1, a PSD linear inverse),
//! then runs accelerated projected gradient and polishes the result on the
//! face of the PSD cone it has identified.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::linalg::{
    cholesky_solve, operator_matrix, psd_project, smat, svec, svec_len, sym_eig_dense, Mat, SymMatrix,
};

pub const MAX_K: usize = 16;
/// Relative asymmetry of `β` above which the problem is rejected.
pub const ASYMMETRY_LIMIT: f64 = 1e-6;
/// Relative size of the ridge added to a singular `β`.
pub const REGULARIZATION: f64 = 1e-12;
/// Most negative relative eigenvalue of `β` still treated as rounding noise.
pub const NEGATIVE_LIMIT: f64 = 1e-8;

/// `α` plus the matrix of `β` in the scaled svec basis.
#[derive(Debug, Clone, PartialEq)]
pub struct SdcpProblem {
    pub alpha: SymMatrix,
    pub beta: Mat,
    /// `‖B − Bᵀ‖_F / ‖B‖_F` before symmetrization.
    pub asymmetry: f64,
}

impl SdcpProblem {
    /// Validates shapes and symmetrizes `β`, rejecting it when the relative
    /// asymmetry exceeds [`ASYMMETRY_LIMIT`].
    pub fn new(alpha: SymMatrix, beta: Mat) -> Result<Self> {
        let k = alpha.dim();
        let m = svec_len(k);
        if k > MAX_K {
            return Err(Error::Shape(format!("sdcp: k={k} exceeds {MAX_K}")));
        }
        if beta.rows != m || beta.cols != m {
            return Err(Error::Shape(format!("sdcp: beta is {}x{}, expected {m}x{m}", beta.rows, beta.cols)));
        }
        if !alpha.is_finite() || !crate::linalg::all_finite(&beta.data) {
            return Err(Error::NonFinite("sdcp input"));
        }
        let bt = beta.transpose();
        let diff: f64 = beta.data.iter().zip(&bt.data).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let nb = beta.frobenius();
        let asymmetry = if nb > 0.0 { diff / nb } else { 0.0 };
        if asymmetry > ASYMMETRY_LIMIT {
            return Err(Error::BadBeta(format!("relative asymmetry {asymmetry:e}")));
        }
        let mut sym = beta;
        for i in 0..m {
            for j in 0..i {
                let v = 0.5 * (sym.get(i, j) + sym.get(j, i));
                sym.set(i, j, v);
                sym.set(j, i, v);
            }
        }
        Ok(Self { alpha, beta: sym, asymmetry })
    }

    /// Builds the problem from `β` given as a linear map on Sym(R^k).
    pub fn from_operator(alpha: SymMatrix, beta: impl FnMut(&SymMatrix) -> SymMatrix) -> Result<Self> {
        let b = operator_matrix(alpha.dim(), beta);
        Self::new(alpha, b)
    }

    pub fn k(&self) -> usize {
        self.alpha.dim()
    }

    pub fn apply_beta(&self, x: &SymMatrix) -> SymMatrix {
        smat(&self.beta.matvec(&svec(x)), self.k())
    }

    /// `⟨α, X⟩ + ½⟨X, β[X]⟩`
    pub fn objective(&self, x: &SymMatrix) -> f64 {
        let v = svec(x);
        crate::linalg::dot(&svec(&self.alpha), &v) + 0.5 * crate::linalg::dot(&v, &self.beta.matvec(&v))
    }

    /// The same problem with both `α` and `β` multiplied by `c`.
    pub fn scaled(&self, c: f64) -> Self {
        let mut beta = self.beta.clone();
        beta.data.iter_mut().for_each(|v| *v *= c);
        Self { alpha: self.alpha.scaled(c), beta, asymmetry: self.asymmetry }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct SdcpOptions {
    /// Target for all three KKT residuals, relative to `max(1, ‖α‖_F)`.
    pub tol: f64,
    pub max_iter: usize,
    /// Start the iterative solver from a random PSD matrix drawn with this
    /// seed and skip the linear-inverse shortcut.
    pub seed: Option<u64>,
}

impl Default for SdcpOptions {
    fn default() -> Self {
        Self { tol: 1e-10, max_iter: 50_000, seed: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SdcpMethod {
    Empty,
    ClosedForm,
    LinearInverse,
    Iterative,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, serde::Serialize, serde::Deserialize)]
pub struct KktResiduals {
    /// `|min(0, λ_min(X))|`
    pub psd: f64,
    /// `|min(0, λ_min(α + β[X]))|`
    pub dual: f64,
    /// `|⟨X, α + β[X]⟩|`
    pub comp: f64,
}

impl KktResiduals {
    pub fn max(&self) -> f64 {
        self.psd.max(self.dual).max(self.comp)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SdcpSolution {
    pub x: SymMatrix,
    pub residuals: KktResiduals,
    pub objective: f64,
    pub converged: bool,
    /// A ridge was added because `β` was numerically singular.
    pub regularized: bool,
    pub method: SdcpMethod,
    pub iterations: usize,
}

/// `max(−α/β, 0)`
pub fn solve_sdcp_1d(alpha: f64, beta: f64) -> Result<f64> {
    if !(beta > 0.0) || !beta.is_finite() || !alpha.is_finite() {
        return Err(Error::InvalidParam(format!("sdcp_1d needs finite alpha and beta > 0 (got {alpha}, {beta})")));
    }
    Ok(if alpha >= 0.0 { 0.0 } else { -alpha / beta })
}

pub fn kkt_residuals(p: &SdcpProblem, x: &SymMatrix) -> Result<KktResiduals> {
    if x.dim() != p.k() {
        return Err(Error::Shape(format!("kkt: X is {}, problem is {}", x.dim(), p.k())));
    }
    let y = p.alpha.add(&p.apply_beta(x));
    Ok(KktResiduals { psd: (-x.min_eig()?).max(0.0), dual: (-y.min_eig()?).max(0.0), comp: x.dot(&y).abs() })
}

pub fn solve_sdcp(p: &SdcpProblem, opts: &SdcpOptions) -> Result<SdcpSolution> {
    let k = p.k();
    if k == 0 {
        return Ok(SdcpSolution {
            x: SymMatrix::zeros(0),
            residuals: KktResiduals::default(),
            objective: 0.0,
            converged: true,
            regularized: false,
            method: SdcpMethod::Empty,
            iterations: 0,
        });
    }
    let m = svec_len(k);
    let beig = sym_eig_dense(&p.beta.to_sym())?;
    let lmax = beig.values[0];
    let lmin = *beig.values.last().unwrap();
    let scale = beig.values.iter().map(|v| v.abs()).fold(0.0, f64::max);
    if lmin < -NEGATIVE_LIMIT * scale {
        return Err(Error::BadBeta(format!("not positive semidefinite (λ_min={lmin:e}, λ_max={lmax:e})")));
    }
    let mut work = p.clone();
    let mut regularized = false;
    if lmin <= REGULARIZATION * scale {
        let ridge = REGULARIZATION * scale.max(1.0);
        for i in 0..m {
            work.beta.set(i, i, work.beta.get(i, i) + ridge);
        }
        regularized = true;
    }
    let tol_abs = opts.tol * p.alpha.frobenius().max(1.0);
    let finish = |x: SymMatrix, method: SdcpMethod, iterations: usize| -> Result<SdcpSolution> {
        let residuals = kkt_residuals(p, &x)?;
        let objective = p.objective(&x);
        Ok(SdcpSolution {
            converged: residuals.max() <= tol_abs,
            x,
            residuals,
            objective,
            regularized,
            method,
            iterations,
        })
    };

    if k == 1 {
        let x = solve_sdcp_1d(work.alpha.get(0, 0), work.beta.get(0, 0))?;
        return finish(SymMatrix::from_diag(&[x]), SdcpMethod::ClosedForm, 0);
    }

    if opts.seed.is_none() {
        let rhs: Vec<f64> = svec(&work.alpha).iter().map(|v| -v).collect();
        if let Some(sol) = cholesky_solve(&work.beta, &rhs) {
            let x = smat(&sol, k);
            if x.min_eig()? >= 0.0 {
                return finish(x, SdcpMethod::LinearInverse, 0);
            }
        }
    }

    let lip = work.beta.to_sym().max_eig()?;
    let mut x = match opts.seed {
        Some(s) => random_psd(k, s),
        None => SymMatrix::zeros(k),
    };
    let mut fx = work.objective(&x);
    let mut y = x.clone();
    let mut t = 1.0_f64;
    let mut best: Option<(f64, SymMatrix)> = None;
    let mut iterations = 0;
    while iterations < opts.max_iter {
        if iterations % 25 == 0 && iterations > 0 {
            if let Some(px) = polish(&work, &x, tol_abs)? {
                return finish(px, SdcpMethod::Iterative, iterations);
            }
            let r = kkt_residuals(p, &x)?.max();
            if r <= tol_abs {
                return finish(x, SdcpMethod::Iterative, iterations);
            }
            if best.as_ref().is_none_or(|(b, _)| r < *b) {
                best = Some((r, x.clone()));
            }
        }
        iterations += 1;
        let grad = work.alpha.add(&work.apply_beta(&y));
        let mut xn = psd_project(&y.sub(&grad.scaled(1.0 / lip)))?;
        xn.symmetrize();
        let fxn = work.objective(&xn);
        if fxn > fx + 1e-14 * fx.abs() {
            // restart momentum; a plain projected step from x is monotone
            t = 1.0;
            y = x.clone();
            continue;
        }
        let tn = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        y = xn.add(&xn.sub(&x).scaled((t - 1.0) / tn));
        x = xn;
        fx = fxn;
        t = tn;
    }
    let r = kkt_residuals(p, &x)?.max();
    let out = match best {
        Some((b, bx)) if b < r => bx,
        _ => x,
    };
    finish(out, SdcpMethod::Iterative, iterations)
}

fn random_psd(k: usize, seed: u64) -> SymMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cols: Vec<Vec<f64>> = (0..k).map(|_| (0..k).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()).collect();
    SymMatrix::from_outer(&cols, &vec![1.0; k])
}

/// Refines an approximate solution on the manifold of rank-`r` PSD matrices.
///
/// Writes `X = W Y Wᵀ` with `W = V + V⊥K` and solves `S W = 0` for `(Y, K)`
/// by Newton's method, where `S = α + β[X]`. This fixes both the face and its
/// orientation, which projected gradient only approaches linearly. Ranks next
/// to the numerical rank of `x` are tried as well.
fn polish(p: &SdcpProblem, x: &SymMatrix, tol_abs: f64) -> Result<Option<SymMatrix>> {
    let k = p.k();
    let e = sym_eig_dense(x)?;
    let top = e.values[0].max(0.0);
    let r0 = e.values.iter().filter(|&&v| v > 1e-6 * top.max(f64::MIN_POSITIVE)).count();
    let mut ranks = vec![r0];
    if r0 > 0 {
        ranks.push(r0 - 1);
    }
    if r0 < k {
        ranks.push(r0 + 1);
    }
    let mut best: Option<(f64, SymMatrix)> = None;
    for r in ranks {
        let cand = if r == 0 { Some(SymMatrix::zeros(k)) } else { newton_on_face(p, &e, r) };
        let Some(cand) = cand else { continue };
        let res = kkt_residuals(p, &cand)?.max();
        if res <= tol_abs && best.as_ref().is_none_or(|(b, _)| res < *b) {
            best = Some((res, cand));
        }
    }
    Ok(best.map(|(_, c)| c))
}

fn newton_on_face(p: &SdcpProblem, e: &crate::linalg::EigenPairs, r: usize) -> Option<SymMatrix> {
    let k = p.k();
    let ny = svec_len(r);
    let v = &e.vectors[..r];
    let vp = &e.vectors[r..];
    let frame = |z: &[f64]| -> (SymMatrix, Vec<Vec<f64>>) {
        let y = smat(&z[..ny], r);
        let w: Vec<Vec<f64>> = (0..r)
            .map(|j| {
                let mut c = v[j].clone();
                for (l, q) in vp.iter().enumerate() {
                    crate::linalg::axpy(z[ny + l * r + j], q, &mut c);
                }
                c
            })
            .collect();
        (y, w)
    };
    let lift = |y: &SymMatrix, w: &[Vec<f64>]| SymMatrix::from_fn(k, |i, j| lift_entry(w, y, i, j));
    let residual = |z: &[f64]| -> Vec<f64> {
        let (y, w) = frame(z);
        let s = p.alpha.add(&p.apply_beta(&lift(&y, &w)));
        let mut f = svec(&s.congruence(&w));
        let sw: Vec<Vec<f64>> = w.iter().map(|c| s.matvec(c)).collect();
        for q in vp {
            for c in &sw {
                f.push(crate::linalg::dot(q, c));
            }
        }
        f
    };
    let n = ny + (k - r) * r;
    let mut z = svec(&SymMatrix::from_diag(&e.values[..r]));
    z.resize(n, 0.0);
    let mut f = residual(&z);
    for _ in 0..30 {
        let fnorm = crate::linalg::norm(&f);
        if fnorm == 0.0 {
            break;
        }
        let mut jac = Mat::zeros(n, n);
        for c in 0..n {
            let h = 1e-7 * z[c].abs().max(1.0);
            let mut zp = z.clone();
            zp[c] += h;
            let mut zm = z.clone();
            zm[c] -= h;
            let (fp, fm) = (residual(&zp), residual(&zm));
            for rr in 0..n {
                jac.set(rr, c, (fp[rr] - fm[rr]) / (2.0 * h));
            }
        }
        let rhs: Vec<f64> = f.iter().map(|v| -v).collect();
        let step = crate::linalg::lu_solve(&jac, &rhs)?;
        let zn: Vec<f64> = z.iter().zip(&step).map(|(a, b)| a + b).collect();
        let fnew = residual(&zn);
        if !(crate::linalg::norm(&fnew) < fnorm) {
            break;
        }
        z = zn;
        f = fnew;
    }
    let (y, w) = frame(&z);
    Some(lift(&y, &w))
}

fn lift_entry(w: &[Vec<f64>], y: &SymMatrix, i: usize, j: usize) -> f64 {
    let r = w.len();
    let mut s = 0.0;
    for a in 0..r {
        for b in 0..r {
            s += w[a][i] * y.get(a, b) * w[b][j];
        }
    }
    s
}
