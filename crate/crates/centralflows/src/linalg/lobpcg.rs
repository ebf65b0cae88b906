use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::jacobi::fix_sign;
use super::{dot, norm, orthonormalize, sym_eig_dense, EigenPairs, SymMatrix};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct LobpcgOptions {
    /// Relative Rayleigh residual target: `‖Av − λv‖ ≤ tol·|λ|`.
    pub tol: f64,
    pub max_iter: usize,
    /// Extra block columns beyond the `k` requested.
    pub guard: usize,
    /// Seed for the random fill of the initial block and the symmetry probe.
    pub seed: u64,
}

impl Default for LobpcgOptions {
    fn default() -> Self {
        Self { tol: 1e-9, max_iter: 500, guard: 2, seed: 0x5eed }
    }
}

#[derive(Debug, Clone)]
pub struct LobpcgOutput {
    pub pairs: EigenPairs,
    /// Rayleigh-Ritz refinements performed after the initial projection.
    pub iterations: usize,
    pub converged: bool,
    /// `‖Av − λv‖` for each returned pair.
    pub residuals: Vec<f64>,
    /// True when the whole space was small enough to be diagonalized directly.
    pub dense: bool,
    /// The returned vectors followed by the guard Ritz vectors; pass this
    /// as `warm` on the next call so the guard columns start warm too.
    pub block: Vec<Vec<f64>>,
}

/// Once the worst relative residual is below `STALL_FLOOR`, this many
/// iterations without halving it end the iteration unconverged.
pub const STALL_LIMIT: usize = 15;
pub const STALL_FLOOR: f64 = 1e-6;

/// Top-`k` eigenpairs of a symmetric operator known only through matvecs.
///
/// When the search block would span a third of the space or more, the
/// operator is materialized and diagonalized instead; Rayleigh-Ritz on the
/// whole space is exact, so the answer is the same up to rounding.
pub fn lobpcg_topk(
    apply: &dyn Fn(&[f64]) -> Vec<f64>,
    d: usize,
    k: usize,
    warm: Option<&[Vec<f64>]>,
    opts: &LobpcgOptions,
) -> Result<LobpcgOutput> {
    if k == 0 || k > d {
        return Err(Error::Shape(format!("lobpcg: need 1 ≤ k ≤ d (k={k}, d={d})")));
    }
    if let Some(w) = warm {
        if w.iter().any(|c| c.len() != d) {
            return Err(Error::Shape("lobpcg: warm column length mismatch".into()));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    probe_symmetry(apply, d, opts.tol, &mut rng)?;

    let b = (k + opts.guard).min(d);
    if 3 * b >= d {
        return dense_topk(apply, d, k, warm);
    }

    let mut init: Vec<Vec<f64>> = warm.map(|w| w.iter().take(b).cloned().collect()).unwrap_or_default();
    let mut x = Vec::new();
    while x.len() < b {
        while init.len() < b {
            init.push(random_vec(d, &mut rng));
        }
        x = orthonormalize(std::mem::take(&mut init), 1e-10);
        init = x.clone();
    }
    let ax: Vec<Vec<f64>> = x.iter().map(|c| apply(c)).collect();
    let (mut lam, mut x, mut ax) = rayleigh_ritz(&x, &ax, b)?;
    let mut p: Vec<Vec<f64>> = Vec::new();
    let mut iterations = 0;
    let mut res;
    let (mut best, mut since_best) = (f64::INFINITY, 0);
    loop {
        res = residual_norms(&x, &ax, &lam);
        let done = (0..k).all(|i| res[i] <= opts.tol * lam[i].abs().max(f64::MIN_POSITIVE));
        // a noisy operator (finite differences) has a residual floor above tol
        let worst = (0..k).map(|i| res[i] / lam[i].abs().max(f64::MIN_POSITIVE)).fold(0.0, f64::max);
        if worst < 0.5 * best {
            (best, since_best) = (worst, 0);
        } else {
            since_best += 1;
        }
        if done || iterations >= opts.max_iter || (since_best >= STALL_LIMIT && best <= STALL_FLOOR) {
            break;
        }
        iterations += 1;
        // soft locking: converged columns stay in the block but add no residual direction
        let w: Vec<Vec<f64>> = (0..b)
            .filter(|&i| res[i] > opts.tol * lam[i].abs().max(f64::MIN_POSITIVE))
            .map(|i| x[i].iter().zip(&ax[i]).map(|(xv, av)| av - lam[i] * xv).collect())
            .collect();
        let mut basis = x.clone();
        basis.extend(w);
        basis.extend(p.iter().cloned());
        let s = orthonormalize(basis, 1e-12);
        let mut as_: Vec<Vec<f64>> = ax.clone();
        for col in &s[b..] {
            as_.push(apply(col));
        }
        let (new_lam, coeffs) = ritz_coefficients(&s, &as_, b)?;
        let combine = |cols: &[Vec<f64>], from: usize| -> Vec<Vec<f64>> {
            coeffs
                .iter()
                .map(|c| {
                    let mut out = vec![0.0; d];
                    for (j, col) in cols.iter().enumerate().skip(from) {
                        super::axpy(c[j], col, &mut out);
                    }
                    out
                })
                .collect()
        };
        x = combine(&s, 0);
        ax = combine(&as_, 0);
        p = combine(&s, b).into_iter().filter(|v| norm(v) > 1e-14).collect();
        lam = new_lam;
    }
    let converged = (0..k).all(|i| res[i] <= opts.tol * lam[i].abs().max(f64::MIN_POSITIVE));
    let guard = x.split_off(k);
    let mut vectors = x;
    align_signs(&mut vectors, warm);
    let block = vectors.iter().chain(&guard).cloned().collect();
    Ok(LobpcgOutput {
        pairs: EigenPairs { values: lam[..k].to_vec(), vectors, metric: None },
        iterations,
        converged,
        residuals: res[..k].to_vec(),
        dense: false,
        block,
    })
}

fn dense_topk(
    apply: &dyn Fn(&[f64]) -> Vec<f64>,
    d: usize,
    k: usize,
    warm: Option<&[Vec<f64>]>,
) -> Result<LobpcgOutput> {
    let mut m = SymMatrix::zeros(d);
    let mut e = vec![0.0; d];
    let mut cols = Vec::with_capacity(d);
    for j in 0..d {
        e[j] = 1.0;
        cols.push(apply(&e));
        e[j] = 0.0;
    }
    for i in 0..d {
        for j in i..d {
            m.set(i, j, 0.5 * (cols[j][i] + cols[i][j]));
        }
    }
    let full = sym_eig_dense(&m)?;
    let mut vectors: Vec<Vec<f64>> = full.vectors.into_iter().take(k).collect();
    align_signs(&mut vectors, warm);
    let values = full.values[..k].to_vec();
    let residuals = vectors
        .iter()
        .zip(&values)
        .map(|(v, &l)| {
            let av = apply(v);
            norm(&av.iter().zip(v).map(|(a, x)| a - l * x).collect::<Vec<_>>())
        })
        .collect();
    let block = vectors.clone();
    Ok(LobpcgOutput {
        pairs: EigenPairs { values, vectors, metric: None },
        iterations: 0,
        converged: true,
        residuals,
        dense: true,
        block,
    })
}

fn probe_symmetry(apply: &dyn Fn(&[f64]) -> Vec<f64>, d: usize, tol: f64, rng: &mut ChaCha8Rng) -> Result<()> {
    let u = random_vec(d, rng);
    let v = random_vec(d, rng);
    let au = apply(&u);
    let av = apply(&v);
    if au.len() != d || av.len() != d {
        return Err(Error::Shape("operator output length mismatch".into()));
    }
    if !super::all_finite(&au) || !super::all_finite(&av) {
        return Err(Error::NonFinite("operator output"));
    }
    let lhs = dot(&u, &av);
    let rhs = dot(&au, &v);
    let scale = norm(&u) * norm(&av) + norm(&au) * norm(&v);
    // finite-difference operators are only symmetric to truncation order;
    // operators that cancel to rounding level are treated as zero
    let floor = 1e-12 * norm(&u) * norm(&v);
    if (lhs - rhs).abs() > tol.max(1e-6) * scale + floor {
        return Err(Error::NotSymmetric(format!("⟨u,Av⟩={lhs:e} vs ⟨Au,v⟩={rhs:e}")));
    }
    Ok(())
}

fn random_vec(d: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn residual_norms(x: &[Vec<f64>], ax: &[Vec<f64>], lam: &[f64]) -> Vec<f64> {
    x.iter()
        .zip(ax)
        .zip(lam)
        .map(|((xv, av), &l)| av.iter().zip(xv).map(|(a, b)| (a - l * b).powi(2)).sum::<f64>().sqrt())
        .collect()
}

/// Projected eigenproblem on an orthonormal basis; returns top-`b` values and
/// the coefficient vectors (one per Ritz pair) in the basis.
fn ritz_coefficients(s: &[Vec<f64>], as_: &[Vec<f64>], b: usize) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let m = s.len();
    let g = SymMatrix::from_fn(m, |i, j| 0.5 * (dot(&s[i], &as_[j]) + dot(&s[j], &as_[i])));
    let e = sym_eig_dense(&g)?;
    let b = b.min(m);
    Ok((e.values[..b].to_vec(), e.vectors.into_iter().take(b).collect()))
}

type RitzTriple = (Vec<f64>, Vec<Vec<f64>>, Vec<Vec<f64>>);

fn rayleigh_ritz(x: &[Vec<f64>], ax: &[Vec<f64>], b: usize) -> Result<RitzTriple> {
    let (lam, coeffs) = ritz_coefficients(x, ax, b)?;
    let d = x[0].len();
    let comb = |cols: &[Vec<f64>]| -> Vec<Vec<f64>> {
        coeffs
            .iter()
            .map(|c| {
                let mut out = vec![0.0; d];
                for (j, col) in cols.iter().enumerate() {
                    super::axpy(c[j], col, &mut out);
                }
                out
            })
            .collect()
    };
    Ok((lam, comb(x), comb(ax)))
}

/// Nonnegative overlap with the matching warm column, else largest entry positive.
fn align_signs(vectors: &mut [Vec<f64>], warm: Option<&[Vec<f64>]>) {
    for (i, v) in vectors.iter_mut().enumerate() {
        match warm.and_then(|w| w.get(i)) {
            Some(wc) if dot(v, wc) != 0.0 => {
                if dot(v, wc) < 0.0 {
                    v.iter_mut().for_each(|x| *x = -*x);
                }
            }
            _ => fix_sign(v),
        }
    }
}
