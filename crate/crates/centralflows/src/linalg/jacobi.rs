use super::{EigenPairs, SymMatrix};
use crate::error::{Error, Result};

const MAX_SWEEPS: usize = 100;

/// Full eigendecomposition by cyclic Jacobi rotations.
///
/// Eigenvalues come back in descending order. Each eigenvector has its
/// largest-magnitude entry made positive so results are reproducible.
pub fn sym_eig_dense(m: &SymMatrix) -> Result<EigenPairs> {
    let n = m.dim();
    if n > 512 {
        return Err(Error::Shape(format!("dense eigensolver limited to 512 (got {n})")));
    }
    if !m.is_finite() {
        return Err(Error::NonFinite("eigensolver input"));
    }
    let mut a: Vec<f64> = m.as_slice().to_vec();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    if scale > 0.0 {
        for sweep in 0..MAX_SWEEPS {
            let mut off = 0.0;
            for p in 0..n {
                for q in p + 1..n {
                    off += a[p * n + q] * a[p * n + q];
                }
            }
            if off.sqrt() <= 1e-15 * scale {
                break;
            }
            if sweep + 1 == MAX_SWEEPS {
                return Err(Error::NoConvergence("jacobi sweeps exhausted".into()));
            }
            for p in 0..n {
                for q in p + 1..n {
                    let apq = a[p * n + q];
                    if apq.abs() <= 1e-300 {
                        continue;
                    }
                    let app = a[p * n + p];
                    let aqq = a[q * n + q];
                    // skip rotations that cannot change either diagonal entry
                    let g = 100.0 * apq.abs();
                    if sweep > 3 && app.abs() + g == app.abs() && aqq.abs() + g == aqq.abs() {
                        a[p * n + q] = 0.0;
                        a[q * n + p] = 0.0;
                        continue;
                    }
                    let theta = (aqq - app) / (2.0 * apq);
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let t = if theta == 0.0 { 1.0 } else { t };
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let s = t * c;
                    let tau = s / (1.0 + c);
                    a[p * n + p] = app - t * apq;
                    a[q * n + q] = aqq + t * apq;
                    a[p * n + q] = 0.0;
                    a[q * n + p] = 0.0;
                    for r in 0..n {
                        if r != p && r != q {
                            let arp = a[r * n + p];
                            let arq = a[r * n + q];
                            let nrp = arp - s * (arq + tau * arp);
                            let nrq = arq + s * (arp - tau * arq);
                            a[r * n + p] = nrp;
                            a[p * n + r] = nrp;
                            a[r * n + q] = nrq;
                            a[q * n + r] = nrq;
                        }
                    }
                    for r in 0..n {
                        let vrp = v[r * n + p];
                        let vrq = v[r * n + q];
                        v[r * n + p] = vrp - s * (vrq + tau * vrp);
                        v[r * n + q] = vrq + s * (vrp - tau * vrq);
                    }
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[j * n + j].total_cmp(&a[i * n + i]).then(i.cmp(&j)));
    let values = order.iter().map(|&i| a[i * n + i]).collect();
    let vectors = order
        .iter()
        .map(|&c| {
            let mut col: Vec<f64> = (0..n).map(|r| v[r * n + c]).collect();
            fix_sign(&mut col);
            col
        })
        .collect();
    Ok(EigenPairs { values, vectors, metric: None })
}

/// Makes the largest-magnitude entry positive (first one on ties).
pub(crate) fn fix_sign(col: &mut [f64]) {
    let mut best = 0;
    for (i, x) in col.iter().enumerate() {
        if x.abs() > col[best].abs() * (1.0 + 1e-12) {
            best = i;
        }
    }
    if col.get(best).is_some_and(|&x| x < 0.0) {
        col.iter_mut().for_each(|x| *x = -*x);
    }
}

/// Frobenius-nearest positive semidefinite matrix: clamps negative eigenvalues.
pub fn psd_project(m: &SymMatrix) -> Result<SymMatrix> {
    let e = sym_eig_dense(m)?;
    if e.values.iter().all(|&l| l >= 0.0) {
        return Ok(m.clone());
    }
    let w: Vec<f64> = e.values.iter().map(|&l| l.max(0.0)).collect();
    Ok(SymMatrix::from_outer(&e.vectors, &w))
}
