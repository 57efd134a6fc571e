//! Small dense linear algebra: weight folding, a one-sided Jacobi SVD, and
//! the centering matrix used by kernel similarity statistics.
//!
//! Matrices are rank-2 [`Tensor`]s. Sizes here are tiny (navigator weights
//! fold to at most a few dozen rows), so everything is plain O(n^3) code
//! tuned for clarity and determinism rather than scale.

use thiserror::Error;

use crate::tensor::kernels::matmul_acc;
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum LinalgError {
    #[error("expected a rank-2 matrix, got shape {0:?}")]
    NotAMatrix(Vec<usize>),
    #[error("expected a rank-4 conv weight, got shape {0:?}")]
    NotAConvWeight(Vec<usize>),
    #[error("matrix has no elements")]
    Empty,
    #[error("inner dimensions disagree: {0} vs {1}")]
    InnerDim(usize, usize),
    #[error("jacobi sweep limit reached after {sweeps} sweeps (off-diagonal ratio {ratio:.3e})")]
    NoConvergence { sweeps: usize, ratio: f64 },
    #[error("centering matrix size must be positive")]
    ZeroSize,
}

pub type Result<T> = std::result::Result<T, LinalgError>;

const SWEEP_LIMIT: usize = 60;
const OFF_DIAG_TOL: f64 = 1e-14;

/// Thin SVD `a = u * diag(s) * vt` with `r = min(rows, cols)` factors.
///
/// `u` is `[m,r]` with orthonormal columns, `s` is descending and
/// non-negative, `vt` is `[r,n]` with orthonormal rows. Signs are fixed by
/// making the largest-magnitude entry of each `u` column positive.
#[derive(Debug, Clone)]
pub struct SvdFactors {
    pub u: Tensor,
    pub s: Vec<f64>,
    pub vt: Tensor,
}

/// Flattens a conv weight `[co,ci,kh,kw]` into `[co, ci*kh*kw]`.
///
/// Rows keep the natural row-major filter layout, so `unfold_weight` is an
/// exact inverse.
pub fn fold_weight(w: &Tensor) -> Result<Tensor> {
    let d = w.dims();
    if d.len() != 4 {
        return Err(LinalgError::NotAConvWeight(d.to_vec()));
    }
    Ok(w
        .reshape(&[d[0], d[1] * d[2] * d[3]])
        .expect("element count unchanged"))
}

/// Inverse of [`fold_weight`] for the given conv weight shape.
pub fn unfold_weight(m: &Tensor, dims: &[usize; 4]) -> Result<Tensor> {
    let d = m.dims();
    if d.len() != 2 {
        return Err(LinalgError::NotAMatrix(d.to_vec()));
    }
    if d[0] != dims[0] || d[1] != dims[1] * dims[2] * dims[3] {
        return Err(LinalgError::InnerDim(d[1], dims[1] * dims[2] * dims[3]));
    }
    Ok(m.reshape(dims).expect("element count unchanged"))
}

/// One-sided Jacobi SVD. Errors if the off-diagonal mass of the implicit
/// Gram matrix has not dropped below `1e-14` (relative) within 60 sweeps.
pub fn svd(a: &Tensor) -> Result<SvdFactors> {
    let d = a.dims();
    if d.len() != 2 {
        return Err(LinalgError::NotAMatrix(d.to_vec()));
    }
    let (m, n) = (d[0], d[1]);
    if m == 0 || n == 0 {
        return Err(LinalgError::Empty);
    }
    if m >= n {
        svd_tall(a.data(), m, n)
    } else {
        // svd of the transpose, factors swapped back
        let at = transpose(a);
        let f = svd_tall(at.data(), n, m)?;
        let u = transpose(&f.vt); // [m,m]
        let vt = transpose(&f.u); // [m,n]
        canonicalize(u, f.s, vt)
    }
}

/// `u * diag(s) * vt`.
pub fn reconstruct(f: &SvdFactors) -> Tensor {
    let (m, r) = (f.u.dims()[0], f.u.dims()[1]);
    let n = f.vt.dims()[1];
    let mut us = vec![0.0; m * r];
    for i in 0..m {
        for k in 0..r {
            us[i * r + k] = f.u.data()[i * r + k] * f.s[k];
        }
    }
    let mut out = vec![0.0; m * n];
    matmul_acc(&us, f.vt.data(), m, r, n, &mut out);
    Tensor::from_vec(&[m, n], out).expect("shape consistent")
}

/// `I - (1/n) * 1 * 1^T`, the projector that removes row means.
pub fn centering_matrix(n: usize) -> Result<Tensor> {
    if n == 0 {
        return Err(LinalgError::ZeroSize);
    }
    let inv = 1.0 / n as f64;
    let mut data = vec![-inv; n * n];
    for i in 0..n {
        data[i * n + i] += 1.0;
    }
    Ok(Tensor::from_vec(&[n, n], data).expect("shape consistent"))
}

/// Rank-2 matrix product.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (ad, bd) = (a.dims(), b.dims());
    if ad.len() != 2 {
        return Err(LinalgError::NotAMatrix(ad.to_vec()));
    }
    if bd.len() != 2 {
        return Err(LinalgError::NotAMatrix(bd.to_vec()));
    }
    if ad[1] != bd[0] {
        return Err(LinalgError::InnerDim(ad[1], bd[0]));
    }
    let mut out = vec![0.0; ad[0] * bd[1]];
    matmul_acc(a.data(), b.data(), ad[0], ad[1], bd[1], &mut out);
    Ok(Tensor::from_vec(&[ad[0], bd[1]], out).expect("shape consistent"))
}

pub fn transpose(a: &Tensor) -> Tensor {
    let d = a.dims();
    assert_eq!(d.len(), 2, "transpose expects a matrix, got {d:?}");
    let (m, n) = (d[0], d[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a.data()[i * n + j];
        }
    }
    Tensor::from_vec(&[n, m], out).expect("shape consistent")
}

// ── jacobi core ──────────────────────────────────────────────────────

/// One-sided Jacobi on a tall (or square) matrix stored row-major.
/// Orthogonalizes columns in place; column norms become singular values.
fn svd_tall(a: &[f64], m: usize, n: usize) -> Result<SvdFactors> {
    // column-major working copy for contiguous column access
    let mut cols = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            cols[j * m + i] = a[i * n + j];
        }
    }
    // v accumulates the right rotations, also column-major [n,n]
    let mut v = vec![0.0; n * n];
    for j in 0..n {
        v[j * n + j] = 1.0;
    }

    let mut converged = false;
    let mut last_ratio = 0.0;
    for _sweep in 0..SWEEP_LIMIT {
        let ratio = off_diag_ratio(&cols, m, n);
        last_ratio = ratio;
        if ratio < OFF_DIAG_TOL {
            converged = true;
            break;
        }
        for i in 0..n {
            for j in (i + 1)..n {
                rotate_pair(&mut cols, &mut v, m, n, i, j);
            }
        }
    }
    if !converged && off_diag_ratio(&cols, m, n) >= OFF_DIAG_TOL {
        return Err(LinalgError::NoConvergence {
            sweeps: SWEEP_LIMIT,
            ratio: last_ratio,
        });
    }

    // extract singular values and left vectors
    let mut order: Vec<usize> = (0..n).collect();
    let norms: Vec<f64> = (0..n)
        .map(|j| cols[j * m..][..m].iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    order.sort_by(|&x, &y| norms[y].partial_cmp(&norms[x]).expect("norms are finite"));

    let max_norm = norms[order[0]].max(f64::MIN_POSITIVE);
    let mut u = vec![0.0; m * n]; // row-major [m,n]
    let mut s = vec![0.0; n];
    let mut vt = vec![0.0; n * n]; // row-major [n,n]
    let mut placed: Vec<Vec<f64>> = Vec::with_capacity(n);
    for (k, &src) in order.iter().enumerate() {
        s[k] = norms[src];
        let col = if norms[src] > max_norm * 1e-13 {
            cols[src * m..][..m].iter().map(|x| x / norms[src]).collect::<Vec<f64>>()
        } else {
            s[k] = 0.0;
            complete_basis(&placed, m)
        };
        for i in 0..m {
            u[i * n + k] = col[i];
        }
        placed.push(col);
        for j in 0..n {
            vt[k * n + j] = v[src * n + j];
        }
    }

    canonicalize(
        Tensor::from_vec(&[m, n], u).expect("shape consistent"),
        s,
        Tensor::from_vec(&[n, n], vt).expect("shape consistent"),
    )
}

fn off_diag_ratio(cols: &[f64], m: usize, n: usize) -> f64 {
    let mut off = 0.0;
    let mut diag = 0.0;
    for i in 0..n {
        let ci = &cols[i * m..][..m];
        let d: f64 = ci.iter().map(|x| x * x).sum();
        diag += d * d;
        for j in (i + 1)..n {
            let cj = &cols[j * m..][..m];
            let g: f64 = ci.iter().zip(cj).map(|(&a, &b)| a * b).sum();
            off += 2.0 * g * g;
        }
    }
    let total = off + diag;
    if total <= 0.0 {
        0.0
    } else {
        (off / total).sqrt()
    }
}

fn rotate_pair(cols: &mut [f64], v: &mut [f64], m: usize, n: usize, i: usize, j: usize) {
    let (alpha, beta, gamma) = {
        let ci = &cols[i * m..][..m];
        let cj = &cols[j * m..][..m];
        let alpha: f64 = ci.iter().map(|x| x * x).sum();
        let beta: f64 = cj.iter().map(|x| x * x).sum();
        let gamma: f64 = ci.iter().zip(cj).map(|(&a, &b)| a * b).sum();
        (alpha, beta, gamma)
    };
    if gamma == 0.0 || gamma.abs() <= 1e-30 * (alpha * beta).sqrt() {
        return;
    }
    let zeta = (beta - alpha) / (2.0 * gamma);
    let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
    let c = 1.0 / (1.0 + t * t).sqrt();
    let s = c * t;

    let (lo, hi) = if i < j { (i, j) } else { (j, i) };
    let (head, tail) = cols.split_at_mut(hi * m);
    let ci = &mut head[lo * m..][..m];
    let cj = &mut tail[..m];
    let (ci, cj) = if i < j { (ci, cj) } else { (cj, ci) };
    for k in 0..m {
        let (a, b) = (ci[k], cj[k]);
        ci[k] = c * a - s * b;
        cj[k] = s * a + c * b;
    }
    let (head, tail) = v.split_at_mut(hi * n);
    let vi = &mut head[lo * n..][..n];
    let vj = &mut tail[..n];
    let (vi, vj) = if i < j { (vi, vj) } else { (vj, vi) };
    for k in 0..n {
        let (a, b) = (vi[k], vj[k]);
        vi[k] = c * a - s * b;
        vj[k] = s * a + c * b;
    }
}

/// Unit vector orthogonal to all of `placed`, built from the best coordinate
/// seed by Gram-Schmidt. Used only for zero singular values.
fn complete_basis(placed: &[Vec<f64>], m: usize) -> Vec<f64> {
    let mut best: Option<(f64, Vec<f64>)> = None;
    for seed in 0..m {
        let mut cand = vec![0.0; m];
        cand[seed] = 1.0;
        for p in placed {
            let dot: f64 = cand.iter().zip(p).map(|(&a, &b)| a * b).sum();
            for k in 0..m {
                cand[k] -= dot * p[k];
            }
        }
        let norm: f64 = cand.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.5 {
            for x in &mut cand {
                *x /= norm;
            }
            return cand;
        }
        if best.as_ref().map_or(true, |(bn, _)| norm > *bn) {
            best = Some((norm, cand));
        }
    }
    let (norm, mut cand) = best.expect("m > 0");
    assert!(norm > 0.0, "cannot complete orthonormal basis");
    for x in &mut cand {
        *x /= norm;
    }
    cand
}

/// Makes the largest-magnitude entry of each `u` column positive, flipping
/// the matching `vt` row with it.
fn canonicalize(mut u: Tensor, s: Vec<f64>, mut vt: Tensor) -> Result<SvdFactors> {
    let (m, r) = (u.dims()[0], u.dims()[1]);
    let n = vt.dims()[1];
    for k in 0..r {
        let mut arg = 0;
        let mut best = -1.0;
        for i in 0..m {
            let a = u.data()[i * r + k].abs();
            if a > best {
                best = a;
                arg = i;
            }
        }
        if u.data()[arg * r + k] < 0.0 {
            for i in 0..m {
                u.data_mut()[i * r + k] = -u.data()[i * r + k];
            }
            for j in 0..n {
                vt.data_mut()[k * n + j] = -vt.data()[k * n + j];
            }
        }
    }
    Ok(SvdFactors { u, s, vt })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(rows: usize, cols: usize, data: &[f64]) -> Tensor {
        Tensor::from_vec(&[rows, cols], data.to_vec()).unwrap()
    }

    fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
        a.data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }

    fn check_factors(a: &Tensor, f: &SvdFactors) {
        let r = f.s.len();
        assert_eq!(r, a.dims()[0].min(a.dims()[1]));
        // descending, non-negative
        for k in 0..r {
            assert!(f.s[k] >= 0.0);
            if k > 0 {
                assert!(f.s[k - 1] >= f.s[k], "s not descending: {:?}", f.s);
            }
        }
        // orthonormal columns of u and rows of vt
        let utu = matmul(&transpose(&f.u), &f.u).unwrap();
        let vvt = matmul(&f.vt, &transpose(&f.vt)).unwrap();
        for i in 0..r {
            for j in 0..r {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((utu.at(&[i, j]) - want).abs() < 1e-10, "u^T u != I");
                assert!((vvt.at(&[i, j]) - want).abs() < 1e-10, "vt vt^T != I");
            }
        }
        // reconstruction
        assert!(max_abs_diff(a, &reconstruct(f)) < 1e-8);
        // energy: sum s_i^2 == ||a||_F^2
        let fro: f64 = a.data().iter().map(|x| x * x).sum();
        let es: f64 = f.s.iter().map(|x| x * x).sum();
        assert!((fro - es).abs() <= 1e-10 * fro.max(1.0));
    }

    #[test]
    fn diagonal_matrix_recovers_entries_sorted() {
        let a = mat(2, 2, &[1.0, 0.0, 0.0, 3.0]);
        let f = svd(&a).unwrap();
        assert!((f.s[0] - 3.0).abs() < 1e-12);
        assert!((f.s[1] - 1.0).abs() < 1e-12);
        check_factors(&a, &f);
    }

    #[test]
    fn rotation_matrix_has_unit_spectrum() {
        let th: f64 = 0.3;
        let a = mat(2, 2, &[th.cos(), -th.sin(), th.sin(), th.cos()]);
        let f = svd(&a).unwrap();
        assert!((f.s[0] - 1.0).abs() < 1e-12);
        assert!((f.s[1] - 1.0).abs() < 1e-12);
        check_factors(&a, &f);
    }

    #[test]
    fn tall_wide_and_rank_deficient_shapes() {
        let tall = mat(4, 2, &[1.0, 2.0, 0.5, -1.0, 3.0, 0.0, -2.0, 1.5]);
        check_factors(&tall, &svd(&tall).unwrap());

        let wide = mat(2, 4, &[1.0, 2.0, 0.5, -1.0, 3.0, 0.0, -2.0, 1.5]);
        check_factors(&wide, &svd(&wide).unwrap());

        // rank 1: second singular value exactly representable as 0
        let rank1 = mat(3, 2, &[1.0, 2.0, 2.0, 4.0, 3.0, 6.0]);
        let f = svd(&rank1).unwrap();
        assert!(f.s[1].abs() < 1e-10);
        check_factors(&rank1, &f);
    }

    #[test]
    fn zero_matrix_still_yields_orthonormal_factors() {
        let z = Tensor::zeros(&[3, 2]);
        let f = svd(&z).unwrap();
        assert_eq!(f.s, vec![0.0, 0.0]);
        check_factors(&z, &f);
    }

    #[test]
    fn sign_convention_is_deterministic() {
        let a = mat(2, 2, &[2.0, 0.0, 0.0, -5.0]);
        let f = svd(&a).unwrap();
        // largest-|entry| of each u column is positive
        for k in 0..2 {
            let col: Vec<f64> = (0..2).map(|i| f.u.at(&[i, k])).collect();
            let arg = if col[0].abs() >= col[1].abs() { 0 } else { 1 };
            assert!(col[arg] > 0.0);
        }
        check_factors(&a, &f);
    }

    #[test]
    fn fold_unfold_roundtrip() {
        let w = Tensor::from_vec(&[2, 3, 1, 1], (0..6).map(|x| x as f64).collect()).unwrap();
        let m = fold_weight(&w).unwrap();
        assert_eq!(m.dims(), &[2, 3]);
        assert_eq!(m.data(), w.data());
        let back = unfold_weight(&m, &[2, 3, 1, 1]).unwrap();
        assert_eq!(back, w);

        let w = Tensor::from_vec(&[4, 2, 3, 3], (0..72).map(|x| x as f64 * 0.5).collect()).unwrap();
        let m = fold_weight(&w).unwrap();
        assert_eq!(m.dims(), &[4, 18]);
        assert_eq!(unfold_weight(&m, &[4, 2, 3, 3]).unwrap(), w);
    }

    #[test]
    fn fold_rejects_non_conv_shapes() {
        let t = mat(2, 2, &[1.0; 4]);
        assert!(matches!(fold_weight(&t), Err(LinalgError::NotAConvWeight(_))));
    }

    #[test]
    fn centering_matrix_small_case_and_projector_identities() {
        let h = centering_matrix(2).unwrap();
        assert_eq!(h.data(), &[0.5, -0.5, -0.5, 0.5]);

        let h = centering_matrix(5).unwrap();
        // idempotent: h h = h
        let hh = matmul(&h, &h).unwrap();
        assert!(max_abs_diff(&hh, &h) < 1e-12);
        // annihilates constants: h 1 = 0
        let ones = Tensor::full(&[5, 1], 1.0);
        let h1 = matmul(&h, &ones).unwrap();
        assert!(h1.data().iter().all(|x| x.abs() < 1e-12));
    }

    #[test]
    fn svd_rejects_bad_shapes() {
        assert!(matches!(svd(&Tensor::zeros(&[2, 2, 2])), Err(LinalgError::NotAMatrix(_))));
        assert!(matches!(svd(&Tensor::zeros(&[0, 3])), Err(LinalgError::Empty)));
    }
}
