//! Small dense helpers shared by the numerical modules.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Frobenius norm `sqrt(tr(M'M))`.
pub fn frob(m: &DMatrix<f64>) -> f64 {
    m.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub fn frob_vec(v: &DVector<f64>) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Largest eigenvalue of the symmetric part `(M + M')/2`.
pub fn lambda_max_sym(m: &DMatrix<f64>, name: &str) -> Result<f64> {
    if m.nrows() != m.ncols() {
        return Err(Error::Structure(format!("{name} is not square")));
    }
    if m.nrows() == 0 {
        return Ok(0.0);
    }
    let s = (m + m.transpose()) * 0.5;
    let eig = s
        .try_symmetric_eigen(1e-14, 10_000)
        .ok_or_else(|| Error::Eigen(name.to_string()))?;
    Ok(eig.eigenvalues.iter().cloned().fold(f64::NEG_INFINITY, f64::max))
}

/// Smallest eigenvalue of a matrix assumed symmetric.
pub fn lambda_min_sym(m: &DMatrix<f64>, name: &str) -> Result<f64> {
    let eig = m
        .clone()
        .try_symmetric_eigen(1e-14, 10_000)
        .ok_or_else(|| Error::Eigen(name.to_string()))?;
    Ok(eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min))
}

pub fn is_symmetric(m: &DMatrix<f64>, tol: f64) -> bool {
    m.nrows() == m.ncols() && (m - m.transpose()).amax() <= tol * (1.0 + m.amax())
}

/// `out += a * x` for a dense matrix and a slice, no allocation.
#[inline]
pub fn gemv_acc(out: &mut [f64], a: &DMatrix<f64>, x: &[f64]) {
    let nr = a.nrows();
    debug_assert_eq!(a.ncols(), x.len());
    debug_assert_eq!(nr, out.len());
    let data = a.as_slice();
    for (c, xc) in x.iter().enumerate() {
        if *xc == 0.0 {
            continue;
        }
        let col = &data[c * nr..(c + 1) * nr];
        for (o, v) in out.iter_mut().zip(col) {
            *o += v * xc;
        }
    }
}

/// `out += a' * x`.
#[inline]
pub fn gemv_t_acc(out: &mut [f64], a: &DMatrix<f64>, x: &[f64]) {
    let nr = a.nrows();
    debug_assert_eq!(nr, x.len());
    let data = a.as_slice();
    for (c, o) in out.iter_mut().enumerate() {
        let col = &data[c * nr..(c + 1) * nr];
        let mut s = 0.0;
        for (v, xr) in col.iter().zip(x) {
            s += v * xr;
        }
        *o += s;
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Quadratic form `x' M x`.
#[inline]
pub fn quad(m: &DMatrix<f64>, x: &[f64]) -> f64 {
    let mut s = 0.0;
    for c in 0..m.ncols() {
        let col = m.column(c);
        let mut t = 0.0;
        for (v, xr) in col.iter().zip(x) {
            t += v * xr;
        }
        s += t * x[c];
    }
    s
}

/// Block-diagonal assembly.
pub fn block_diag(blocks: &[&DMatrix<f64>]) -> DMatrix<f64> {
    let rows: usize = blocks.iter().map(|b| b.nrows()).sum();
    let cols: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = DMatrix::zeros(rows, cols);
    let (mut r, mut c) = (0, 0);
    for b in blocks {
        out.view_mut((r, c), (b.nrows(), b.ncols())).copy_from(*b);
        r += b.nrows();
        c += b.ncols();
    }
    out
}

/// Kronecker product of a row vector with a matrix: `[v_0 M, v_1 M, ...]`.
pub fn kron_row(v: &[f64], m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(m.nrows(), m.ncols() * v.len());
    for (j, vj) in v.iter().enumerate() {
        out.view_mut((0, j * m.ncols()), (m.nrows(), m.ncols()))
            .copy_from(&(m * *vj));
    }
    out
}

/// Moore-Penrose style solve of a symmetric PSD system `H x = b`, dropping
/// eigen-directions below `rel_tol * max_eig`. Returns the solution and the
/// retained rank.
pub fn sym_pinv_solve(h: &DMatrix<f64>, b: &DMatrix<f64>, rel_tol: f64) -> Result<(DMatrix<f64>, usize)> {
    let eig = h
        .clone()
        .try_symmetric_eigen(1e-15, 10_000)
        .ok_or_else(|| Error::Eigen("regression gram".into()))?;
    let lmax = eig.eigenvalues.iter().cloned().fold(0.0_f64, f64::max);
    let v = &eig.eigenvectors;
    let vtb = v.transpose() * b;
    let mut scaled = vtb.clone();
    let mut rank = 0;
    for (i, l) in eig.eigenvalues.iter().enumerate() {
        if lmax > 0.0 && *l > rel_tol * lmax {
            rank += 1;
            let inv = 1.0 / l;
            for c in 0..scaled.ncols() {
                scaled[(i, c)] *= inv;
            }
        } else {
            for c in 0..scaled.ncols() {
                scaled[(i, c)] = 0.0;
            }
        }
    }
    Ok((v * scaled, rank))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frobenius_identity() {
        assert!((frob(&DMatrix::identity(2, 2)) - 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn kron_row_layout() {
        let m = DMatrix::from_element(1, 1, 3.0);
        let k = kron_row(&[0.0, 0.4, 0.6], &m);
        assert_eq!(k.ncols(), 3);
        assert!((k[(0, 1)] - 1.2).abs() < 1e-15);
        assert!((k[(0, 2)] - 1.8).abs() < 1e-15);
    }

    #[test]
    fn gemv_matches_nalgebra() {
        let a = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, -1.0, 0.5, 4.0]);
        let x = [0.3, -0.7, 2.0];
        let mut out = [1.0, 1.0];
        gemv_acc(&mut out, &a, &x);
        let r = &a * DVector::from_row_slice(&x);
        assert!((out[0] - 1.0 - r[0]).abs() < 1e-14);
        assert!((out[1] - 1.0 - r[1]).abs() < 1e-14);
        let mut t = [0.0; 3];
        gemv_t_acc(&mut t, &a, &[1.0, 2.0]);
        let rt = a.transpose() * DVector::from_row_slice(&[1.0, 2.0]);
        for i in 0..3 {
            assert!((t[i] - rt[i]).abs() < 1e-14);
        }
        assert!((quad(&DMatrix::identity(3, 3), &x) - dot(&x, &x)).abs() < 1e-15);
    }

    #[test]
    fn pinv_drops_null_direction() {
        let h = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let b = DMatrix::from_row_slice(2, 1, &[2.0, 2.0]);
        let (x, rank) = sym_pinv_solve(&h, &b, 1e-12).unwrap();
        assert_eq!(rank, 1);
        assert!((x[(0, 0)] - 1.0).abs() < 1e-12 && (x[(1, 0)] - 1.0).abs() < 1e-12);
    }
}
