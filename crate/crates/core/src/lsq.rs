//! Ordinary least squares over large sample sets with reductions that do not
//! depend on the thread count: partial sums are taken over fixed-size row
//! chunks and combined sequentially in chunk order.
//!
//! Columns are centred and scaled before solving; near-constant columns and
//! near-null directions of the scaled Gram matrix are dropped, so a design
//! whose regressors are all constant collapses to the sample mean.

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::sym_pinv_solve;

pub const CHUNK_ROWS: usize = 1024;
const REL_EIG_TOL: f64 = 1e-10;

#[derive(Clone, Debug)]
pub struct LsqFit {
    /// `D × q` coefficients on the raw regressors; row 0 is the intercept.
    pub coef: DMatrix<f64>,
    pub rank: usize,
    /// True when some regressor was dropped as constant or collinear.
    pub deficient: bool,
}

/// Fits `y ≈ x · coef` where `x` is `S × D` row-major with a constant first
/// column and `y` is `S × q` row-major.
pub fn fit(x: &[f64], y: &[f64], d: usize, q: usize) -> Result<LsqFit> {
    if d == 0 || x.len() % d != 0 || y.len() != (x.len() / d) * q {
        return Err(Error::Structure("regression design and targets disagree".into()));
    }
    let s = x.len() / d;
    if s == 0 {
        return Err(Error::Empty("regression without samples".into()));
    }
    let sums: Vec<(Vec<f64>, Vec<f64>)> = x
        .par_chunks(CHUNK_ROWS * d)
        .zip(y.par_chunks(CHUNK_ROWS * q))
        .map(|(xc, yc)| {
            let mut sx = vec![0.0; d];
            let mut sy = vec![0.0; q];
            for row in xc.chunks_exact(d) {
                for (a, v) in sx.iter_mut().zip(row) {
                    *a += v;
                }
            }
            for row in yc.chunks_exact(q) {
                for (a, v) in sy.iter_mut().zip(row) {
                    *a += v;
                }
            }
            (sx, sy)
        })
        .collect();
    let mut mx = vec![0.0; d];
    let mut my = vec![0.0; q];
    for (sx, sy) in &sums {
        mx.iter_mut().zip(sx).for_each(|(a, b)| *a += b);
        my.iter_mut().zip(sy).for_each(|(a, b)| *a += b);
    }
    mx.iter_mut().for_each(|v| *v /= s as f64);
    my.iter_mut().for_each(|v| *v /= s as f64);

    let partial: Vec<(Vec<f64>, Vec<f64>)> = x
        .par_chunks(CHUNK_ROWS * d)
        .zip(y.par_chunks(CHUNK_ROWS * q))
        .map(|(xc, yc)| {
            let mut cxx = vec![0.0; d * d];
            let mut cxy = vec![0.0; d * q];
            let mut cx = vec![0.0; d];
            let mut cy = vec![0.0; q];
            for (row, yr) in xc.chunks_exact(d).zip(yc.chunks_exact(q)) {
                for c in 1..d {
                    cx[c] = row[c] - mx[c];
                }
                for c in 0..q {
                    cy[c] = yr[c] - my[c];
                }
                for a in 1..d {
                    let va = cx[a];
                    if va == 0.0 {
                        continue;
                    }
                    for b in a..d {
                        cxx[a * d + b] += va * cx[b];
                    }
                    for c in 0..q {
                        cxy[a * q + c] += va * cy[c];
                    }
                }
            }
            (cxx, cxy)
        })
        .collect();
    let mut cxx = vec![0.0; d * d];
    let mut cxy = vec![0.0; d * q];
    for (a, b) in &partial {
        cxx.iter_mut().zip(a).for_each(|(u, v)| *u += v);
        cxy.iter_mut().zip(b).for_each(|(u, v)| *u += v);
    }
    let sd: Vec<f64> = (0..d).map(|c| (cxx[c * d + c] / s as f64).max(0.0).sqrt()).collect();
    let kept: Vec<usize> = (1..d)
        .filter(|&c| sd[c] > 1e-12 * (1.0 + mx[c].abs()) && sd[c] > 0.0)
        .collect();
    let mut coef = DMatrix::zeros(d, q);
    let mut rank = 1;
    if !kept.is_empty() {
        let kk = kept.len();
        let corr = DMatrix::from_fn(kk, kk, |a, b| {
            let (ca, cb) = (kept[a].min(kept[b]), kept[a].max(kept[b]));
            cxx[ca * d + cb] / (s as f64 * sd[ca] * sd[cb])
        });
        let rhs = DMatrix::from_fn(kk, q, |a, c| cxy[kept[a] * q + c] / (s as f64 * sd[kept[a]]));
        let (w, r) = sym_pinv_solve(&corr, &rhs, REL_EIG_TOL)?;
        rank += r;
        for (a, &col) in kept.iter().enumerate() {
            for c in 0..q {
                coef[(col, c)] = w[(a, c)] / sd[col];
            }
        }
    }
    for c in 0..q {
        let mut icpt = my[c];
        for col in 1..d {
            icpt -= coef[(col, c)] * mx[col];
        }
        coef[(0, c)] = icpt;
    }
    Ok(LsqFit { coef, rank, deficient: rank < d })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn recovers_exact_affine_relation() {
        let s = 5000;
        let mut x = Vec::new();
        let mut y = Vec::new();
        for i in 0..s {
            let a = (i as f64 * 0.37).sin();
            let b = (i as f64 * 0.11).cos();
            x.extend([1.0, a, b]);
            y.extend([2.0 + 3.0 * a - b, -1.0 + 0.5 * b]);
        }
        let f = fit(&x, &y, 3, 2).unwrap();
        assert!(!f.deficient);
        let expect = [[2.0, -1.0], [3.0, 0.0], [-1.0, 0.5]];
        for r in 0..3 {
            for c in 0..2 {
                assert!((f.coef[(r, c)] - expect[r][c]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn constant_design_gives_mean() {
        let x = vec![1.0, 4.0, 1.0, 4.0, 1.0, 4.0];
        let y = vec![1.0, 2.0, 6.0];
        let f = fit(&x, &y, 2, 1).unwrap();
        assert!(f.deficient);
        assert!((f.coef[(0, 0)] - 3.0).abs() < 1e-14);
        assert_eq!(f.coef[(1, 0)], 0.0);
    }

    #[test]
    fn collinear_columns_flagged() {
        let mut x = Vec::new();
        let mut y = Vec::new();
        for i in 0..100 {
            let a = i as f64;
            x.extend([1.0, a, 2.0 * a]);
            y.push(5.0 * a);
        }
        let f = fit(&x, &y, 3, 1).unwrap();
        assert!(f.deficient);
        let pred = f.coef[(0, 0)] + f.coef[(1, 0)] * 10.0 + f.coef[(2, 0)] * 20.0;
        assert!((pred - 50.0).abs() < 1e-8);
    }
}
