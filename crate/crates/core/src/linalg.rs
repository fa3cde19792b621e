//! Dense LU solves on top of faer.

use faer::linalg::solvers::{PartialPivLu, Solve};
use faer::Mat;

use crate::error::{Error, Result};

/// Matrix–vector product `A v`.
pub fn matvec(a: &Mat<f64>, v: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; a.nrows()];
    for (j, &vj) in v.iter().enumerate() {
        if vj == 0.0 {
            continue;
        }
        for (o, aij) in out.iter_mut().zip(a.col_as_slice(j)) {
            *o += aij * vj;
        }
    }
    out
}

/// Row-major closure assembly, parallel over rows.
pub fn assemble<F>(nrows: usize, ncols: usize, row: F) -> Mat<f64>
where
    F: Fn(usize, &mut [f64]) + Sync,
{
    use rayon::prelude::*;
    let mut data = vec![0.0; nrows * ncols];
    data.par_chunks_mut(ncols.max(1)).enumerate().for_each(|(i, r)| row(i, r));
    Mat::from_fn(nrows, ncols, |i, j| data[i * ncols + j])
}

fn norm1(a: &Mat<f64>) -> f64 {
    (0..a.ncols())
        .map(|j| a.col_as_slice(j).iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Factorized square system with a 1-norm condition estimate.
pub struct DenseSolver {
    lu: PartialPivLu<f64>,
    n: usize,
    pub condition: f64,
}

impl DenseSolver {
    pub fn new(a: &Mat<f64>) -> Result<Self> {
        let n = a.nrows();
        if n != a.ncols() || n == 0 {
            return Err(Error::Invalid(format!("expected a nonempty square matrix, got {}x{}", n, a.ncols())));
        }
        let lu = a.partial_piv_lu();
        let mut solver = DenseSolver { lu, n, condition: f64::NAN };
        solver.condition = norm1(a) * solver.inverse_norm1_estimate();
        if !solver.condition.is_finite() || solver.condition > 1e14 {
            return Err(Error::Solver {
                message: "matrix is numerically singular".into(),
                condition: solver.condition,
            });
        }
        Ok(solver)
    }

    /// Hager's estimator of `‖A⁻¹‖₁`.
    fn inverse_norm1_estimate(&self) -> f64 {
        let n = self.n;
        let mut x = vec![1.0 / n as f64; n];
        let mut est = 0.0;
        for _ in 0..5 {
            let y = self.solve_raw(&x, false);
            est = y.iter().map(|v| v.abs()).sum::<f64>();
            if !est.is_finite() {
                return f64::INFINITY;
            }
            let xi: Vec<f64> = y.iter().map(|v| if *v >= 0.0 { 1.0 } else { -1.0 }).collect();
            let z = self.solve_raw(&xi, true);
            let (jmax, zmax) = z
                .iter()
                .enumerate()
                .fold((0, 0.0), |(bj, bv), (j, v)| if v.abs() > bv { (j, v.abs()) } else { (bj, bv) });
            let ztx: f64 = z.iter().zip(&x).map(|(a, b)| a * b).sum();
            if zmax <= ztx {
                break;
            }
            x = vec![0.0; n];
            x[jmax] = 1.0;
        }
        est
    }

    fn solve_raw(&self, b: &[f64], transpose: bool) -> Vec<f64> {
        let mut rhs = Mat::from_fn(self.n, 1, |i, _| b[i]);
        if transpose {
            self.lu.solve_transpose_in_place(rhs.as_mut());
        } else {
            self.lu.solve_in_place(rhs.as_mut());
        }
        rhs.col_as_slice(0).to_vec()
    }

    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>> {
        if b.len() != self.n {
            return Err(Error::Invalid(format!("right-hand side has length {}, expected {}", b.len(), self.n)));
        }
        let x = self.solve_raw(b, false);
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Solver { message: "non-finite solution".into(), condition: self.condition });
        }
        Ok(x)
    }

    pub fn n(&self) -> usize {
        self.n
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solves_and_estimates_condition() {
        let a = Mat::from_fn(3, 3, |i, j| if i == j { 2.0 } else { 0.5 });
        let s = DenseSolver::new(&a).unwrap();
        let x = s.solve(&[1.0, 2.0, 3.0]).unwrap();
        let back = matvec(&a, &x);
        for (b, e) in back.iter().zip([1.0, 2.0, 3.0]) {
            assert!((b - e).abs() < 1e-14);
        }
        assert!(s.condition > 1.0 && s.condition < 10.0);
        let singular = Mat::from_fn(2, 2, |_, _| 1.0);
        assert!(matches!(DenseSolver::new(&singular), Err(Error::Solver { .. })));
    }
}
