//! Tridiagonal matrices and their factorizations.

use nalgebra::{DMatrix, DVector};

/// Square tridiagonal matrix stored by diagonals.
#[derive(Debug, Clone, PartialEq)]
pub struct Tridiagonal {
    pub lower: Vec<f64>,
    pub diag: Vec<f64>,
    pub upper: Vec<f64>,
}

impl Tridiagonal {
    pub fn zeros(n: usize) -> Self {
        Tridiagonal {
            lower: vec![0.0; n.saturating_sub(1)],
            diag: vec![0.0; n],
            upper: vec![0.0; n.saturating_sub(1)],
        }
    }

    pub fn dim(&self) -> usize {
        self.diag.len()
    }

    /// Adds a 2x2 element matrix coupling rows `i` and `i + 1`.
    /// Either index may fall outside `0..n` (boundary elements); those
    /// contributions are dropped.
    pub(crate) fn add_element(&mut self, left: Option<usize>, right: Option<usize>, local: [[f64; 2]; 2]) {
        if let Some(i) = left {
            self.diag[i] += local[0][0];
        }
        if let Some(j) = right {
            self.diag[j] += local[1][1];
        }
        if let (Some(i), Some(_)) = (left, right) {
            self.upper[i] += local[0][1];
            self.lower[i] += local[1][0];
        }
    }

    pub fn mul_vec(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut y = DVector::zeros(self.dim());
        self.mul_vec_into(x.as_slice(), y.as_mut_slice());
        y
    }

    pub(crate) fn mul_vec_into(&self, x: &[f64], y: &mut [f64]) {
        let n = self.dim();
        for i in 0..n {
            let mut s = self.diag[i] * x[i];
            if i > 0 {
                s += self.lower[i - 1] * x[i - 1];
            }
            if i + 1 < n {
                s += self.upper[i] * x[i + 1];
            }
            y[i] = s;
        }
    }

    /// `self * x` for every column of `x`.
    pub fn mul_mat(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut y = DMatrix::zeros(x.nrows(), x.ncols());
        for (xc, mut yc) in x.column_iter().zip(y.column_iter_mut()) {
            let xs: Vec<f64> = xc.iter().copied().collect();
            let mut ys = vec![0.0; xs.len()];
            self.mul_vec_into(&xs, &mut ys);
            yc.copy_from_slice(&ys);
        }
        y
    }

    /// `self + alpha * other`.
    pub fn add_scaled(&self, alpha: f64, other: &Tridiagonal) -> Tridiagonal {
        let axpy = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x + alpha * y).collect();
        Tridiagonal {
            lower: axpy(&self.lower, &other.lower),
            diag: axpy(&self.diag, &other.diag),
            upper: axpy(&self.upper, &other.upper),
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let n = self.dim();
        let mut a = DMatrix::zeros(n, n);
        for i in 0..n {
            a[(i, i)] = self.diag[i];
            if i + 1 < n {
                a[(i, i + 1)] = self.upper[i];
                a[(i + 1, i)] = self.lower[i];
            }
        }
        a
    }

    /// Thomas factorization. Requires nonzero pivots, which holds for the
    /// symmetric positive definite systems used here.
    pub fn factor(&self) -> Option<ThomasFactor> {
        let n = self.dim();
        let mut pivots = Vec::with_capacity(n);
        let mut multipliers = Vec::with_capacity(n.saturating_sub(1));
        for i in 0..n {
            let mut p = self.diag[i];
            if i > 0 {
                let m = self.lower[i - 1] / pivots[i - 1];
                p -= m * self.upper[i - 1];
                multipliers.push(m);
            }
            if p == 0.0 || !p.is_finite() {
                return None;
            }
            pivots.push(p);
        }
        Some(ThomasFactor {
            pivots,
            multipliers,
            upper: self.upper.clone(),
        })
    }

    /// Cholesky factor `L` (lower bidiagonal) of a symmetric positive definite matrix.
    pub fn cholesky(&self) -> Option<BidiagonalCholesky> {
        let n = self.dim();
        let mut diag = Vec::with_capacity(n);
        let mut sub = Vec::with_capacity(n.saturating_sub(1));
        for i in 0..n {
            let mut d = self.diag[i];
            if i > 0 {
                let l = self.lower[i - 1] / diag[i - 1];
                d -= l * l;
                sub.push(l);
            }
            if !(d > 0.0) {
                return None;
            }
            diag.push(d.sqrt());
        }
        Some(BidiagonalCholesky { diag, sub })
    }
}

/// LU factors of a tridiagonal matrix without pivoting.
#[derive(Debug, Clone)]
pub struct ThomasFactor {
    pivots: Vec<f64>,
    multipliers: Vec<f64>,
    upper: Vec<f64>,
}

impl ThomasFactor {
    pub fn solve_in_place(&self, b: &mut [f64]) {
        let n = self.pivots.len();
        for i in 1..n {
            b[i] -= self.multipliers[i - 1] * b[i - 1];
        }
        if n == 0 {
            return;
        }
        b[n - 1] /= self.pivots[n - 1];
        for i in (0..n - 1).rev() {
            b[i] = (b[i] - self.upper[i] * b[i + 1]) / self.pivots[i];
        }
    }

    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        let mut x = b.clone();
        self.solve_in_place(x.as_mut_slice());
        x
    }
}

/// `A = L L^T` with `L` lower bidiagonal.
#[derive(Debug, Clone)]
pub struct BidiagonalCholesky {
    diag: Vec<f64>,
    sub: Vec<f64>,
}

impl BidiagonalCholesky {
    /// `L^T c` for every column of `c`.
    pub fn transpose_mul_mat(&self, c: &DMatrix<f64>) -> DMatrix<f64> {
        let n = self.diag.len();
        let mut out = DMatrix::zeros(c.nrows(), c.ncols());
        for (src, mut dst) in c.column_iter().zip(out.column_iter_mut()) {
            for i in 0..n {
                let mut v = self.diag[i] * src[i];
                if i + 1 < n {
                    v += self.sub[i] * src[i + 1];
                }
                dst[i] = v;
            }
        }
        out
    }

    /// Overwrites every column of `b` with `L^{-1} b`.
    pub fn forward_solve_mat(&self, b: &mut DMatrix<f64>) {
        let n = self.diag.len();
        for mut col in b.column_iter_mut() {
            if n == 0 {
                continue;
            }
            col[0] /= self.diag[0];
            for i in 1..n {
                col[i] = (col[i] - self.sub[i - 1] * col[i - 1]) / self.diag[i];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Tridiagonal {
        Tridiagonal {
            lower: vec![-1.0, -0.5, -2.0],
            diag: vec![4.0, 3.0, 5.0, 6.0],
            upper: vec![-1.0, -0.5, -2.0],
        }
    }

    #[test]
    fn thomas_matches_dense_lu() {
        let a = sample();
        let b = DVector::from_vec(vec![1.0, -2.0, 0.5, 3.0]);
        let x = a.factor().unwrap().solve(&b);
        let dense = a.to_dense().lu().solve(&b).unwrap();
        assert!((x - dense).amax() < 1e-14);
    }

    #[test]
    fn cholesky_reproduces_the_matrix() {
        let a = sample();
        let l = a.cholesky().unwrap();
        let mut id = DMatrix::<f64>::identity(4, 4);
        l.forward_solve_mat(&mut id);
        // id now holds L^{-1}; check L^{-1} A L^{-T} = I.
        let check = &id * a.to_dense() * id.transpose();
        assert!((check - DMatrix::identity(4, 4)).amax() < 1e-13);
    }

    #[test]
    fn matvec_matches_dense() {
        let a = sample();
        let x = DVector::from_vec(vec![0.3, 1.0, -1.0, 2.0]);
        assert!((a.mul_vec(&x) - a.to_dense() * &x).amax() < 1e-15);
    }

    #[test]
    fn indefinite_matrix_has_no_cholesky() {
        let a = Tridiagonal {
            lower: vec![2.0],
            diag: vec![1.0, 1.0],
            upper: vec![2.0],
        };
        assert!(a.cholesky().is_none());
    }
}
