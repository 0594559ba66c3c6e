//! Row-major f64 matrix used for parameters, gradients, and activations.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Mat { rows, cols, data }
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn at_mut(&mut self, i: usize, j: usize) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn add_assign(&mut self, other: &Mat) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for v in &mut self.data {
            *v *= factor;
        }
    }

    /// `self (m×k) · other (k×n)`.
    pub fn matmul_nn(&self, other: &Mat) -> Mat {
        debug_assert_eq!(self.cols, other.rows);
        let mut out = Mat::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let a_row = self.row(i);
            let out_row = out.row_mut(i);
            for (kk, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in out_row.iter_mut().zip(other.row(kk)) {
                    *o += a * b;
                }
            }
        }
        out
    }

    /// `self (m×k) · other (n×k)ᵀ`, the usual `x · Wᵀ` for row-major weights.
    pub fn matmul_nt(&self, other: &Mat) -> Mat {
        debug_assert_eq!(self.cols, other.cols);
        let mut out = Mat::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a_row = self.row(i);
            let out_row = out.row_mut(i);
            for (j, o) in out_row.iter_mut().enumerate() {
                let b_row = other.row(j);
                let mut acc = 0.0;
                for (&a, &b) in a_row.iter().zip(b_row) {
                    acc += a * b;
                }
                *o = acc;
            }
        }
        out
    }

    /// `self (k×m)ᵀ · other (k×n)`, the usual `dyᵀ · x` for weight gradients.
    pub fn matmul_tn(&self, other: &Mat) -> Mat {
        debug_assert_eq!(self.rows, other.rows);
        let mut out = Mat::zeros(self.cols, other.cols);
        for kk in 0..self.rows {
            let a_row = self.row(kk);
            let b_row = other.row(kk);
            for (i, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let out_row = out.row_mut(i);
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_variants_agree_with_hand_computation() {
        // a = [[1, 2], [3, 4]], b = [[5, 6], [7, 8]]
        let a = Mat { rows: 2, cols: 2, data: vec![1.0, 2.0, 3.0, 4.0] };
        let b = Mat { rows: 2, cols: 2, data: vec![5.0, 6.0, 7.0, 8.0] };

        let nn = a.matmul_nn(&b);
        assert_eq!(nn.data, vec![19.0, 22.0, 43.0, 50.0]);

        let nt = a.matmul_nt(&b); // a · bᵀ
        assert_eq!(nt.data, vec![17.0, 23.0, 39.0, 53.0]);

        let tn = a.matmul_tn(&b); // aᵀ · b
        assert_eq!(tn.data, vec![26.0, 30.0, 38.0, 44.0]);
    }

    #[test]
    fn rectangular_shapes_line_up() {
        let x = Mat::from_fn(3, 4, |i, j| (i * 4 + j) as f64);
        let w = Mat::from_fn(5, 4, |i, j| (i + j) as f64 * 0.5);
        let y = x.matmul_nt(&w);
        assert_eq!((y.rows, y.cols), (3, 5));
        // spot check y[2][1]: dot of x row 2 with w row 1
        let expect: f64 = (0..4).map(|j| x.at(2, j) * w.at(1, j)).sum();
        assert!((y.at(2, 1) - expect).abs() < 1e-12);
    }
}
