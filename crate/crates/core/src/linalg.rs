//! Plain row-major matrix math for the inference hot path.
//!
//! The autodiff tape is only used while training; rollouts and planning go
//! through these allocation-light routines instead. Parity between the two
//! paths is covered by tests in `nn`.

/// Dense row-major matrix of f64.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "Mat size mismatch");
        Mat { rows, cols, data }
    }

    /// Single row matrix from a slice.
    pub fn row_vec(v: &[f64]) -> Self {
        Mat {
            rows: 1,
            cols: v.len(),
            data: v.to_vec(),
        }
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_empty(&self) -> bool {
        self.rows == 0
    }

    /// C = self * rhs, shapes [m,k] x [k,n].
    pub fn matmul(&self, rhs: &Mat) -> Mat {
        assert_eq!(self.cols, rhs.rows, "matmul inner dims");
        let (m, k, n) = (self.rows, self.cols, rhs.cols);
        let mut out = Mat::zeros(m, n);
        // ikj order keeps the inner loop contiguous on both rhs and out.
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            let o_row = &mut out.data[i * n..(i + 1) * n];
            for (p, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let b_row = &rhs.data[p * n..(p + 1) * n];
                for j in 0..n {
                    o_row[j] += a * b_row[j];
                }
            }
        }
        out
    }

    /// C = self * rhs^T, shapes [m,k] x [n,k] -> [m,n].
    pub fn matmul_transpose(&self, rhs: &Mat) -> Mat {
        assert_eq!(self.cols, rhs.cols, "matmul_transpose inner dims");
        let (m, k, n) = (self.rows, self.cols, rhs.rows);
        let mut out = Mat::zeros(m, n);
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            let o_row = &mut out.data[i * n..(i + 1) * n];
            for j in 0..n {
                let b_row = &rhs.data[j * k..(j + 1) * k];
                let mut s = 0.0;
                for p in 0..k {
                    s += a_row[p] * b_row[p];
                }
                o_row[j] = s;
            }
        }
        out
    }

    /// Add a row vector to every row in place.
    pub fn add_row_inplace(&mut self, bias: &[f64]) {
        assert_eq!(self.cols, bias.len(), "bias length");
        for r in 0..self.rows {
            let row = &mut self.data[r * self.cols..(r + 1) * self.cols];
            for (x, b) in row.iter_mut().zip(bias.iter()) {
                *x += b;
            }
        }
    }

    pub fn tanh_inplace(&mut self) {
        for x in &mut self.data {
            *x = x.tanh();
        }
    }

    /// Softmax over each row in place.
    pub fn softmax_rows_inplace(&mut self) {
        for r in 0..self.rows {
            let row = &mut self.data[r * self.cols..(r + 1) * self.cols];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                sum += *x;
            }
            for x in row.iter_mut() {
                *x /= sum;
            }
        }
    }

    /// Column means, [rows,cols] -> vec of len cols. Empty input gives zeros.
    pub fn col_mean(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        if self.rows == 0 {
            return out;
        }
        for r in 0..self.rows {
            let row = self.row(r);
            for (o, x) in out.iter_mut().zip(row.iter()) {
                *o += x;
            }
        }
        for o in &mut out {
            *o /= self.rows as f64;
        }
        out
    }

    /// Horizontal concatenation of matrices with equal row counts.
    pub fn hcat(parts: &[&Mat]) -> Mat {
        assert!(!parts.is_empty());
        let rows = parts[0].rows;
        let cols: usize = parts.iter().map(|m| m.cols).sum();
        let mut out = Mat::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            let o_row = &mut out.data[r * cols..(r + 1) * cols];
            for m in parts {
                assert_eq!(m.rows, rows, "hcat row counts");
                o_row[off..off + m.cols].copy_from_slice(m.row(r));
                off += m.cols;
            }
        }
        out
    }

    pub fn scale_inplace(&mut self, c: f64) {
        for x in &mut self.data {
            *x *= c;
        }
    }
}
