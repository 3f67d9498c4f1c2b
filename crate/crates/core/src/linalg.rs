//! Row-major dense matrices and the handful of kernels the encoder needs.

#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length");
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Self {
            rows: rows.len(),
            cols,
            data,
        }
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn add_assign(&mut self, other: &Mat) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Mean over rows.
    pub fn mean_rows(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for i in 0..self.rows {
            for (o, v) in out.iter_mut().zip(self.row(i)) {
                *o += v;
            }
        }
        let n = self.rows as f64;
        out.iter_mut().for_each(|o| *o /= n);
        out
    }
}

/// `y = x W + b` with `W` stored row-major as `[x.cols × out]`.
pub fn affine(x: &Mat, w: &[f64], b: Option<&[f64]>, out: usize) -> Mat {
    debug_assert_eq!(w.len(), x.cols * out);
    let mut y = Mat::zeros(x.rows, out);
    for i in 0..x.rows {
        let yr = y.row_mut(i);
        if let Some(b) = b {
            yr.copy_from_slice(b);
        }
        for (k, &a) in x.row(i).iter().enumerate() {
            if a == 0.0 {
                continue;
            }
            let wr = &w[k * out..(k + 1) * out];
            for (yv, wv) in yr.iter_mut().zip(wr) {
                *yv += a * wv;
            }
        }
    }
    y
}

/// Backward of [`affine`]: accumulates into `dw`/`db` and returns `dx`.
pub fn affine_backward(
    x: &Mat,
    w: &[f64],
    dy: &Mat,
    dw: &mut [f64],
    db: Option<&mut [f64]>,
) -> Mat {
    let out = dy.cols;
    let mut dx = Mat::zeros(x.rows, x.cols);
    for i in 0..x.rows {
        let dyr = dy.row(i);
        let xr = x.row(i);
        let dxr = dx.row_mut(i);
        for k in 0..x.cols {
            let wr = &w[k * out..(k + 1) * out];
            dxr[k] = dot(wr, dyr);
            let a = xr[k];
            if a != 0.0 {
                let dwr = &mut dw[k * out..(k + 1) * out];
                for (g, d) in dwr.iter_mut().zip(dyr) {
                    *g += a * d;
                }
            }
        }
    }
    if let Some(db) = db {
        for i in 0..dy.rows {
            for (g, d) in db.iter_mut().zip(dy.row(i)) {
                *g += d;
            }
        }
    }
    dx
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Numerically stable softmax in place.
pub fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}
