//! Dense row-major f64 matrix and a bias-carrying linear layer. Just enough
//! linear algebra for the micro network; rows are points, columns channels.

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |x| x.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c);
            data.extend(row);
        }
        Self { rows: r, cols: c, data }
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Fully connected layer: `y = W x + b`, weights stored out_dim x in_dim.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Linear {
    pub fn zeros(out_dim: usize, in_dim: usize) -> Self {
        Self { weight: Matrix::zeros(out_dim, in_dim), bias: vec![0.0; out_dim] }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows
    }

    pub fn apply_into(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.in_dim());
        debug_assert_eq!(out.len(), self.out_dim());
        for (o, (w_row, &b)) in out
            .iter_mut()
            .zip((0..self.out_dim()).map(|r| self.weight.row(r)).zip(&self.bias))
        {
            let mut acc = b;
            for (wi, xi) in w_row.iter().zip(x) {
                acc += wi * xi;
            }
            *o = acc;
        }
    }

    /// Applies the layer to every row of `x`.
    pub fn apply_rows(&self, x: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(x.rows, self.out_dim());
        let cols = out.cols;
        for r in 0..x.rows {
            self.apply_into(x.row(r), &mut out.data[r * cols..(r + 1) * cols]);
        }
        out
    }

    /// Accumulates parameter gradients and the input gradient for one sample:
    /// `d_out` is the gradient at this layer's output.
    pub fn backward_sample(
        &self,
        x: &[f64],
        d_out: &[f64],
        grad: &mut Linear,
        d_in: Option<&mut [f64]>,
    ) {
        for (r, &g) in d_out.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            grad.bias[r] += g;
            let w_row = grad.weight.row_mut(r);
            for (wg, &xi) in w_row.iter_mut().zip(x) {
                *wg += g * xi;
            }
        }
        if let Some(d_in) = d_in {
            for (c, di) in d_in.iter_mut().enumerate() {
                let mut acc = 0.0;
                for (r, &g) in d_out.iter().enumerate() {
                    acc += self.weight.get(r, c) * g;
                }
                *di += acc;
            }
        }
    }
}

#[inline]
pub fn leaky_relu(x: f64, slope: f64) -> f64 {
    if x >= 0.0 {
        x
    } else {
        slope * x
    }
}

#[inline]
pub fn leaky_relu_grad(x: f64, slope: f64) -> f64 {
    if x >= 0.0 {
        1.0
    } else {
        slope
    }
}
