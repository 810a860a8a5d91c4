//! Fixed separable bilinear upsampling from the token grid to pixels.

use ndarray::{Array2, ArrayView2};

/// `up(X) = R · X · Cᵀ` with half-pixel-centred interpolation weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Upsampler {
    rows: Array2<f64>,
    cols: Array2<f64>,
}

fn interpolation_matrix(out_len: usize, in_len: usize) -> Array2<f64> {
    let mut m = Array2::zeros((out_len, in_len));
    let scale = in_len as f64 / out_len as f64;
    for i in 0..out_len {
        let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_len - 1) as f64);
        let lo = src.floor() as usize;
        let hi = (lo + 1).min(in_len - 1);
        let frac = src - lo as f64;
        m[[i, lo]] += 1.0 - frac;
        m[[i, hi]] += frac;
    }
    m
}

impl Upsampler {
    pub fn new(token_h: usize, token_w: usize, height: usize, width: usize) -> Self {
        Self {
            rows: interpolation_matrix(height, token_h),
            cols: interpolation_matrix(width, token_w),
        }
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Array2<f64> {
        self.rows.dot(&x).dot(&self.cols.t())
    }

    pub fn backward(&self, grad_out: ArrayView2<f64>) -> Array2<f64> {
        self.rows.t().dot(&grad_out).dot(&self.cols)
    }
}
