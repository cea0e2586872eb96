//! Slice-level forward and backward math shared by the tape and by plain
//! (non-differentiated) callers.

pub const LAYER_NORM_EPS: f64 = 1e-12;

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_COEF: f64 = 0.044_715;

/// `out = op(a) · op(b) + beta · out` where `op` optionally transposes.
/// `a` is `m×k` after `op`, `b` is `k×n` after `op`; all storage row-major.
#[allow(clippy::too_many_arguments)]
pub fn gemm_into(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    beta: f64,
    out: &mut [f64],
) {
    assert_eq!(a.len(), m * k, "gemm: lhs has {} values, expected {m}x{k}", a.len());
    assert_eq!(b.len(), k * n, "gemm: rhs has {} values, expected {k}x{n}", b.len());
    assert_eq!(out.len(), m * n, "gemm: output size");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for o in out.iter_mut() {
            *o *= beta;
        }
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above pin every buffer to the extents implied by
    // (m, k, n) and the chosen strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub fn gemm(m: usize, k: usize, n: usize, a: &[f64], trans_a: bool, b: &[f64], trans_b: bool) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    gemm_into(m, k, n, a, trans_a, b, trans_b, 0.0, &mut out);
    out
}

/// In-place numerically stable softmax over each row of width `cols`.
/// Rows whose entries are all `-inf` become all zeros.
pub fn softmax_rows(x: &mut [f64], cols: usize) {
    for row in x.chunks_mut(cols) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            row.fill(0.0);
            continue;
        }
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

/// Given softmax output `p` and upstream `dp`, write `dx` for each row.
pub fn softmax_rows_backward(p: &[f64], dp: &[f64], cols: usize, dx: &mut [f64]) {
    for ((pr, gr), dr) in p.chunks(cols).zip(dp.chunks(cols)).zip(dx.chunks_mut(cols)) {
        let dot: f64 = pr.iter().zip(gr).map(|(a, b)| a * b).sum();
        for ((d, &pv), &gv) in dr.iter_mut().zip(pr).zip(gr) {
            *d += pv * (gv - dot);
        }
    }
}

/// GELU, tanh approximation.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_COEF * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let inner = SQRT_2_OVER_PI * (x + GELU_COEF * x * x * x);
    let t = inner.tanh();
    let dinner = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_COEF * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn relu(x: f64) -> f64 {
    x.max(0.0)
}

/// Row-wise layer norm. Returns `(y, xhat, inv_std)`.
pub fn layer_norm(x: &[f64], cols: usize, gamma: &[f64], beta: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let rows = x.len() / cols;
    let mut y = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut inv_std = vec![0.0; rows];
    for r in 0..rows {
        let xr = &x[r * cols..(r + 1) * cols];
        let mean = xr.iter().sum::<f64>() / cols as f64;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
        let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        inv_std[r] = is;
        for c in 0..cols {
            let h = (xr[c] - mean) * is;
            xhat[r * cols + c] = h;
            y[r * cols + c] = gamma[c] * h + beta[c];
        }
    }
    (y, xhat, inv_std)
}

/// Backward of [`layer_norm`]; accumulates into `dx`, `dgamma`, `dbeta`.
#[allow(clippy::too_many_arguments)]
pub fn layer_norm_backward(
    dy: &[f64],
    xhat: &[f64],
    inv_std: &[f64],
    gamma: &[f64],
    cols: usize,
    dx: Option<&mut [f64]>,
    dgamma: Option<&mut [f64]>,
    dbeta: Option<&mut [f64]>,
) {
    let rows = dy.len() / cols;
    if let Some(dg) = dgamma {
        for r in 0..rows {
            for c in 0..cols {
                dg[c] += dy[r * cols + c] * xhat[r * cols + c];
            }
        }
    }
    if let Some(db) = dbeta {
        for r in 0..rows {
            for c in 0..cols {
                db[c] += dy[r * cols + c];
            }
        }
    }
    if let Some(dx) = dx {
        let n = cols as f64;
        for r in 0..rows {
            let dyr = &dy[r * cols..(r + 1) * cols];
            let hr = &xhat[r * cols..(r + 1) * cols];
            let mut sum_g = 0.0;
            let mut sum_gh = 0.0;
            for c in 0..cols {
                let g = dyr[c] * gamma[c];
                sum_g += g;
                sum_gh += g * hr[c];
            }
            for c in 0..cols {
                let g = dyr[c] * gamma[c];
                dx[r * cols + c] += inv_std[r] * (g - sum_g / n - hr[c] * sum_gh / n);
            }
        }
    }
}

/// `log Σ exp(x)` computed stably.
pub fn log_sum_exp(x: &[f64]) -> f64 {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Softmax cross-entropy of one row against a class index.
pub fn cross_entropy(logits: &[f64], target: usize) -> f64 {
    log_sum_exp(logits) - logits[target]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut x = vec![0.0; 4];
        softmax_rows(&mut x, 4);
        assert_eq!(x, vec![0.25; 4]);
    }

    #[test]
    fn masked_row_becomes_zero() {
        let mut x = vec![f64::NEG_INFINITY; 3];
        softmax_rows(&mut x, 3);
        assert_eq!(x, vec![0.0; 3]);
    }

    #[test]
    fn gelu_fixed_point_and_slope() {
        assert_eq!(gelu(0.0), 0.0);
        assert!((gelu_grad(0.0) - 0.5).abs() < 1e-15);
        for &x in &[-2.0, -0.3, 0.7, 3.1] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0);
        assert!(sigmoid(800.0) <= 1.0);
    }

    #[test]
    fn gemm_transposes() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        assert_eq!(gemm(2, 2, 2, &a, false, &b, false), vec![19.0, 22.0, 43.0, 50.0]);
        assert_eq!(gemm(2, 2, 2, &a, true, &b, false), vec![26.0, 30.0, 38.0, 44.0]);
        assert_eq!(gemm(2, 2, 2, &a, false, &b, true), vec![17.0, 23.0, 39.0, 53.0]);
    }

    #[test]
    fn uniform_cross_entropy_is_log_n() {
        assert!((cross_entropy(&[0.3; 4], 2) - 4f64.ln()).abs() < 1e-12);
    }
}
