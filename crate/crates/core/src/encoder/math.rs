use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

pub const LN_EPS: f64 = 1e-12;

const INV_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Exact GELU, `x * Phi(x)`.
#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * INV_SQRT_2))
}

#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * INV_SQRT_2));
    cdf + x * INV_SQRT_2PI * (-0.5 * x * x).exp()
}

/// Row-wise layer norm. Returns `(y, xhat, inv_std)`.
pub fn layer_norm(
    x: ArrayView2<f64>,
    gamma: ArrayView1<f64>,
    beta: ArrayView1<f64>,
) -> (Array2<f64>, Array2<f64>, Array1<f64>) {
    let h = x.ncols() as f64;
    let mut xhat = x.to_owned();
    let mut inv_std = Array1::zeros(x.nrows());
    for (mut row, s) in xhat.axis_iter_mut(Axis(0)).zip(inv_std.iter_mut()) {
        let mean = row.sum() / h;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|v| v * v).sum::<f64>() / h;
        *s = 1.0 / (var + LN_EPS).sqrt();
        let inv = *s;
        row.mapv_inplace(|v| v * inv);
    }
    let y = &xhat * &gamma + beta;
    (y, xhat, inv_std)
}

/// Backward of [`layer_norm`]; accumulates scale/shift gradients and returns `dx`.
pub fn layer_norm_backward(
    dy: ArrayView2<f64>,
    xhat: ArrayView2<f64>,
    inv_std: ArrayView1<f64>,
    gamma: ArrayView1<f64>,
    d_gamma: &mut Array1<f64>,
    d_beta: &mut Array1<f64>,
) -> Array2<f64> {
    *d_gamma += &(&dy * &xhat).sum_axis(Axis(0));
    *d_beta += &dy.sum_axis(Axis(0));
    let h = dy.ncols() as f64;
    let mut dx = &dy * &gamma;
    for ((mut row, xh), &inv) in dx
        .axis_iter_mut(Axis(0))
        .zip(xhat.axis_iter(Axis(0)))
        .zip(inv_std)
    {
        let mean_d = row.sum() / h;
        let mean_dx = row.iter().zip(xh).map(|(d, x)| d * x).sum::<f64>() / h;
        for (d, &x) in row.iter_mut().zip(xh) {
            *d = inv * (*d - mean_d - x * mean_dx);
        }
    }
    dx
}

/// In-place softmax over each row.
pub fn softmax_rows(m: &mut Array2<f64>) {
    for mut row in m.axis_iter_mut(Axis(0)) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

/// Log-sum-exp of a row.
pub fn log_sum_exp(row: ArrayView1<f64>) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn gelu_reference_values() {
        assert_eq!(gelu(0.0), 0.0);
        // x * Phi(x) at x = 1: Phi(1) = 0.8413447460685429.
        assert!((gelu(1.0) - 0.841_344_746_068_542_9).abs() < 1e-15);
        let h = 1e-6;
        for x in [-2.0, -0.3, 0.0, 0.7, 3.0] {
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn layer_norm_statistics() {
        let x = array![[1.0, 2.0, 3.0, 4.0], [10.0, -3.0, 0.5, 7.0]];
        let g = Array1::ones(4);
        let b = Array1::zeros(4);
        let (_, xhat, _) = layer_norm(x.view(), g.view(), b.view());
        for row in xhat.axis_iter(Axis(0)) {
            let mean = row.sum() / 4.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-6);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut m = array![[1.0, 2.0, 3.0], [-1000.0, 0.0, 1000.0]];
        softmax_rows(&mut m);
        for row in m.axis_iter(Axis(0)) {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }
}
