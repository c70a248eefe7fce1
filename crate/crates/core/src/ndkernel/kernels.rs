//! Raw numeric kernels over flat row-major buffers.

/// `sqrt(2 / pi)` as used by the tanh GELU approximation.
pub const GELU_COEFF: f64 = 0.7978845608;
const GELU_CUBIC: f64 = 0.044715;

/// `C = op(A) · op(B)` with `op(A)` of shape `(m, k)` and `op(B)` of shape
/// `(k, n)`. A transposed operand is stored in the transposed layout. `c` is
/// overwritten.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.fill(0.0);
        return;
    }
    let (rsa, csa) = if a_trans { (1, m) } else { (k, 1) };
    let (rsb, csb) = if b_trans { (1, k) } else { (n, 1) };
    // SAFETY: the pointer/stride pairs describe exactly the buffers checked above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

pub fn gelu(x: f64) -> f64 {
    let inner = GELU_COEFF * (x + GELU_CUBIC * x * x * x);
    0.5 * x * (1.0 + inner.tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_COEFF * (x + GELU_CUBIC * x * x * x);
    let th = inner.tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_COEFF * (1.0 + 3.0 * GELU_CUBIC * x * x)
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

pub fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// Linearization of row-wise layer norm at output `y` with per-row `rstd`,
/// applied to `g`. The map is self-adjoint, so this serves both sweeps.
pub fn layer_norm_linear(y: &[f64], rstd: &[f64], g: &[f64]) -> Vec<f64> {
    let rows = rstd.len();
    let d = y.len() / rows;
    let mut out = vec![0.0; y.len()];
    for r in 0..rows {
        let ys = &y[r * d..(r + 1) * d];
        let gs = &g[r * d..(r + 1) * d];
        let mean_g = gs.iter().sum::<f64>() / d as f64;
        let mean_yg = ys.iter().zip(gs).map(|(a, b)| a * b).sum::<f64>() / d as f64;
        for ((o, &yv), &gv) in out[r * d..(r + 1) * d].iter_mut().zip(ys).zip(gs) {
            *o = rstd[r] * (gv - mean_g - yv * mean_yg);
        }
    }
    out
}

/// Linearization of row-wise softmax at output `y`, applied to `g`
/// (self-adjoint, like layer norm).
pub fn softmax_linear(y: &[f64], g: &[f64], d: usize) -> Vec<f64> {
    let mut out = vec![0.0; y.len()];
    for ((o, ys), gs) in out.chunks_mut(d).zip(y.chunks(d)).zip(g.chunks(d)) {
        let dot: f64 = ys.iter().zip(gs).map(|(a, b)| a * b).sum();
        for ((ov, &yv), &gv) in o.iter_mut().zip(ys).zip(gs) {
            *ov = yv * (gv - dot);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                c[i * n + j] = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
            }
        }
        c
    }

    #[test]
    fn gemm_transposes_match_naive() {
        let (m, k, n) = (3, 4, 2);
        let a: Vec<f64> = (0..m * k).map(|i| i as f64 * 0.5 - 1.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64).sin()).collect();
        let want = naive(m, k, n, &a, &b);
        let mut c = vec![0.0; m * n];
        gemm(m, k, n, &a, false, &b, false, &mut c);
        for (x, y) in c.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }
        let at = transpose(&a, m, k);
        let bt = transpose(&b, k, n);
        let mut c2 = vec![0.0; m * n];
        gemm(m, k, n, &at, true, &bt, true, &mut c2);
        for (x, y) in c2.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn gelu_grad_matches_central_difference() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8, "x={x}");
            let fd = (silu(x + h) - silu(x - h)) / (2.0 * h);
            assert!((fd - silu_grad(x)).abs() < 1e-8, "x={x}");
        }
    }
}
