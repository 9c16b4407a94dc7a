//! GEMM wrapper and vectorizable activation functions.

/// `c[m x n] = a[m x k] * b[k x n] + beta * c`, with arbitrary element strides
/// for `a` and `b`; `c` is dense row-major.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    rsa: usize,
    csa: usize,
    b: &[f32],
    rsb: usize,
    csb: usize,
    beta: f32,
    c: &mut [f32],
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(c.len() >= m * n, "gemm output too small");
    if k > 0 {
        assert!(a.len() > (m - 1) * rsa + (k - 1) * csa, "gemm lhs too small");
        assert!(b.len() > (k - 1) * rsb + (n - 1) * csb, "gemm rhs too small");
    }
    // SAFETY: bounds of every accessed element were checked above.
    unsafe {
        matrixmultiply::sgemm(
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
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `out[rows x out_dim] = x[rows x in_dim] * w^T (+ beta * out)` for a
/// row-major `w` of shape `[out_dim, in_dim]`.
pub fn matmul_wt(x: &[f32], rows: usize, in_dim: usize, w: &[f32], out_dim: usize, beta: f32, out: &mut [f32]) {
    gemm(rows, in_dim, out_dim, x, in_dim, 1, w, 1, in_dim, beta, out);
}

const LOG2E: f32 = std::f32::consts::LOG2_E;
const LN2_HI: f32 = 0.693_359_4;
const LN2_LO: f32 = -2.121_944_4e-4;
const ROUND_MAGIC: f32 = 12_582_912.0;

/// `a * b + c`, fused when `FMA` is set (only inside FMA-enabled code).
#[inline(always)]
pub fn madd<const FMA: bool>(a: f32, b: f32, c: f32) -> f32 {
    if FMA {
        a.mul_add(b, c)
    } else {
        a * b + c
    }
}

/// `exp` with about 2 ulp error, written so the compiler can vectorize it.
#[inline(always)]
pub fn exp_with<const FMA: bool>(x: f32) -> f32 {
    let x = x.clamp(-87.3, 88.3);
    let shifted = madd::<FMA>(x, LOG2E, ROUND_MAGIC);
    let n = shifted - ROUND_MAGIC;
    let r = madd::<FMA>(-n, LN2_LO, madd::<FMA>(-n, LN2_HI, x));
    let mut p = madd::<FMA>(1.987_569_1e-4, r, 1.398_199_9e-3);
    p = madd::<FMA>(p, r, 8.333_452e-3);
    p = madd::<FMA>(p, r, 4.166_579_6e-2);
    p = madd::<FMA>(p, r, 1.666_666_5e-1);
    p = madd::<FMA>(p, r, 0.5);
    let y = madd::<FMA>(p, r * r, r) + 1.0;
    // the rounded exponent sits in the low mantissa bits of `shifted`
    let k = shifted.to_bits().wrapping_sub(ROUND_MAGIC.to_bits());
    let scale = f32::from_bits(k.wrapping_add(127) << 23);
    y * scale
}

#[inline(always)]
pub fn sigmoid_with<const FMA: bool>(x: f32) -> f32 {
    1.0 / (1.0 + exp_with::<FMA>(-x))
}

#[inline(always)]
pub fn tanh_with<const FMA: bool>(x: f32) -> f32 {
    1.0 - 2.0 / (exp_with::<FMA>(2.0 * x) + 1.0)
}

#[inline(always)]
pub fn exp(x: f32) -> f32 {
    exp_with::<false>(x)
}

#[inline(always)]
pub fn sigmoid(x: f32) -> f32 {
    sigmoid_with::<false>(x)
}

#[inline(always)]
pub fn tanh(x: f32) -> f32 {
    tanh_with::<false>(x)
}

/// Whether the running CPU supports the AVX2 + FMA code paths.
#[inline]
pub fn has_avx2_fma() -> bool {
    #[cfg(target_arch = "x86_64")]
    {
        std::is_x86_feature_detected!("avx2") && std::is_x86_feature_detected!("fma")
    }
    #[cfg(not(target_arch = "x86_64"))]
    {
        false
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exp_accuracy() {
        let mut x = -80.0f32;
        while x < 80.0 {
            let rel = ((exp(x) as f64 - (x as f64).exp()) / (x as f64).exp()).abs();
            assert!(rel < 1e-6, "{x}: {rel}");
            x += 0.0137;
        }
    }

    #[test]
    fn activations() {
        for i in -400..400 {
            let x = i as f32 * 0.05;
            assert!((sigmoid(x) as f64 - 1.0 / (1.0 + (-(x as f64)).exp())).abs() < 1e-6);
            assert!((tanh(x) as f64 - (x as f64).tanh()).abs() < 1e-6);
        }
        assert_eq!(sigmoid(0.0), 0.5);
        assert_eq!(tanh(0.0), 0.0);
        assert!(tanh(100.0) == 1.0 && tanh(-100.0) == -1.0);
    }

    #[test]
    fn gemm_matches_naive() {
        let (m, k, n) = (5, 7, 3);
        let a: Vec<f32> = (0..m * k).map(|v| (v as f32 * 0.37).sin()).collect();
        let w: Vec<f32> = (0..n * k).map(|v| (v as f32 * 0.11).cos()).collect();
        let mut out = vec![1.0; m * n];
        matmul_wt(&a, m, k, &w, n, 1.0, &mut out);
        for i in 0..m {
            for j in 0..n {
                let s: f32 = (0..k).map(|t| a[i * k + t] * w[j * k + t]).sum::<f32>() + 1.0;
                assert!((s - out[i * n + j]).abs() < 1e-5);
            }
        }
    }
}
