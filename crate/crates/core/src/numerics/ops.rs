//! Forward kernels. Each returns a fresh tensor and checks shapes at the
//! boundary; the differentiable wrappers live in [`super::tape`].

use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Numerically stable logistic function.
#[inline]
pub fn sigmoid_scalar<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub fn softplus_scalar<T: Real>(x: T) -> T {
    if x > T::lit(30.0) {
        x
    } else if x < T::lit(-30.0) {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

/// `a · b` for a: m×k, b: k×n.
pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = a.expect_rank2("matmul")?;
    let (k2, n) = b.expect_rank2("matmul")?;
    if k != k2 {
        return Err(Error::shape("matmul", a.shape(), b.shape()));
    }
    let mut out = Tensor::zeros(&[m, n]);
    T::gemm(
        m,
        k,
        n,
        T::one(),
        a.data(),
        k as isize,
        1,
        b.data(),
        n as isize,
        1,
        T::zero(),
        out.data_mut(),
        n as isize,
        1,
    );
    Ok(out)
}

/// `aᵀ · b` for a: k×m, b: k×n.
pub fn matmul_tn<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (k, m) = (a.rows(), a.cols());
    let n = b.cols();
    debug_assert_eq!(b.rows(), k);
    let mut out = Tensor::zeros(&[m, n]);
    T::gemm(
        m,
        k,
        n,
        T::one(),
        a.data(),
        1,
        m as isize,
        b.data(),
        n as isize,
        1,
        T::zero(),
        out.data_mut(),
        n as isize,
        1,
    );
    out
}

/// `a · bᵀ` for a: m×k, b: n×k.
pub fn matmul_nt<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (m, k) = (a.rows(), a.cols());
    let n = b.rows();
    debug_assert_eq!(b.cols(), k);
    let mut out = Tensor::zeros(&[m, n]);
    T::gemm(
        m,
        k,
        n,
        T::one(),
        a.data(),
        k as isize,
        1,
        b.data(),
        1,
        k as isize,
        T::zero(),
        out.data_mut(),
        n as isize,
        1,
    );
    out
}

/// Adds a per-column bias to every row of `x`.
pub fn add_bias<T: Real>(x: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, d) = x.expect_rank2("add_bias")?;
    if bias.shape() != [d] {
        return Err(Error::shape("add_bias", x.shape(), bias.shape()));
    }
    let mut out = x.clone();
    if d == 0 {
        return Ok(out);
    }
    for row in out.data_mut().chunks_exact_mut(d) {
        for (v, &b) in row.iter_mut().zip(bias.data()) {
            *v += b;
        }
    }
    Ok(out)
}

/// Column sums of a 2-D tensor.
pub fn sum_rows<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let d = x.cols();
    let mut out = vec![T::zero(); d];
    for row in x.data().chunks_exact(d.max(1)) {
        for (o, &v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    Tensor::vector(out)
}

/// Depthwise causal convolution with `k - 1` zeros of left padding.
///
/// `y[t, c] = bias[c] + Σ_j w[c, j] · x[t - k + 1 + j, c]`
pub fn conv1d_depthwise<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (l, d) = x.expect_rank2("conv1d_depthwise")?;
    let (dw, k) = w.expect_rank2("conv1d_depthwise")?;
    if k == 0 {
        return Err(Error::InvalidArgument(
            "conv1d_depthwise: kernel width must be positive".into(),
        ));
    }
    if dw != d {
        return Err(Error::shape("conv1d_depthwise", x.shape(), w.shape()));
    }
    if bias.shape() != [d] {
        return Err(Error::shape("conv1d_depthwise", x.shape(), bias.shape()));
    }
    let xs = x.data();
    let ws = w.data();
    let mut out = Tensor::zeros(&[l, d]);
    let ys = out.data_mut();
    for t in 0..l {
        let yrow = &mut ys[t * d..(t + 1) * d];
        yrow.copy_from_slice(bias.data());
        for j in 0..k {
            // source frame t - (k - 1 - j)
            let back = k - 1 - j;
            if back > t {
                continue;
            }
            let xrow = &xs[(t - back) * d..(t - back + 1) * d];
            for c in 0..d {
                yrow[c] += ws[c * k + j] * xrow[c];
            }
        }
    }
    Ok(out)
}

pub fn silu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v * sigmoid_scalar(v))
}

pub fn softplus<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(softplus_scalar)
}

/// Per-row softmax with max subtraction.
pub fn softmax_rows<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, c) = x.expect_rank2("softmax_rows")?;
    let mut out = x.clone();
    if c == 0 {
        return Ok(out);
    }
    for row in out.data_mut().chunks_exact_mut(c) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut s = T::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v = *v / s;
        }
    }
    Ok(out)
}

/// Reverses the order of rows: `y[t] = x[L - 1 - t]`.
pub fn reverse_time<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (l, d) = x.expect_rank2("reverse_time")?;
    let mut data = Vec::with_capacity(l * d);
    for t in (0..l).rev() {
        data.extend_from_slice(&x.data()[t * d..(t + 1) * d]);
    }
    Tensor::new(vec![l, d], data)
}

/// Row-wise concatenation, `a`'s columns first.
pub fn concat_features<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (la, da) = a.expect_rank2("concat_features")?;
    let (lb, db) = b.expect_rank2("concat_features")?;
    if la != lb {
        return Err(Error::shape("concat_features", a.shape(), b.shape()));
    }
    let mut data = Vec::with_capacity(la * (da + db));
    for t in 0..la {
        data.extend_from_slice(&a.data()[t * da..(t + 1) * da]);
        data.extend_from_slice(&b.data()[t * db..(t + 1) * db]);
    }
    Tensor::new(vec![la, da + db], data)
}

/// Columns `start..end` of a 2-D tensor.
pub fn slice_cols<T: Real>(x: &Tensor<T>, start: usize, end: usize) -> Result<Tensor<T>> {
    let (l, d) = x.expect_rank2("slice_cols")?;
    if start > end || end > d {
        return Err(Error::shape("slice_cols", x.shape(), &[start, end]));
    }
    let w = end - start;
    let mut data = Vec::with_capacity(l * w);
    for row in x.data().chunks_exact(d.max(1)).take(l) {
        data.extend_from_slice(&row[start..end]);
    }
    Tensor::new(vec![l, w], data)
}

/// Root-mean-square normalization of each row, scaled by a per-column gain.
/// Returns the output and the per-row inverse RMS.
pub fn rmsnorm<T: Real>(
    x: &Tensor<T>,
    gain: &Tensor<T>,
    eps: T,
) -> Result<(Tensor<T>, Vec<T>)> {
    let (l, d) = x.expect_rank2("rmsnorm")?;
    if gain.shape() != [d] {
        return Err(Error::shape("rmsnorm", x.shape(), gain.shape()));
    }
    let mut out = x.clone();
    let mut inv = Vec::with_capacity(l);
    let dn = T::lit(d as f64);
    for row in out.data_mut().chunks_exact_mut(d.max(1)).take(l) {
        let ms = row.iter().map(|&v| v * v).sum::<T>() / dn;
        let r = T::one() / (ms + eps).sqrt();
        for (v, &g) in row.iter_mut().zip(gain.data()) {
            *v = *v * r * g;
        }
        inv.push(r);
    }
    Ok((out, inv))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: &[&[f64]]) -> Tensor<f64> {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>())
    }

    fn naive_matmul(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
        let (m, k, n) = (a.rows(), a.cols(), b.cols());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    out[i * n + j] += a.get2(i, p) * b.get2(p, j);
                }
            }
        }
        Tensor::new(vec![m, n], out).unwrap()
    }

    fn lcg(seed: u64) -> impl FnMut() -> f64 {
        let mut s = seed;
        move || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        }
    }

    #[test]
    fn matmul_identity_and_scalar() {
        let i2 = t2(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let b = t2(&[&[3.0, 4.0], &[5.0, 6.0]]);
        assert_eq!(matmul(&i2, &b).unwrap(), b);
        let p = matmul(&t2(&[&[2.0]]), &t2(&[&[7.0]])).unwrap();
        assert_eq!(p.data(), &[14.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut r = lcg(7);
        let a = Tensor::from_fn(&[4, 5], |_| r());
        let b = Tensor::from_fn(&[5, 3], |_| r());
        let d = matmul(&a, &b).unwrap().max_abs_diff(&naive_matmul(&a, &b));
        assert!(d <= 1e-12, "{d}");
    }

    #[test]
    fn transposed_products_match_naive() {
        let mut r = lcg(3);
        let a = Tensor::from_fn(&[6, 4], |_| r());
        let b = Tensor::from_fn(&[6, 3], |_| r());
        let at = Tensor::from_fn(&[4, 6], |i| a.get2(i % 6, i / 6));
        assert!(matmul_tn(&a, &b).max_abs_diff(&naive_matmul(&at, &b)) < 1e-12);
        let c = Tensor::from_fn(&[5, 4], |_| r());
        let ct = Tensor::from_fn(&[4, 5], |i| c.get2(i % 5, i / 5));
        assert!(matmul_nt(&a, &c).max_abs_diff(&naive_matmul(&a, &ct)) < 1e-12);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let err = matmul(&Tensor::<f64>::zeros(&[2, 3]), &Tensor::zeros(&[4, 2])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn matmul_associativity() {
        let mut r = lcg(11);
        let a = Tensor::from_fn(&[3, 4], |_| r());
        let b = Tensor::from_fn(&[4, 5], |_| r());
        let c = Tensor::from_fn(&[5, 2], |_| r());
        let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
        let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
        assert!(left.max_abs_diff(&right) <= 1e-10);
    }

    #[test]
    fn conv_examples() {
        let x = Tensor::from_fn(&[4, 3], |i| i as f64);
        let ident = conv1d_depthwise(&x, &Tensor::full(&[3, 1], 1.0), &Tensor::zeros(&[3])).unwrap();
        assert_eq!(ident, x);

        let zeros = Tensor::zeros(&[5, 2]);
        let bias = Tensor::vector(vec![0.5, -1.5]);
        let y = conv1d_depthwise(&zeros, &Tensor::full(&[2, 3], 2.0), &bias).unwrap();
        for t in 0..5 {
            assert_eq!(y.row(t), &[0.5, -1.5]);
        }

        let x = t2(&[&[1.0], &[2.0], &[3.0]]);
        let w = t2(&[&[1.0, 2.0]]);
        let y = conv1d_depthwise(&x, &w, &Tensor::zeros(&[1])).unwrap();
        assert_eq!(y.data(), &[2.0, 5.0, 8.0]);
    }

    #[test]
    fn conv_kernel_longer_than_sequence() {
        let x = t2(&[&[1.0], &[2.0]]);
        let w = t2(&[&[1.0, 1.0, 1.0, 1.0, 1.0]]);
        let y = conv1d_depthwise(&x, &w, &Tensor::zeros(&[1])).unwrap();
        assert_eq!(y.data(), &[1.0, 3.0]);
        let bad = conv1d_depthwise(&x, &Tensor::zeros(&[1, 0]), &Tensor::zeros(&[1]));
        assert!(bad.is_err());
    }

    #[test]
    fn silu_values() {
        assert_eq!(silu_s(0.0), 0.0);
        // 20 - 20·e^-20 / (1 + e^-20)
        assert!((silu_s(20.0) - (20.0 - 4.122_307_244_877_116e-8)).abs() < 1e-12);
        // 1 / (1 + e^-1)
        assert!((silu_s(1.0) - 0.731_058_578_630_004_9).abs() < 1e-15);
        assert!(silu_s(-800.0).is_finite());
    }

    fn silu_s(v: f64) -> f64 {
        silu(&Tensor::scalar(v)).item()
    }

    #[test]
    fn softplus_values() {
        let sp = |v: f64| softplus(&Tensor::scalar(v)).item();
        assert!((sp(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((sp(100.0) - 100.0).abs() < 1e-9);
        for v in [-50.0, -3.0, -0.1, 0.0, 0.2, 5.0, 29.9, 30.1, 200.0] {
            assert!(sp(v) >= v.max(0.0), "{v}");
        }
    }

    #[test]
    fn softmax_examples() {
        let y = softmax_rows(&t2(&[&[2.0, 2.0, 2.0, 2.0]])).unwrap();
        assert!(y.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
        let y = softmax_rows(&t2(&[&[0.0, 3f64.ln()]])).unwrap();
        assert!((y.data()[0] - 0.25).abs() < 1e-15 && (y.data()[1] - 0.75).abs() < 1e-15);
        let x = t2(&[&[0.3, -1.2, 4.0]]);
        let shifted = x.map(|v| v + 17.0);
        assert!(softmax_rows(&x).unwrap().max_abs_diff(&softmax_rows(&shifted).unwrap()) <= 1e-12);
    }

    #[test]
    fn reverse_and_concat() {
        let x = t2(&[&[1.0], &[2.0], &[3.0]]);
        assert_eq!(reverse_time(&x).unwrap().data(), &[3.0, 2.0, 1.0]);
        assert_eq!(reverse_time(&reverse_time(&x).unwrap()).unwrap(), x);
        let one = t2(&[&[4.0, 5.0]]);
        assert_eq!(reverse_time(&one).unwrap(), one);

        let a = t2(&[&[1.0], &[2.0]]);
        let b = t2(&[&[3.0], &[4.0]]);
        assert_eq!(concat_features(&a, &b).unwrap().data(), &[1.0, 3.0, 2.0, 4.0]);
        assert_eq!(concat_features(&a, &Tensor::zeros(&[2, 0])).unwrap(), a);
        let big = concat_features(&Tensor::<f64>::zeros(&[5, 128]), &Tensor::zeros(&[5, 128])).unwrap();
        assert_eq!(big.shape(), &[5, 256]);
        assert!(concat_features(&a, &Tensor::zeros(&[3, 1])).is_err());
    }

    #[test]
    fn rmsnorm_unit_rows() {
        let x = t2(&[&[3.0, 4.0]]);
        let (y, inv) = rmsnorm(&x, &Tensor::vector(vec![1.0, 2.0]), 0.0).unwrap();
        let r = (12.5f64).sqrt();
        assert!((y.get2(0, 0) - 3.0 / r).abs() < 1e-12);
        assert!((y.get2(0, 1) - 8.0 / r).abs() < 1e-12);
        assert!((inv[0] - 1.0 / r).abs() < 1e-12);
        let (z, _) = rmsnorm(&Tensor::<f64>::zeros(&[1, 2]), &Tensor::vector(vec![1.0, 1.0]), 1e-5).unwrap();
        assert_eq!(z.data(), &[0.0, 0.0]);
    }
}
