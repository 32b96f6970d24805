use crate::error::{Error, Result};
use crate::numerics::{Backward, Real, Tape, Tensor, Var};

/// Chunk length of the associative scan.
pub const ASSOC_CHUNK: usize = 64;

/// Input-dependent quantities of one scan.
#[derive(Debug, Clone)]
pub struct ScanInputs<T: Real> {
    /// L × d_inner
    pub u: Tensor<T>,
    /// L × d_inner, strictly positive
    pub delta: Tensor<T>,
    /// L × n
    pub b: Tensor<T>,
    /// L × n
    pub c: Tensor<T>,
}

struct Dims {
    l: usize,
    d: usize,
    n: usize,
}

fn check(s: &ScanInputs<impl Real>, a: &Tensor<impl Real>, d_skip: &Tensor<impl Real>) -> Result<Dims> {
    let (l, d) = s.u.expect_rank2("selective_scan")?;
    if s.delta.shape() != [l, d] {
        return Err(Error::shape("selective_scan", s.u.shape(), s.delta.shape()));
    }
    let (lb, n) = s.b.expect_rank2("selective_scan")?;
    if lb != l || s.c.shape() != [l, n] {
        return Err(Error::shape("selective_scan", s.b.shape(), s.c.shape()));
    }
    if a.shape() != [d, n] {
        return Err(Error::shape("selective_scan", a.shape(), &[d, n]));
    }
    if d_skip.shape() != [d] {
        return Err(Error::shape("selective_scan", d_skip.shape(), &[d]));
    }
    Ok(Dims { l, d, n })
}

/// Zero-order-hold discretization. Both outputs are L × d_inner × n.
pub fn discretize<T: Real>(
    delta: &Tensor<T>,
    a: &Tensor<T>,
    b: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (l, d) = delta.expect_rank2("discretize")?;
    let (da, n) = a.expect_rank2("discretize")?;
    if da != d {
        return Err(Error::shape("discretize", delta.shape(), a.shape()));
    }
    if b.shape() != [l, n] {
        return Err(Error::shape("discretize", delta.shape(), b.shape()));
    }
    let mut abar = Tensor::zeros(&[l, d, n]);
    let mut bbar = Tensor::zeros(&[l, d, n]);
    for t in 0..l {
        for c in 0..d {
            let dt = delta.data()[t * d + c];
            let base = (t * d + c) * n;
            for j in 0..n {
                abar.data_mut()[base + j] = (dt * a.data()[c * n + j]).exp();
                bbar.data_mut()[base + j] = dt * b.data()[t * n + j];
            }
        }
    }
    Ok((abar, bbar))
}

trait Counter {
    fn add(&mut self, n: u64);
}

struct NoCount;
impl Counter for NoCount {
    #[inline(always)]
    fn add(&mut self, _: u64) {}
}

struct OpCount(u64);
impl Counter for OpCount {
    #[inline(always)]
    fn add(&mut self, n: u64) {
        self.0 += n;
    }
}

/// Sequential recurrence. When `states` is given it receives every hidden
/// state, laid out L × d × n.
fn scan_seq_kernel<T: Real, K: Counter>(
    s: &ScanInputs<T>,
    a: &Tensor<T>,
    d_skip: &Tensor<T>,
    dims: &Dims,
    mut states: Option<&mut Vec<T>>,
    counter: &mut K,
) -> Tensor<T> {
    let Dims { l, d, n } = *dims;
    let (us, dts, bs, cs, av, ds) = (
        s.u.data(),
        s.delta.data(),
        s.b.data(),
        s.c.data(),
        a.data(),
        d_skip.data(),
    );
    let mut h = vec![T::zero(); d * n];
    let mut y = Tensor::zeros(&[l, d]);
    for t in 0..l {
        let brow = &bs[t * n..(t + 1) * n];
        let crow = &cs[t * n..(t + 1) * n];
        for c in 0..d {
            let dt = dts[t * d + c];
            let uu = us[t * d + c];
            let hc = &mut h[c * n..(c + 1) * n];
            let ac = &av[c * n..(c + 1) * n];
            let mut acc = T::zero();
            for j in 0..n {
                let abar = (dt * ac[j]).exp();
                let bbar = dt * brow[j];
                hc[j] = abar * hc[j] + bbar * uu;
                acc += crow[j] * hc[j];
                // dt*A, exp, dt*B, *u, a*h, +, C*h, +
                counter.add(8);
            }
            y.data_mut()[t * d + c] = acc + ds[c] * uu;
            counter.add(2);
        }
        if let Some(st) = states.as_deref_mut() {
            st.extend_from_slice(&h);
        }
    }
    y
}

/// Reference left-to-right recurrence, `h[-1] = 0`.
pub fn selective_scan_seq<T: Real>(
    s: &ScanInputs<T>,
    a: &Tensor<T>,
    d_skip: &Tensor<T>,
) -> Result<Tensor<T>> {
    let dims = check(s, a, d_skip)?;
    Ok(scan_seq_kernel(s, a, d_skip, &dims, None, &mut NoCount))
}

/// Sequential scan that also reports the number of primitive arithmetic
/// operations it executed.
pub fn selective_scan_seq_counted<T: Real>(
    s: &ScanInputs<T>,
    a: &Tensor<T>,
    d_skip: &Tensor<T>,
) -> Result<(Tensor<T>, u64)> {
    let dims = check(s, a, d_skip)?;
    let mut counter = OpCount(0);
    let y = scan_seq_kernel(s, a, d_skip, &dims, None, &mut counter);
    Ok((y, counter.0))
}

/// `(a, b) ∘ (a', b') = (a·a', a'·b + b')`: applying the left element first.
#[inline]
fn combine<T: Real>(left: (T, T), right: (T, T)) -> (T, T) {
    (left.0 * right.0, right.0 * left.1 + right.1)
}

/// Inclusive Kogge-Stone scan of one chunk under [`combine`].
fn scan_chunk<T: Real>(elems: &mut [(T, T)]) {
    let mut offset = 1;
    while offset < elems.len() {
        for i in (offset..elems.len()).rev() {
            elems[i] = combine(elems[i - offset], elems[i]);
        }
        offset *= 2;
    }
}

/// Same output as [`selective_scan_seq`], computed with the associative
/// first-order-recurrence combinator: every chunk of [`ASSOC_CHUNK`] steps is
/// scanned independently, then chunk prefixes are folded left to right.
pub fn selective_scan_assoc<T: Real>(
    s: &ScanInputs<T>,
    a: &Tensor<T>,
    d_skip: &Tensor<T>,
) -> Result<Tensor<T>> {
    let Dims { l, d, n } = check(s, a, d_skip)?;
    let (us, dts, bs, cs) = (s.u.data(), s.delta.data(), s.b.data(), s.c.data());
    let mut y = Tensor::zeros(&[l, d]);
    let mut elems: Vec<(T, T)> = Vec::with_capacity(l);
    for c in 0..d {
        for j in 0..n {
            let ajc = a.data()[c * n + j];
            elems.clear();
            elems.extend((0..l).map(|t| {
                let dt = dts[t * d + c];
                ((dt * ajc).exp(), dt * bs[t * n + j] * us[t * d + c])
            }));
            let mut carry = T::zero();
            for chunk in elems.chunks_mut(ASSOC_CHUNK) {
                scan_chunk(chunk);
                for e in chunk.iter_mut() {
                    e.1 = e.0 * carry + e.1;
                }
                carry = chunk[chunk.len() - 1].1;
            }
            for (t, e) in elems.iter().enumerate() {
                y.data_mut()[t * d + c] += cs[t * n + j] * e.1;
            }
        }
    }
    for t in 0..l {
        for c in 0..d {
            y.data_mut()[t * d + c] += d_skip.data()[c] * us[t * d + c];
        }
    }
    Ok(y)
}

/// Differentiable selective scan. Inputs on the tape: `u`, `delta`, `b`, `c`
/// (per-step) and `a`, `d_skip` (per-channel).
pub fn selective_scan_var<T: Real>(
    tape: &mut Tape<T>,
    u: Var,
    delta: Var,
    b: Var,
    c: Var,
    a: Var,
    d_skip: Var,
) -> Result<Var> {
    let s = ScanInputs {
        u: tape.value(u).clone(),
        delta: tape.value(delta).clone(),
        b: tape.value(b).clone(),
        c: tape.value(c).clone(),
    };
    let (av, dv) = (tape.value(a), tape.value(d_skip));
    let dims = check(&s, av, dv)?;
    let inputs = [u, delta, b, c, a, d_skip];
    // hidden states are only kept when a backward pass can need them
    let mut states = Vec::new();
    let y = if inputs.iter().any(|&v| tape.requires_grad(v)) {
        states.reserve_exact(dims.l * dims.d * dims.n);
        scan_seq_kernel(&s, av, dv, &dims, Some(&mut states), &mut NoCount)
    } else {
        scan_seq_kernel(&s, av, dv, &dims, None, &mut NoCount)
    };
    Ok(tape.push(y, &inputs, Box::new(ScanRule { states })))
}

struct ScanRule<T> {
    states: Vec<T>,
}

impl<T: Real> Backward<T> for ScanRule<T> {
    fn backward(
        &self,
        g: &Tensor<T>,
        x: &[&Tensor<T>],
        _: &Tensor<T>,
        _: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let (u, delta, b, c, a, d_skip) = (x[0], x[1], x[2], x[3], x[4], x[5]);
        let (l, d) = (u.rows(), u.cols());
        let n = b.cols();
        let (us, dts, bs, cs, av, ds, gs) = (
            u.data(),
            delta.data(),
            b.data(),
            c.data(),
            a.data(),
            d_skip.data(),
            g.data(),
        );
        let hs = &self.states;
        let mut du = vec![T::zero(); l * d];
        let mut ddelta = vec![T::zero(); l * d];
        let mut db = vec![T::zero(); l * n];
        let mut dc = vec![T::zero(); l * n];
        let mut da = vec![T::zero(); d * n];
        let mut dd = vec![T::zero(); d];
        // adjoint of h[t], carried backwards in time
        let mut dh = vec![T::zero(); d * n];
        for t in (0..l).rev() {
            let brow = &bs[t * n..(t + 1) * n];
            let crow = &cs[t * n..(t + 1) * n];
            for c_ in 0..d {
                let gy = gs[t * d + c_];
                let uu = us[t * d + c_];
                let dt = dts[t * d + c_];
                dd[c_] += gy * uu;
                let mut du_acc = gy * ds[c_];
                let mut ddt_acc = T::zero();
                let base = (t * d + c_) * n;
                for j in 0..n {
                    let h_t = hs[base + j];
                    let h_prev = if t > 0 { hs[base - d * n + j] } else { T::zero() };
                    dc[t * n + j] += gy * h_t;
                    let adj = dh[c_ * n + j] + gy * crow[j];
                    let ajc = av[c_ * n + j];
                    let abar = (dt * ajc).exp();
                    let d_abar = adj * h_prev;
                    ddt_acc += d_abar * abar * ajc + adj * brow[j] * uu;
                    da[c_ * n + j] += d_abar * abar * dt;
                    db[t * n + j] += adj * dt * uu;
                    du_acc += adj * dt * brow[j];
                    dh[c_ * n + j] = adj * abar;
                }
                du[t * d + c_] = du_acc;
                ddelta[t * d + c_] = ddt_acc;
            }
        }
        let mk = |shape: &[usize], v: Vec<T>| Some(Tensor::new(shape.to_vec(), v).expect("sized"));
        vec![
            mk(&[l, d], du),
            mk(&[l, d], ddelta),
            mk(&[l, n], db),
            mk(&[l, n], dc),
            mk(&[d, n], da),
            mk(&[d], dd),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn inputs(u: &[f64], delta: &[f64], b: &[f64], c: &[f64], l: usize) -> ScanInputs<f64> {
        let d = u.len() / l;
        let n = b.len() / l;
        ScanInputs {
            u: Tensor::new(vec![l, d], u.to_vec()).unwrap(),
            delta: Tensor::new(vec![l, d], delta.to_vec()).unwrap(),
            b: Tensor::new(vec![l, n], b.to_vec()).unwrap(),
            c: Tensor::new(vec![l, n], c.to_vec()).unwrap(),
        }
    }

    #[test]
    fn discretize_limits_and_values() {
        let a = Tensor::<f64>::new(vec![1, 2], vec![-1.0, -3.0]).unwrap();
        let b = Tensor::new(vec![1, 2], vec![0.7, -2.0]).unwrap();
        let (abar, bbar) = discretize(&Tensor::full(&[1, 1], 1e-12), &a, &b).unwrap();
        assert!(abar.data().iter().all(|&v| (v - 1.0).abs() < 1e-9));
        assert!(bbar.data().iter().all(|&v| v.abs() < 1e-9));

        let (abar, _) = discretize(
            &Tensor::full(&[1, 1], std::f64::consts::LN_2),
            &Tensor::full(&[1, 1], -1.0),
            &Tensor::full(&[1, 1], 1.0),
        )
        .unwrap();
        assert!((abar.item() - 0.5).abs() < 1e-15);

        let (abar, bbar) = discretize(
            &Tensor::full(&[7, 4], 0.1),
            &Tensor::full(&[4, 3], -1.0),
            &Tensor::zeros(&[7, 3]),
        )
        .unwrap();
        assert_eq!(abar.shape(), &[7, 4, 3]);
        assert_eq!(bbar.shape(), &[7, 4, 3]);
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let s = inputs(&[0.0; 6], &[0.5; 6], &[1.0, 2.0, 3.0], &[1.0, -1.0, 2.0], 3);
        let y = selective_scan_seq(&s, &Tensor::full(&[2, 1], -1.0), &Tensor::full(&[2], 3.0)).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_step_unrolled() {
        let s = inputs(&[2.0, -1.0], &[0.3, 0.6], &[0.5, 1.5], &[2.0, -1.0], 1);
        let a = Tensor::full(&[2, 2], -1.0);
        let dsk = Tensor::vector(vec![0.25, 4.0]);
        let y = selective_scan_seq(&s, &a, &dsk).unwrap();
        for c in 0..2 {
            let (u, dt) = (s.u.data()[c], s.delta.data()[c]);
            let expect: f64 = (0..2).map(|j| s.c.data()[j] * dt * s.b.data()[j] * u).sum::<f64>()
                + dsk.data()[c] * u;
            assert!((y.data()[c] - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn two_step_recurrence() {
        let s = inputs(&[1.0, 1.0], &[1.0, 1.0], &[1.0, 1.0], &[1.0, 1.0], 2);
        let y = selective_scan_seq(&s, &Tensor::full(&[1, 1], -1.0), &Tensor::zeros(&[1])).unwrap();
        assert!((y.data()[0] - 1.0).abs() < 1e-15);
        assert!((y.data()[1] - (1.0 + (-1.0f64).exp())).abs() < 1e-15);
        assert!((y.data()[1] - 1.367_879_4).abs() < 1e-7);
    }

    #[test]
    fn assoc_single_step_equals_sequential() {
        let s = inputs(&[0.3, -0.8], &[0.2, 0.9], &[1.1], &[-0.4], 1);
        let a = Tensor::new(vec![2, 1], vec![-0.5, -2.0]).unwrap();
        let dsk = Tensor::vector(vec![1.0, -1.0]);
        assert_eq!(
            selective_scan_assoc(&s, &a, &dsk).unwrap(),
            selective_scan_seq(&s, &a, &dsk).unwrap()
        );
    }

    #[test]
    fn assoc_with_unit_decay_is_a_prefix_sum() {
        // A = 0 makes every Abar exactly 1, so h is a running sum of Bbar·u.
        let l = 150;
        let u: Vec<f64> = (0..l).map(|t| ((t * 7 % 11) as f64 - 5.0) / 3.0).collect();
        let delta: Vec<f64> = (0..l).map(|t| 0.1 + (t % 5) as f64 * 0.05).collect();
        let b: Vec<f64> = (0..l).map(|t| ((t * 3 % 7) as f64) / 7.0).collect();
        let c: Vec<f64> = (0..l).map(|t| 1.0 - (t % 4) as f64 * 0.3).collect();
        let s = inputs(&u, &delta, &b, &c, l);
        let dsk = Tensor::vector(vec![0.5]);
        let y = selective_scan_assoc(&s, &Tensor::zeros(&[1, 1]), &dsk).unwrap();
        let mut prefix = 0.0;
        for t in 0..l {
            prefix += delta[t] * b[t] * u[t];
            let expect = c[t] * prefix + 0.5 * u[t];
            assert!((y.data()[t] - expect).abs() < 1e-10, "t={t}");
        }
    }

    #[test]
    fn kogge_stone_chunk_matches_fold() {
        let mut elems: Vec<(f64, f64)> = (0..13).map(|i| (0.9 - i as f64 * 0.01, i as f64)).collect();
        let mut expect = Vec::new();
        let mut h = 0.0;
        for e in &elems {
            h = e.0 * h + e.1;
            expect.push(h);
        }
        scan_chunk(&mut elems);
        for (e, x) in elems.iter().zip(expect) {
            assert!((e.1 - x).abs() < 1e-12);
        }
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let s = inputs(&[1.0, 1.0], &[1.0, 1.0], &[1.0, 1.0], &[1.0, 1.0], 2);
        assert!(selective_scan_seq(&s, &Tensor::zeros(&[2, 1]), &Tensor::zeros(&[1])).is_err());
    }
}
