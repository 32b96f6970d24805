use rand::Rng;
use serde::{Deserialize, Serialize};

use super::scan::selective_scan_var;
use crate::error::{Error, Result};
use crate::numerics::{Real, Tape, Tensor, Var};

/// Epsilon of the pre-block RMS normalization.
pub const NORM_EPS: f64 = 1e-5;

/// Which way a block reads the sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Forward,
    Backward,
}

/// Shape hyperparameters of one block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockDims {
    pub d_model: usize,
    pub d_inner: usize,
    pub n_state: usize,
    pub dt_rank: usize,
    pub conv_k: usize,
    /// Whether the input and output projections carry biases.
    pub proj_bias: bool,
}

impl BlockDims {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("d_model", self.d_model),
            ("d_inner", self.d_inner),
            ("n_state", self.n_state),
            ("dt_rank", self.dt_rank),
            ("conv_k", self.conv_k),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        Ok(())
    }

    /// Scalar parameter count of one block.
    pub fn param_count(&self) -> usize {
        let (dm, di, n, r, k) = (self.d_model, self.d_inner, self.n_state, self.dt_rank, self.conv_k);
        let bias = usize::from(self.proj_bias);
        dm * 2 * di + bias * 2 * di // in_proj
            + di * k + di // conv
            + di * (r + 2 * n) // x_proj
            + r * di + di // dt_proj, dt_bias
            + di * n // a_log
            + di // d
            + di * dm + bias * dm // out_proj
            + dm // norm_gain
    }
}

/// Learnable tensors of one gated selective-scan block.
#[derive(Debug, Clone, PartialEq)]
pub struct MambaBlockParams<T: Real> {
    /// d_model × 2·d_inner
    pub in_proj: Tensor<T>,
    pub in_proj_bias: Option<Tensor<T>>,
    /// d_inner × k
    pub conv_w: Tensor<T>,
    pub conv_b: Tensor<T>,
    /// d_inner × (r + 2n)
    pub x_proj: Tensor<T>,
    /// r × d_inner
    pub dt_proj: Tensor<T>,
    pub dt_bias: Tensor<T>,
    /// d_inner × n; the state matrix is `-exp(a_log)`.
    pub a_log: Tensor<T>,
    /// d_inner skip coefficients
    pub d: Tensor<T>,
    /// d_inner × d_model
    pub out_proj: Tensor<T>,
    pub out_proj_bias: Option<Tensor<T>>,
    pub norm_gain: Tensor<T>,
}

fn uniform<T: Real, R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize) -> Tensor<T> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| T::lit(rng.random_range(-bound..bound)))
}

impl<T: Real> MambaBlockParams<T> {
    /// Uniform(±1/√fan_in) weights; `a_log[c, j] = ln(j + 1)`; `dt_bias` such
    /// that `softplus(dt_bias)` is log-uniform in [0.001, 0.1]; unit skip and gain.
    pub fn init<R: Rng>(dims: &BlockDims, rng: &mut R) -> Result<Self> {
        dims.validate()?;
        let BlockDims {
            d_model: dm,
            d_inner: di,
            n_state: n,
            dt_rank: r,
            conv_k: k,
            proj_bias,
        } = *dims;
        let in_proj = uniform(rng, &[dm, 2 * di], dm);
        let in_proj_bias = proj_bias.then(|| uniform(rng, &[2 * di], dm));
        let conv_w = uniform(rng, &[di, k], k);
        let conv_b = uniform(rng, &[di], k);
        let x_proj = uniform(rng, &[di, r + 2 * n], di);
        let dt_proj = uniform(rng, &[r, di], r);
        let (lo, hi) = (0.001f64.ln(), 0.1f64.ln());
        let dt_bias = Tensor::from_fn(&[di], |_| {
            let dt = rng.random_range(lo..hi).exp();
            // inverse softplus
            T::lit(dt + (-(-dt).exp_m1()).ln())
        });
        let a_log = Tensor::from_fn(&[di, n], |i| T::lit(((i % n) as f64 + 1.0).ln()));
        let d = Tensor::full(&[di], T::one());
        let out_proj = uniform(rng, &[di, dm], di);
        let out_proj_bias = proj_bias.then(|| uniform(rng, &[dm], di));
        let norm_gain = Tensor::full(&[dm], T::one());
        Ok(MambaBlockParams {
            in_proj,
            in_proj_bias,
            conv_w,
            conv_b,
            x_proj,
            dt_proj,
            dt_bias,
            a_log,
            d,
            out_proj,
            out_proj_bias,
            norm_gain,
        })
    }

    /// All-zero tensors of the right shapes.
    pub fn zeros(dims: &BlockDims) -> Self {
        let BlockDims {
            d_model: dm,
            d_inner: di,
            n_state: n,
            dt_rank: r,
            conv_k: k,
            proj_bias,
        } = *dims;
        MambaBlockParams {
            in_proj: Tensor::zeros(&[dm, 2 * di]),
            in_proj_bias: proj_bias.then(|| Tensor::zeros(&[2 * di])),
            conv_w: Tensor::zeros(&[di, k]),
            conv_b: Tensor::zeros(&[di]),
            x_proj: Tensor::zeros(&[di, r + 2 * n]),
            dt_proj: Tensor::zeros(&[r, di]),
            dt_bias: Tensor::zeros(&[di]),
            a_log: Tensor::zeros(&[di, n]),
            d: Tensor::zeros(&[di]),
            out_proj: Tensor::zeros(&[di, dm]),
            out_proj_bias: proj_bias.then(|| Tensor::zeros(&[dm])),
            norm_gain: Tensor::zeros(&[dm]),
        }
    }

    pub fn dims(&self) -> BlockDims {
        let di = self.conv_w.rows();
        let n = self.a_log.cols();
        BlockDims {
            d_model: self.in_proj.rows(),
            d_inner: di,
            n_state: n,
            dt_rank: self.dt_proj.rows(),
            conv_k: self.conv_w.cols(),
            proj_bias: self.in_proj_bias.is_some(),
        }
    }

    /// Named tensors in a fixed order; optional biases appear only when present.
    pub fn named(&self) -> Vec<(&'static str, &Tensor<T>)> {
        let mut out = vec![("in_proj", &self.in_proj)];
        if let Some(b) = &self.in_proj_bias {
            out.push(("in_proj_bias", b));
        }
        out.extend([
            ("conv_w", &self.conv_w),
            ("conv_b", &self.conv_b),
            ("x_proj", &self.x_proj),
            ("dt_proj", &self.dt_proj),
            ("dt_bias", &self.dt_bias),
            ("a_log", &self.a_log),
            ("d", &self.d),
            ("out_proj", &self.out_proj),
        ]);
        if let Some(b) = &self.out_proj_bias {
            out.push(("out_proj_bias", b));
        }
        out.push(("norm_gain", &self.norm_gain));
        out
    }

    /// Mutable counterpart of [`Self::named`], same order.
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = vec![&mut self.in_proj];
        if let Some(b) = &mut self.in_proj_bias {
            out.push(b);
        }
        out.extend([
            &mut self.conv_w,
            &mut self.conv_b,
            &mut self.x_proj,
            &mut self.dt_proj,
            &mut self.dt_bias,
            &mut self.a_log,
            &mut self.d,
            &mut self.out_proj,
        ]);
        if let Some(b) = &mut self.out_proj_bias {
            out.push(b);
        }
        out.push(&mut self.norm_gain);
        out
    }

    pub fn cast<U: Real>(&self) -> MambaBlockParams<U> {
        MambaBlockParams {
            in_proj: self.in_proj.cast(),
            in_proj_bias: self.in_proj_bias.as_ref().map(Tensor::cast),
            conv_w: self.conv_w.cast(),
            conv_b: self.conv_b.cast(),
            x_proj: self.x_proj.cast(),
            dt_proj: self.dt_proj.cast(),
            dt_bias: self.dt_bias.cast(),
            a_log: self.a_log.cast(),
            d: self.d.cast(),
            out_proj: self.out_proj.cast(),
            out_proj_bias: self.out_proj_bias.as_ref().map(Tensor::cast),
            norm_gain: self.norm_gain.cast(),
        }
    }

    /// Registers every tensor on `tape` as a parameter (or as constants).
    pub fn register(&self, tape: &mut Tape<T>, trainable: bool) -> BlockVars {
        let mut reg = |t: &Tensor<T>| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        BlockVars {
            in_proj: reg(&self.in_proj),
            in_proj_bias: self.in_proj_bias.as_ref().map(&mut reg),
            conv_w: reg(&self.conv_w),
            conv_b: reg(&self.conv_b),
            x_proj: reg(&self.x_proj),
            dt_proj: reg(&self.dt_proj),
            dt_bias: reg(&self.dt_bias),
            a_log: reg(&self.a_log),
            d: reg(&self.d),
            out_proj: reg(&self.out_proj),
            out_proj_bias: self.out_proj_bias.as_ref().map(&mut reg),
            norm_gain: reg(&self.norm_gain),
        }
    }
}

/// Tape handles of a block's tensors.
#[derive(Debug, Clone, Copy)]
pub struct BlockVars {
    pub in_proj: Var,
    pub in_proj_bias: Option<Var>,
    pub conv_w: Var,
    pub conv_b: Var,
    pub x_proj: Var,
    pub dt_proj: Var,
    pub dt_bias: Var,
    pub a_log: Var,
    pub d: Var,
    pub out_proj: Var,
    pub out_proj_bias: Option<Var>,
    pub norm_gain: Var,
}

impl BlockVars {
    /// Handles in the order of [`MambaBlockParams::named`].
    pub fn ordered(&self) -> Vec<Var> {
        let mut out = vec![self.in_proj];
        out.extend(self.in_proj_bias);
        out.extend([
            self.conv_w,
            self.conv_b,
            self.x_proj,
            self.dt_proj,
            self.dt_bias,
            self.a_log,
            self.d,
            self.out_proj,
        ]);
        out.extend(self.out_proj_bias);
        out.push(self.norm_gain);
        out
    }

    /// Rebuilds handles from a slice in [`Self::ordered`] order.
    pub fn from_ordered(vars: &[Var], dims: &BlockDims) -> Self {
        let mut it = vars.iter().copied();
        let mut next = || it.next().expect("enough block vars");
        let in_proj = next();
        let in_proj_bias = dims.proj_bias.then(&mut next);
        let conv_w = next();
        let conv_b = next();
        let x_proj = next();
        let dt_proj = next();
        let dt_bias = next();
        let a_log = next();
        let d = next();
        let out_proj = next();
        let out_proj_bias = dims.proj_bias.then(&mut next);
        let norm_gain = next();
        BlockVars {
            in_proj,
            in_proj_bias,
            conv_w,
            conv_b,
            x_proj,
            dt_proj,
            dt_bias,
            a_log,
            d,
            out_proj,
            out_proj_bias,
            norm_gain,
        }
    }
}

/// Records one block on `tape`. `x` is L × d_model; the result has the same
/// shape. The residual connection is left to the caller.
pub fn mamba_block_var<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    p: &BlockVars,
    direction: Direction,
) -> Result<Var> {
    let di = tape.value(p.conv_w).rows();
    let n = tape.value(p.a_log).cols();
    let r = tape.value(p.dt_proj).rows();
    let dm = tape.value(p.in_proj).rows();
    if tape.value(x).rank() != 2 || tape.value(x).cols() != dm {
        return Err(Error::shape("mamba_block", tape.value(x).shape(), &[0, dm]));
    }

    let x = match direction {
        Direction::Forward => x,
        Direction::Backward => tape.reverse_time(x)?,
    };
    let xn = tape.rmsnorm(x, p.norm_gain, T::lit(NORM_EPS))?;
    let xz = tape.linear(xn, p.in_proj, p.in_proj_bias)?;
    let u_branch = tape.slice_cols(xz, 0, di)?;
    let z = tape.slice_cols(xz, di, 2 * di)?;
    let conv = tape.conv1d_depthwise(u_branch, p.conv_w, p.conv_b)?;
    let u = tape.silu(conv);

    let dbc = tape.matmul(u, p.x_proj)?;
    let dt_low = tape.slice_cols(dbc, 0, r)?;
    let b = tape.slice_cols(dbc, r, r + n)?;
    let c = tape.slice_cols(dbc, r + n, r + 2 * n)?;
    let dt = tape.linear(dt_low, p.dt_proj, Some(p.dt_bias))?;
    let delta = tape.softplus(dt);
    let a = tape.neg_exp(p.a_log);

    let y_ssm = selective_scan_var(tape, u, delta, b, c, a, p.d)?;
    let gate = tape.silu(z);
    let gated = tape.mul(y_ssm, gate)?;
    let y = tape.linear(gated, p.out_proj, p.out_proj_bias)?;
    match direction {
        Direction::Forward => Ok(y),
        Direction::Backward => tape.reverse_time(y),
    }
}

/// Non-recording evaluation of one block.
pub fn mamba_block<T: Real>(
    x: &Tensor<T>,
    p: &MambaBlockParams<T>,
    direction: Direction,
) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let vars = p.register(&mut tape, false);
    let xv = tape.constant(x.clone());
    let y = mamba_block_var(&mut tape, xv, &vars, direction)?;
    Ok(tape.value(y).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::reverse_time;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dims() -> BlockDims {
        BlockDims {
            d_model: 6,
            d_inner: 12,
            n_state: 4,
            dt_rank: 3,
            conv_k: 3,
            proj_bias: false,
        }
    }

    #[test]
    fn block_preserves_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (dm, di, l) in [(6, 12, 9), (4, 4, 1), (8, 16, 33)] {
            let d = BlockDims { d_model: dm, d_inner: di, ..dims() };
            let p = MambaBlockParams::<f64>::init(&d, &mut rng).unwrap();
            let x = Tensor::from_fn(&[l, dm], |i| (i as f64 * 0.37).sin());
            for dir in [Direction::Forward, Direction::Backward] {
                assert_eq!(mamba_block(&x, &p, dir).unwrap().shape(), &[l, dm]);
            }
        }
    }

    #[test]
    fn zero_params_except_gain_give_zero_output() {
        let mut p = MambaBlockParams::<f64>::zeros(&dims());
        p.norm_gain = Tensor::full(&[6], 1.0);
        let x = Tensor::from_fn(&[5, 6], |i| i as f64 - 10.0);
        let y = mamba_block(&x, &p, Direction::Forward).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_direction_is_reversed_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = MambaBlockParams::<f64>::init(&dims(), &mut rng).unwrap();
        let x = Tensor::from_fn(&[11, 6], |i| (i as f64 * 0.911).cos());
        let back = mamba_block(&x, &p, Direction::Backward).unwrap();
        let fwd = mamba_block(&reverse_time(&x).unwrap(), &p, Direction::Forward).unwrap();
        assert_eq!(back, reverse_time(&fwd).unwrap());
    }

    #[test]
    fn init_respects_state_and_step_rules() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = MambaBlockParams::<f64>::init(&dims(), &mut rng).unwrap();
        for c in 0..12 {
            for j in 0..4 {
                assert!((p.a_log.get2(c, j) - ((j + 1) as f64).ln()).abs() < 1e-15);
            }
        }
        for &b in p.dt_bias.data() {
            let dt = crate::numerics::ops::softplus_scalar(b);
            assert!((0.001 - 1e-12..=0.1 + 1e-12).contains(&dt), "{dt}");
        }
        let count: usize = p.named().iter().map(|(_, t)| t.len()).sum();
        assert_eq!(count, dims().param_count());
    }

    #[test]
    fn wrong_width_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = MambaBlockParams::<f64>::init(&dims(), &mut rng).unwrap();
        assert!(mamba_block(&Tensor::zeros(&[4, 5]), &p, Direction::Forward).is_err());
    }
}
