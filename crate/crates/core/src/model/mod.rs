//! The three two-block chord models.
//!
//! All variants share the input layer (144 CQT bins to `d_model`) and carry
//! exactly two blocks:
//!
//! * `MACE-V`: blocks stacked, each with a residual; head reads `d_model`.
//! * `MACE-H`: both blocks read the input projection in parallel (forward
//!   direction); residual outputs are concatenated; head reads `2·d_model`.
//! * `BMACE`: as MACE-H, but the second block runs backward in time.

mod accounting;
mod bench;
mod checkpoint;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Real, Tape, Tensor, Var};
use crate::sscan::{mamba_block_var, BlockDims, BlockVars, Direction, MambaBlockParams};

pub use bench::time_forward;
pub use accounting::{count_flops, count_params, flop_breakdown, FlopBreakdown, TRANSCENDENTAL_FLOPS};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_FORMAT};

/// Input width: 6 octaves × 24 bins.
pub const N_BINS: usize = 144;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "mace-v")]
    MaceV,
    #[serde(rename = "mace-h")]
    MaceH,
    #[serde(rename = "bmace")]
    Bmace,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::MaceV, Variant::MaceH, Variant::Bmace];

    pub fn name(self) -> &'static str {
        match self {
            Variant::MaceV => "mace-v",
            Variant::MaceH => "mace-h",
            Variant::Bmace => "bmace",
        }
    }

    /// Width of the classifier input.
    pub fn head_width(self, d_model: usize) -> usize {
        match self {
            Variant::MaceV => d_model,
            Variant::MaceH | Variant::Bmace => 2 * d_model,
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mace-v" | "mace_v" => Ok(Variant::MaceV),
            "mace-h" | "mace_h" => Ok(Variant::MaceH),
            "bmace" => Ok(Variant::Bmace),
            other => Err(Error::Config(format!("unknown variant {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    pub n_bins: usize,
    pub d_model: usize,
    pub n_state: usize,
    pub dt_rank: usize,
    pub conv_k: usize,
    pub expand: usize,
    pub n_classes: usize,
    /// Biases on the in/out projections of each block.
    pub proj_bias: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            variant: Variant::Bmace,
            n_bins: N_BINS,
            d_model: 128,
            n_state: 16,
            dt_rank: 8,
            conv_k: 4,
            expand: 1,
            n_classes: 25,
            proj_bias: false,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn new(variant: Variant, n_classes: usize) -> Self {
        ModelConfig {
            variant,
            n_classes,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_bins != N_BINS {
            return Err(Error::Config(format!("n_bins must be {N_BINS}, got {}", self.n_bins)));
        }
        if !matches!(self.n_classes, 25 | 170) {
            return Err(Error::Config(format!(
                "n_classes must be 25 or 170, got {}",
                self.n_classes
            )));
        }
        if self.expand == 0 {
            return Err(Error::Config("expand must be positive".into()));
        }
        self.block_dims().validate()
    }

    pub fn block_dims(&self) -> BlockDims {
        BlockDims {
            d_model: self.d_model,
            d_inner: self.expand * self.d_model,
            n_state: self.n_state,
            dt_rank: self.dt_rank,
            conv_k: self.conv_k,
            proj_bias: self.proj_bias,
        }
    }

    pub fn head_width(&self) -> usize {
        self.variant.head_width(self.d_model)
    }
}

/// All learnable tensors of one model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T: Real> {
    /// 144 × d_model
    pub fc_in: Tensor<T>,
    pub fc_in_bias: Tensor<T>,
    pub block_a: MambaBlockParams<T>,
    pub block_b: MambaBlockParams<T>,
    /// head_width × n_classes
    pub head: Tensor<T>,
    pub head_bias: Tensor<T>,
}

/// Deterministic initialization from `cfg.seed`.
pub fn init_model<T: Real>(cfg: &ModelConfig) -> Result<ModelParams<T>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let dm = cfg.d_model;
    let bound = |fan_in: usize| 1.0 / (fan_in as f64).sqrt();
    let uniform = |shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng| {
        let b = bound(fan_in);
        Tensor::from_fn(shape, |_| T::lit(rand::Rng::random_range(rng, -b..b)))
    };
    let fc_in = uniform(&[cfg.n_bins, dm], cfg.n_bins, &mut rng);
    let fc_in_bias = uniform(&[dm], cfg.n_bins, &mut rng);
    let dims = cfg.block_dims();
    let block_a = MambaBlockParams::init(&dims, &mut rng)?;
    let block_b = MambaBlockParams::init(&dims, &mut rng)?;
    let hw = cfg.head_width();
    let head = uniform(&[hw, cfg.n_classes], hw, &mut rng);
    let head_bias = uniform(&[cfg.n_classes], hw, &mut rng);
    Ok(ModelParams {
        fc_in,
        fc_in_bias,
        block_a,
        block_b,
        head,
        head_bias,
    })
}

impl<T: Real> ModelParams<T> {
    /// Named tensors in checkpoint order.
    pub fn named(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = vec![
            ("fc_in".to_string(), &self.fc_in),
            ("fc_in_bias".to_string(), &self.fc_in_bias),
        ];
        for (prefix, block) in [("block_a", &self.block_a), ("block_b", &self.block_b)] {
            out.extend(block.named().into_iter().map(|(n, t)| (format!("{prefix}.{n}"), t)));
        }
        out.push(("head".to_string(), &self.head));
        out.push(("head_bias".to_string(), &self.head_bias));
        out
    }

    /// Mutable tensors, same order as [`Self::named`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = vec![&mut self.fc_in, &mut self.fc_in_bias];
        out.extend(self.block_a.tensors_mut());
        out.extend(self.block_b.tensors_mut());
        out.push(&mut self.head);
        out.push(&mut self.head_bias);
        out
    }

    pub fn tensors(&self) -> Vec<Tensor<T>> {
        self.named().into_iter().map(|(_, t)| t.clone()).collect()
    }

    pub fn element_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    /// Rebuilds parameters from tensors in [`Self::named`] order.
    pub fn from_tensors(cfg: &ModelConfig, tensors: Vec<Tensor<T>>) -> Result<Self> {
        let mut p = ModelParams {
            fc_in: Tensor::zeros(&[cfg.n_bins, cfg.d_model]),
            fc_in_bias: Tensor::zeros(&[cfg.d_model]),
            block_a: MambaBlockParams::zeros(&cfg.block_dims()),
            block_b: MambaBlockParams::zeros(&cfg.block_dims()),
            head: Tensor::zeros(&[cfg.head_width(), cfg.n_classes]),
            head_bias: Tensor::zeros(&[cfg.n_classes]),
        };
        let slots = p.tensors_mut();
        if slots.len() != tensors.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, got {}",
                slots.len(),
                tensors.len()
            )));
        }
        for (slot, t) in slots.into_iter().zip(tensors) {
            if slot.shape() != t.shape() {
                return Err(Error::shape("ModelParams::from_tensors", slot.shape(), t.shape()));
            }
            *slot = t;
        }
        Ok(p)
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            fc_in: self.fc_in.cast(),
            fc_in_bias: self.fc_in_bias.cast(),
            block_a: self.block_a.cast(),
            block_b: self.block_b.cast(),
            head: self.head.cast(),
            head_bias: self.head_bias.cast(),
        }
    }

    pub fn register(&self, tape: &mut Tape<T>, trainable: bool) -> ModelVars {
        let mut reg = |t: &Tensor<T>| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        let fc_in = reg(&self.fc_in);
        let fc_in_bias = reg(&self.fc_in_bias);
        let block_a = self.block_a.register(tape, trainable);
        let block_b = self.block_b.register(tape, trainable);
        let head = if trainable {
            tape.param(self.head.clone())
        } else {
            tape.constant(self.head.clone())
        };
        let head_bias = if trainable {
            tape.param(self.head_bias.clone())
        } else {
            tape.constant(self.head_bias.clone())
        };
        ModelVars {
            fc_in,
            fc_in_bias,
            block_a,
            block_b,
            head,
            head_bias,
        }
    }
}

/// Tape handles of a model's tensors.
#[derive(Debug, Clone, Copy)]
pub struct ModelVars {
    pub fc_in: Var,
    pub fc_in_bias: Var,
    pub block_a: BlockVars,
    pub block_b: BlockVars,
    pub head: Var,
    pub head_bias: Var,
}

impl ModelVars {
    /// Handles in [`ModelParams::named`] order.
    pub fn ordered(&self) -> Vec<Var> {
        let mut out = vec![self.fc_in, self.fc_in_bias];
        out.extend(self.block_a.ordered());
        out.extend(self.block_b.ordered());
        out.push(self.head);
        out.push(self.head_bias);
        out
    }

    pub fn from_ordered(vars: &[Var], cfg: &ModelConfig) -> Self {
        let dims = cfg.block_dims();
        let per_block = vars.len().saturating_sub(4) / 2;
        let block_a = BlockVars::from_ordered(&vars[2..2 + per_block], &dims);
        let block_b = BlockVars::from_ordered(&vars[2 + per_block..2 + 2 * per_block], &dims);
        ModelVars {
            fc_in: vars[0],
            fc_in_bias: vars[1],
            block_a,
            block_b,
            head: vars[vars.len() - 2],
            head_bias: vars[vars.len() - 1],
        }
    }
}

/// `x + block(x)`
fn residual_block<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    block: &BlockVars,
    direction: Direction,
) -> Result<Var> {
    let y = mamba_block_var(tape, x, block, direction)?;
    tape.add(x, y)
}

/// Records the forward pass; returns L × n_classes logits.
pub fn forward_var<T: Real>(
    tape: &mut Tape<T>,
    vars: &ModelVars,
    variant: Variant,
    x: Var,
) -> Result<Var> {
    let xv = tape.value(x);
    if xv.rank() != 2 || xv.cols() != N_BINS || xv.rows() == 0 {
        return Err(Error::shape("forward", xv.shape(), &[0, N_BINS]));
    }
    let h0 = tape.linear(x, vars.fc_in, Some(vars.fc_in_bias))?;
    let z = match variant {
        Variant::MaceV => {
            let h1 = residual_block(tape, h0, &vars.block_a, Direction::Forward)?;
            residual_block(tape, h1, &vars.block_b, Direction::Forward)?
        }
        Variant::MaceH | Variant::Bmace => {
            let dir_b = if variant == Variant::Bmace {
                Direction::Backward
            } else {
                Direction::Forward
            };
            let a = residual_block(tape, h0, &vars.block_a, Direction::Forward)?;
            let b = residual_block(tape, h0, &vars.block_b, dir_b)?;
            tape.concat_features(a, b)?
        }
    };
    tape.linear(z, vars.head, Some(vars.head_bias))
}

/// Logits for one feature matrix (L × 144).
pub fn forward<T: Real>(p: &ModelParams<T>, cfg: &ModelConfig, x: &Tensor<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let vars = p.register(&mut tape, false);
    let xv = tape.constant(x.clone());
    let y = forward_var(&mut tape, &vars, cfg.variant, xv)?;
    Ok(tape.value(y).clone())
}

/// Per-row argmax; ties go to the smallest index.
pub fn argmax_rows<T: Real>(logits: &Tensor<T>) -> Vec<usize> {
    let c = logits.cols();
    (0..logits.rows())
        .map(|t| {
            let row = logits.row(t);
            let mut best = 0;
            for j in 1..c {
                if row[j] > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Per-frame class ids.
pub fn predict<T: Real>(p: &ModelParams<T>, cfg: &ModelConfig, x: &Tensor<T>) -> Result<Vec<usize>> {
    Ok(argmax_rows(&forward(p, cfg, x)?))
}

/// Tensor names of a freshly initialized model for `cfg`.
pub(crate) fn init_names(cfg: &ModelConfig) -> Vec<String> {
    let p = ModelParams::<f32> {
        fc_in: Tensor::zeros(&[0]),
        fc_in_bias: Tensor::zeros(&[0]),
        block_a: MambaBlockParams::zeros(&cfg.block_dims()),
        block_b: MambaBlockParams::zeros(&cfg.block_dims()),
        head: Tensor::zeros(&[0]),
        head_bias: Tensor::zeros(&[0]),
    };
    p.named().into_iter().map(|(n, _)| n).collect()
}
