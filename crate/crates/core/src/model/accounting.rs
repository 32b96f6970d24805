//! Exact parameter counts and analytic FLOP counts.
//!
//! FLOP convention: a multiply-accumulate is 2 FLOPs, any other elementwise
//! arithmetic op is 1, and `exp`, `ln` and `sigmoid` each cost
//! [`TRANSCENDENTAL_FLOPS`]. `A = -exp(A_log)` depends only on parameters and
//! is computed once per model, so it is not part of the per-frame count.

use super::ModelConfig;

pub const TRANSCENDENTAL_FLOPS: u64 = 8;

/// Exact number of scalar parameters.
pub fn count_params(cfg: &ModelConfig) -> usize {
    let fc_in = cfg.n_bins * cfg.d_model + cfg.d_model;
    let blocks = 2 * cfg.block_dims().param_count();
    let head = cfg.head_width() * cfg.n_classes + cfg.n_classes;
    fc_in + blocks + head
}

/// Per-stage FLOPs of one forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FlopBreakdown {
    pub fc_in: u64,
    /// One block including its residual add; both blocks cost the same.
    pub per_block: u64,
    pub head: u64,
    pub total: u64,
}

/// FLOPs per frame of one block, by stage.
fn block_flops_per_frame(cfg: &ModelConfig) -> u64 {
    let d = cfg.block_dims();
    let (dm, di, n, r, k) = (
        d.d_model as u64,
        d.d_inner as u64,
        d.n_state as u64,
        d.dt_rank as u64,
        d.conv_k as u64,
    );
    let bias = u64::from(d.proj_bias);
    let tr = TRANSCENDENTAL_FLOPS;
    // square-accumulate, normalize and gain per element; mean, eps, sqrt, reciprocal per row
    let rmsnorm = 4 * dm + 3 + tr;
    let in_proj = 2 * dm * 2 * di + bias * 2 * di;
    let conv = 2 * k * di + di;
    let silu_u = (tr + 1) * di;
    let x_proj = 2 * di * (r + 2 * n);
    let dt_proj = 2 * r * di + di;
    // ln(1 + exp(x))
    let softplus = (2 * tr + 1) * di;
    // delta*A, exp, delta*B
    let discretize = (tr + 2) * di * n;
    // Bbar*u, then Abar*h + .
    let recurrence = 3 * di * n;
    let readout = 2 * di * n + 2 * di;
    let gate = (tr + 1) * di + di;
    let out_proj = 2 * di * dm + bias * dm;
    let residual = dm;
    rmsnorm + in_proj + conv + silu_u + x_proj + dt_proj + softplus + discretize + recurrence
        + readout + gate + out_proj + residual
}

pub fn flop_breakdown(cfg: &ModelConfig, frames: usize) -> FlopBreakdown {
    let l = frames as u64;
    let dm = cfg.d_model as u64;
    let fc_in = l * (2 * cfg.n_bins as u64 * dm + dm);
    let per_block = l * block_flops_per_frame(cfg);
    let hw = cfg.head_width() as u64;
    let c = cfg.n_classes as u64;
    let head = l * (2 * hw * c + c);
    // the concatenation in MACE-H / BMACE moves data only
    FlopBreakdown {
        fc_in,
        per_block,
        head,
        total: fc_in + 2 * per_block + head,
    }
}

/// Analytic FLOPs of one forward pass over `frames` frames.
pub fn count_flops(cfg: &ModelConfig, frames: usize) -> u64 {
    flop_breakdown(cfg, frames).total
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Variant;

    fn tiny(variant: Variant, n_classes: usize) -> ModelConfig {
        ModelConfig {
            variant,
            d_model: 4,
            n_state: 2,
            dt_rank: 2,
            conv_k: 2,
            expand: 1,
            n_classes,
            ..Default::default()
        }
    }

    #[test]
    fn tiny_param_count_by_hand() {
        // fc_in 144*4 + 4 = 580
        // block: in_proj 32, conv 8 + 4, x_proj 4*(2+4) = 24, dt_proj 8 + 4,
        //        a_log 8, d 4, out_proj 16, gain 4 -> 112
        // head (V): 4*3 + 3 = 15; head (H/B): 8*3 + 3 = 27
        assert_eq!(count_params(&tiny(Variant::MaceV, 3)), 580 + 224 + 15);
        assert_eq!(count_params(&tiny(Variant::MaceH, 3)), 580 + 224 + 27);
        assert_eq!(count_params(&tiny(Variant::Bmace, 3)), 580 + 224 + 27);
    }

    #[test]
    fn table_deltas() {
        for c in [25, 170] {
            let v = count_params(&ModelConfig::new(Variant::MaceV, c));
            let h = count_params(&ModelConfig::new(Variant::MaceH, c));
            let b = count_params(&ModelConfig::new(Variant::Bmace, c));
            assert_eq!(h - v, c * 128);
            assert_eq!(b, h);
        }
        let diff = |variant| {
            count_params(&ModelConfig::new(variant, 170)) - count_params(&ModelConfig::new(variant, 25))
        };
        assert_eq!(diff(Variant::MaceV), 18_705);
        assert_eq!(diff(Variant::MaceH), 37_265);
        assert_eq!(diff(Variant::Bmace), 37_265);
    }

    #[test]
    fn tiny_flops_by_hand() {
        // d=4, di=4, n=2, r=2, k=2, no projection bias, C=3, L=2
        let rms = 4 * 4 + 3 + 8; // 27
        let in_proj = 2 * 4 * 8; // 64
        let conv = 2 * 2 * 4 + 4; // 20
        let silu_u = 9 * 4; // 36
        let x_proj = 2 * 4 * 6; // 48
        let dt_proj = 2 * 2 * 4 + 4; // 20
        let softplus = 17 * 4; // 68
        let disc = 10 * 4 * 2; // 80
        let rec = 3 * 4 * 2; // 24
        let readout = 2 * 4 * 2 + 2 * 4; // 24
        let gate = 9 * 4 + 4; // 40
        let out_proj = 2 * 4 * 4; // 32
        let residual = 4;
        let block = rms + in_proj + conv + silu_u + x_proj + dt_proj + softplus + disc + rec
            + readout + gate + out_proj + residual;
        assert_eq!(block, 487);
        let fc_in = 2 * 144 * 4 + 4; // 1156
        let head_v = 2 * 4 * 3 + 3; // 27
        let head_b = 2 * 8 * 3 + 3; // 51
        let v = flop_breakdown(&tiny(Variant::MaceV, 3), 2);
        assert_eq!(v.per_block, 2 * block);
        assert_eq!(v.total, 2 * (fc_in + 2 * block + head_v));
        assert_eq!(count_flops(&tiny(Variant::Bmace, 3), 2), 2 * (fc_in + 2 * block + head_b));
    }

    #[test]
    fn flops_linear_in_length() {
        for v in Variant::ALL {
            let cfg = ModelConfig::new(v, 25);
            for l in [1, 4, 108, 512] {
                assert_eq!(count_flops(&cfg, 2 * l), 2 * count_flops(&cfg, l));
            }
        }
    }
}
