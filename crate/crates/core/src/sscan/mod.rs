//! Selective state-space scan and the gated block built around it.
//!
//! The state matrix is diagonal per channel, `A = -exp(A_log)`, discretized
//! with a zero-order hold for `A` and an Euler step for `B`:
//!
//! ```text
//! Abar[t,c,j] = exp(delta[t,c] * A[c,j])
//! Bbar[t,c,j] = delta[t,c] * B[t,j]
//! h[t,c,:]    = Abar[t,c,:] ⊙ h[t-1,c,:] + Bbar[t,c,:] * u[t,c]
//! y[t,c]      = Σ_j C[t,j] h[t,c,j] + D[c] u[t,c]
//! ```

mod block;
mod scan;

pub use block::{mamba_block, mamba_block_var, BlockDims, BlockVars, Direction, MambaBlockParams};
pub use scan::{
    discretize, selective_scan_assoc, selective_scan_seq, selective_scan_seq_counted,
    selective_scan_var, ScanInputs, ASSOC_CHUNK,
};
