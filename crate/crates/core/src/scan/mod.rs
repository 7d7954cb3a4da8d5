//! Selective state-space scan (S6) and its 2D adaptation.

mod kernel;
mod op;
mod ss2d;

pub use kernel::{discretize, scan_chunked, scan_sequential, scan_states, step_pairs, ScanPair, ScanTerms};
pub use op::{
    a_log_init, delta_bias_init, inv_softplus, selective_scan, selective_scan_forward, set_adjoint_fault, ScanParams,
    ScanVars, DEFAULT_CHUNK,
};
pub use ss2d::{cross_merge, cross_scan, ss2d_branches, ss2d_forward, ss2d_tokens, CrossScanPlan, ScanOrder};
