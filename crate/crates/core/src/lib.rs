//! Exact parameterizations of transportation polytopes and the Birkhoff
//! polytope, with baselines, spectral diagnostics and a hyper-connection
//! residual layer built on them.

pub mod baselines;
pub mod error;
pub mod hc_layer;
pub mod matrix;
pub mod mixer;
pub mod real;
pub mod rtbp;
pub mod spectral;
pub mod transport;
pub mod variants;

pub use baselines::{bvn_combination, kronecker_mix, sinkhorn, KroneckerFactors, SinkhornReport};
pub use error::{Error, Result};
pub use matrix::Matrix;
pub use mixer::{MixerKind, MixerOutput, MixerSpec};
pub use real::{Dual, Real};
pub use rtbp::{
    count_params, rtbp_forward, rtbp_forward_traced, rtbp_inverse_numeric, rtbp_jacobian,
};
pub use spectral::{analyze, compose_chain, SpectralReport};
pub use transport::{
    feasible_interval, tbp_forward, tbp_inverse, tbp_jacobian, ChartParams, FeasibleInterval,
    Margins, TransportMatrix,
};
pub use variants::squash::{squash, SquashKind, SquashSpec};
pub use variants::{average_charts, lazyfy, minorize, AveragingSpec, ChartKind, SpectralShaping};
