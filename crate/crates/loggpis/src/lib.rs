//! Probabilistic Euclidean distance fields from range-sensor data.
//!
//! The library regresses a latent field `v(x) = exp(-lambda * d(x))` over
//! surface samples with a Gaussian process, then recovers distance, unit
//! gradient and a first-order variance from the posterior:
//!
//! * `d(x) = -ln(f(x)) / lambda`: the log transform of the latent mean,
//! * `grad d = -grad f / |grad f|`: normalized and flipped,
//! * `V[d] = V[f] / (lambda * f)^2`: first-order error propagation.
//!
//! Large `lambda` makes `d` approach the true Euclidean distance (the field
//! is the stationary solution of a screened-Poisson equation, and the
//! logarithm undoes the exponential decay), while the Gaussian process
//! supplies interpolation, noise handling and calibrated uncertainty.
//!
//! The crate is organized bottom-up:
//!
//! * [`bessel`]: modified Bessel functions `K_0`/`K_1` for the Whittle kernel;
//! * [`covariance`]: Matérn-family kernels and derivative blocks;
//! * [`gp`]: exact GP regression with joint value + gradient observations;
//! * [`field`]: the log transform from latent posterior to distance field;
//! * [`map`]: incremental world model, a spatial tree of local GPs with
//!   Bayesian point fusion and dirty-cluster refits;
//! * [`ingestion`]: simulated 2D lidar / depth cameras, normal estimation,
//!   PLY and CSV input/output;
//! * [`surface`]: signed grids and iso-surface extraction (marching squares
//!   and cubes with Hermite refinement);
//! * [`evaluation`]: analytic and nearest-neighbor distance oracles, the
//!   plain GPIS baseline, and slice/mesh error metrics.
//!
//! Dimensions are compile-time: every spatial type is generic over
//! `const D: usize`, instantiated at 2 and 3.

pub mod bessel;
pub mod covariance;
pub mod error;
pub mod evaluation;
pub mod field;
pub mod gp;
pub mod ingestion;
pub mod map;
pub mod surface;

pub use covariance::{KernelFamily, KernelParams};
pub use error::{Error, Result};
pub use field::{FieldEstimate, Sign};
pub use map::{ClusterMap, MapConfig, Method, SurfacePoint};
