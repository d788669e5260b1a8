//! Geometry kit for finite point samples of flat sets.
//!
//! Given a point sample of a set that is uniformly close to a plane at every
//! location and scale (bilateral flatness), this crate
//!
//! * measures the flatness (`geometry`: bilateral local Hausdorff distance to
//!   optimized planes, scanned over locations and radii),
//! * builds a surface atlas of local Lipschitz graph patches approximating the
//!   sample within a certified multiple of the measured flatness (`net`,
//!   `surface`),
//! * mollifies and blends the atlas into a smooth surface with measured
//!   derivative bounds (`smooth`),
//! * in codimension one, orients the atlas, offsets it to both sides, and
//!   certifies that the offsets split space into the expected inner domains
//!   at every requested scale (`codim1`).
//!
//! Every inequality the construction relies on is re-measured on the produced
//! data rather than assumed; reports carry the measured constants and witness
//! points for the failures. Brute-force reference implementations for the
//! tests live in `oracle`, sample generators in `synth`.

pub mod codim1;
pub mod config;
pub mod error;
pub mod geometry;
pub mod net;
pub mod oracle;
pub mod par;
pub mod smooth;
pub mod surface;
pub mod synth;

pub use config::RunConfig;
pub use error::Error;

/// Crate version, embedded in reports.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;
