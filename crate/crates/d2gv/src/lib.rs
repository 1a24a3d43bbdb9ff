//! Deformable 2D Gaussian video representation.
//!
//! A video is split into fixed-length groups of pictures (GoPs). Each GoP is
//! represented by a canonical set of anisotropic 2D Gaussian primitives plus a
//! small deformation network that transports the set to any timestamp by
//! integrating a latent ODE. Frames are rendered by summing Gaussian kernel
//! contributions on a pixel grid; the same primitive set renders at arbitrary
//! resolutions through Nyquist-based scale grouping, and any byte prefix of
//! the serialized primitive stream decodes to a valid lower-rate model thanks
//! to a D-optimal transmission order.
//!
//! Module map:
//! - [`gaussian`]: primitives, covariance algebra, kernel integrals.
//! - [`raster`]: forward rendering and the analytic backward pass.
//! - [`deform`]: positional encodings, latent ODE, decode/gate heads.
//! - [`grouping`]: scale-dependent primitive selection.
//! - [`prune`]: D-optimal subset selection and the fast ranking score.
//! - [`train`]: two-stage per-GoP optimization.
//! - [`metrics`]: PSNR / SSIM / MS-SSIM / Bjontegaard deltas / bpp.
//! - [`model`] / [`container`] / [`frames`]: model assembly, the binary
//!   container with prefix-decodable records, and frame I/O.

pub mod buffer;
pub mod container;
pub mod deform;
pub mod frames;
pub mod gaussian;
pub mod grouping;
pub mod metrics;
pub mod model;
pub mod prune;
pub mod raster;
pub mod spatial;
pub mod train;

pub use buffer::ImageBuffer;
pub use gaussian::{Covariance2, Gaussian2D};
