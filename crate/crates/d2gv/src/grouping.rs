//! Nyquist-based selection of the scale-dependent primitive subset.
//!
//! Rendering at downsample factor `r` samples on a grid with spacing
//! proportional to `r`, so a Gaussian is safe to keep only if its spectrum has
//! decayed below `epsilon` at the grid's Nyquist frequency `pi / r`. For a
//! Gaussian of standard deviation `sigma` that condition is
//! `sigma >= beta(epsilon) * r` with `beta(eps) = sqrt(2 ln(1/eps)) / pi`.
//! Gating by the footprint `sigma_max` with one shared `beta` makes the
//! retained groups nested across scales: coarser renders always use a subset
//! of the primitives of finer ones.

use thiserror::Error;

use crate::gaussian::{self, Gaussian2D};

#[derive(Debug, Error)]
pub enum GroupingError {
    #[error("epsilon must lie in (0, 1), got {0}")]
    InvalidEpsilon(f64),
}

/// The primitive subset retained for rendering at downsample factor `r`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScaleGroup {
    pub scale: f64,
    pub beta: f64,
    /// sorted, unique indices into the canonical set
    pub indices: Vec<usize>,
}

impl ScaleGroup {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// `beta(eps) = sqrt(2 ln(1/eps)) / pi`: the minimum ratio of standard
/// deviation to pixel spacing that attenuates the kernel's spectrum to at
/// most `eps` at the Nyquist frequency.
pub fn nyquist_beta(epsilon: f64) -> Result<f64, GroupingError> {
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(GroupingError::InvalidEpsilon(epsilon));
    }
    Ok((2.0 * (1.0 / epsilon).ln()).sqrt() / std::f64::consts::PI)
}

/// Default threshold: `beta(0.01)`, about 0.966.
pub fn default_beta() -> f64 {
    nyquist_beta(0.01).expect("0.01 is valid")
}

/// Retain exactly the primitives with `footprint_sigma_max >= beta * r`
/// (footprints taken at raster scale 1). An empty group is legal; callers
/// render a black frame and we emit a warning.
pub fn group_for_scale(canonical: &[Gaussian2D], r: f64, beta: f64) -> ScaleGroup {
    assert!(r >= 1.0, "downsample factor must be >= 1");
    assert!(beta > 0.0, "beta must be positive");
    let threshold = beta * r;
    let indices: Vec<usize> = canonical
        .iter()
        .enumerate()
        .filter(|(_, g)| gaussian::footprint_sigma_max(g, 1.0) >= threshold)
        .map(|(i, _)| i)
        .collect();
    if indices.is_empty() && !canonical.is_empty() {
        log::warn!("scale group at r={r} (beta={beta}) is empty; renders will be black");
    }
    ScaleGroup {
        scale: r,
        beta,
        indices,
    }
}

/// Spectral attenuation of the primitive's narrowest axis at the Nyquist
/// frequency of a grid downsampled by `r`:
/// `exp(-1/2 sigma_min^2 (pi/r)^2)`. A value `<= epsilon` certifies the
/// anti-aliasing condition along the worst axis; see [`nyquist_certified`].
pub fn antialias_margin(g: &Gaussian2D, r: f64) -> f64 {
    let omega_n = std::f64::consts::PI / r;
    let sigma_min = gaussian::footprint_sigma_min(g, 1.0);
    (-0.5 * sigma_min * sigma_min * omega_n * omega_n).exp()
}

/// True when the worst-axis attenuation meets `epsilon`.
pub fn nyquist_certified(g: &Gaussian2D, r: f64, epsilon: f64) -> bool {
    antialias_margin(g, r) <= epsilon
}
