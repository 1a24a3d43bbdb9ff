//! 2D Gaussian primitives: covariance algebra, kernel evaluation, footprints,
//! and the closed-form kernel inner products used by grouping and pruning.
//!
//! A primitive's covariance is parameterized by the rotation-scaling
//! decomposition `Sigma = R(theta) diag(sx^2, sy^2) R(theta)^T` with the
//! principal-axis standard deviations stored in log-space, so optimization
//! steps can never produce a degenerate scale. All math runs in f64; the
//! stored parameters are f32 to match the serialized format.

use std::f64::consts::PI;

/// One primitive: center (full-resolution pixel units), log principal-axis
/// standard deviations, in-plane rotation, and linear-RGB color coefficients.
/// Color is unbounded; there is no per-primitive opacity (the color
/// coefficients absorb it).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Gaussian2D {
    pub mu: [f32; 2],
    pub log_sx: f32,
    pub log_sy: f32,
    pub theta: f32,
    pub color: [f32; 3],
}

impl Gaussian2D {
    pub fn new(mu: [f32; 2], log_sx: f32, log_sy: f32, theta: f32, color: [f32; 3]) -> Self {
        Self {
            mu,
            log_sx,
            log_sy,
            theta,
            color,
        }
    }

    /// Isotropic helper: standard deviation `s` on both axes.
    pub fn isotropic(mu: [f32; 2], s: f32, color: [f32; 3]) -> Self {
        let ls = s.ln();
        Self::new(mu, ls, ls, 0.0, color)
    }

    #[inline]
    pub fn sx(&self) -> f64 {
        (self.log_sx as f64).exp()
    }

    #[inline]
    pub fn sy(&self) -> f64 {
        (self.log_sy as f64).exp()
    }

    pub fn is_finite(&self) -> bool {
        self.mu.iter().all(|v| v.is_finite())
            && self.log_sx.is_finite()
            && self.log_sy.is_finite()
            && self.theta.is_finite()
            && self.color.iter().all(|v| v.is_finite())
    }

    /// Rotation reduced modulo pi into [0, pi); the covariance is pi-periodic
    /// in theta, so this is the canonical representative for comparisons.
    /// The raw field stays unconstrained during optimization.
    pub fn theta_canonical(&self) -> f32 {
        let t = (self.theta as f64).rem_euclid(PI);
        t as f32
    }

    pub fn covariance(&self) -> Covariance2 {
        covariance(self)
    }
}

/// Symmetric positive definite 2x2 matrix `[[a, b], [b, c]]` in pixel^2.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Covariance2 {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl Covariance2 {
    #[inline]
    pub fn det(&self) -> f64 {
        self.a * self.c - self.b * self.b
    }

    pub fn is_positive_definite(&self) -> bool {
        self.a > 0.0 && self.det() > 0.0
    }

    #[inline]
    pub fn add(&self, other: &Covariance2) -> Covariance2 {
        Covariance2 {
            a: self.a + other.a,
            b: self.b + other.b,
            c: self.c + other.c,
        }
    }

    #[inline]
    pub fn scaled(&self, k: f64) -> Covariance2 {
        Covariance2 {
            a: self.a * k,
            b: self.b * k,
            c: self.c * k,
        }
    }

    /// d^T M^{-1} d without forming the inverse.
    #[inline]
    pub fn inv_quad_form(&self, d: [f64; 2]) -> f64 {
        let det = self.det();
        (self.c * d[0] * d[0] - 2.0 * self.b * d[0] * d[1] + self.a * d[1] * d[1]) / det
    }

    /// Eigenvalues as (min, max); both positive for a valid covariance.
    pub fn eigenvalues(&self) -> (f64, f64) {
        let tr = self.a + self.c;
        let diff = self.a - self.c;
        let disc = (diff * diff + 4.0 * self.b * self.b).sqrt();
        (0.5 * (tr - disc), 0.5 * (tr + disc))
    }
}

/// `Sigma = R(theta) diag(sx^2, sy^2) R(theta)^T`.
pub fn covariance(g: &Gaussian2D) -> Covariance2 {
    let (sin, cos) = (g.theta as f64).sin_cos();
    let sx2 = g.sx() * g.sx();
    let sy2 = g.sy() * g.sy();
    Covariance2 {
        a: cos * cos * sx2 + sin * sin * sy2,
        b: sin * cos * (sx2 - sy2),
        c: sin * sin * sx2 + cos * cos * sy2,
    }
}

/// Unnormalized kernel value `exp(-1/2 d^T Sigma^{-1} d)` with `d = x - mu`;
/// always in (0, 1].
pub fn kernel_eval(g: &Gaussian2D, x: [f64; 2]) -> f64 {
    let d = [x[0] - g.mu[0] as f64, x[1] - g.mu[1] as f64];
    let q = covariance(g).inv_quad_form(d);
    (-0.5 * q).exp()
}

/// Effective radius on the target pixel grid: `sqrt(lambda_max(Sigma / r^2))`.
/// At `raster_scale = 1` this is `max(sx, sy)`.
pub fn footprint_sigma_max(g: &Gaussian2D, raster_scale: f64) -> f64 {
    assert!(raster_scale > 0.0, "raster_scale must be positive");
    let (_, lam_max) = covariance(g).eigenvalues();
    lam_max.sqrt() / raster_scale
}

/// Smallest-axis counterpart of [`footprint_sigma_max`], used by the
/// anti-aliasing diagnostic.
pub fn footprint_sigma_min(g: &Gaussian2D, raster_scale: f64) -> f64 {
    assert!(raster_scale > 0.0, "raster_scale must be positive");
    let (lam_min, _) = covariance(g).eigenvalues();
    lam_min.sqrt() / raster_scale
}

/// Squared L2 norm of the kernel over the plane: `pi * sx * sy`
/// (equivalently `pi * sqrt(det Sigma)`).
pub fn l2_norm_sq(g: &Gaussian2D) -> f64 {
    PI * g.sx() * g.sy()
}

/// Kernel inner product `<phi_i, phi_j>` over the plane:
///
/// ```text
/// G_ij = 2 pi / sqrt(det(Si^{-1} + Sj^{-1})) * exp(-1/2 d^T (Si + Sj)^{-1} d)
/// ```
///
/// evaluated through the identity
/// `det(Si^{-1} + Sj^{-1}) = det(Si + Sj) / (det Si * det Sj)`, which avoids
/// forming inverses. Symmetric; `gram_entry(g, g) == l2_norm_sq(g)`.
pub fn gram_entry(gi: &Gaussian2D, gj: &Gaussian2D) -> f64 {
    let si = covariance(gi);
    let sj = covariance(gj);
    let sum = si.add(&sj);
    let d = [
        gi.mu[0] as f64 - gj.mu[0] as f64,
        gi.mu[1] as f64 - gj.mu[1] as f64,
    ];
    let q = sum.inv_quad_form(d);
    2.0 * PI * (si.det() * sj.det() / sum.det()).sqrt() * (-0.5 * q).exp()
}

/// Normalized kernel overlap in (0, 1]:
///
/// ```text
/// R_ij = 2 (det Si det Sj)^{1/4} / sqrt(det(Si + Sj)) * exp(-1/2 d^T (Si + Sj)^{-1} d)
/// ```
///
/// Equals `gram_entry / sqrt(G_ii G_jj)`; exactly 1 only for coincident
/// kernels.
pub fn correlation_entry(gi: &Gaussian2D, gj: &Gaussian2D) -> f64 {
    let si = covariance(gi);
    let sj = covariance(gj);
    let sum = si.add(&sj);
    let d = [
        gi.mu[0] as f64 - gj.mu[0] as f64,
        gi.mu[1] as f64 - gj.mu[1] as f64,
    ];
    let q = sum.inv_quad_form(d);
    2.0 * (si.det() * sj.det()).powf(0.25) / sum.det().sqrt() * (-0.5 * q).exp()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
    }

    pub(crate) fn random_gaussian(rng: &mut impl Rng) -> Gaussian2D {
        Gaussian2D::new(
            [rng.gen_range(-10.0..10.0), rng.gen_range(-10.0..10.0)],
            rng.gen_range(0.5f32..5.0).ln(),
            rng.gen_range(0.5f32..5.0).ln(),
            rng.gen_range(-6.0..6.0),
            [1.0, 1.0, 1.0],
        )
    }

    #[test]
    fn covariance_isotropic_is_identity() {
        for theta in [0.0f32, 0.3, 1.0, -2.5] {
            let g = Gaussian2D::new([0.0, 0.0], 0.0, 0.0, theta, [0.0; 3]);
            let cov = covariance(&g);
            assert!((cov.a - 1.0).abs() < 1e-12);
            assert!(cov.b.abs() < 1e-12);
            assert!((cov.c - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn covariance_axis_aligned() {
        let g = Gaussian2D::new([0.0, 0.0], 2.0f32.ln(), 0.0, 0.0, [0.0; 3]);
        let cov = covariance(&g);
        // tolerance reflects the f32 round trip through log-space storage
        assert!((cov.a - 4.0).abs() < 1e-6);
        assert!(cov.b.abs() < 1e-12);
        assert!((cov.c - 1.0).abs() < 1e-9);
    }

    #[test]
    fn covariance_quarter_turn_swaps_axes() {
        // sx=2, sy=1 rotated by pi/2: hand multiplication of
        // R diag(4,1) R^T with R = [[0,-1],[1,0]] gives diag(1,4).
        let g = Gaussian2D::new(
            [0.0, 0.0],
            2.0f32.ln(),
            0.0,
            std::f32::consts::FRAC_PI_2,
            [0.0; 3],
        );
        let cov = covariance(&g);
        assert!((cov.a - 1.0).abs() < 1e-6);
        assert!(cov.b.abs() < 1e-6);
        assert!((cov.c - 4.0).abs() < 1e-6);
    }

    #[test]
    fn covariance_positive_definite_random() {
        let mut rng = StdRng::seed_from_u64(7);
        for _ in 0..10_000 {
            let g = Gaussian2D::new(
                [rng.gen_range(-100.0..100.0), rng.gen_range(-100.0..100.0)],
                rng.gen_range(-3.0..3.0),
                rng.gen_range(-3.0..3.0),
                rng.gen_range(-10.0..10.0),
                [0.0; 3],
            );
            assert!(covariance(&g).is_positive_definite(), "{g:?}");
        }
    }

    #[test]
    fn kernel_at_center_is_one() {
        let g = Gaussian2D::new([3.5, -1.25], 0.7, -0.2, 0.9, [0.0; 3]);
        assert_eq!(kernel_eval(&g, [3.5, -1.25]), 1.0);
    }

    #[test]
    fn kernel_isotropic_distances() {
        let g = Gaussian2D::isotropic([0.0, 0.0], 1.0, [0.0; 3]);
        assert!(rel_err(kernel_eval(&g, [1.0, 0.0]), (-0.5f64).exp()) < 1e-12);
        assert!(rel_err(kernel_eval(&g, [0.0, 10.0]), (-50.0f64).exp()) < 1e-12);
    }

    #[test]
    fn footprint_examples() {
        let g = Gaussian2D::new([0.0, 0.0], 3.0f32.ln(), 0.0, 0.4, [0.0; 3]);
        assert!(rel_err(footprint_sigma_max(&g, 1.0), 3.0) < 1e-6);
        assert!(rel_err(footprint_sigma_max(&g, 3.0), 1.0) < 1e-6);
        let iso = Gaussian2D::isotropic([0.0, 0.0], 2.0, [0.0; 3]);
        for theta in [0.0f32, 0.77, 2.1] {
            let mut g = iso;
            g.theta = theta;
            assert!(rel_err(footprint_sigma_max(&g, 1.0), 2.0) < 1e-6);
        }
    }

    #[test]
    fn footprint_scales_inversely() {
        let mut rng = StdRng::seed_from_u64(11);
        for _ in 0..100 {
            let g = random_gaussian(&mut rng);
            let base = footprint_sigma_max(&g, 1.0);
            let r = rng.gen_range(1.0..8.0);
            assert!(rel_err(footprint_sigma_max(&g, r), base / r) < 1e-12);
        }
    }

    #[test]
    fn l2_norm_examples() {
        let unit = Gaussian2D::isotropic([0.0, 0.0], 1.0, [0.0; 3]);
        assert!(rel_err(l2_norm_sq(&unit), PI) < 1e-12);
        let g = Gaussian2D::new([0.0, 0.0], 2.0f32.ln(), 3.0f32.ln(), 1.3, [0.0; 3]);
        assert!(rel_err(l2_norm_sq(&g), 6.0 * PI) < 1e-6);
    }

    #[test]
    fn gram_diagonal_matches_l2_norm() {
        let mut rng = StdRng::seed_from_u64(3);
        for _ in 0..200 {
            let g = random_gaussian(&mut rng);
            assert!(rel_err(gram_entry(&g, &g), l2_norm_sq(&g)) < 1e-12);
        }
    }

    #[test]
    fn gram_examples() {
        let a = Gaussian2D::isotropic([0.0, 0.0], 1.0, [0.0; 3]);
        assert!(rel_err(gram_entry(&a, &a), PI) < 1e-12);
        // identical isotropic s=1, centers 4 apart:
        // exponent = -1/2 * 16 / 2 = -4
        let b = Gaussian2D::isotropic([4.0, 0.0], 1.0, [0.0; 3]);
        assert!(rel_err(gram_entry(&a, &b), PI * (-4.0f64).exp()) < 1e-12);
    }

    #[test]
    fn gram_symmetric() {
        let mut rng = StdRng::seed_from_u64(5);
        for _ in 0..200 {
            let a = random_gaussian(&mut rng);
            let b = random_gaussian(&mut rng);
            assert_eq!(gram_entry(&a, &b), gram_entry(&b, &a));
        }
    }

    #[test]
    fn correlation_examples() {
        let a = Gaussian2D::new([1.0, 2.0], 0.4, -0.3, 0.8, [0.0; 3]);
        assert!(rel_err(correlation_entry(&a, &a), 1.0) < 1e-12);

        let b = Gaussian2D::isotropic([0.0, 0.0], 1.0, [0.0; 3]);
        let c = Gaussian2D::isotropic([2.0, 0.0], 1.0, [0.0; 3]);
        assert!(rel_err(correlation_entry(&b, &c), (-1.0f64).exp()) < 1e-12);

        let far = Gaussian2D::isotropic([20.0, 0.0], 1.0, [0.0; 3]);
        assert!(correlation_entry(&b, &far) < 1e-20);
    }

    #[test]
    fn correlation_consistent_with_gram() {
        let mut rng = StdRng::seed_from_u64(9);
        for _ in 0..500 {
            let a = random_gaussian(&mut rng);
            let b = random_gaussian(&mut rng);
            let r = correlation_entry(&a, &b);
            let from_gram =
                gram_entry(&a, &b) / (gram_entry(&a, &a) * gram_entry(&b, &b)).sqrt();
            assert!(rel_err(r, from_gram) < 1e-12, "{a:?} {b:?}");
            assert!(r > 0.0 && r <= 1.0 + 1e-12);
        }
    }

    #[test]
    fn theta_canonicalization() {
        let mut g = Gaussian2D::isotropic([0.0, 0.0], 1.0, [0.0; 3]);
        g.theta = std::f32::consts::PI + 0.25;
        assert!((g.theta_canonical() - 0.25).abs() < 1e-6);
        g.theta = -0.25;
        assert!((g.theta_canonical() as f64 - (PI - 0.25)).abs() < 1e-6);
    }
}
