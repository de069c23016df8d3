//! The Log-GPIS transform: converts latent GP predictions into Euclidean
//! distance, unit gradient direction, propagated variance, and recovered
//! sign.
//!
//! The latent field regresses `exp(-lambda d)`, so distance is recovered as
//! `-ln(latent) / lambda`. The latent mean is floored before taking the log:
//! a zero-mean prior drives the latent toward zero far from data, and the
//! floor turns that saturation into an explicit clamp at a finite cap
//! instead of an infinite distance. Gradients only need direction (the
//! distance field has unit slope), so the latent gradient is normalized and
//! flipped. Variance propagates to first order as
//! `latent_var / (lambda latent)^2`.

use nalgebra::SVector;

use crate::covariance::KernelParams;

/// Default floor applied to the latent mean before the log transform; caps
/// representable distance at `-ln(floor)/lambda` (about 0.69 m at
/// lambda = 40). Large arenas lower the floor through their map config.
pub const DEFAULT_LATENT_FLOOR: f64 = 1e-12;

/// Latent gradients shorter than this give no direction (medial axis,
/// untouched prior); the transform reports an undefined gradient.
pub const GRADIENT_EPS: f64 = 1e-12;

/// Half-width of the dead zone around zero in the sign test's dot product.
pub const SIGN_DEAD_ZONE: f64 = 1e-9;

/// Which side of the surface a query sits on, when recoverable.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Sign {
    Outside,
    Inside,
    Unknown,
}

impl Sign {
    /// +1 outside, -1 inside, 0 unknown.
    pub fn to_f64(self) -> f64 {
        match self {
            Sign::Outside => 1.0,
            Sign::Inside => -1.0,
            Sign::Unknown => 0.0,
        }
    }
}

/// Distance-field posterior at one query point.
#[derive(Clone, Debug)]
pub struct FieldEstimate<const D: usize> {
    /// Blended latent mean the transforms were applied to.
    pub latent_mean: f64,
    /// Unsigned distance in meters, >= 0.
    pub distance: f64,
    /// Unit direction of increasing distance; `None` where the latent
    /// gradient is degenerate.
    pub gradient: Option<SVector<f64, D>>,
    /// First-order distance variance in m^2.
    pub variance: f64,
    pub sign: Sign,
    /// True when the latent mean fell outside (floor, 1] and the distance
    /// was clamped.
    pub clamped: bool,
}

impl<const D: usize> FieldEstimate<D> {
    /// Distance with the recovered sign applied; `None` when the sign is
    /// unknown.
    pub fn signed_distance(&self) -> Option<f64> {
        match self.sign {
            Sign::Unknown => None,
            s => Some(s.to_f64() * self.distance),
        }
    }
}

/// Distance from a latent mean using the default floor. Returns the clamp
/// flag alongside: latent > 1 clamps to distance 0, latent <= floor clamps
/// to the cap `-ln(floor)/lambda`.
pub fn to_distance(latent_mean: f64, params: &KernelParams) -> (f64, bool) {
    to_distance_with_floor(latent_mean, params.lambda, DEFAULT_LATENT_FLOOR)
}

/// [`to_distance`] with an explicit latent floor.
pub fn to_distance_with_floor(latent_mean: f64, lambda: f64, floor: f64) -> (f64, bool) {
    if latent_mean > 1.0 {
        (0.0, true)
    } else if latent_mean <= floor || !latent_mean.is_finite() {
        (-floor.ln() / lambda, true)
    } else {
        (-latent_mean.ln() / lambda, false)
    }
}

/// Unit distance-gradient direction from a latent gradient: normalize and
/// flip (the latent decays with distance). `None` for degenerate gradients.
pub fn to_gradient<const D: usize>(latent_grad: &SVector<f64, D>) -> Option<SVector<f64, D>> {
    let norm = latent_grad.norm();
    if norm <= GRADIENT_EPS || !norm.is_finite() {
        None
    } else {
        Some(-latent_grad / norm)
    }
}

/// First-order distance variance `latent_var / (lambda latent)^2`, with the
/// latent mean clamped into [floor, 1] first (default floor).
pub fn to_variance(latent_mean: f64, latent_var: f64, params: &KernelParams) -> f64 {
    to_variance_with_floor(latent_mean, latent_var, params.lambda, DEFAULT_LATENT_FLOOR)
}

/// [`to_variance`] with an explicit latent floor. Evaluated in log space so
/// very small floors (large distance caps) cannot overflow the squared
/// denominator; the result saturates at `f64::MAX`.
pub fn to_variance_with_floor(latent_mean: f64, latent_var: f64, lambda: f64, floor: f64) -> f64 {
    if !(latent_var > 0.0) {
        return 0.0;
    }
    let f = if latent_mean.is_finite() {
        latent_mean.clamp(floor, 1.0)
    } else {
        floor
    };
    let log_var = latent_var.ln() - 2.0 * (lambda.ln() + f.ln());
    log_var.exp().min(f64::MAX)
}

/// Side of the surface: +1 when the distance gradient points back toward
/// the sensor (query outside), -1 when it points away (query inside),
/// unknown when the dot product sits within the dead zone.
pub fn recover_sign<const D: usize>(
    query: &SVector<f64, D>,
    gradient: &SVector<f64, D>,
    sensor_pos: &SVector<f64, D>,
) -> Sign {
    let dot = gradient.dot(&(sensor_pos - query));
    if dot > SIGN_DEAD_ZONE {
        Sign::Outside
    } else if dot < -SIGN_DEAD_ZONE {
        Sign::Inside
    } else {
        Sign::Unknown
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::Vector2;

    fn params(lambda: f64) -> KernelParams {
        KernelParams {
            lambda,
            ..KernelParams::default()
        }
    }

    #[test]
    fn distance_inverts_the_latent_transform() {
        let p = params(40.0);
        assert_eq!(to_distance(1.0, &p), (0.0, false));
        // exp(-40) sits below the default floor, so the exact inverse at
        // 1 m needs the explicit-floor variant.
        let (d, clamped) = to_distance_with_floor((-40.0f64).exp(), 40.0, 1e-300);
        assert_relative_eq!(d, 1.0, max_relative = 1e-12);
        assert!(!clamped);
        let (d, clamped) = to_distance((-20.0f64).exp(), &p);
        assert_relative_eq!(d, 0.5, max_relative = 1e-12);
        assert!(!clamped);
    }

    #[test]
    fn pathological_latent_means_clamp() {
        let p = params(40.0);
        let cap = -(1e-12f64).ln() / 40.0;
        let (d, clamped) = to_distance(-0.001, &p);
        assert_relative_eq!(d, cap, max_relative = 1e-12);
        assert!(clamped);
        assert_relative_eq!(d, 0.6907755278982137, max_relative = 1e-12);

        assert_eq!(to_distance(1.5, &p), (0.0, true));
        let (d0, c0) = to_distance(0.0, &p);
        assert_relative_eq!(d0, cap, max_relative = 1e-12);
        assert!(c0);
        let (dn, cn) = to_distance(f64::NAN, &p);
        assert!(dn.is_finite() && cn);
    }

    #[test]
    fn round_trip_is_exact_over_half_the_cap() {
        let lambda = 40.0;
        let p = params(lambda);
        let half_cap = 0.5 * -(DEFAULT_LATENT_FLOOR).ln() / lambda;
        for i in 0..=200 {
            let d = half_cap * i as f64 / 200.0;
            let (back, clamped) = to_distance((-lambda * d).exp(), &p);
            assert!(!clamped, "clamped at d={d}");
            assert!((back - d).abs() <= 1e-12, "round trip {d} -> {back}");
        }
    }

    #[test]
    fn distance_is_strictly_decreasing_in_the_latent_mean() {
        let p = params(5.0);
        let mut prev = f64::INFINITY;
        for i in 0..=400 {
            // Log-spaced latent means from just above the floor up to 1.
            let f = (DEFAULT_LATENT_FLOOR.ln() * (1.0 - i as f64 / 400.0)).exp();
            let (d, clamped) = to_distance(f, &p);
            assert!(!clamped);
            assert!(d < prev, "not decreasing at latent {f}");
            prev = d;
        }
    }

    #[test]
    fn gradient_normalizes_and_flips() {
        let g = to_gradient(&Vector2::new(0.0, -3.0)).unwrap();
        assert_relative_eq!(g, Vector2::new(0.0, 1.0), epsilon = 1e-15);
        assert!(to_gradient(&Vector2::new(1e-15, 0.0)).is_none());
        assert!(to_gradient(&Vector2::new(f64::NAN, 0.0)).is_none());
    }

    #[test]
    fn variance_propagates_to_first_order() {
        let p = params(40.0);
        assert_eq!(to_variance(1.0, 0.0, &p), 0.0);
        assert_relative_eq!(to_variance(1.0, 0.04, &p), 2.5e-5, max_relative = 1e-12);
        // Latent mean above 1 clamps to 1 before the division.
        assert_relative_eq!(to_variance(3.0, 0.04, &p), 2.5e-5, max_relative = 1e-12);
        assert_eq!(to_variance(0.5, -1e-3, &p), 0.0);
    }

    #[test]
    fn variance_survives_extreme_floors() {
        // A floor of 1e-300 would overflow (lambda f)^2 if squared directly.
        let v = to_variance_with_floor(1e-310, 1.0, 40.0, 1e-300);
        assert!(v > 0.0);
        assert!(!v.is_nan());
        // Moderate case cross-checked against the direct formula.
        let direct = 0.01 / (40.0f64 * 1e-6).powi(2);
        assert_relative_eq!(
            to_variance_with_floor(1e-6, 0.01, 40.0, 1e-300),
            direct,
            max_relative = 1e-12
        );
    }

    #[test]
    fn sign_follows_the_gradient_sensor_geometry() {
        let q = Vector2::new(1.0, 0.0);
        let sensor = Vector2::new(5.0, 0.0);
        let toward = Vector2::new(1.0, 0.0);
        let away = Vector2::new(-1.0, 0.0);
        let ortho = Vector2::new(0.0, 1.0);
        assert_eq!(recover_sign(&q, &toward, &sensor), Sign::Outside);
        assert_eq!(recover_sign(&q, &away, &sensor), Sign::Inside);
        assert_eq!(recover_sign(&q, &ortho, &sensor), Sign::Unknown);
        assert_eq!(Sign::Outside.to_f64(), 1.0);
        assert_eq!(Sign::Inside.to_f64(), -1.0);
        assert_eq!(Sign::Unknown.to_f64(), 0.0);
    }

    #[test]
    fn signed_distance_combines_sign_and_magnitude() {
        let est = FieldEstimate::<2> {
            latent_mean: 0.5,
            distance: 0.25,
            gradient: Some(Vector2::new(1.0, 0.0)),
            variance: 1e-4,
            sign: Sign::Inside,
            clamped: false,
        };
        assert_eq!(est.signed_distance(), Some(-0.25));
        let unknown = FieldEstimate { sign: Sign::Unknown, ..est };
        assert_eq!(unknown.signed_distance(), None);
    }
}
