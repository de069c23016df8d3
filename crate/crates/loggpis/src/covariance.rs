//! Matérn-family covariance functions and their derivative blocks.
//!
//! Two members are provided, both parameterized directly by the inverse
//! length scale `lambda` so that the Bessel argument is always `lambda * r`,
//! and both normalized to `k(0) = sigma2`:
//!
//! * Whittle (`nu = 1`): `k(r) = sigma2 * lambda*r * K_1(lambda*r)`: the
//!   stationary kernel of the screened-Poisson equation. It is not
//!   mean-square differentiable at zero lag, so it supports value
//!   observations only.
//! * Scaled Matérn 3/2 (`nu = 3/2`):
//!   `k(r) = sigma2 * (1 + lambda*r) * exp(-lambda*r)`: a close, smooth
//!   substitute that additionally supports gradient observations. Its
//!   derivative blocks with `u = x - x'`, `r = |u|`:
//!
//!   ```text
//!   grad_x  k = -sigma2 lambda^2 e^{-lambda r} u
//!   grad_x' k = +sigma2 lambda^2 e^{-lambda r} u
//!   d/dx d/dx'^T k = sigma2 lambda^2 e^{-lambda r} (I - lambda u u^T / r)
//!   ```
//!
//!   All blocks are finite everywhere; at `r = 0` the gradient is the zero
//!   vector and the Hessian block takes its continuous limit
//!   `sigma2 lambda^2 I`.

use nalgebra::{DMatrix, SMatrix, SVector};
use serde::{Deserialize, Serialize};

use crate::bessel::{bessel_k0, bessel_k1};
use crate::error::{Error, Result};

/// Which Matérn-family member a model uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum KernelFamily {
    /// `nu = 1`; value observations only.
    Whittle,
    /// `nu = 3/2`; supports joint value + gradient observations.
    Matern32,
}

impl KernelFamily {
    /// The smoothness order `nu`.
    pub fn nu(self) -> f64 {
        match self {
            KernelFamily::Whittle => 1.0,
            KernelFamily::Matern32 => 1.5,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            KernelFamily::Whittle => "whittle",
            KernelFamily::Matern32 => "matern32",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "whittle" => Ok(KernelFamily::Whittle),
            "matern32" => Ok(KernelFamily::Matern32),
            other => Err(Error::invalid(format!(
                "unknown kernel '{other}' (expected 'whittle' or 'matern32')"
            ))),
        }
    }
}

impl std::fmt::Display for KernelFamily {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for KernelFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        KernelFamily::from_name(s)
    }
}

/// Hyperparameters shared by every covariance evaluation.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct KernelParams {
    /// Inverse length scale (1/m). Also the decay rate of the latent field:
    /// larger `lambda` tracks true distance more closely but saturates
    /// sooner.
    pub lambda: f64,
    /// Family member (smoothness order).
    pub family: KernelFamily,
    /// Signal variance; the zero-lag covariance.
    pub sigma2: f64,
    /// Baseline std of value observations (added in quadrature to per-point
    /// noise derived from sensor error).
    pub noise_y: f64,
    /// Std of gradient observations; gradient targets come from estimated
    /// normals and are noisier than value targets.
    pub noise_grad: f64,
}

impl Default for KernelParams {
    fn default() -> Self {
        KernelParams {
            lambda: 40.0,
            family: KernelFamily::Matern32,
            sigma2: 1.0,
            noise_y: 1e-2,
            noise_grad: 1e-2,
        }
    }
}

impl KernelParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda.is_finite() && self.lambda > 0.0) {
            return Err(Error::invalid(format!("lambda must be > 0, got {}", self.lambda)));
        }
        if !(self.sigma2.is_finite() && self.sigma2 > 0.0) {
            return Err(Error::invalid(format!("sigma2 must be > 0, got {}", self.sigma2)));
        }
        if !(self.noise_y.is_finite() && self.noise_y >= 0.0) {
            return Err(Error::invalid(format!("noise_y must be >= 0, got {}", self.noise_y)));
        }
        if !(self.noise_grad.is_finite() && self.noise_grad >= 0.0) {
            return Err(Error::invalid(format!(
                "noise_grad must be >= 0, got {}",
                self.noise_grad
            )));
        }
        Ok(())
    }
}

/// The four covariance blocks between a pair of points: the value
/// covariance, the two first-derivative cross blocks, and the mixed second
/// derivative.
#[derive(Clone, Debug)]
pub struct KernelEval<const D: usize> {
    pub value: f64,
    /// Derivative with respect to the first argument.
    pub grad_x: SVector<f64, D>,
    /// Derivative with respect to the second argument; `-grad_x` for
    /// isotropic kernels.
    pub grad_xp: SVector<f64, D>,
    /// Mixed block `d/dx d/dx'^T k`; symmetric positive semi-definite at
    /// coincident points.
    pub hess: SMatrix<f64, D, D>,
}

/// Covariance value at separation `r` for the configured family.
pub fn matern_cov(r: f64, params: &KernelParams) -> Result<f64> {
    params.validate()?;
    if !r.is_finite() || r < 0.0 {
        return Err(Error::invalid(format!("separation must be finite and >= 0, got {r}")));
    }
    Ok(cov_value(r, params))
}

/// The `nu = 1` member regardless of `params.family`, normalized so the
/// zero-lag value is `sigma2`. Monotonically decreasing in `r`.
pub fn whittle_cov(r: f64, params: &KernelParams) -> Result<f64> {
    params.validate()?;
    if !r.is_finite() || r < 0.0 {
        return Err(Error::invalid(format!("separation must be finite and >= 0, got {r}")));
    }
    Ok(whittle_value(r, params.lambda, params.sigma2))
}

/// Unchecked covariance value used on hot paths (assembly, prediction).
pub(crate) fn cov_value(r: f64, params: &KernelParams) -> f64 {
    match params.family {
        KernelFamily::Whittle => whittle_value(r, params.lambda, params.sigma2),
        KernelFamily::Matern32 => matern32_value(r, params.lambda, params.sigma2),
    }
}

#[inline]
fn matern32_value(r: f64, lambda: f64, sigma2: f64) -> f64 {
    let z = lambda * r;
    sigma2 * (1.0 + z) * (-z).exp()
}

#[inline]
fn whittle_value(r: f64, lambda: f64, sigma2: f64) -> f64 {
    if r == 0.0 {
        return sigma2;
    }
    let z = lambda * r;
    sigma2 * z * bessel_k1(z)
}

/// All covariance blocks between `x` and `xp`.
///
/// Derivative blocks exist only for the Matérn 3/2 member; requesting them
/// from the Whittle kernel is an error (its sample paths are not
/// differentiable in the mean-square sense at zero lag).
pub fn kernel_eval<const D: usize>(
    x: &SVector<f64, D>,
    xp: &SVector<f64, D>,
    params: &KernelParams,
) -> Result<KernelEval<D>> {
    params.validate()?;
    if params.family != KernelFamily::Matern32 {
        return Err(Error::UnsupportedKernel(
            "derivative blocks require the Matérn 3/2 member; the Whittle kernel \
             supports value observations only"
                .into(),
        ));
    }
    if !(x.iter().all(|v| v.is_finite()) && xp.iter().all(|v| v.is_finite())) {
        return Err(Error::invalid("kernel arguments must be finite".to_string()));
    }
    Ok(matern32_eval(x, xp, params))
}

/// Unchecked Matérn 3/2 block evaluation.
pub(crate) fn matern32_eval<const D: usize>(
    x: &SVector<f64, D>,
    xp: &SVector<f64, D>,
    params: &KernelParams,
) -> KernelEval<D> {
    let lambda = params.lambda;
    let sigma2 = params.sigma2;
    let u = x - xp;
    let r = u.norm();
    let z = lambda * r;
    let e = (-z).exp();
    let s_ll_e = sigma2 * lambda * lambda * e;

    let value = sigma2 * (1.0 + z) * e;
    let grad_x = -s_ll_e * u;
    let grad_xp = -grad_x;
    let hess = if r > 0.0 {
        let scale = s_ll_e * lambda / r;
        SMatrix::<f64, D, D>::identity() * s_ll_e - u * u.transpose() * scale
    } else {
        SMatrix::<f64, D, D>::identity() * s_ll_e
    };

    KernelEval {
        value,
        grad_x,
        grad_xp,
        hess,
    }
}

/// First derivative of the Whittle kernel with respect to `x`:
/// `grad_x k = -sigma2 lambda^2 K_0(lambda r) (x - x')`.
///
/// This exists for every `x != x'` and tends to the zero vector as the
/// points coincide (`r K_0(lambda r) -> 0`), which is the value returned at
/// `r = 0`. It provides the query-side gradient of value-only predictive
/// means; there is no matching second-derivative block (the limit diverges),
/// which is why [`kernel_eval`] rejects this family.
pub(crate) fn whittle_grad_x<const D: usize>(
    x: &SVector<f64, D>,
    xp: &SVector<f64, D>,
    params: &KernelParams,
) -> SVector<f64, D> {
    let u = x - xp;
    let r = u.norm();
    if r == 0.0 {
        return SVector::zeros();
    }
    let z = params.lambda * r;
    -params.sigma2 * params.lambda * params.lambda * bessel_k0(z) * u
}

/// Gram matrix between two point sets.
///
/// Without gradients this is the plain `N x M` value matrix. With gradients
/// every point contributes a `(1 + D)` block ordered `[value; d/dx_1 ..
/// d/dx_D]`, giving an `N(1+D) x M(1+D)` matrix whose blocks are the four
/// fields of [`KernelEval`]. Symmetric (up to roundoff-free construction)
/// when the two sets are identical.
pub fn joint_cov_matrix<const D: usize>(
    x: &[SVector<f64, D>],
    xp: &[SVector<f64, D>],
    params: &KernelParams,
    with_gradients: bool,
) -> Result<DMatrix<f64>> {
    params.validate()?;
    if !with_gradients {
        let mut m = DMatrix::zeros(x.len(), xp.len());
        for (i, xi) in x.iter().enumerate() {
            for (j, xj) in xp.iter().enumerate() {
                m[(i, j)] = cov_value((xi - xj).norm(), params);
            }
        }
        return Ok(m);
    }
    if params.family != KernelFamily::Matern32 {
        return Err(Error::UnsupportedKernel(
            "gradient blocks in the joint covariance require the Matérn 3/2 member".into(),
        ));
    }

    let b = 1 + D;
    let mut m = DMatrix::zeros(x.len() * b, xp.len() * b);
    for (i, xi) in x.iter().enumerate() {
        for (j, xj) in xp.iter().enumerate() {
            let eval = matern32_eval(xi, xj, params);
            let (ri, cj) = (i * b, j * b);
            m[(ri, cj)] = eval.value;
            for a in 0..D {
                m[(ri + 1 + a, cj)] = eval.grad_x[a];
                m[(ri, cj + 1 + a)] = eval.grad_xp[a];
                for bb in 0..D {
                    m[(ri + 1 + a, cj + 1 + bb)] = eval.hess[(a, bb)];
                }
            }
        }
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::Vector2;

    fn params(lambda: f64, family: KernelFamily) -> KernelParams {
        KernelParams {
            lambda,
            family,
            sigma2: 1.0,
            ..KernelParams::default()
        }
    }

    #[test]
    fn zero_lag_is_sigma2() {
        for family in [KernelFamily::Whittle, KernelFamily::Matern32] {
            let mut p = params(40.0, family);
            p.sigma2 = 2.5;
            assert_eq!(matern_cov(0.0, &p).unwrap(), 2.5);
        }
    }

    #[test]
    fn matern32_closed_form_values() {
        let p = params(1.0, KernelFamily::Matern32);
        // (1+1)·e^{-1}
        assert_relative_eq!(
            matern_cov(1.0, &p).unwrap(),
            0.7357588823428846,
            max_relative = 1e-15
        );
        let p40 = params(40.0, KernelFamily::Matern32);
        // (1+4)·e^{-4} at lambda·r = 4
        assert_relative_eq!(
            matern_cov(0.1, &p40).unwrap(),
            0.0915781944436709,
            max_relative = 1e-14
        );
    }

    #[test]
    fn whittle_reference_values() {
        let p = params(1.0, KernelFamily::Whittle);
        // K_1(1), i.e. the normalized form at lambda·r = 1.
        assert_relative_eq!(
            whittle_cov(1.0, &p).unwrap(),
            0.6019072301972346,
            max_relative = 1e-13
        );
        // 4·K_1(4) at lambda·r = 4, through the family dispatch too.
        let p40 = params(40.0, KernelFamily::Whittle);
        assert_relative_eq!(
            matern_cov(0.1, &p40).unwrap(),
            0.04993399554907373,
            max_relative = 1e-13
        );
        // Non-unit signal variance: sigma2 = 2 at lambda·r = 2.
        let mut p2 = params(40.0, KernelFamily::Whittle);
        p2.sigma2 = 2.0;
        assert_relative_eq!(
            whittle_cov(0.05, &p2).unwrap(),
            0.5594635272660897,
            max_relative = 1e-13
        );
    }

    #[test]
    fn whittle_decreases_and_vanishes() {
        let p = params(40.0, KernelFamily::Whittle);
        let mut prev = whittle_cov(0.0, &p).unwrap();
        for i in 1..200 {
            let r = i as f64 * 0.01;
            let k = whittle_cov(r, &p).unwrap();
            assert!(k < prev, "not decreasing at r={r}");
            assert!(k >= 0.0);
            prev = k;
        }
        assert!(whittle_cov(100.0, &p).unwrap() == 0.0);
    }

    #[test]
    fn invalid_inputs_are_rejected() {
        let p = params(40.0, KernelFamily::Matern32);
        assert!(matern_cov(f64::NAN, &p).is_err());
        assert!(matern_cov(-0.5, &p).is_err());
        assert!(matern_cov(f64::INFINITY, &p).is_err());
        let mut bad = p;
        bad.lambda = 0.0;
        assert!(matern_cov(1.0, &bad).is_err());
    }

    #[test]
    fn derivative_blocks_rejected_for_whittle() {
        let p = params(40.0, KernelFamily::Whittle);
        let x = Vector2::new(0.0, 0.0);
        let err = kernel_eval(&x, &x, &p).unwrap_err();
        assert!(matches!(err, Error::UnsupportedKernel(_)));
        assert!(joint_cov_matrix(&[x], &[x], &p, true).is_err());
        // Value-only assembly works for both families.
        assert!(joint_cov_matrix(&[x], &[x], &p, false).is_ok());
    }

    #[test]
    fn coincident_point_blocks() {
        let p = params(40.0, KernelFamily::Matern32);
        let x = Vector2::new(0.3, -0.2);
        let eval = kernel_eval(&x, &x, &p).unwrap();
        assert_eq!(eval.value, 1.0);
        assert_eq!(eval.grad_x, Vector2::zeros());
        assert_eq!(eval.grad_xp, Vector2::zeros());
        // Continuous limit of the mixed second derivative: sigma2 lambda^2 I.
        assert_relative_eq!(eval.hess[(0, 0)], 1600.0, max_relative = 1e-15);
        assert_relative_eq!(eval.hess[(1, 1)], 1600.0, max_relative = 1e-15);
        assert_eq!(eval.hess[(0, 1)], 0.0);
    }

    #[test]
    fn gradient_matches_finite_differences_closely() {
        // Central differences of the value with step 1e-5/lambda; the
        // example tolerance here is tighter than the bulk property test.
        let p = params(40.0, KernelFamily::Matern32);
        let x = Vector2::new(0.11, -0.04);
        let xp = Vector2::new(0.02, 0.07);
        let eval = kernel_eval(&x, &xp, &p).unwrap();
        let h = 1e-5 / p.lambda;
        for a in 0..2 {
            let mut hi = x;
            let mut lo = x;
            hi[a] += h;
            lo[a] -= h;
            let fd = (matern_cov((hi - xp).norm(), &p).unwrap()
                - matern_cov((lo - xp).norm(), &p).unwrap())
                / (2.0 * h);
            assert_relative_eq!(eval.grad_x[a], fd, max_relative = 1e-5);
        }
    }

    #[test]
    fn joint_matrix_structure() {
        let p = params(10.0, KernelFamily::Matern32);
        let x = Vector2::new(0.5, 0.5);
        let single = joint_cov_matrix(&[x], &[x], &p, true).unwrap();
        assert_eq!(single.nrows(), 3);
        assert_eq!(single[(0, 0)], 1.0);
        assert_eq!(single[(1, 0)], 0.0);
        assert_eq!(single[(0, 2)], 0.0);

        let pts = [
            Vector2::new(0.0, 0.0),
            Vector2::new(0.4, -0.1),
            Vector2::new(-0.2, 0.3),
        ];
        let m = joint_cov_matrix(&pts, &pts, &p, true).unwrap();
        let mt = m.transpose();
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                assert!(
                    (m[(i, j)] - mt[(i, j)]).abs() <= 1e-12,
                    "asymmetric at ({i},{j})"
                );
            }
        }
        // Positive definite once observation noise pads the diagonal.
        let mut padded = m.clone();
        for i in 0..padded.nrows() {
            padded[(i, i)] += 1e-4;
        }
        let eig = padded.symmetric_eigen();
        assert!(eig.eigenvalues.iter().all(|&e| e > 0.0));
    }
}
