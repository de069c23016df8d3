//! Exact Gaussian-process regression with joint value and gradient
//! observations.
//!
//! A model is fit once per training block: the joint covariance
//! `K + Sigma^2 I` is Cholesky-factorized (with escalating diagonal jitter
//! on degenerate data) and the solve vector `alpha = (K + Sigma^2 I)^{-1} y`
//! is precomputed. Each prediction then costs one cross-covariance assembly,
//! a dot product against `alpha` for the mean, and one triangular solve for
//! the variance.
//!
//! Rows are grouped per training point in the order
//! `[value; d/dx_1 .. d/dx_D]`; the same layout is used for the stacked
//! target vector `[y_i; grad y_i]`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SMatrix, SVector};

use crate::covariance::{
    cov_value, joint_cov_matrix, matern32_eval, whittle_grad_x, KernelFamily, KernelParams,
};
use crate::error::{Error, Result};

/// Jitter ladder applied to the diagonal (scaled by `sigma2`) when the raw
/// factorization fails; fixed powers of ten so degenerate fits reproduce.
const JITTER_LADDER: &[f64] = &[0.0, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6];

/// Observations for one model: positions with value targets, optional
/// gradient targets, and a per-point value-noise std.
#[derive(Clone, Debug)]
pub struct TrainingBlock<const D: usize> {
    pub positions: Vec<SVector<f64, D>>,
    pub values: Vec<f64>,
    /// Gradient targets, one row per point when present. Requires the
    /// Matérn 3/2 kernel.
    pub grad_targets: Option<Vec<SVector<f64, D>>>,
    /// Per-point std of the value observation.
    pub value_noise: Vec<f64>,
}

impl<const D: usize> TrainingBlock<D> {
    pub fn new(
        positions: Vec<SVector<f64, D>>,
        values: Vec<f64>,
        grad_targets: Option<Vec<SVector<f64, D>>>,
        value_noise: Vec<f64>,
    ) -> Result<Self> {
        let block = TrainingBlock {
            positions,
            values,
            grad_targets,
            value_noise,
        };
        block.validate()?;
        Ok(block)
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    fn validate(&self) -> Result<()> {
        let n = self.positions.len();
        if n == 0 {
            return Err(Error::invalid("training block needs at least one point"));
        }
        if self.values.len() != n || self.value_noise.len() != n {
            return Err(Error::invalid(format!(
                "training block length mismatch: {} positions, {} values, {} noise entries",
                n,
                self.values.len(),
                self.value_noise.len()
            )));
        }
        if let Some(g) = &self.grad_targets {
            if g.len() != n {
                return Err(Error::invalid(format!(
                    "training block has {} gradient rows for {n} points",
                    g.len()
                )));
            }
            if g.iter().any(|r| !r.iter().all(|v| v.is_finite())) {
                return Err(Error::invalid("gradient targets must be finite"));
            }
        }
        if self.positions.iter().any(|p| !p.iter().all(|v| v.is_finite()))
            || self.values.iter().any(|v| !v.is_finite())
        {
            return Err(Error::invalid("positions and values must be finite"));
        }
        if self.value_noise.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(Error::invalid("value noise must be finite and >= 0"));
        }
        Ok(())
    }
}

/// Posterior of the latent field at one query point.
#[derive(Clone, Debug)]
pub struct LatentPrediction<const D: usize> {
    pub mean: f64,
    /// Gradient of the posterior mean with respect to the query point.
    pub grad: SVector<f64, D>,
    /// Value variance, clamped at zero from below.
    pub var: f64,
    /// Posterior covariance of the gradient; `None` for the Whittle kernel,
    /// whose prior gradient variance diverges.
    pub grad_var: Option<SMatrix<f64, D, D>>,
    /// True when the raw variance came out (slightly) negative and was
    /// clamped.
    pub var_clamped: bool,
}

/// One fitted local GP: the training block, the lower-triangular factor of
/// `K + Sigma^2 I`, and the precomputed solve vector.
#[derive(Clone, Debug)]
pub struct GpModel<const D: usize> {
    pub training: TrainingBlock<D>,
    pub params: KernelParams,
    factor: Cholesky<f64, Dyn>,
    alpha: DVector<f64>,
    /// Diagonal jitter (absolute, already scaled by `sigma2`) that the
    /// factorization needed; 0 for well-conditioned data.
    jitter: f64,
}

/// Fit a model. Gradient targets require the Matérn 3/2 kernel. On
/// factorization failure the diagonal jitter escalates through fixed powers
/// of ten up to `1e-6 * sigma2` before giving up.
pub fn fit<const D: usize>(training: TrainingBlock<D>, params: KernelParams) -> Result<GpModel<D>> {
    params.validate()?;
    training.validate()?;
    let with_gradients = training.grad_targets.is_some();
    if with_gradients && params.family != KernelFamily::Matern32 {
        return Err(Error::UnsupportedKernel(
            "gradient observations require the Matérn 3/2 kernel".into(),
        ));
    }

    let n = training.len();
    let block = if with_gradients { 1 + D } else { 1 };
    let rows = n * block;

    let mut k = joint_cov_matrix(&training.positions, &training.positions, &params, with_gradients)?;
    for i in 0..n {
        let r = i * block;
        k[(r, r)] += training.value_noise[i] * training.value_noise[i];
        for a in 1..block {
            k[(r + a, r + a)] += params.noise_grad * params.noise_grad;
        }
    }

    let mut y = DVector::zeros(rows);
    for i in 0..n {
        y[i * block] = training.values[i];
        if let Some(g) = &training.grad_targets {
            for a in 0..D {
                y[i * block + 1 + a] = g[i][a];
            }
        }
    }

    let mut applied = None;
    let mut factor = None;
    for &level in JITTER_LADDER {
        let jitter = level * params.sigma2;
        let mut trial = k.clone();
        for r in 0..rows {
            trial[(r, r)] += jitter;
        }
        if let Some(chol) = Cholesky::new(trial) {
            if level > 0.0 {
                log::debug!("covariance factorization needed jitter {jitter:.1e} ({rows} rows)");
            }
            applied = Some(jitter);
            factor = Some(chol);
            break;
        }
    }
    let (factor, jitter) = match (factor, applied) {
        (Some(f), Some(j)) => (f, j),
        _ => {
            let mut lo = f64::INFINITY;
            let mut hi = 0.0f64;
            for r in 0..rows {
                lo = lo.min(k[(r, r)]);
                hi = hi.max(k[(r, r)]);
            }
            return Err(Error::IllConditioned {
                size: rows,
                condition: if lo > 0.0 { hi / lo } else { f64::INFINITY },
            });
        }
    };

    let alpha = factor.solve(&y);
    Ok(GpModel {
        training,
        params,
        factor,
        alpha,
        jitter,
    })
}

impl<const D: usize> GpModel<D> {
    /// Number of training points.
    pub fn n_points(&self) -> usize {
        self.training.len()
    }

    /// Number of rows in the factored system.
    pub fn n_rows(&self) -> usize {
        self.alpha.len()
    }

    pub fn has_gradients(&self) -> bool {
        self.training.grad_targets.is_some()
    }

    /// Diagonal jitter the fit needed (absolute).
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    /// Posterior mean, mean gradient, value variance and gradient covariance
    /// at a query point.
    pub fn predict(&self, x: &SVector<f64, D>) -> LatentPrediction<D> {
        match self.params.family {
            KernelFamily::Matern32 => self.predict_matern32(x),
            KernelFamily::Whittle => self.predict_whittle(x),
        }
    }

    /// Elementwise [`GpModel::predict`] over a query batch.
    pub fn predict_batch(&self, xs: &[SVector<f64, D>]) -> Vec<LatentPrediction<D>> {
        xs.iter().map(|x| self.predict(x)).collect()
    }

    fn predict_matern32(&self, x: &SVector<f64, D>) -> LatentPrediction<D> {
        let n = self.training.len();
        let with_gradients = self.has_gradients();
        let block = if with_gradients { 1 + D } else { 1 };
        let rows = n * block;

        // Cross covariance between every training row and the query's value
        // and gradient components.
        let mut ks = DMatrix::zeros(rows, 1 + D);
        for (i, xi) in self.training.positions.iter().enumerate() {
            let eval = matern32_eval(xi, x, &self.params);
            let r = i * block;
            ks[(r, 0)] = eval.value;
            for a in 0..D {
                ks[(r, 1 + a)] = eval.grad_xp[a];
            }
            if with_gradients {
                for a in 0..D {
                    ks[(r + 1 + a, 0)] = eval.grad_x[a];
                    for c in 0..D {
                        ks[(r + 1 + a, 1 + c)] = eval.hess[(a, c)];
                    }
                }
            }
        }

        let mean_vec = ks.tr_mul(&self.alpha);
        let mean = mean_vec[0];
        let grad = SVector::<f64, D>::from_fn(|a, _| mean_vec[1 + a]);

        let w = self
            .factor
            .l_dirty()
            .solve_lower_triangular(&ks)
            .expect("Cholesky factor has a positive diagonal");

        let raw_var = self.params.sigma2 - w.column(0).norm_squared();
        let (var, var_clamped) = clamp_variance(raw_var);

        // Prior gradient covariance at zero lag is sigma2 lambda^2 I.
        let prior_grad = self.params.sigma2 * self.params.lambda * self.params.lambda;
        let grad_var = SMatrix::<f64, D, D>::from_fn(|a, c| {
            let prior = if a == c { prior_grad } else { 0.0 };
            prior - w.column(1 + a).dot(&w.column(1 + c))
        });

        LatentPrediction {
            mean,
            grad,
            var,
            grad_var: Some(grad_var),
            var_clamped,
        }
    }

    fn predict_whittle(&self, x: &SVector<f64, D>) -> LatentPrediction<D> {
        let n = self.training.len();
        let mut ks = DMatrix::zeros(n, 1);
        let mut grad = SVector::<f64, D>::zeros();
        for (i, xi) in self.training.positions.iter().enumerate() {
            ks[(i, 0)] = cov_value((xi - x).norm(), &self.params);
            // d/dx* of k(x_i, x*): differentiate with the query first.
            grad += self.alpha[i] * whittle_grad_x(x, xi, &self.params);
        }
        let mean = ks.column(0).dot(&self.alpha);

        let w = self
            .factor
            .l_dirty()
            .solve_lower_triangular(&ks)
            .expect("Cholesky factor has a positive diagonal");
        let raw_var = self.params.sigma2 - w.column(0).norm_squared();
        let (var, var_clamped) = clamp_variance(raw_var);

        LatentPrediction {
            mean,
            grad,
            var,
            grad_var: None,
            var_clamped,
        }
    }
}

fn clamp_variance(raw: f64) -> (f64, bool) {
    if raw < 0.0 {
        (0.0, true)
    } else {
        (raw, false)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::Vector2;

    fn m32_params(lambda: f64, noise_y: f64) -> KernelParams {
        KernelParams {
            lambda,
            family: KernelFamily::Matern32,
            sigma2: 1.0,
            noise_y,
            noise_grad: 1e-2,
        }
    }

    fn value_block(
        positions: Vec<Vector2<f64>>,
        values: Vec<f64>,
        noise: f64,
    ) -> TrainingBlock<2> {
        let n = positions.len();
        TrainingBlock::new(positions, values, None, vec![noise; n]).unwrap()
    }

    #[test]
    fn scalar_solve_matches_closed_form() {
        let noise = 0.1;
        let block = value_block(vec![Vector2::new(0.0, 0.0)], vec![1.0], noise);
        let model = fit(block, m32_params(40.0, noise)).unwrap();
        // (sigma2 + noise^2) alpha = 1
        assert_relative_eq!(model.alpha[0], 1.0 / (1.0 + noise * noise), max_relative = 1e-14);
    }

    #[test]
    fn interpolates_in_the_low_noise_limit() {
        let noise = 1e-8;
        let pts = vec![Vector2::new(0.0, 0.0), Vector2::new(0.5, 0.0)];
        let block = value_block(pts.clone(), vec![1.0, 0.5], noise);
        let model = fit(block, m32_params(10.0, noise)).unwrap();
        for (p, want) in pts.iter().zip([1.0, 0.5]) {
            let est = model.predict(p);
            assert_relative_eq!(est.mean, want, max_relative = 1e-6);
            assert!(est.var < 1e-6);
        }
    }

    #[test]
    fn reverts_to_prior_far_from_data() {
        let block = value_block(vec![Vector2::new(0.0, 0.0)], vec![1.0], 0.01);
        let model = fit(block, m32_params(40.0, 0.01)).unwrap();
        // lambda * dist = 80, far past the correlation length.
        let est = model.predict(&Vector2::new(2.0, 0.0));
        assert!(est.mean.abs() < 1e-12);
        assert_relative_eq!(est.var, 1.0, max_relative = 1e-9);
    }

    #[test]
    fn gradient_observations_steer_the_mean() {
        // One point at the origin with value 1 and gradient target -lambda
        // along +x, mimicking a surface sample with inward normal.
        let lambda = 10.0;
        let block = TrainingBlock::new(
            vec![Vector2::new(0.0, 0.0)],
            vec![1.0],
            Some(vec![Vector2::new(-lambda, 0.0)]),
            vec![1e-6],
        )
        .unwrap();
        let model = fit(block, m32_params(lambda, 1e-6)).unwrap();
        let est = model.predict(&Vector2::new(0.0, 0.0));
        assert_relative_eq!(est.mean, 1.0, max_relative = 1e-6);
        assert_relative_eq!(est.grad[0], -lambda, max_relative = 1e-3);
        assert!(est.grad_var.is_some());
    }

    #[test]
    fn collinear_points_with_gradients_fit_within_jitter_budget() {
        let n = 5;
        let positions: Vec<_> = (0..n).map(|i| Vector2::new(i as f64 * 0.01, 0.0)).collect();
        let grads = vec![Vector2::new(0.0, -40.0); n];
        let block = TrainingBlock::new(positions, vec![1.0; n], Some(grads), vec![1e-3; n]).unwrap();
        let model = fit(block, m32_params(40.0, 1e-3)).unwrap();
        assert!(model.jitter() <= 1e-6);
    }

    #[test]
    fn factor_and_alpha_reconstruct_the_system() {
        let positions = vec![
            Vector2::new(0.0, 0.0),
            Vector2::new(0.3, 0.1),
            Vector2::new(-0.2, 0.25),
        ];
        let grads = vec![Vector2::new(-4.0, 0.0); 3];
        let block =
            TrainingBlock::new(positions.clone(), vec![1.0; 3], Some(grads.clone()), vec![0.05; 3])
                .unwrap();
        let params = m32_params(4.0, 0.05);
        let model = fit(block, params).unwrap();

        // Rebuild K + Sigma^2 I (+ jitter) independently of the factor.
        let mut k = joint_cov_matrix(&positions, &positions, &params, true).unwrap();
        for i in 0..3 {
            let r = i * 3;
            k[(r, r)] += 0.05 * 0.05 + model.jitter();
            for a in 1..3 {
                k[(r + a, r + a)] += params.noise_grad * params.noise_grad + model.jitter();
            }
        }
        let l = model.factor.l();
        let rebuilt = &l * l.transpose();
        let rel = (&rebuilt - &k).norm() / k.norm();
        assert!(rel < 1e-8, "factor reconstruction off by {rel:e}");

        let mut y = DVector::zeros(9);
        for i in 0..3 {
            y[i * 3] = 1.0;
            y[i * 3 + 1] = grads[i][0];
            y[i * 3 + 2] = grads[i][1];
        }
        let resid = (&k * &model.alpha - &y).norm() / y.norm();
        assert!(resid < 1e-8, "alpha residual {resid:e}");
    }

    #[test]
    fn batch_equals_looped_predictions() {
        let block = value_block(
            vec![Vector2::new(0.0, 0.0), Vector2::new(0.2, -0.1)],
            vec![1.0, 0.8],
            0.02,
        );
        let model = fit(block, m32_params(20.0, 0.02)).unwrap();
        let queries: Vec<_> = (0..20)
            .map(|i| Vector2::new(i as f64 * 0.03 - 0.3, 0.05))
            .collect();
        let batch = model.predict_batch(&queries);
        assert_eq!(batch.len(), queries.len());
        for (q, b) in queries.iter().zip(&batch) {
            let single = model.predict(q);
            assert_eq!(single.mean, b.mean);
            assert_eq!(single.var, b.var);
            assert_eq!(single.grad, b.grad);
        }
        assert!(model.predict_batch(&[]).is_empty());
    }

    #[test]
    fn whittle_rejects_gradient_targets_but_predicts_values() {
        let params = KernelParams {
            family: KernelFamily::Whittle,
            ..m32_params(40.0, 0.01)
        };
        let with_grads = TrainingBlock::new(
            vec![Vector2::new(0.0, 0.0)],
            vec![1.0],
            Some(vec![Vector2::new(-40.0, 0.0)]),
            vec![0.01],
        )
        .unwrap();
        assert!(matches!(
            fit(with_grads, params),
            Err(Error::UnsupportedKernel(_))
        ));

        let block = value_block(vec![Vector2::new(0.0, 0.0)], vec![1.0], 0.01);
        let model = fit(block, params).unwrap();
        let near = model.predict(&Vector2::new(0.0, 0.0));
        assert_relative_eq!(near.mean, 1.0, max_relative = 1e-3);
        assert!(near.grad_var.is_none());
        let far = model.predict(&Vector2::new(3.0, 0.0));
        assert!(far.mean.abs() < 1e-12);
        assert_relative_eq!(far.var, 1.0, max_relative = 1e-9);
        // The mean gradient exists away from the data and points along the
        // line toward the training point (the mean decays with distance).
        let mid = model.predict(&Vector2::new(0.05, 0.0));
        assert!(mid.grad[0] < 0.0);
        assert_relative_eq!(mid.grad[1], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn variance_stays_within_prior_bounds() {
        let block = value_block(
            vec![
                Vector2::new(0.0, 0.0),
                Vector2::new(0.1, 0.0),
                Vector2::new(0.0, 0.1),
            ],
            vec![1.0, 0.9, 0.9],
            0.01,
        );
        let model = fit(block, m32_params(40.0, 0.01)).unwrap();
        for i in 0..50 {
            let q = Vector2::new((i as f64 * 0.37).sin() * 2.0, (i as f64 * 0.61).cos() * 2.0);
            let est = model.predict(&q);
            assert!(est.var >= 0.0);
            assert!(est.var <= 1.0 + 1e-8, "var {} at {q:?}", est.var);
        }
    }
}
