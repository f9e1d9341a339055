use nalgebra::{DMatrix, DVector};

use super::{LgssError, LgssModel, Trajectory};
use crate::info::{symmetrize, GaussianDistribution};

/// Posterior `N(mean, cov)` of `x_t` given `y_1..y_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct KalmanState {
    pub t: usize,
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl KalmanState {
    pub fn initial(model: &LgssModel) -> Self {
        Self { t: 0, mean: model.mu0.clone(), cov: model.p0.clone() }
    }

    pub fn as_gaussian(&self) -> Result<GaussianDistribution, LgssError> {
        Ok(GaussianDistribution::new(self.mean.clone(), self.cov.clone())?)
    }
}

/// Time update: prior of `x_{t+1}` under control `u`.
pub fn kalman_predict(state: &KalmanState, model: &LgssModel, u: &DVector<f64>) -> KalmanState {
    let mean = &model.a * &state.mean + &model.b * u;
    let cov = symmetrize(&(&model.a * &state.cov * model.a.transpose() + &model.q));
    KalmanState { t: state.t + 1, mean, cov }
}

/// Measurement update with Joseph-form covariance.
pub fn kalman_update(prior: &KalmanState, y: &DVector<f64>, model: &LgssModel) -> Result<KalmanState, LgssError> {
    if y.len() != model.obs_dim() {
        return Err(LgssError::Dimension(format!("observation of length {} for m = {}", y.len(), model.obs_dim())));
    }
    let c = &model.c;
    let pct = &prior.cov * c.transpose();
    let s = symmetrize(&(c * &pct + &model.r));
    let chol = s.cholesky().ok_or(LgssError::SingularInnovation { t: prior.t })?;
    // K = P C^T S^{-1}  <=>  K^T = S^{-1} C P
    let gain = chol.solve(&pct.transpose()).transpose();
    let innovation = y - c * &prior.mean;
    let mean = &prior.mean + &gain * innovation;
    let n = model.state_dim();
    let ikc = DMatrix::identity(n, n) - &gain * c;
    let cov = symmetrize(&(&ikc * &prior.cov * ikc.transpose() + &gain * &model.r * gain.transpose()));
    Ok(KalmanState { t: prior.t, mean, cov })
}

/// One-step predictive density of `y_{t+1}`.
pub fn predictive_density(state: &KalmanState, model: &LgssModel, u: &DVector<f64>) -> Result<GaussianDistribution, LgssError> {
    let prior = kalman_predict(state, model, u);
    let mean = &model.c * &prior.mean;
    let cov = &model.c * &prior.cov * model.c.transpose() + &model.r;
    Ok(GaussianDistribution::new(mean, cov)?)
}

/// Posteriors for `t = 0..=T` along a trajectory.
pub fn filter(model: &LgssModel, traj: &Trajectory) -> Result<Vec<KalmanState>, LgssError> {
    let mut states = vec![KalmanState::initial(model)];
    for (u, y) in traj.controls.iter().zip(&traj.observations) {
        let prior = kalman_predict(states.last().expect("non-empty"), model, u);
        states.push(kalman_update(&prior, y, model)?);
    }
    Ok(states)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RiccatiResult {
    pub cov: DMatrix<f64>,
    /// Max-abs change over the last iteration (Cauchy criterion).
    pub last_change: f64,
    pub iterations: usize,
}

/// Iterates the posterior covariance recursion `P -> update(predict(P))`.
pub fn riccati_iterate(model: &LgssModel, p_init: &DMatrix<f64>, n_iters: usize) -> Result<RiccatiResult, LgssError> {
    let n = model.state_dim();
    let mut state = KalmanState { t: 0, mean: DVector::zeros(n), cov: p_init.clone() };
    let y0 = DVector::zeros(model.obs_dim());
    let u0 = model.zero_control();
    let mut last_change = f64::INFINITY;
    for _ in 0..n_iters {
        let prior = kalman_predict(&state, model, &u0);
        let mut next = kalman_update(&prior, &y0, model)?;
        next.mean = DVector::zeros(n);
        last_change = (&next.cov - &state.cov).abs().max();
        state = next;
    }
    Ok(RiccatiResult { cov: state.cov, last_change, iterations: n_iters })
}

/// Exact posterior of `x_t` by conditioning the joint Gaussian of
/// `(x_t, y_1..y_t)` directly, without any recursion.
pub fn batch_posterior_oracle(model: &LgssModel, traj: &Trajectory, t: usize) -> Result<GaussianDistribution, LgssError> {
    if t > traj.horizon() {
        return Err(LgssError::Dimension(format!("t = {t} beyond horizon {}", traj.horizon())));
    }
    let (n, m) = (model.state_dim(), model.obs_dim());
    // Marginal means and covariances of x_0..x_t.
    let mut means = vec![model.mu0.clone()];
    let mut covs = vec![model.p0.clone()];
    for k in 1..=t {
        means.push(&model.a * &means[k - 1] + &model.b * &traj.controls[k - 1]);
        covs.push(&model.a * &covs[k - 1] * model.a.transpose() + &model.q);
    }
    // A^d for d = 0..t
    let mut powers = vec![DMatrix::identity(n, n)];
    for d in 1..=t {
        powers.push(&model.a * &powers[d - 1]);
    }
    // Cov(x_i, x_j) for i >= j is A^{i-j} Sigma_j.
    let cross = |i: usize, j: usize| -> DMatrix<f64> {
        if i >= j {
            &powers[i - j] * &covs[j]
        } else {
            (&powers[j - i] * &covs[i]).transpose()
        }
    };
    if t == 0 {
        return Ok(GaussianDistribution::new(means[0].clone(), covs[0].clone())?);
    }
    let mut syy = DMatrix::zeros(m * t, m * t);
    let mut sxy = DMatrix::zeros(n, m * t);
    let mut resid = DVector::zeros(m * t);
    for i in 1..=t {
        let yi = &traj.observations[i - 1] - &model.c * &means[i];
        resid.rows_mut((i - 1) * m, m).copy_from(&yi);
        sxy.view_mut((0, (i - 1) * m), (n, m)).copy_from(&(cross(t, i) * model.c.transpose()));
        for j in 1..=t {
            let mut block = &model.c * cross(i, j) * model.c.transpose();
            if i == j {
                block += &model.r;
            }
            syy.view_mut(((i - 1) * m, (j - 1) * m), (m, m)).copy_from(&block);
        }
    }
    let chol = symmetrize(&syy).cholesky().ok_or(LgssError::SingularJoint)?;
    let mean = &means[t] + &sxy * chol.solve(&resid);
    let cov = &covs[t] - &sxy * chol.solve(&sxy.transpose());
    Ok(GaussianDistribution::new(mean, symmetrize(&cov))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lgss::{is_psd, simulate};
    use crate::rng::seeded;

    fn scalar_state(mean: f64, var: f64) -> KalmanState {
        KalmanState { t: 0, mean: DVector::from_element(1, mean), cov: DMatrix::from_element(1, 1, var) }
    }

    #[test]
    fn predict_examples() {
        let still = LgssModel::new(
            DMatrix::identity(2, 2),
            DMatrix::zeros(2, 1),
            DMatrix::identity(2, 2),
            DMatrix::zeros(2, 2),
            DMatrix::identity(2, 2),
            DVector::zeros(2),
            DMatrix::identity(2, 2),
        )
        .unwrap();
        let s = KalmanState { t: 0, mean: DVector::from_vec(vec![1.0, 2.0]), cov: DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]) };
        let p = kalman_predict(&s, &still, &DVector::from_element(1, 5.0));
        assert_eq!(p.mean, s.mean);
        assert_eq!(p.cov, s.cov);

        let model = LgssModel::scalar(2.0, 1.0, 1.0, 1.0, 0.0, 1.0).unwrap();
        let p = kalman_predict(&scalar_state(0.0, 1.0), &model, &model.zero_control());
        assert_eq!(p.cov[(0, 0)], 5.0);
    }

    #[test]
    fn uninformative_update_keeps_prior() {
        let mut model = LgssModel::scalar(1.0, 1.0, 0.0, 1.0, 0.0, 1.0).unwrap();
        model.c = DMatrix::zeros(1, 1);
        let prior = scalar_state(0.7, 2.0);
        let post = kalman_update(&prior, &DVector::from_element(1, 10.0), &model).unwrap();
        assert_eq!(post.mean, prior.mean);
        assert!((post.cov[(0, 0)] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn conjugate_variance_sequence() {
        let model = LgssModel::scalar(1.0, 1.0, 0.0, 1.0, 0.0, 1.0).unwrap();
        let mut state = KalmanState::initial(&model);
        for t in 1..=25 {
            let prior = kalman_predict(&state, &model, &model.zero_control());
            state = kalman_update(&prior, &DVector::from_element(1, 0.3 * t as f64), &model).unwrap();
            assert!((state.cov[(0, 0)] - 1.0 / (1.0 + t as f64)).abs() < 1e-14);
        }
    }

    #[test]
    fn update_shrinks_covariance_in_loewner_order() {
        let mut rng = seeded(8);
        for _ in 0..10 {
            let model = LgssModel::random_stable(3, 2, 0, 0.95, &mut rng).unwrap();
            let prior = kalman_predict(&KalmanState::initial(&model), &model, &model.zero_control());
            assert!(is_psd(&prior.cov, 1e-12));
            let post = kalman_update(&prior, &DVector::from_vec(vec![0.5, -0.2]), &model).unwrap();
            assert!(is_psd(&(&prior.cov - &post.cov), 1e-12));
        }
    }

    #[test]
    fn predictive_density_examples() {
        let model = LgssModel::new(
            DMatrix::zeros(2, 2),
            DMatrix::zeros(2, 0),
            DMatrix::zeros(2, 2),
            DMatrix::zeros(2, 2),
            DMatrix::identity(2, 2),
            DVector::zeros(2),
            DMatrix::identity(2, 2),
        )
        .unwrap();
        let g = predictive_density(&KalmanState::initial(&model), &model, &model.zero_control()).unwrap();
        assert_eq!(g.mean(), &DVector::zeros(2));
        assert_eq!(g.cov(), &DMatrix::identity(2, 2));
    }

    #[test]
    fn predictive_density_matches_monte_carlo() {
        let model = LgssModel::scalar(0.8, 1.5, 0.3, 0.2, 0.4, 0.5).unwrap();
        let g = predictive_density(&KalmanState::initial(&model), &model, &model.zero_control()).unwrap();
        let draws = 100_000;
        let mut rng = seeded(31);
        let ys: Vec<f64> = (0..draws)
            .map(|_| simulate(&model, &[model.zero_control()], &mut rng).unwrap().observations[0][0])
            .collect();
        let mean = ys.iter().sum::<f64>() / draws as f64;
        let var = ys.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / (draws - 1) as f64;
        let (mu, s2) = (g.mean()[0], g.cov()[(0, 0)]);
        assert!((mean - mu).abs() < 3.0 * (s2 / draws as f64).sqrt());
        // sd of the sample variance of a Gaussian: s2 sqrt(2 / (N - 1))
        assert!((var - s2).abs() < 3.0 * s2 * (2.0 / (draws - 1) as f64).sqrt());
        let y = DVector::from_element(1, 1.1);
        let closed = -0.5 * (2.0 * std::f64::consts::PI * s2).ln() - (1.1 - mu).powi(2) / (2.0 * s2);
        assert!((g.log_density(&y).unwrap() - closed).abs() < 1e-14);
    }

    #[test]
    fn riccati_scalar_golden_ratio_fixed_point() {
        let model = LgssModel::scalar(1.0, 1.0, 1.0, 1.0, 0.0, 1.0).unwrap();
        let res = riccati_iterate(&model, &DMatrix::from_element(1, 1, 5.0), 200).unwrap();
        // Positive root of P^2 + P - 1 = 0, found by bisection.
        let (mut lo, mut hi) = (0.0f64, 1.0f64);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid * mid + mid - 1.0 > 0.0 {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        assert!((res.cov[(0, 0)] - lo).abs() < 1e-12);
        let again = riccati_iterate(&model, &res.cov, 1).unwrap();
        assert!(again.last_change < 1e-10);
    }

    #[test]
    fn riccati_trace_shrinks_for_near_noiseless_observation() {
        let mut model = LgssModel::random_stable(2, 2, 0, 0.9, &mut seeded(5)).unwrap();
        model.q = DMatrix::zeros(2, 2);
        model.c = DMatrix::identity(2, 2);
        model.r = DMatrix::identity(2, 2) * 1e-6;
        let mut p = DMatrix::identity(2, 2) * 3.0;
        let mut prev = p.trace();
        for _ in 0..10 {
            p = riccati_iterate(&model, &p, 1).unwrap().cov;
            assert!(p.trace() <= prev);
            prev = p.trace();
        }
        assert!(prev < 1e-5);
    }

    #[test]
    fn batch_oracle_examples() {
        let model = LgssModel::random_stable(2, 2, 1, 0.9, &mut seeded(6)).unwrap();
        let traj = simulate(&model, &vec![DVector::from_element(1, 0.2); 5], &mut seeded(7)).unwrap();
        let g = batch_posterior_oracle(&model, &traj, 0).unwrap();
        assert_eq!(g.mean(), &model.mu0);
        assert_eq!(g.cov(), &model.p0);

        let mut sharp = model.clone();
        sharp.c = DMatrix::identity(2, 2);
        sharp.r = DMatrix::identity(2, 2) * 1e-12;
        let traj = simulate(&sharp, &vec![DVector::from_element(1, 0.2); 5], &mut seeded(7)).unwrap();
        let g = batch_posterior_oracle(&sharp, &traj, 5).unwrap();
        assert!((g.mean() - &traj.observations[4]).norm() < 1e-5);
    }

    #[test]
    fn recursive_filter_matches_batch_oracle() {
        let mut rng = seeded(10);
        for _ in 0..5 {
            let model = LgssModel::random_stable(3, 2, 1, 0.95, &mut rng).unwrap();
            let u: Vec<DVector<f64>> = (0..20).map(|k| DVector::from_element(1, (k as f64 * 0.3).sin())).collect();
            let traj = simulate(&model, &u, &mut rng).unwrap();
            let states = filter(&model, &traj).unwrap();
            for t in [0, 1, 7, 20] {
                let g = batch_posterior_oracle(&model, &traj, t).unwrap();
                assert!((g.mean() - &states[t].mean).abs().max() < 1e-8);
                assert!((g.cov() - &states[t].cov).abs().max() < 1e-8);
            }
        }
    }

    #[test]
    fn riccati_fixed_point_matches_long_filter() {
        let model = LgssModel::random_stable(3, 2, 0, 0.95, &mut seeded(12)).unwrap();
        let traj = simulate(&model, &vec![model.zero_control(); 1000], &mut seeded(13)).unwrap();
        let states = filter(&model, &traj).unwrap();
        let fixed = riccati_iterate(&model, &model.p0, 5000).unwrap();
        assert!(fixed.last_change < 1e-14);
        assert!((&fixed.cov - &states[1000].cov).abs().max() < 1e-8);
    }

    #[test]
    fn standardized_innovations_are_white() {
        let model = LgssModel::scalar(0.9, 1.0, 0.1, 0.1, 0.0, 1.0).unwrap();
        let traj = simulate(&model, &vec![model.zero_control(); 10_000], &mut seeded(14)).unwrap();
        let mut state = KalmanState::initial(&model);
        let mut e = Vec::new();
        for y in &traj.observations {
            let pred = predictive_density(&state, &model, &model.zero_control()).unwrap();
            e.push((y[0] - pred.mean()[0]) / pred.cov()[(0, 0)].sqrt());
            state = kalman_update(&kalman_predict(&state, &model, &model.zero_control()), y, &model).unwrap();
        }
        let n = e.len() as f64;
        let mean = e.iter().sum::<f64>() / n;
        let var: f64 = e.iter().map(|v| (v - mean).powi(2)).sum();
        let rho: f64 = e.windows(2).map(|w| (w[0] - mean) * (w[1] - mean)).sum::<f64>() / var;
        assert!(rho.abs() < 0.03, "lag-1 {rho}");
    }

    #[test]
    fn joseph_form_stays_psd_over_long_runs() {
        let mut model = LgssModel::random_stable(3, 1, 0, 0.95, &mut seeded(15)).unwrap();
        model.r = DMatrix::from_element(1, 1, 1e-9);
        let mut state = KalmanState::initial(&model);
        let y = DVector::from_element(1, 0.5);
        let mut worst = f64::INFINITY;
        for _ in 0..100_000 {
            state = kalman_update(&kalman_predict(&state, &model, &model.zero_control()), &y, &model).unwrap();
            worst = worst.min(crate::info::min_eigenvalue(&state.cov));
        }
        assert!(worst >= -1e-12, "{worst:e}");
    }
}
