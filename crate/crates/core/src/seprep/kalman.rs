use nalgebra::{DMatrix, DVector};

use super::{Predictive, SepError, Separator, Sequence};
use crate::info::{kl_gaussian, GaussianDistribution};
use crate::lgss::{filter, predictive_density, simulate, LgssModel, Trajectory};
use crate::rng::{stream, SimRng};

/// The Kalman recursion written as a separator with `phi = (x_hat, P)`.
///
/// Uses the covariance-form update `P = (I - K C) P_prior` and an explicit
/// inverse of the innovation covariance, so it shares no code with
/// [`crate::lgss`] beyond the model tables.
#[derive(Debug, Clone, PartialEq)]
pub struct KalmanSeparator {
    pub model: LgssModel,
}

impl KalmanSeparator {
    pub fn new(model: LgssModel) -> Self {
        Self { model }
    }

    fn propagate(&self, mean: &DVector<f64>, cov: &DMatrix<f64>, u: &[f64]) -> (DVector<f64>, DMatrix<f64>) {
        let m = &self.model;
        let u = DVector::from_column_slice(u);
        (&m.a * mean + &m.b * u, &m.a * cov * m.a.transpose() + &m.q)
    }
}

impl Separator for KalmanSeparator {
    type State = (DVector<f64>, DMatrix<f64>);

    fn initial(&self) -> Self::State {
        (self.model.mu0.clone(), self.model.p0.clone())
    }

    fn update(&self, state: &Self::State, y: &[f64], u: &[f64], t: usize) -> Result<Self::State, SepError> {
        let m = &self.model;
        let (mean, cov) = self.propagate(&state.0, &state.1, u);
        let s = &m.c * &cov * m.c.transpose() + &m.r;
        let s_inv = s.try_inverse().ok_or(SepError::NonFinite { t })?;
        let gain = &cov * m.c.transpose() * s_inv;
        let innovation = DVector::from_column_slice(y) - &m.c * &mean;
        let n = m.state_dim();
        let post = (DMatrix::identity(n, n) - &gain * &m.c) * &cov;
        let post = (&post + post.transpose()) * 0.5;
        let mean = mean + gain * innovation;
        if mean.iter().chain(post.iter()).any(|v| !v.is_finite()) {
            return Err(SepError::NonFinite { t });
        }
        Ok((mean, post))
    }

    fn predictive(&self, state: &Self::State, controls: &[Vec<f64>], _samples: usize, _rng: &mut SimRng) -> Result<Predictive, SepError> {
        if controls.is_empty() {
            return Err(SepError::Invalid("predictive needs at least one control".into()));
        }
        let (mut mean, mut cov) = state.clone();
        for u in controls {
            (mean, cov) = self.propagate(&mean, &cov, u);
        }
        let m = &self.model;
        let ycov = &m.c * &cov * m.c.transpose() + &m.r;
        Ok(Predictive::Gaussian(GaussianDistribution::new(&m.c * mean, ycov)?))
    }

    fn info_kl(&self, state: &Self::State) -> f64 {
        let n = state.0.len();
        GaussianDistribution::new(state.0.clone(), state.1.clone())
            .and_then(|g| kl_gaussian(&g, &GaussianDistribution::standard(n)))
            .unwrap_or(f64::INFINITY)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalRow {
    pub traj_id: usize,
    pub t: usize,
    pub nll_learned: f64,
    pub nll_kalman: f64,
    pub kl: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KalmanEval {
    pub nll_learned: f64,
    pub nll_kalman: f64,
    /// Mean `KL(kalman predictive || moment-matched predictive)`.
    pub mean_kl: f64,
    pub gap: f64,
    pub rows: Vec<EvalRow>,
}

impl KalmanEval {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("traj_id,t,nll_learned,nll_kalman,kl\n");
        for r in &self.rows {
            s.push_str(&format!("{},{},{:?},{:?},{:?}\n", r.traj_id, r.t, r.nll_learned, r.nll_kalman, r.kl));
        }
        s
    }
}

fn held_out(lgss: &LgssModel, horizon: usize, i: usize, seed: u64) -> Result<Trajectory, SepError> {
    let controls = vec![lgss.zero_control(); horizon];
    Ok(simulate(lgss, &controls, &mut stream(seed, &format!("traj{i}")))?)
}

/// Per-step one-step-ahead NLL of the exact Kalman predictive.
pub fn kalman_reference_nll(lgss: &LgssModel, traj: &Trajectory) -> Result<Vec<f64>, SepError> {
    let states = filter(lgss, traj)?;
    (0..traj.horizon())
        .map(|t| Ok(-predictive_density(&states[t], lgss, &traj.controls[t])?.log_density(&traj.observations[t])?))
        .collect()
}

/// One-step-ahead comparison against the Kalman predictive on `num_traj`
/// held-out trajectories of length `horizon`.
///
/// Trajectory `i` and the separator's Monte-Carlo draws use the rng streams
/// `traj{i}` and `mc{i}` of `seed`, so results do not depend on evaluation order.
pub fn evaluate_vs_kalman<S: Separator>(
    model: &S,
    lgss: &LgssModel,
    horizon: usize,
    num_traj: usize,
    seed: u64,
    samples: usize,
) -> Result<KalmanEval, SepError> {
    if horizon == 0 || num_traj == 0 {
        return Err(SepError::Invalid("evaluation needs at least one step and one trajectory".into()));
    }
    let mut rows = Vec::with_capacity(horizon * num_traj);
    for i in 0..num_traj {
        let traj = held_out(lgss, horizon, i, seed)?;
        let kal = filter(lgss, &traj)?;
        let seq = Sequence::from(&traj);
        let states = model.run(&seq)?;
        let mut rng = stream(seed, &format!("mc{i}"));
        for t in 0..horizon {
            let exact = predictive_density(&kal[t], lgss, &traj.controls[t])?;
            let pred = model.predictive(&states[t], &seq.controls[t..=t], samples, &mut rng)?;
            let matched = pred.moment_matched()?.ok_or_else(|| SepError::Invalid("categorical predictive on an LGSS".into()))?;
            rows.push(EvalRow {
                traj_id: i,
                t,
                nll_learned: pred.nll(&seq.observations[t])?,
                nll_kalman: -exact.log_density(&traj.observations[t])?,
                kl: kl_gaussian(&exact, &matched)?,
            });
        }
    }
    let n = rows.len() as f64;
    let nll_learned = rows.iter().map(|r| r.nll_learned).sum::<f64>() / n;
    let nll_kalman = rows.iter().map(|r| r.nll_kalman).sum::<f64>() / n;
    let mean_kl = rows.iter().map(|r| r.kl).sum::<f64>() / n;
    Ok(KalmanEval { nll_learned, nll_kalman, mean_kl, gap: nll_learned - nll_kalman, rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use crate::seprep::{SepFilterModel, SepFilterSpec};

    fn scalar() -> LgssModel {
        LgssModel::scalar(0.9, 1.0, 0.1, 0.1, 0.0, 0.1 / 0.19).unwrap()
    }

    #[test]
    fn hand_built_kalman_has_zero_gap() {
        let sys = scalar();
        let e = evaluate_vs_kalman(&KalmanSeparator::new(sys.clone()), &sys, 100, 10, 3, 1).unwrap();
        assert!(e.gap.abs() < 1e-9, "gap {}", e.gap);
        assert!(e.rows.iter().all(|r| (r.nll_learned - r.nll_kalman).abs() < 1e-9 && r.kl.abs() < 1e-9));
        assert!((e.nll_kalman - 0.7227).abs() < 0.05);
    }

    #[test]
    fn hand_built_kalman_matches_on_random_multivariate_models() {
        let mut rng = seeded(8);
        for _ in 0..5 {
            let sys = LgssModel::random_stable(3, 2, 1, 0.9, &mut rng).unwrap();
            let e = evaluate_vs_kalman(&KalmanSeparator::new(sys.clone()), &sys, 40, 3, 1, 1).unwrap();
            assert!(e.gap.abs() < 1e-9 && e.mean_kl < 1e-9);
        }
    }

    #[test]
    fn multi_step_predictive_propagates_dynamics() {
        let sys = scalar();
        let k = KalmanSeparator::new(sys.clone());
        let st = (DVector::from_element(1, 1.0), DMatrix::from_element(1, 1, 0.2));
        let p = k.predictive(&st, &[vec![], vec![]], 1, &mut seeded(0)).unwrap();
        let g = match p {
            Predictive::Gaussian(g) => g,
            _ => unreachable!(),
        };
        let var = 0.81 * (0.81 * 0.2 + 0.1) + 0.1 + 0.1;
        assert!((g.mean()[0] - 0.81).abs() < 1e-15 && (g.cov()[(0, 0)] - var).abs() < 1e-15);
    }

    #[test]
    fn random_model_is_worse_than_kalman() {
        let sys = scalar();
        let m = SepFilterModel::new(SepFilterSpec::gaussian(1, 0, 1), &mut seeded(1)).unwrap();
        let e = evaluate_vs_kalman(&m, &sys, 50, 4, 2, 64).unwrap();
        assert!(e.gap > 0.0 && e.mean_kl > 0.0);
        let csv = e.to_csv();
        assert!(csv.starts_with("traj_id,t,nll_learned,nll_kalman,kl\n"));
        assert_eq!(csv.lines().count(), 201);
    }

    #[test]
    fn reference_nll_has_one_entry_per_step() {
        let sys = scalar();
        let traj = held_out(&sys, 20, 0, 0).unwrap();
        assert_eq!(kalman_reference_nll(&sys, &traj).unwrap().len(), 20);
    }
}
