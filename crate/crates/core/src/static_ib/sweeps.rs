use nalgebra::{DMatrix, DVector};

use super::{train_ib, train_weight_posterior, DiagGaussian, IblConfig, IbError, NuisanceTask, StochasticEncoder, WeightTrainConfig};
use crate::info::total_correlation_gaussian;
use crate::rng::{uniform, SimRng};

/// Random encoder of a bijective task that is sufficient by construction.
///
/// Coordinate 0 places each task value in its own band, 20 standard deviations
/// apart, with a random nuisance-dependent jitter of up to 2 sd; coordinate 1
/// is an arbitrary random function of `y` with random width. The encoder
/// keeps `I(x;z) = H(z)` to double precision while leaking a random amount of
/// nuisance.
pub fn random_sufficient_encoder(task: &NuisanceTask, rng: &mut SimRng) -> Result<StochasticEncoder, IbError> {
    if !task.is_bijective() {
        return Err(IbError::Invalid("sufficient-by-construction encoders need a bijective task".into()));
    }
    let sd0 = uniform(rng, 0.02, 0.06);
    let mut table = vec![DiagGaussian { mean: vec![], log_std: vec![] }; task.y_size()];
    for z in 0..task.z_size() {
        for n in 0..task.n_size() {
            let jitter = uniform(rng, -2.0, 2.0) * sd0;
            let band = 20.0 * sd0 * z as f64 + jitter;
            let sd1: f64 = uniform(rng, 0.1, 1.0);
            table[task.observe(z, n)] = DiagGaussian {
                mean: vec![band, uniform(rng, -1.0, 1.0)],
                log_std: vec![sd0.ln(), sd1.ln()],
            };
        }
    }
    StochasticEncoder::from_table(&table)
}

/// Random (generally insufficient) table encoder with `dim` coordinates.
pub fn random_table_encoder(y_size: usize, dim: usize, rng: &mut SimRng) -> Result<StochasticEncoder, IbError> {
    let table: Vec<DiagGaussian> = (0..y_size)
        .map(|_| DiagGaussian {
            mean: (0..dim).map(|_| uniform(rng, -1.5, 1.5)).collect(),
            log_std: (0..dim).map(|_| uniform(rng, -2.0, 0.0)).collect(),
        })
        .collect();
    StochasticEncoder::from_table(&table)
}

/// Covariance of the aggregate posterior `sum_y p(y) p(x|y)`.
pub fn aggregate_covariance(encoder: &StochasticEncoder, task: &NuisanceTask) -> Result<DMatrix<f64>, IbError> {
    let d = encoder.rep_dim();
    let py = task.y_probs();
    let mut mean = DVector::zeros(d);
    let mut second = DMatrix::zeros(d, d);
    for (g, &w) in encoder.posteriors()?.iter().zip(&py) {
        let mu = DVector::from_column_slice(&g.mean);
        mean += &mu * w;
        second += (&mu * mu.transpose() + DMatrix::from_diagonal(&DVector::from_iterator(d, g.log_std.iter().map(|s| (2.0 * s).exp())))) * w;
    }
    Ok(second - &mean * mean.transpose())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub beta: f64,
    pub values: Vec<f64>,
}

impl SweepPoint {
    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    pub fn std(&self) -> f64 {
        let m = self.mean();
        let n = self.values.len();
        if n < 2 {
            return 0.0;
        }
        (self.values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    }
}

/// Total correlation of the aggregate posterior of trained encoders, per beta.
pub fn tc_beta_sweep(task: &NuisanceTask, betas: &[f64], seeds: &[u64], base: &IblConfig) -> Result<Vec<SweepPoint>, IbError> {
    betas
        .iter()
        .map(|&beta| {
            let values = seeds
                .iter()
                .map(|&seed| {
                    let trained = train_ib(task, &IblConfig { beta, seed, ..base.clone() })?;
                    Ok(total_correlation_gaussian(&aggregate_covariance(&trained.encoder, task)?)?)
                })
                .collect::<Result<_, IbError>>()?;
            Ok(SweepPoint { beta, values })
        })
        .collect()
}

/// Final `KL(q(w|D) || p(w))` per beta.
pub fn weight_kl_sweep(task: &NuisanceTask, betas: &[f64], seeds: &[u64], base: &WeightTrainConfig) -> Result<Vec<SweepPoint>, IbError> {
    betas
        .iter()
        .map(|&beta| {
            let values = seeds
                .iter()
                .map(|&seed| Ok(train_weight_posterior(task, &WeightTrainConfig { beta, seed, ..base.clone() })?.0.kl()))
                .collect::<Result<_, IbError>>()?;
            Ok(SweepPoint { beta, values })
        })
        .collect()
}
