use serde::{Deserialize, Serialize};

use super::IbError;
use crate::info::{DiscreteDistribution, DiscreteJoint};
use crate::rng::{seeded, simplex, SimRng};

/// How observations are generated from `(z, n)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "rule")]
pub enum ConstructionRule {
    /// `y = z |n| + n`, uniform priors.
    Bijective,
    /// `y = z |n| + n` with random (seeded) priors.
    BijectiveRandomPriors,
    /// Explicit table indexed by `z |n| + n`, uniform priors.
    Table { map: Vec<usize> },
}

/// Observations `y = f(z, n)` with independent task and nuisance.
///
/// The pair `(p(z), p(n), f)` is the whole generative description of the data.
#[derive(Debug, Clone, PartialEq)]
pub struct NuisanceTask {
    z_prior: DiscreteDistribution,
    n_prior: DiscreteDistribution,
    f: Vec<usize>,
    y_size: usize,
}

impl NuisanceTask {
    pub fn new(z_prior: DiscreteDistribution, n_prior: DiscreteDistribution, f: Vec<usize>) -> Result<Self, IbError> {
        let (nz, nn) = (z_prior.len(), n_prior.len());
        if nz < 2 || nn < 1 {
            return Err(IbError::Invalid(format!("alphabet sizes |z| = {nz}, |n| = {nn}")));
        }
        if f.len() != nz * nn {
            return Err(IbError::Invalid(format!("map has {} entries for {} pairs", f.len(), nz * nn)));
        }
        let y_size = f.iter().max().map(|m| m + 1).unwrap_or(0);
        let mut hit = vec![false; y_size];
        f.iter().for_each(|&y| hit[y] = true);
        if let Some(gap) = hit.iter().position(|h| !h) {
            return Err(IbError::Invalid(format!("observation {gap} has no preimage")));
        }
        if y_size < 2 {
            return Err(IbError::Invalid("constant observation map".into()));
        }
        Ok(Self { z_prior, n_prior, f, y_size })
    }

    pub fn z_size(&self) -> usize {
        self.z_prior.len()
    }

    pub fn n_size(&self) -> usize {
        self.n_prior.len()
    }

    pub fn y_size(&self) -> usize {
        self.y_size
    }

    pub fn z_prior(&self) -> &DiscreteDistribution {
        &self.z_prior
    }

    pub fn n_prior(&self) -> &DiscreteDistribution {
        &self.n_prior
    }

    pub fn observe(&self, z: usize, n: usize) -> usize {
        self.f[z * self.n_size() + n]
    }

    pub fn is_bijective(&self) -> bool {
        self.y_size == self.f.len()
    }

    /// `p(z) p(n)` for every pair, indexed `z |n| + n`.
    pub fn pair_probs(&self) -> Vec<f64> {
        let pn = self.n_prior.probs();
        self.z_prior.probs().iter().flat_map(|&a| pn.iter().map(move |&b| a * b)).collect()
    }

    pub fn y_probs(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.y_size];
        for (k, p) in self.pair_probs().into_iter().enumerate() {
            out[self.f[k]] += p;
        }
        out
    }

    /// Exact joint over axes `z`, `n`, `y`.
    pub fn joint(&self) -> DiscreteJoint {
        let mut probs = vec![0.0; self.f.len() * self.y_size];
        for (k, p) in self.pair_probs().into_iter().enumerate() {
            probs[k * self.y_size + self.f[k]] = p;
        }
        DiscreteJoint::new(vec!["z".into(), "n".into(), "y".into()], vec![self.z_size(), self.n_size(), self.y_size], probs)
            .expect("task joint is normalised")
    }

    /// Draws `(z, n, y)`.
    pub fn sample(&self, rng: &mut SimRng) -> (usize, usize, usize) {
        let z = crate::rng::categorical(rng, self.z_prior.probs());
        let n = crate::rng::categorical(rng, self.n_prior.probs());
        (z, n, self.observe(z, n))
    }
}

pub fn make_nuisance_task(z_size: usize, n_size: usize, rule: &ConstructionRule, seed: u64) -> Result<NuisanceTask, IbError> {
    if z_size < 2 || n_size < 1 {
        return Err(IbError::Invalid(format!("alphabet sizes |z| = {z_size}, |n| = {n_size}")));
    }
    let pairs: Vec<usize> = (0..z_size * n_size).collect();
    match rule {
        ConstructionRule::Bijective => NuisanceTask::new(DiscreteDistribution::uniform(z_size), DiscreteDistribution::uniform(n_size), pairs),
        ConstructionRule::BijectiveRandomPriors => {
            let mut rng = seeded(seed);
            let pz = DiscreteDistribution::new(simplex(&mut rng, z_size))?;
            let pn = DiscreteDistribution::new(simplex(&mut rng, n_size))?;
            NuisanceTask::new(pz, pn, pairs)
        }
        ConstructionRule::Table { map } => {
            NuisanceTask::new(DiscreteDistribution::uniform(z_size), DiscreteDistribution::uniform(n_size), map.clone())
        }
    }
}
