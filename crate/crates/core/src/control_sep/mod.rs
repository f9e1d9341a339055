//! Exhaustive checks that optimal control on a finite POMDP depends on the
//! history only through the belief.
//!
//! The agent acts first: with `s_1 ~ b0` it picks `a_1`, collects
//! `r(s_1, a_1)`, the state moves to `s_2 ~ T(.|s_1, a_1)` and `o_1 ~ Omega(.|s_2)`
//! is observed, and so on for `H` actions. A history is the list of
//! `(a, o)` pairs seen so far.

mod reward;
mod tree;

pub use reward::{belief_representation, mdp_value_iteration, reward_predictive, reward_sufficiency_check, RewardSufficiency};
pub use tree::{
    belief_groups, belief_policy, brute_force_q, policy_return, verify_separation, BeliefPolicy, HistoryNode, HistoryTree, SeparationReport, MAX_NODES,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{simplex, uniform, SimRng};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ControlError {
    #[error("invalid POMDP: {0}")]
    Invalid(String),
    #[error("observation {o} has zero probability after action {a}")]
    ZeroProbability { a: usize, o: usize },
    #[error("history tree would have {0} nodes, above the cap")]
    TooLarge(u128),
    #[error("no tabulated belief matches at depth {0}")]
    UnknownBelief(usize),
    #[error("POMDP file: {0}")]
    Parse(String),
}

/// Probability vector over states.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Belief(pub Vec<f64>);

impl Belief {
    pub fn new(p: Vec<f64>) -> Result<Self, ControlError> {
        if p.iter().any(|v| !(*v >= 0.0)) || (p.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
            return Err(ControlError::Invalid("belief is not a probability vector".into()));
        }
        Ok(Self(p))
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn linf(&self, other: &Belief) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }
}

/// Finite-horizon POMDP with tables `T[a][s][s']`, `Omega[s'][o]`, `r[s][a]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinitePOMDP {
    #[serde(rename = "S")]
    pub num_states: usize,
    #[serde(rename = "A")]
    pub num_actions: usize,
    #[serde(rename = "O")]
    pub num_obs: usize,
    #[serde(rename = "T")]
    pub transition: Vec<Vec<Vec<f64>>>,
    #[serde(rename = "Omega")]
    pub observation: Vec<Vec<f64>>,
    pub r: Vec<Vec<f64>>,
    pub b0: Vec<f64>,
    #[serde(rename = "H")]
    pub horizon: usize,
}

fn stochastic(row: &[f64], len: usize, what: &str) -> Result<(), ControlError> {
    if row.len() != len {
        return Err(ControlError::Invalid(format!("{what} has length {}, expected {len}", row.len())));
    }
    if row.iter().any(|v| !(*v >= 0.0)) || (row.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
        return Err(ControlError::Invalid(format!("{what} is not row-stochastic")));
    }
    Ok(())
}

impl FinitePOMDP {
    pub fn validate(&self) -> Result<(), ControlError> {
        let (s, a, o) = (self.num_states, self.num_actions, self.num_obs);
        if s == 0 || a == 0 || o == 0 {
            return Err(ControlError::Invalid("S, A and O must be positive".into()));
        }
        if self.horizon == 0 {
            return Err(ControlError::Invalid("H must be at least 1".into()));
        }
        if self.transition.len() != a {
            return Err(ControlError::Invalid(format!("T needs {a} action slices")));
        }
        for (ai, slice) in self.transition.iter().enumerate() {
            if slice.len() != s {
                return Err(ControlError::Invalid(format!("T[{ai}] needs {s} rows")));
            }
            for (si, row) in slice.iter().enumerate() {
                stochastic(row, s, &format!("T[{ai}][{si}]"))?;
            }
        }
        if self.observation.len() != s {
            return Err(ControlError::Invalid(format!("Omega needs {s} rows")));
        }
        for (si, row) in self.observation.iter().enumerate() {
            stochastic(row, o, &format!("Omega[{si}]"))?;
        }
        if self.r.len() != s || self.r.iter().any(|row| row.len() != a || row.iter().any(|v| !v.is_finite())) {
            return Err(ControlError::Invalid(format!("r must be a finite {s} x {a} table")));
        }
        stochastic(&self.b0, s, "b0")
    }

    pub fn from_json(text: &str) -> Result<Self, ControlError> {
        let p: Self = serde_json::from_str(text).map_err(|e| ControlError::Parse(e.to_string()))?;
        p.validate()?;
        Ok(p)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("POMDP serialises")
    }

    /// Random tables; with `shared_dynamics` every action has the same
    /// transition matrix, so histories that differ only in actions collide.
    pub fn random(s: usize, a: usize, o: usize, horizon: usize, shared_dynamics: bool, rng: &mut SimRng) -> Result<Self, ControlError> {
        let slice = |rng: &mut SimRng| (0..s).map(|_| simplex(rng, s)).collect::<Vec<_>>();
        let transition = if shared_dynamics {
            vec![slice(rng); a]
        } else {
            (0..a).map(|_| slice(rng)).collect()
        };
        let p = Self {
            num_states: s,
            num_actions: a,
            num_obs: o,
            transition,
            observation: (0..s).map(|_| simplex(rng, o)).collect(),
            r: (0..s).map(|_| (0..a).map(|_| uniform(rng, -1.0, 1.0)).collect()).collect(),
            b0: simplex(rng, s),
            horizon,
        };
        p.validate()?;
        Ok(p)
    }

    /// Belief-collision instance: two hidden states behind a symmetric noisy
    /// sensor, with action-independent dynamics. Histories that differ only in
    /// their actions share a belief while rewards still depend on the action.
    pub fn belief_collision(horizon: usize) -> Self {
        let p = Self {
            num_states: 2,
            num_actions: 2,
            num_obs: 2,
            transition: vec![vec![vec![0.7, 0.3], vec![0.3, 0.7]]; 2],
            observation: vec![vec![0.8, 0.2], vec![0.2, 0.8]],
            r: vec![vec![1.0, 0.0], vec![-0.5, 0.6]],
            b0: vec![0.5, 0.5],
            horizon,
        };
        p.validate().expect("collision instance is valid");
        p
    }

    /// `P(o | b, a)` for every `o`.
    pub fn observation_probs(&self, b: &Belief, a: usize) -> Vec<f64> {
        let pred = self.predict(b, a);
        (0..self.num_obs).map(|o| pred.iter().zip(&self.observation).map(|(p, row)| p * row[o]).sum()).collect()
    }

    fn predict(&self, b: &Belief, a: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.num_states];
        for (s, &bs) in b.0.iter().enumerate() {
            for (sp, t) in self.transition[a][s].iter().enumerate() {
                out[sp] += bs * t;
            }
        }
        out
    }

    /// `E[r(s, a)]` under `b`.
    pub fn expected_reward(&self, b: &Belief, a: usize) -> f64 {
        b.0.iter().zip(&self.r).map(|(p, row)| p * row[a]).sum()
    }
}

/// Bayes filter `b'(s') ∝ Omega(o|s') sum_s T(s'|s,a) b(s)`.
pub fn belief_update(pomdp: &FinitePOMDP, b: &Belief, a: usize, o: usize) -> Result<Belief, ControlError> {
    let pred = pomdp.predict(b, a);
    let joint: Vec<f64> = pred.iter().zip(&pomdp.observation).map(|(p, row)| p * row[o]).collect();
    let z: f64 = joint.iter().sum();
    if z <= 0.0 {
        return Err(ControlError::ZeroProbability { a, o });
    }
    Ok(Belief(joint.into_iter().map(|v| v / z).collect()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn identity_sensor_gives_delta() {
        let mut p = FinitePOMDP::random(3, 2, 3, 2, false, &mut seeded(0)).unwrap();
        p.observation = vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]];
        let b = Belief(vec![0.2, 0.3, 0.5]);
        for o in 0..3 {
            if p.observation_probs(&b, 1)[o] > 0.0 {
                let nb = belief_update(&p, &b, 1, o).unwrap();
                assert!(nb.0.iter().enumerate().all(|(s, v)| *v == if s == o { 1.0 } else { 0.0 }));
            }
        }
    }

    #[test]
    fn uninformative_sensor_only_propagates() {
        let mut p = FinitePOMDP::random(3, 2, 2, 2, false, &mut seeded(1)).unwrap();
        p.observation = vec![vec![0.5, 0.5]; 3];
        let b = Belief(vec![0.6, 0.1, 0.3]);
        let nb = belief_update(&p, &b, 0, 1).unwrap();
        for (x, y) in nb.0.iter().zip(p.predict(&b, 0)) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn sequential_update_equals_joint_conditioning() {
        let mut rng = seeded(2);
        for _ in 0..20 {
            let p = FinitePOMDP::random(3, 2, 2, 3, false, &mut rng).unwrap();
            let acts = [1usize, 0, 1];
            let obs = [0usize, 1, 1];
            // Joint over (s_1, .., s_4) and the three observations, by enumeration.
            let mut post = [0.0; 3];
            for path in 0..81usize {
                let s = [path % 3, path / 3 % 3, path / 9 % 3, path / 27];
                let mut w = p.b0[s[0]];
                for t in 0..3 {
                    w *= p.transition[acts[t]][s[t]][s[t + 1]] * p.observation[s[t + 1]][obs[t]];
                }
                post[s[3]] += w;
            }
            let z: f64 = post.iter().sum();
            let mut b = Belief(p.b0.clone());
            for t in 0..3 {
                b = belief_update(&p, &b, acts[t], obs[t]).unwrap();
            }
            for (x, y) in b.0.iter().zip(post) {
                assert!((x - y / z).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_probability_observation_is_an_error() {
        let mut p = FinitePOMDP::random(2, 1, 2, 1, false, &mut seeded(3)).unwrap();
        p.observation = vec![vec![1.0, 0.0], vec![1.0, 0.0]];
        assert_eq!(belief_update(&p, &Belief(vec![0.5, 0.5]), 0, 1), Err(ControlError::ZeroProbability { a: 0, o: 1 }));
    }

    #[test]
    fn json_round_trip_and_validation() {
        let p = FinitePOMDP::random(2, 2, 2, 3, false, &mut seeded(4)).unwrap();
        let text = p.to_json();
        assert!(text.contains("\"Omega\"") && text.contains("\"b0\""));
        assert_eq!(FinitePOMDP::from_json(&text).unwrap(), p);
        let bad = text.replace("\"H\": 3", "\"H\": 0");
        assert!(FinitePOMDP::from_json(&bad).is_err());
        assert!(FinitePOMDP::from_json("{\"S\": 1, \"extra\": 2}").is_err());
    }
}
