use std::collections::HashMap;

use super::{belief_update, brute_force_q, Belief, ControlError, FinitePOMDP};

/// Finite-horizon MDP Q-values: `q[k][s][a]` with `k + 1` steps to go.
pub fn mdp_value_iteration(pomdp: &FinitePOMDP) -> Vec<Vec<Vec<f64>>> {
    let (ns, na) = (pomdp.num_states, pomdp.num_actions);
    let mut out: Vec<Vec<Vec<f64>>> = Vec::with_capacity(pomdp.horizon);
    for k in 0..pomdp.horizon {
        let q = (0..ns)
            .map(|s| {
                (0..na)
                    .map(|a| {
                        let mut v = pomdp.r[s][a];
                        if k > 0 {
                            let prev = &out[k - 1];
                            v += pomdp.transition[a][s]
                                .iter()
                                .enumerate()
                                .map(|(sp, t)| t * prev[sp].iter().cloned().fold(f64::NEG_INFINITY, f64::max))
                                .sum::<f64>();
                        }
                        v
                    })
                    .collect()
            })
            .collect();
        out.push(q);
    }
    out
}

/// Law of `r_{t+k}` from a state law `q(x_t)` and the open-loop actions
/// `a_t..a_{t+k}`, as `(value, probability)` pairs.
pub fn reward_predictive(pomdp: &FinitePOMDP, state_law: &[f64], actions: &[usize]) -> Vec<(f64, f64)> {
    let mut p = state_law.to_vec();
    for &a in &actions[..actions.len() - 1] {
        let mut next = vec![0.0; pomdp.num_states];
        for (s, w) in p.iter().enumerate() {
            for (sp, t) in pomdp.transition[a][s].iter().enumerate() {
                next[sp] += w * t;
            }
        }
        p = next;
    }
    let a = actions[actions.len() - 1];
    p.iter().enumerate().filter(|(_, w)| **w > 0.0).map(|(s, w)| (pomdp.r[s][a], *w)).collect()
}

/// The exact belief as a representation of the history.
pub fn belief_representation(pomdp: &FinitePOMDP) -> impl Fn(&[(usize, usize)]) -> Vec<f64> + '_ {
    move |h| {
        let mut b = Belief(pomdp.b0.clone());
        for &(a, o) in h {
            match belief_update(pomdp, &b, a, o) {
                Ok(nb) => b = nb,
                Err(_) => return vec![1.0 / pomdp.num_states as f64; pomdp.num_states],
            }
        }
        b.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RewardSufficiency {
    /// Per tree node (in [`brute_force_q`] order), Q from the representation.
    pub q_from_rep: Vec<Vec<f64>>,
    pub q_star: Vec<Vec<f64>>,
    pub max_dev: f64,
}

/// Recomputes Q from a representation `history -> q(x_t)`.
///
/// Only the representation's predictions enter: the immediate reward law
/// `q(r_t | h, a)` and the law of the next observation, both formed from
/// `q(x_t)` and the model tables; the recursion never looks at the true
/// belief. The result is compared with `Q*` on every reachable history.
pub fn reward_sufficiency_check(pomdp: &FinitePOMDP, rep: &dyn Fn(&[(usize, usize)]) -> Vec<f64>) -> Result<RewardSufficiency, ControlError> {
    let tree = brute_force_q(pomdp)?;
    let mut memo: HashMap<Vec<(usize, usize)>, Vec<f64>> = HashMap::new();
    fn q_rep(
        p: &FinitePOMDP,
        rep: &dyn Fn(&[(usize, usize)]) -> Vec<f64>,
        h: &mut Vec<(usize, usize)>,
        memo: &mut HashMap<Vec<(usize, usize)>, Vec<f64>>,
    ) -> Vec<f64> {
        let law = rep(h);
        let q: Vec<f64> = (0..p.num_actions)
            .map(|a| {
                let mut v: f64 = reward_predictive(p, &law, &[a]).iter().map(|(r, w)| r * w).sum();
                if h.len() + 1 < p.horizon {
                    let obs = p.observation_probs(&Belief(law.clone()), a);
                    for (o, &po) in obs.iter().enumerate() {
                        if po > 0.0 {
                            h.push((a, o));
                            let child = q_rep(p, rep, h, memo);
                            h.pop();
                            v += po * child.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        }
                    }
                }
                v
            })
            .collect();
        memo.insert(h.clone(), q.clone());
        q
    }
    q_rep(pomdp, rep, &mut Vec::new(), &mut memo);
    let mut max_dev: f64 = 0.0;
    let mut q_from_rep = Vec::with_capacity(tree.nodes.len());
    let mut q_star = Vec::with_capacity(tree.nodes.len());
    for n in &tree.nodes {
        // A representation that zeroes a reachable branch never visits it; its
        // Q there is immaterial to its own choices and is scored as zero.
        let qr = memo.get(&n.history).cloned().unwrap_or_else(|| vec![0.0; pomdp.num_actions]);
        for (a, b) in qr.iter().zip(&n.q) {
            max_dev = max_dev.max((a - b).abs());
        }
        q_from_rep.push(qr);
        q_star.push(n.q.clone());
    }
    Ok(RewardSufficiency { q_from_rep, q_star, max_dev })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn exact_belief_reconstructs_q_star() {
        let mut rng = seeded(0);
        for _ in 0..5 {
            let p = FinitePOMDP::random(3, 2, 3, 4, false, &mut rng).unwrap();
            let r = reward_sufficiency_check(&p, &belief_representation(&p)).unwrap();
            assert!(r.max_dev < 1e-9, "{}", r.max_dev);
        }
    }

    #[test]
    fn collapsed_histories_lose_optimality() {
        let p = FinitePOMDP::belief_collision(3);
        let exact = belief_representation(&p);
        // Pretend every observation was 0: belief-distinct histories merge.
        let collapsed = |h: &[(usize, usize)]| exact(&h.iter().map(|&(a, _)| (a, 0)).collect::<Vec<_>>());
        let r = reward_sufficiency_check(&p, &collapsed).unwrap();
        assert!(r.max_dev > 1e-3, "{}", r.max_dev);
    }

    #[test]
    fn constant_rewards_accept_any_representation() {
        let mut p = FinitePOMDP::random(2, 2, 2, 3, false, &mut seeded(1)).unwrap();
        p.r = vec![vec![0.7; 2]; 2];
        let r = reward_sufficiency_check(&p, &|_| vec![1.0, 0.0]).unwrap();
        assert!(r.max_dev < 1e-12);
    }

    #[test]
    fn reward_law_sums_to_one_and_moves_with_dynamics() {
        let p = FinitePOMDP::random(3, 2, 2, 3, false, &mut seeded(2)).unwrap();
        let law = reward_predictive(&p, &p.b0, &[0, 1, 1]);
        assert!((law.iter().map(|(_, w)| w).sum::<f64>() - 1.0).abs() < 1e-12);
        let mut s = p.b0.clone();
        for a in [0usize, 1] {
            let mut n = vec![0.0; 3];
            for i in 0..3 {
                for j in 0..3 {
                    n[j] += s[i] * p.transition[a][i][j];
                }
            }
            s = n;
        }
        let want: f64 = (0..3).map(|i| s[i] * p.r[i][1]).sum();
        assert!((law.iter().map(|(r, w)| r * w).sum::<f64>() - want).abs() < 1e-12);
    }
}
