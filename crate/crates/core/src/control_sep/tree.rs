use serde::Serialize;

use super::{belief_update, Belief, ControlError, FinitePOMDP};

/// Largest history tree [`brute_force_q`] will build.
pub const MAX_NODES: u128 = 1_000_000;

/// One action/observation history with its belief and optimal Q-values.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoryNode {
    pub history: Vec<(usize, usize)>,
    pub depth: usize,
    /// Probability of reaching the node when actions are drawn uniformly.
    pub reach: f64,
    pub belief: Belief,
    /// `Q*(h, a)` for every action.
    pub q: Vec<f64>,
    /// `P(o | h, a)` indexed `[a][o]`.
    pub obs_probs: Vec<Vec<f64>>,
    pub parent: Option<usize>,
    /// Child index for `(a, o)` at `a * |O| + o`; `None` where pruned or at the last step.
    pub children: Vec<Option<usize>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HistoryTree {
    pub nodes: Vec<HistoryNode>,
    pub num_actions: usize,
    pub num_obs: usize,
    pub horizon: usize,
}

impl HistoryTree {
    pub fn root(&self) -> &HistoryNode {
        &self.nodes[0]
    }

    /// Optimal expected return over history-dependent policies.
    pub fn optimal_return(&self) -> f64 {
        self.root().q.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }
}

fn max(v: &[f64]) -> f64 {
    v.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
}

/// Lowest index among the maxima.
pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Backward induction over the full history tree:
/// `Q*(h, a) = E[r | h, a] + sum_o P(o | h, a) max_a' Q*(hao, a')`.
pub fn brute_force_q(pomdp: &FinitePOMDP) -> Result<HistoryTree, ControlError> {
    pomdp.validate()?;
    let (na, no) = (pomdp.num_actions, pomdp.num_obs);
    let branching = (na * no) as u128;
    let total: u128 = (0..pomdp.horizon as u32).map(|d| branching.saturating_pow(d)).fold(0u128, |acc, x| acc.saturating_add(x));
    if total > MAX_NODES {
        return Err(ControlError::TooLarge(total));
    }
    let root_belief = Belief(pomdp.b0.clone());
    let mut nodes = vec![HistoryNode {
        history: Vec::new(),
        depth: 0,
        reach: 1.0,
        obs_probs: (0..na).map(|a| pomdp.observation_probs(&root_belief, a)).collect(),
        belief: root_belief,
        q: vec![0.0; na],
        parent: None,
        children: vec![None; na * no],
    }];
    let mut i = 0;
    while i < nodes.len() {
        if nodes[i].depth + 1 < pomdp.horizon {
            for a in 0..na {
                for o in 0..no {
                    let p = nodes[i].obs_probs[a][o];
                    if p <= 0.0 {
                        continue;
                    }
                    let belief = belief_update(pomdp, &nodes[i].belief, a, o)?;
                    let mut history = nodes[i].history.clone();
                    history.push((a, o));
                    let child = HistoryNode {
                        history,
                        depth: nodes[i].depth + 1,
                        reach: nodes[i].reach * p / na as f64,
                        obs_probs: (0..na).map(|a2| pomdp.observation_probs(&belief, a2)).collect(),
                        belief,
                        q: vec![0.0; na],
                        parent: Some(i),
                        children: vec![None; na * no],
                    };
                    nodes.push(child);
                    let id = nodes.len() - 1;
                    nodes[i].children[a * no + o] = Some(id);
                }
            }
        }
        i += 1;
    }
    for i in (0..nodes.len()).rev() {
        let q: Vec<f64> = (0..na)
            .map(|a| {
                let mut v = pomdp.expected_reward(&nodes[i].belief, a);
                for o in 0..no {
                    if let Some(c) = nodes[i].children[a * no + o] {
                        v += nodes[i].obs_probs[a][o] * max(&nodes[c].q);
                    }
                }
                v
            })
            .collect();
        nodes[i].q = q;
    }
    Ok(HistoryTree { nodes, num_actions: na, num_obs: no, horizon: pomdp.horizon })
}

/// Groups of equal-depth nodes whose beliefs agree within `tol` in L∞
/// (transitively), each sorted, groups ordered by their first node.
pub fn belief_groups(tree: &HistoryTree, tol: f64) -> Vec<Vec<usize>> {
    let n = tree.nodes.len();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    for depth in 0..tree.horizon {
        let mut idx: Vec<usize> = (0..n).filter(|&i| tree.nodes[i].depth == depth).collect();
        // Canonical order: beliefs rounded to 1e-10, lexicographic.
        let key = |i: usize| -> Vec<i64> { tree.nodes[i].belief.0.iter().map(|v| (v * 1e10).round() as i64).collect() };
        idx.sort_by_key(|&i| (key(i), i));
        for (pos, &i) in idx.iter().enumerate() {
            let bi = &tree.nodes[i].belief;
            for &j in &idx[pos + 1..] {
                let bj = &tree.nodes[j].belief;
                if bj.0[0] - bi.0[0] > tol + 1e-10 {
                    break;
                }
                if bi.linf(bj) <= tol {
                    let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
                    if ri != rj {
                        parent[ri.max(rj)] = ri.min(rj);
                    }
                }
            }
        }
    }
    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut slot = vec![usize::MAX; n];
    for i in 0..n {
        let r = find(&mut parent, i);
        if slot[r] == usize::MAX {
            slot[r] = groups.len();
            groups.push(Vec::new());
        }
        groups[slot[r]].push(i);
    }
    groups
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeparationReport {
    pub max_q_spread: f64,
    pub groups: usize,
    /// Groups holding two or more distinct histories.
    pub shared_groups: usize,
    pub largest_group: usize,
    pub pass: bool,
}

impl SeparationReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }
}

/// Largest within-group spread of `Q*` over histories sharing a belief.
pub fn verify_separation(tree: &HistoryTree, belief_tol: f64, q_tol: f64) -> SeparationReport {
    let groups = belief_groups(tree, belief_tol);
    let mut spread: f64 = 0.0;
    for g in &groups {
        for a in 0..tree.num_actions {
            let vals = g.iter().map(|&i| tree.nodes[i].q[a]);
            let (lo, hi) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(v), h.max(v)));
            spread = spread.max(hi - lo);
        }
    }
    SeparationReport {
        max_q_spread: spread,
        groups: groups.len(),
        shared_groups: groups.iter().filter(|g| g.len() > 1).count(),
        largest_group: groups.iter().map(Vec::len).max().unwrap_or(0),
        pass: spread < q_tol,
    }
}

/// Action per (depth, belief), tabulated on the reachable beliefs.
#[derive(Debug, Clone, PartialEq)]
pub struct BeliefPolicy {
    pub tol: f64,
    /// `table[depth]` lists `(belief, action)`.
    pub table: Vec<Vec<(Belief, usize)>>,
}

impl BeliefPolicy {
    pub fn action(&self, depth: usize, b: &Belief) -> Result<usize, ControlError> {
        self.table
            .get(depth)
            .and_then(|row| row.iter().find(|(c, _)| c.linf(b) <= self.tol))
            .map(|(_, a)| *a)
            .ok_or(ControlError::UnknownBelief(depth))
    }
}

/// Greedy policy on the group-averaged `Q*`, ties to the lowest action.
pub fn belief_policy(tree: &HistoryTree, tol: f64) -> BeliefPolicy {
    let mut table = vec![Vec::new(); tree.horizon];
    for g in belief_groups(tree, tol) {
        let first = &tree.nodes[g[0]];
        let q: Vec<f64> = (0..tree.num_actions).map(|a| g.iter().map(|&i| tree.nodes[i].q[a]).sum::<f64>() / g.len() as f64).collect();
        table[first.depth].push((first.belief.clone(), argmax(&q)));
    }
    BeliefPolicy { tol, table }
}

/// Exact expected return of a belief-feedback policy, by forward
/// propagation of the unnormalised state law along observation branches.
pub fn policy_return(pomdp: &FinitePOMDP, policy: &dyn Fn(usize, &Belief) -> Result<usize, ControlError>) -> Result<f64, ControlError> {
    fn go(p: &FinitePOMDP, policy: &dyn Fn(usize, &Belief) -> Result<usize, ControlError>, alpha: Vec<f64>, depth: usize) -> Result<f64, ControlError> {
        let mass: f64 = alpha.iter().sum();
        let a = policy(depth, &Belief(alpha.iter().map(|v| v / mass).collect()))?;
        let mut total: f64 = alpha.iter().zip(&p.r).map(|(w, r)| w * r[a]).sum();
        if depth + 1 < p.horizon {
            for o in 0..p.num_obs {
                let mut next = vec![0.0; p.num_states];
                for (s, w) in alpha.iter().enumerate() {
                    for (sp, t) in p.transition[a][s].iter().enumerate() {
                        next[sp] += w * t * p.observation[sp][o];
                    }
                }
                if next.iter().sum::<f64>() > 0.0 {
                    total += go(p, policy, next, depth + 1)?;
                }
            }
        }
        Ok(total)
    }
    pomdp.validate()?;
    go(pomdp, policy, pomdp.b0.clone(), 0)
}
