use serde::{Deserialize, Serialize};

use super::{Predictive, SepError, Separator, Sequence};
use crate::info::DiscreteJoint;
use crate::rng::{categorical, simplex, SimRng};

/// Histories enumerated by [`hmm_exact_reference`] before giving up.
pub const MAX_HISTORIES: u128 = 1_000_000;
/// Largest `|O|^T |S|^T` for which the direct path sum is attempted.
pub const MAX_PATH_TERMS: u128 = 50_000_000;

/// Finite hidden Markov model with task `z_t = y_{t+1}`.
///
/// `s_1 ~ initial`, `y_t ~ emission[s_t]`, `s_{t+1} ~ transition[s_t]`;
/// the history `y^t` is `(y_1, .., y_t)` and `y^0` is empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FiniteHMM {
    pub initial: Vec<f64>,
    pub transition: Vec<Vec<f64>>,
    pub emission: Vec<Vec<f64>>,
}

fn check_row(row: &[f64], len: usize, what: &str) -> Result<(), SepError> {
    if row.len() != len {
        return Err(SepError::Invalid(format!("{what} has length {}, expected {len}", row.len())));
    }
    if row.iter().any(|p| !(*p >= 0.0)) || (row.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
        return Err(SepError::Invalid(format!("{what} is not a probability vector")));
    }
    Ok(())
}

impl FiniteHMM {
    pub fn new(initial: Vec<f64>, transition: Vec<Vec<f64>>, emission: Vec<Vec<f64>>) -> Result<Self, SepError> {
        let s = initial.len();
        if s == 0 || emission.first().is_none_or(|r| r.is_empty()) {
            return Err(SepError::Invalid("state and observation alphabets must be non-empty".into()));
        }
        let o = emission[0].len();
        check_row(&initial, s, "initial distribution")?;
        if transition.len() != s || emission.len() != s {
            return Err(SepError::Invalid(format!("tables need {s} rows")));
        }
        for (i, row) in transition.iter().enumerate() {
            check_row(row, s, &format!("transition row {i}"))?;
        }
        for (i, row) in emission.iter().enumerate() {
            check_row(row, o, &format!("emission row {i}"))?;
        }
        Ok(Self { initial, transition, emission })
    }

    pub fn random(states: usize, obs: usize, rng: &mut SimRng) -> Result<Self, SepError> {
        let initial = simplex(rng, states);
        let transition = (0..states).map(|_| simplex(rng, states)).collect();
        let emission = (0..states).map(|_| simplex(rng, obs)).collect();
        Self::new(initial, transition, emission)
    }

    /// Two states that flip with probability `flip` and are reported with
    /// error `noise`.
    pub fn symmetric(flip: f64, noise: f64) -> Result<Self, SepError> {
        Self::new(
            vec![0.5, 0.5],
            vec![vec![1.0 - flip, flip], vec![flip, 1.0 - flip]],
            vec![vec![1.0 - noise, noise], vec![noise, 1.0 - noise]],
        )
    }

    pub fn num_states(&self) -> usize {
        self.initial.len()
    }

    pub fn num_obs(&self) -> usize {
        self.emission[0].len()
    }

    fn advance(&self, p: &[f64]) -> Vec<f64> {
        let s = self.num_states();
        let mut out = vec![0.0; s];
        for (i, &pi) in p.iter().enumerate() {
            for j in 0..s {
                out[j] += pi * self.transition[i][j];
            }
        }
        out
    }

    fn emit(&self, p: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.num_obs()];
        for (i, &pi) in p.iter().enumerate() {
            for (o, e) in out.iter_mut().zip(&self.emission[i]) {
                *o += pi * e;
            }
        }
        out
    }

    /// Law of `z_{t+k} = y_{t+k+1}` from `p(s_{t+1} | y^t)`.
    pub fn task_from_state_predictive(&self, next_state: &[f64], k: usize) -> Vec<f64> {
        let mut p = next_state.to_vec();
        for _ in 0..k {
            p = self.advance(&p);
        }
        self.emit(&p)
    }

    /// Conditions `p(s_{t+1} | y^t)` on `y_{t+1} = o` and advances it to
    /// `p(s_{t+2} | y^{t+1})`; also returns the filtered law and `p(o | y^t)`.
    fn forward(&self, next_state: &[f64], o: usize) -> Option<(Vec<f64>, Vec<f64>, f64)> {
        let joint: Vec<f64> = next_state.iter().zip(&self.emission).map(|(p, e)| p * e[o]).collect();
        let po: f64 = joint.iter().sum();
        if po <= 0.0 {
            return None;
        }
        let filtered: Vec<f64> = joint.iter().map(|v| v / po).collect();
        Some((self.advance(&filtered), filtered, po))
    }

    /// Exact `p(z_{t+k} | y^t)` for `history = y^t` (uniform if the history
    /// has probability zero).
    pub fn task_predictive(&self, history: &[usize], k: usize) -> Vec<f64> {
        let mut pred = self.initial.clone();
        for &o in history {
            match self.forward(&pred, o) {
                Some((next, _, _)) => pred = next,
                None => return vec![1.0 / self.num_obs() as f64; self.num_obs()],
            }
        }
        self.task_from_state_predictive(&pred, k)
    }

    /// Unconditional `p(z_{t+k})`.
    pub fn task_marginal(&self, t: usize, k: usize) -> Vec<f64> {
        let mut p = self.initial.clone();
        for _ in 0..t {
            p = self.advance(&p);
        }
        self.task_from_state_predictive(&p, k)
    }

    /// One sequence of length `len` with one-hot observations and empty controls.
    pub fn sample_sequence(&self, len: usize, rng: &mut SimRng) -> Sequence {
        let o = self.num_obs();
        let mut s = categorical(rng, &self.initial);
        let mut observations = Vec::with_capacity(len);
        for _ in 0..len {
            let y = categorical(rng, &self.emission[s]);
            let mut hot = vec![0.0; o];
            hot[y] = 1.0;
            observations.push(hot);
            s = categorical(rng, &self.transition[s]);
        }
        Sequence { observations, controls: vec![Vec::new(); len] }
    }
}

/// Forward filter of a known HMM as a separator; the state is `p(s_{t+1} | y^t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct HmmSeparator {
    pub hmm: FiniteHMM,
}

impl Separator for HmmSeparator {
    type State = Vec<f64>;

    fn initial(&self) -> Vec<f64> {
        self.hmm.initial.clone()
    }

    fn update(&self, state: &Vec<f64>, y: &[f64], _u: &[f64], t: usize) -> Result<Vec<f64>, SepError> {
        let o = y.iter().position(|&v| v == 1.0).ok_or_else(|| SepError::Invalid("observation is not one-hot".into()))?;
        self.hmm.forward(state, o).map(|(next, _, _)| next).ok_or(SepError::NonFinite { t })
    }

    fn predictive(&self, state: &Vec<f64>, controls: &[Vec<f64>], _samples: usize, _rng: &mut SimRng) -> Result<Predictive, SepError> {
        if controls.is_empty() {
            return Err(SepError::Invalid("predictive needs at least one control slot".into()));
        }
        Ok(Predictive::Categorical(self.hmm.task_from_state_predictive(state, controls.len() - 1)))
    }

    /// Discrete stand-in for the information cost: KL of the state law to uniform.
    fn info_kl(&self, state: &Vec<f64>) -> f64 {
        let u = 1.0 / state.len() as f64;
        state.iter().filter(|&&p| p > 0.0).map(|p| p * (p / u).ln()).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HistoryPosterior {
    pub history: Vec<usize>,
    pub prob: f64,
    /// `p(s_t | y^t)`; `None` for the empty history.
    pub filtered: Option<Vec<f64>>,
    /// `p(s_{t+1} | y^t)`.
    pub next_state: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HmmReference {
    pub horizon: usize,
    pub lead: usize,
    /// `(1/T) sum_t sum_k H(z_{t+k} | y^t)`.
    pub entropy_lower_bound: f64,
    /// `terms[t][k] = H(z_{t+k} | y^t)`.
    pub terms: Vec<Vec<f64>>,
    /// All positive-probability histories of length `0..T`.
    pub histories: Vec<HistoryPosterior>,
    /// Same bound from a brute-force path sum over the joint of `y^T`, when small enough.
    pub direct_bound: Option<f64>,
    /// `(1/T) sum_t sum_k I(z_{t+k}; y^t)` from the same joint, when available.
    pub history_information: Option<f64>,
}

fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>()
}

fn levels(hmm: &FiniteHMM, horizon: usize) -> Result<Vec<Vec<HistoryPosterior>>, SepError> {
    let total: u128 = (0..horizon as u32).map(|t| (hmm.num_obs() as u128).pow(t)).sum();
    if total > MAX_HISTORIES {
        return Err(SepError::TooLarge(total));
    }
    let mut out = vec![vec![HistoryPosterior { history: vec![], prob: 1.0, filtered: None, next_state: hmm.initial.clone() }]];
    for _ in 1..horizon {
        let prev = out.last().expect("non-empty");
        let mut next = Vec::new();
        for h in prev {
            for o in 0..hmm.num_obs() {
                if let Some((ns, filt, po)) = hmm.forward(&h.next_state, o) {
                    let mut history = h.history.clone();
                    history.push(o);
                    next.push(HistoryPosterior { history, prob: h.prob * po, filtered: Some(filt), next_state: ns });
                }
            }
        }
        out.push(next);
    }
    Ok(out)
}

fn terms_per_t(horizon: usize, lead: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..horizon).flat_map(move |t| (0..=lead.min(horizon - 1 - t)).map(move |k| (t, k)))
}

/// Joint table of `(y_1, .., y_T)` by summing over every state path.
fn direct_joint(hmm: &FiniteHMM, horizon: usize) -> Result<Option<DiscreteJoint>, SepError> {
    let (s, o) = (hmm.num_states() as u128, hmm.num_obs() as u128);
    if s.pow(horizon as u32) * o.pow(horizon as u32) > MAX_PATH_TERMS {
        return Ok(None);
    }
    let (s, o) = (s as usize, o as usize);
    let n_obs = o.pow(horizon as u32);
    let n_paths = s.pow(horizon as u32);
    let mut probs = vec![0.0; n_obs];
    let digits = |mut idx: usize, base: usize| {
        let mut d = vec![0; horizon];
        for slot in d.iter_mut().rev() {
            *slot = idx % base;
            idx /= base;
        }
        d
    };
    let obs_digits: Vec<Vec<usize>> = (0..n_obs).map(|yi| digits(yi, o)).collect();
    for path in 0..n_paths {
        let states = digits(path, s);
        let mut pp = hmm.initial[states[0]];
        for w in states.windows(2) {
            pp *= hmm.transition[w[0]][w[1]];
        }
        if pp == 0.0 {
            continue;
        }
        for (slot, ys) in probs.iter_mut().zip(&obs_digits) {
            *slot += pp * states.iter().zip(ys).map(|(&st, &y)| hmm.emission[st][y]).product::<f64>();
        }
    }
    let axes = (1..=horizon).map(|t| format!("y{t}")).collect();
    Ok(Some(DiscreteJoint::new(axes, vec![o; horizon], probs)?))
}

/// Exact entropy lower bound of the `n`-step prediction loss over `T` steps,
/// by enumeration of observation histories.
pub fn hmm_exact_reference(hmm: &FiniteHMM, horizon: usize, lead: usize) -> Result<HmmReference, SepError> {
    if horizon == 0 {
        return Err(SepError::Invalid("horizon must be positive".into()));
    }
    let lv = levels(hmm, horizon)?;
    let mut terms = vec![Vec::new(); horizon];
    for (t, k) in terms_per_t(horizon, lead) {
        let h: f64 = lv[t].iter().map(|h| h.prob * entropy(&hmm.task_from_state_predictive(&h.next_state, k))).sum();
        terms[t].push(h);
    }
    let entropy_lower_bound = terms.iter().flatten().sum::<f64>() / horizon as f64;
    let (direct_bound, history_information) = match direct_joint(hmm, horizon)? {
        None => (None, None),
        Some(joint) => {
            let names: Vec<String> = joint.axes().to_vec();
            let mut bound = 0.0;
            let mut info = 0.0;
            for (t, k) in terms_per_t(horizon, lead) {
                let past: Vec<&str> = names[..t].iter().map(String::as_str).collect();
                let z = names[t + k].as_str();
                bound += joint.conditional_entropy(&[z], &past)?;
                if t > 0 {
                    info += crate::info::mutual_information(&joint, &[z], &past, &[])?;
                }
            }
            (Some(bound / horizon as f64), Some(info / horizon as f64))
        }
    };
    Ok(HmmReference {
        horizon,
        lead,
        entropy_lower_bound,
        terms,
        histories: lv.into_iter().flatten().collect(),
        direct_bound,
        history_information,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NStepCheck {
    pub loss: f64,
    pub bound: f64,
    pub slack: f64,
}

/// Exact `n`-step loss of a candidate `(history, k) -> law of z_{t+k}` and
/// its slack above the entropy bound.
pub fn nstep_bound_check(
    hmm: &FiniteHMM,
    horizon: usize,
    lead: usize,
    candidate: &dyn Fn(&[usize], usize) -> Vec<f64>,
) -> Result<NStepCheck, SepError> {
    let reference = hmm_exact_reference(hmm, horizon, lead)?;
    let lv = levels(hmm, horizon)?;
    let mut loss = 0.0;
    for (t, k) in terms_per_t(horizon, lead) {
        for h in &lv[t] {
            let p = hmm.task_from_state_predictive(&h.next_state, k);
            let q = candidate(&h.history, k);
            if q.len() != p.len() {
                return Err(SepError::Invalid(format!("candidate returned {} values for {} outcomes", q.len(), p.len())));
            }
            let ce: f64 = p.iter().zip(&q).filter(|(pi, _)| **pi > 0.0).map(|(pi, qi)| -pi * qi.ln()).sum();
            loss += h.prob * ce;
        }
    }
    let loss = loss / horizon as f64;
    let bound = reference.entropy_lower_bound;
    Ok(NStepCheck { loss, bound, slack: loss - bound })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use crate::seprep::dyn_ibl_loss;

    #[test]
    fn deterministic_cycle_has_zero_bound() {
        let hmm = FiniteHMM::new(
            vec![1.0, 0.0, 0.0],
            vec![vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0], vec![1.0, 0.0, 0.0]],
            vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]],
        )
        .unwrap();
        let r = hmm_exact_reference(&hmm, 5, 1).unwrap();
        assert_eq!(r.entropy_lower_bound, 0.0);
        assert_eq!(r.direct_bound, Some(0.0));
    }

    #[test]
    fn state_blind_emissions_give_marginal_entropy() {
        let e = vec![0.2, 0.3, 0.5];
        let hmm = FiniteHMM::random(3, 3, &mut seeded(1)).unwrap();
        let hmm = FiniteHMM::new(hmm.initial, hmm.transition, vec![e.clone(); 3]).unwrap();
        let r = hmm_exact_reference(&hmm, 4, 0).unwrap();
        for row in &r.terms {
            assert!((row[0] - entropy(&e)).abs() < 1e-12);
        }
    }

    #[test]
    fn symmetric_two_state_routes_agree() {
        let hmm = FiniteHMM::symmetric(0.2, 0.1).unwrap();
        for lead in 0..3 {
            let r = hmm_exact_reference(&hmm, 6, lead).unwrap();
            assert!((r.entropy_lower_bound - r.direct_bound.unwrap()).abs() < 1e-12);
        }
    }

    #[test]
    fn random_hmm_routes_agree() {
        let mut rng = seeded(4);
        for _ in 0..5 {
            let hmm = FiniteHMM::random(3, 3, &mut rng).unwrap();
            let r = hmm_exact_reference(&hmm, 5, 1).unwrap();
            assert!((r.entropy_lower_bound - r.direct_bound.unwrap()).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_posteriors_match_joint_conditioning() {
        let hmm = FiniteHMM::random(2, 3, &mut seeded(9)).unwrap();
        let r = hmm_exact_reference(&hmm, 3, 0).unwrap();
        for h in r.histories.iter().filter(|h| h.history.len() == 2) {
            // p(s_2 | y_1, y_2) by summing over s_1.
            let (y1, y2) = (h.history[0], h.history[1]);
            let mut w = [0.0; 2];
            for s1 in 0..2 {
                for (s2, slot) in w.iter_mut().enumerate() {
                    *slot += hmm.initial[s1] * hmm.emission[s1][y1] * hmm.transition[s1][s2] * hmm.emission[s2][y2];
                }
            }
            let z = w[0] + w[1];
            assert!((h.prob - z).abs() < 1e-15);
            let f = h.filtered.as_ref().unwrap();
            assert!((f[0] - w[0] / z).abs() < 1e-14 && (f[1] - w[1] / z).abs() < 1e-14);
        }
    }

    #[test]
    fn exact_candidate_has_no_slack() {
        let hmm = FiniteHMM::random(3, 2, &mut seeded(2)).unwrap();
        let c = nstep_bound_check(&hmm, 6, 2, &|h, k| hmm.task_predictive(h, k)).unwrap();
        assert!(c.slack.abs() < 1e-9);
    }

    #[test]
    fn marginal_candidate_slack_is_history_information() {
        let hmm = FiniteHMM::random(3, 3, &mut seeded(3)).unwrap();
        let c = nstep_bound_check(&hmm, 5, 0, &|h, k| hmm.task_marginal(h.len(), k)).unwrap();
        let r = hmm_exact_reference(&hmm, 5, 0).unwrap();
        assert!((c.slack - r.history_information.unwrap()).abs() < 1e-9);
        assert!(c.slack > 0.0);
    }

    #[test]
    fn size_cap() {
        let hmm = FiniteHMM::random(2, 4, &mut seeded(0)).unwrap();
        assert!(matches!(hmm_exact_reference(&hmm, 12, 0), Err(SepError::TooLarge(_))));
        assert!(hmm_exact_reference(&hmm, 8, 0).unwrap().direct_bound.is_some());
    }

    #[test]
    fn exact_separator_cross_entropy_matches_bound() {
        let hmm = FiniteHMM::random(2, 2, &mut seeded(6)).unwrap();
        let sep = HmmSeparator { hmm: hmm.clone() };
        let mut rng = seeded(7);
        let seqs: Vec<Sequence> = (0..20000).map(|_| hmm.sample_sequence(5, &mut rng)).collect();
        let l = dyn_ibl_loss(&sep, &seqs, 0.0, 0, 1, &mut rng).unwrap();
        let r = hmm_exact_reference(&hmm, 5, 0).unwrap();
        // Monte-Carlo error of a mean of 100000 bounded NLL terms.
        assert!((l.ce_term - r.entropy_lower_bound).abs() < 0.02, "{} vs {}", l.ce_term, r.entropy_lower_bound);
    }

    #[test]
    fn rejects_non_stochastic_tables() {
        assert!(FiniteHMM::new(vec![0.5, 0.5], vec![vec![1.0, 0.0], vec![0.5, 0.6]], vec![vec![1.0], vec![1.0]]).is_err());
    }
}
