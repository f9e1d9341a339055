use serde::{Deserialize, Serialize};

use super::{SepError, SepFilterModel, SepFilterSpec, Separator, Sequence};
use crate::lgss::{simulate, LgssModel};
use crate::nn::{LearningRate, NnError, NodeId, Sgd, SgdConfig, Tape, Tensor};
use crate::rng::{normals, stream, SimRng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DynIbConfig {
    pub beta: f64,
    /// Largest lead `n`; task terms `z_{t+k}` for `k = 0..=n`.
    pub horizon: usize,
    /// Truncation window of backpropagation through time.
    pub tbptt: usize,
    /// Number of SGD updates (one per window).
    pub steps: usize,
    /// Trajectories per batch.
    pub batch: usize,
    /// Length of each training trajectory.
    pub train_len: usize,
    pub seed: u64,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_norm: f64,
    /// Monte-Carlo samples per predictive at evaluation.
    pub eval_samples: usize,
}

impl Default for DynIbConfig {
    fn default() -> Self {
        Self {
            beta: 1e-3,
            horizon: 0,
            tbptt: 16,
            steps: 3000,
            batch: 16,
            train_len: 64,
            seed: 0,
            learning_rate: 0.01,
            momentum: 0.9,
            clip_norm: 5.0,
            eval_samples: 256,
        }
    }
}

impl DynIbConfig {
    pub fn validate(&self) -> Result<(), SepError> {
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(SepError::Invalid(format!("beta must be finite and >= 0, got {}", self.beta)));
        }
        if self.tbptt == 0 || self.batch == 0 || self.train_len == 0 || self.eval_samples == 0 {
            return Err(SepError::Invalid("tbptt, batch, train_len and eval_samples must be positive".into()));
        }
        if self.horizon >= self.train_len {
            return Err(SepError::Invalid(format!("horizon {} must be below the trajectory length {}", self.horizon, self.train_len)));
        }
        if !(self.learning_rate > 0.0) || !(0.0..1.0).contains(&self.momentum) || !(self.clip_norm >= 0.0) {
            return Err(SepError::Invalid("learning rate must be positive, momentum in [0, 1), clip_norm >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DynIblLoss {
    pub total: f64,
    pub ce_term: f64,
    pub info_term: f64,
}

/// Empirical dynamic IB Lagrangian of any separator on a set of sequences.
///
/// `ce_term` averages over positions `t` the sum over `k` of the predictive
/// NLL of `z_{t+k} = y_{t+k+1}` (terms with `t + k` past the end are absent);
/// `info_term` averages `KL(q(x_t | phi_t) || N(0, I))`.
pub fn dyn_ibl_loss<S: Separator>(
    model: &S,
    sequences: &[Sequence],
    beta: f64,
    horizon: usize,
    samples: usize,
    rng: &mut SimRng,
) -> Result<DynIblLoss, SepError> {
    let mut ce = 0.0;
    let mut info = 0.0;
    let mut positions = 0usize;
    for seq in sequences {
        if seq.len() <= horizon {
            return Err(SepError::Invalid(format!("sequence of length {} is not longer than the horizon {horizon}", seq.len())));
        }
        let states = model.run(seq)?;
        for (t, phi) in states.iter().enumerate() {
            for k in 0..=horizon.min(seq.len() - 1 - t) {
                let pred = model.predictive(phi, &seq.controls[t..=t + k], samples, rng)?;
                ce += pred.nll(&seq.observations[t + k])?;
            }
            info += model.info_kl(phi);
            positions += 1;
        }
    }
    let n = positions as f64;
    let (ce_term, info_term) = (ce / n, info / n);
    Ok(DynIblLoss { total: ce_term + beta * info_term, ce_term, info_term })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FilterCurveRow {
    pub step: usize,
    pub loss: f64,
    pub ce: f64,
    pub info: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedFilter {
    pub model: SepFilterModel,
    pub curve: Vec<FilterCurveRow>,
}

impl TrainedFilter {
    pub fn curve_csv(&self) -> String {
        let mut s = String::from("step,loss,ce,info\n");
        for r in &self.curve {
            s.push_str(&format!("{},{:?},{:?},{:?}\n", r.step, r.loss, r.ce, r.info));
        }
        s
    }
}

/// Sequences of length `len` from an LGSS with zero controls.
pub fn lgss_sequence(model: &LgssModel, len: usize, rng: &mut SimRng) -> Result<Sequence, SepError> {
    let controls = vec![model.zero_control(); len];
    Ok(Sequence::from(&simulate(model, &controls, rng)?))
}

/// Held-out LGSS sequences, one rng stream per trajectory.
pub fn held_out_sequences(model: &LgssModel, len: usize, num: usize, seed: u64) -> Result<Vec<Sequence>, SepError> {
    (0..num).map(|i| lgss_sequence(model, len, &mut stream(seed, &format!("traj{i}")))).collect()
}

fn batch_rows(batch: &[Sequence], pick: impl Fn(&Sequence) -> &[f64]) -> Result<Tensor, NnError> {
    let rows: Vec<Vec<f64>> = batch.iter().map(|s| pick(s).to_vec()).collect();
    Tensor::from_rows(&rows)
}

/// Trains a [`SepFilterModel`] by truncated backpropagation through time.
///
/// A batch of `batch` fresh trajectories is cut into windows of `tbptt`
/// steps; each window gives one SGD update, and the state at the window
/// boundary is carried forward without gradient. The horizon of `spec` is
/// overridden by the config.
pub fn train_filter(
    source: &mut dyn FnMut(&mut SimRng) -> Result<Sequence, SepError>,
    spec: SepFilterSpec,
    config: &DynIbConfig,
) -> Result<TrainedFilter, SepError> {
    config.validate()?;
    let spec = SepFilterSpec { horizon: config.horizon, ..spec };
    let mut model = SepFilterModel::new(spec.clone(), &mut stream(config.seed, "init"))?;
    let mut data_rng = stream(config.seed, "data");
    let mut noise_rng = stream(config.seed, "noise");
    let eta = config.learning_rate / (1.0 + config.beta);
    let mut sgd = Sgd::new(SgdConfig { learning_rate: LearningRate::Constant { eta }, momentum: config.momentum, nesterov: false })?;
    let d = spec.rep_dim;
    let b = config.batch;
    let mut curve = Vec::with_capacity(config.steps);
    let mut step = 0;
    while step < config.steps {
        let batch = (0..b).map(|_| source(&mut data_rng)).collect::<Result<Vec<_>, _>>()?;
        let len = config.train_len;
        if let Some(bad) = batch.iter().find(|s| s.len() != len) {
            return Err(SepError::Invalid(format!("source produced length {}, expected {len}", bad.len())));
        }
        let mut carried: Option<Tensor> = None;
        let mut start = 0;
        while start < len && step < config.steps {
            step += 1;
            let end = (start + config.tbptt).min(len);
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape)?;
            let mut phi = match carried.take() {
                Some(v) => tape.leaf(v),
                None => {
                    let ones = tape.leaf(Tensor::filled(&[b, 1], 1.0));
                    tape.matmul(ones, bound.phi0)?
                }
            };
            let mut ce_terms: Vec<NodeId> = Vec::new();
            let mut info_terms: Vec<NodeId> = Vec::new();
            for t in start..end {
                let mu = tape.slice_cols(phi, 0, d)?;
                let ls = tape.slice_cols(phi, d, 2 * d)?;
                let mu2 = tape.square(mu);
                let ls2 = tape.scale(ls, 2.0);
                let var = tape.exp(ls2);
                let kl = tape.add(mu2, var)?;
                let kl = tape.sub(kl, ls2)?;
                let kl = tape.offset(kl, -1.0);
                let kl = tape.row_sum(kl);
                let kl = tape.mean(kl);
                info_terms.push(tape.scale(kl, 0.5));
                for k in 0..=config.horizon.min(len - 1 - t) {
                    let controls = if spec.control_dim == 0 {
                        Vec::new()
                    } else {
                        (t..=t + k).map(|j| Ok(tape.leaf(batch_rows(&batch, |s| &s.controls[j])?))).collect::<Result<Vec<_>, NnError>>()?
                    };
                    let eps = Tensor::matrix(b, d, normals(&mut noise_rng, b * d))?;
                    let target: Vec<Vec<f64>> = batch.iter().map(|s| s.observations[t + k].clone()).collect();
                    let nll = model.record_nll(&mut tape, &bound, phi, eps, k, &controls, &target)?;
                    ce_terms.push(tape.mean(nll));
                }
                if t + 1 < len {
                    let y = tape.leaf(batch_rows(&batch, |s| &s.observations[t])?);
                    let u = if spec.control_dim == 0 { None } else { Some(tape.leaf(batch_rows(&batch, |s| &s.controls[t])?)) };
                    phi = model.record_update(&mut tape, &bound, phi, y, u)?;
                }
            }
            let steps_in = (end - start) as f64;
            let ce = sum_nodes(&mut tape, &ce_terms)?;
            let ce = tape.scale(ce, 1.0 / steps_in);
            let info = sum_nodes(&mut tape, &info_terms)?;
            let info = tape.scale(info, 1.0 / steps_in);
            let weighted = tape.scale(info, config.beta);
            let total = tape.add(ce, weighted)?;
            let loss = tape.value(total).item();
            if !loss.is_finite() {
                return Err(SepError::Diverged { step });
            }
            curve.push(FilterCurveRow { step, loss, ce: tape.value(ce).item(), info: tape.value(info).item() });
            let grads = tape.backward(total)?;
            let nodes: Vec<NodeId> = bound
                .update
                .param_nodes()
                .into_iter()
                .chain(bound.decoders.iter().flat_map(|m| m.param_nodes()))
                .chain(std::iter::once(bound.phi0))
                .collect();
            let mut grads: Vec<Tensor> = nodes.iter().map(|&n| grads.get(n)).collect();
            clip(&mut grads, config.clip_norm);
            carried = Some(tape.value(phi).clone());
            let (upd, decs, phi0) = model.parts_mut();
            let mut phi0_t = Tensor::matrix(1, phi0.len(), phi0.clone())?;
            let mut params = upd.named_params_mut("update.");
            for (k, dec) in decs.iter_mut().enumerate() {
                params.extend(dec.named_params_mut(&format!("dec{k}.")));
            }
            params.push(("phi0".into(), &mut phi0_t));
            match sgd.step(params, &grads) {
                Err(NnError::NonFinite(_)) => return Err(SepError::Diverged { step }),
                other => other?,
            }
            *phi0 = phi0_t.into_data();
            for v in &mut phi0[d..] {
                *v = v.clamp(crate::static_ib::LOG_STD_MIN, crate::static_ib::LOG_STD_MAX);
            }
            start = end;
        }
    }
    Ok(TrainedFilter { model, curve })
}

fn sum_nodes(tape: &mut Tape, nodes: &[NodeId]) -> Result<NodeId, NnError> {
    let mut acc = nodes[0];
    for &n in &nodes[1..] {
        acc = tape.add(acc, n)?;
    }
    Ok(acc)
}

fn clip(grads: &mut [Tensor], max_norm: f64) {
    if max_norm <= 0.0 {
        return;
    }
    let norm = grads.iter().flat_map(|g| g.data()).map(|v| v * v).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn lgss() -> LgssModel {
        LgssModel::scalar(0.9, 1.0, 0.1, 0.1, 0.0, 0.1 / 0.19).unwrap()
    }

    fn quick(seed: u64) -> DynIbConfig {
        DynIbConfig { steps: 40, batch: 4, train_len: 32, seed, ..DynIbConfig::default() }
    }

    #[test]
    fn beta_zero_total_is_cross_entropy() {
        let m = SepFilterModel::new(SepFilterSpec::gaussian(1, 0, 1), &mut seeded(0)).unwrap();
        let seqs = held_out_sequences(&lgss(), 12, 2, 1).unwrap();
        let l = dyn_ibl_loss(&m, &seqs, 0.0, 0, 8, &mut seeded(2)).unwrap();
        assert_eq!(l.total, l.ce_term);
        assert!(l.info_term > 0.0);
    }

    #[test]
    fn prior_valued_model_has_zero_info() {
        let spec = SepFilterSpec::gaussian(1, 0, 2);
        let mut m = SepFilterModel::new(spec, &mut seeded(0)).unwrap();
        let (upd, _, _) = m.parts_mut();
        for layer in upd.layers_mut() {
            layer.weight.data_mut().iter_mut().for_each(|w| *w = 0.0);
            layer.bias.data_mut().iter_mut().for_each(|w| *w = 0.0);
        }
        let seqs = held_out_sequences(&lgss(), 10, 2, 1).unwrap();
        let l = dyn_ibl_loss(&m, &seqs, 1.0, 0, 4, &mut seeded(2)).unwrap();
        assert_eq!(l.info_term, 0.0);
    }

    #[test]
    fn horizon_must_fit() {
        let m = SepFilterModel::new(SepFilterSpec::gaussian(1, 0, 1), &mut seeded(0)).unwrap();
        let seqs = held_out_sequences(&lgss(), 3, 1, 1).unwrap();
        assert!(dyn_ibl_loss(&m, &seqs, 0.0, 3, 1, &mut seeded(0)).is_err());
        assert!(DynIbConfig { horizon: 64, ..DynIbConfig::default() }.validate().is_err());
    }

    #[test]
    fn seeded_training_is_reproducible() {
        let sys = lgss();
        let run = || {
            let mut src = |r: &mut SimRng| lgss_sequence(&sys, 32, r);
            train_filter(&mut src, SepFilterSpec::gaussian(1, 0, 1), &quick(5)).unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a.curve, b.curve);
        assert_eq!(a.model, b.model);
        assert_eq!(a.curve.len(), 40);
    }

    #[test]
    fn tape_loss_matches_value_path_for_dirac_posteriors() {
        // log-std pinned at its floor: one tape sample with eps = 0 is close to
        // a one-sample value-path draw.
        let sys = lgss();
        let mut m = SepFilterModel::new(SepFilterSpec::gaussian(1, 0, 1), &mut seeded(4)).unwrap();
        {
            let (upd, _, phi0) = m.parts_mut();
            let last = upd.layers_mut().last_mut().unwrap();
            last.weight.data_mut()[1..].iter_mut().step_by(2).for_each(|w| *w = 0.0);
            last.bias.data_mut()[1] = -50.0;
            phi0[1] = -50.0;
        }
        let m = SepFilterModel::from_parts(m.spec().clone(), m.update_net().clone(), m.decoders().to_vec(), m.phi0().to_vec()).unwrap();
        let seqs = held_out_sequences(&sys, 16, 3, 9).unwrap();
        let value = dyn_ibl_loss(&m, &seqs, 0.0, 0, 1, &mut seeded(1)).unwrap();
        let mut tape = Tape::new();
        let bound = m.bind(&mut tape).unwrap();
        let ones = tape.leaf(Tensor::filled(&[3, 1], 1.0));
        let mut phi = tape.matmul(ones, bound.phi0).unwrap();
        let mut tot = 0.0;
        for t in 0..16 {
            let target: Vec<Vec<f64>> = seqs.iter().map(|s| s.observations[t].clone()).collect();
            let nll = m.record_nll(&mut tape, &bound, phi, Tensor::zeros(&[3, 1]), 0, &[], &target).unwrap();
            tot += tape.value(nll).data().iter().sum::<f64>();
            let y = tape.leaf(batch_rows(&seqs, |s| &s.observations[t]).unwrap());
            phi = m.record_update(&mut tape, &bound, phi, y, None).unwrap();
        }
        assert!((tot / 48.0 - value.ce_term).abs() < 1e-2);
    }
}
