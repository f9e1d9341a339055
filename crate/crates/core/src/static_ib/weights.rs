use super::train::one_hot;
use super::{IbError, NuisanceTask};
use crate::nn::{Activation, BoundMlp, LearningRate, Mlp, NodeId, Sgd, SgdConfig, Tape, Tensor};
use crate::rng::{normals, seeded, stream, SimRng};

/// Fully factorised Gaussian `q(w|D)` over the parameters of a classifier,
/// with prior `p(w) = N(0, prior_std^2 I)`.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightPosterior {
    template: Mlp,
    pub mean: Vec<f64>,
    pub log_var: Vec<f64>,
    pub prior_std: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightLoss {
    pub total: f64,
    pub cross_entropy: f64,
    pub kl: f64,
}

impl WeightPosterior {
    pub fn new(template: Mlp, log_var: f64, prior_std: f64) -> Result<Self, IbError> {
        if !(prior_std > 0.0) {
            return Err(IbError::Invalid(format!("prior std {prior_std}")));
        }
        let mean = template.flat_params();
        let log_var = vec![log_var; mean.len()];
        Ok(Self { template, mean, log_var, prior_std })
    }

    /// `q == p`: zero means, prior variance.
    pub fn at_prior(template: Mlp, prior_std: f64) -> Result<Self, IbError> {
        let mut q = Self::new(template, 2.0 * prior_std.ln(), prior_std)?;
        q.mean.iter_mut().for_each(|m| *m = 0.0);
        Ok(q)
    }

    pub fn num_weights(&self) -> usize {
        self.mean.len()
    }

    /// Closed-form `KL(q || p)`.
    pub fn kl(&self) -> f64 {
        let pv = self.prior_std * self.prior_std;
        self.mean
            .iter()
            .zip(&self.log_var)
            .map(|(&m, &lv)| 0.5 * ((lv.exp() + m * m) / pv - 1.0 - lv + pv.ln()))
            .sum()
    }

    /// The classifier at the posterior mean.
    pub fn mean_net(&self) -> Mlp {
        let mut net = self.template.clone();
        net.set_flat_params(&self.mean).expect("mean matches template");
        net
    }

    pub fn net_with(&self, flat: &[f64]) -> Result<Mlp, IbError> {
        let mut net = self.template.clone();
        net.set_flat_params(flat)?;
        Ok(net)
    }

    fn split<'a>(&self, flat: &'a [f64]) -> Vec<(&'a [f64], &'a [f64])> {
        let mut out = Vec::new();
        let mut at = 0;
        for layer in self.template.layers() {
            let (w, b) = (layer.weight.len(), layer.bias.len());
            out.push((&flat[at..at + w], &flat[at + w..at + w + b]));
            at += w + b;
        }
        out
    }
}

struct WeightGraph {
    total: NodeId,
    ce: NodeId,
    kl: NodeId,
    params: Vec<(NodeId, NodeId)>,
}

fn record(tape: &mut Tape, q: &WeightPosterior, batch: &[(usize, usize)], beta: f64, rng: &mut SimRng) -> Result<WeightGraph, IbError> {
    let mut layers = Vec::new();
    let mut params = Vec::new();
    let mut kl_parts = Vec::new();
    let pv = q.prior_std * q.prior_std;
    let means = q.split(&q.mean);
    let lvs = q.split(&q.log_var);
    for ((layer, (mw, mb)), (lw, lb)) in q.template.layers().iter().zip(means).zip(lvs) {
        let mut pair = Vec::new();
        for (m, lv, shape) in [(mw, lw, layer.weight.shape().to_vec()), (mb, lb, layer.bias.shape().to_vec())] {
            let mn = tape.leaf(Tensor::new(shape.clone(), m.to_vec())?);
            let lvn = tape.leaf(Tensor::new(shape.clone(), lv.to_vec())?);
            let eps = tape.leaf(Tensor::new(shape, normals(rng, m.len()))?);
            let half = tape.scale(lvn, 0.5);
            let sd = tape.exp(half);
            let noise = tape.mul(sd, eps)?;
            pair.push(tape.add(mn, noise)?);
            params.push((mn, lvn));
            // 0.5 ((e^lv + m^2) / pv - 1 - lv + ln pv)
            let var = tape.exp(lvn);
            let m2 = tape.square(mn);
            let s = tape.add(var, m2)?;
            let s = tape.scale(s, 1.0 / pv);
            let s = tape.sub(s, lvn)?;
            let s = tape.offset(s, pv.ln() - 1.0);
            let part = tape.sum(s);
            kl_parts.push(tape.scale(part, 0.5));
        }
        layers.push((pair[0], pair[1], layer.activation));
    }
    let net = BoundMlp::from_nodes(layers);
    let (ys, zs): (Vec<usize>, Vec<usize>) = batch.iter().copied().unzip();
    let x = tape.leaf(one_hot(&ys, q.template.input_dim()));
    let logits = net.apply(tape, x)?;
    let logp = tape.log_softmax(logits);
    let picked = tape.gather(logp, &zs)?;
    let m = tape.mean(picked);
    let ce = tape.scale(m, -1.0);
    let mut kl = kl_parts[0];
    for &p in &kl_parts[1..] {
        kl = tape.add(kl, p)?;
    }
    let weighted = tape.scale(kl, beta);
    let total = tape.add(ce, weighted)?;
    Ok(WeightGraph { total, ce, kl, params })
}

/// `E_{w~q} H(z|y, w)` with one reparametrised draw, plus `beta KL(q || p)`.
pub fn weight_info_regularized_loss(q: &WeightPosterior, batch: &[(usize, usize)], beta: f64, rng: &mut SimRng) -> Result<WeightLoss, IbError> {
    if batch.is_empty() {
        return Err(IbError::Invalid("empty batch".into()));
    }
    let mut tape = Tape::new();
    let g = record(&mut tape, q, batch, beta, rng)?;
    Ok(WeightLoss { total: tape.value(g.total).item(), cross_entropy: tape.value(g.ce).item(), kl: tape.value(g.kl).item() })
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightTrainConfig {
    pub beta: f64,
    pub steps: usize,
    pub batch: usize,
    pub seed: u64,
    pub hidden: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub prior_std: f64,
    pub init_log_var: f64,
}

impl Default for WeightTrainConfig {
    fn default() -> Self {
        Self {
            beta: 1e-2,
            steps: 600,
            batch: 32,
            seed: 0,
            hidden: 16,
            learning_rate: 0.05,
            momentum: 0.9,
            prior_std: 1.0,
            init_log_var: -6.0,
        }
    }
}

/// Trains `q(w|D)` for a one-hidden-layer classifier `y -> z` by SGD on the
/// regularised loss; returns the posterior and its loss curve.
pub fn train_weight_posterior(task: &NuisanceTask, config: &WeightTrainConfig) -> Result<(WeightPosterior, Vec<WeightLoss>), IbError> {
    let template = Mlp::new(
        &[task.y_size(), config.hidden, task.z_size()],
        &[Activation::Relu, Activation::Identity],
        &mut stream(config.seed, "weights"),
    )?;
    let mut q = WeightPosterior::new(template, config.init_log_var, config.prior_std)?;
    let eta = config.learning_rate / (1.0 + config.beta);
    let mut sgd = Sgd::new(SgdConfig { learning_rate: LearningRate::Constant { eta }, momentum: config.momentum, nesterov: false })?;
    let mut rng = seeded(config.seed);
    let mut curve = Vec::with_capacity(config.steps);
    for step in 1..=config.steps {
        let batch: Vec<(usize, usize)> = (0..config.batch)
            .map(|_| {
                let (z, _, y) = task.sample(&mut rng);
                (y, z)
            })
            .collect();
        let mut tape = Tape::new();
        let g = record(&mut tape, &q, &batch, config.beta, &mut rng)?;
        let total = tape.value(g.total).item();
        if !total.is_finite() {
            return Err(IbError::Diverged { step });
        }
        curve.push(WeightLoss { total, cross_entropy: tape.value(g.ce).item(), kl: tape.value(g.kl).item() });
        let grads = tape.backward(g.total)?;
        let (mut gm, mut gl) = (Vec::with_capacity(q.mean.len()), Vec::with_capacity(q.mean.len()));
        for &(m, lv) in &g.params {
            gm.extend_from_slice(grads.get(m).data());
            gl.extend_from_slice(grads.get(lv).data());
        }
        let n = q.mean.len();
        let mut pm = Tensor::new(vec![n], std::mem::take(&mut q.mean))?;
        let mut pl = Tensor::new(vec![n], std::mem::take(&mut q.log_var))?;
        let res = sgd.step(vec![("mean".into(), &mut pm), ("log_var".into(), &mut pl)], &[Tensor::vector(gm), Tensor::vector(gl)]);
        q.mean = pm.into_data();
        q.log_var = pl.into_data();
        match res {
            Err(crate::nn::NnError::NonFinite(_)) => return Err(IbError::Diverged { step }),
            other => other?,
        }
    }
    Ok((q, curve))
}

/// Expected cross-entropy of a deterministic classifier over the task law.
pub fn task_cross_entropy(net: &Mlp, task: &NuisanceTask) -> Result<f64, IbError> {
    let probs = task.pair_probs();
    let mut total = 0.0;
    for z in 0..task.z_size() {
        for n in 0..task.n_size() {
            let logits = net.eval(one_hot(&[task.observe(z, n)], task.y_size()).data())?;
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
            total += probs[z * task.n_size() + n] * (lse - logits[z]);
        }
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlatnessReport {
    pub info_estimate: f64,
    pub bound_rhs: f64,
    pub hessian_trace: f64,
    /// False when the trace or the bound is not a finite number.
    pub finite: bool,
}

/// `tr(H)` from central second differences on the diagonal.
pub fn hessian_trace(loss: &dyn Fn(&[f64]) -> f64, w: &[f64], h: f64) -> f64 {
    let f0 = loss(w);
    let mut probe = w.to_vec();
    let mut trace = 0.0;
    for i in 0..w.len() {
        probe[i] = w[i] + h;
        let up = loss(&probe);
        probe[i] = w[i] - h;
        let down = loss(&probe);
        probe[i] = w[i];
        trace += (up - 2.0 * f0 + down) / (h * h);
    }
    trace
}

/// Evaluates both sides of the flat-minimum information bound at `w_hat`:
/// `info_estimate` against `0.5 K [ln |w|^2 + ln tr(H) - K ln(K^2 beta / 2)]`.
/// Nothing is asserted.
pub fn flatness_diagnostic(loss: &dyn Fn(&[f64]) -> f64, w_hat: &[f64], beta: f64, info_estimate: f64) -> FlatnessReport {
    let k = w_hat.len() as f64;
    let trace = hessian_trace(loss, w_hat, 1e-3);
    let norm2: f64 = w_hat.iter().map(|w| w * w).sum();
    let bound_rhs = 0.5 * k * (norm2.ln() + trace.ln() - k * (k * k * beta / 2.0).ln());
    FlatnessReport { info_estimate, bound_rhs, hessian_trace: trace, finite: trace.is_finite() && bound_rhs.is_finite() }
}
