use serde::{Deserialize, Serialize};

use super::{IbError, NuisanceTask};
use crate::info::kl_diag_to_standard;
use crate::nn::{Activation, BoundMlp, LearningRate, Mlp, NodeId, Sgd, SgdConfig, Tape, Tensor};
use crate::rng::{normals, seeded, stream, SimRng};

pub const LOG_STD_MIN: f64 = -6.0;
pub const LOG_STD_MAX: f64 = 2.0;

pub(crate) fn one_hot(indices: &[usize], k: usize) -> Tensor {
    let mut data = vec![0.0; indices.len() * k];
    for (i, &j) in indices.iter().enumerate() {
        data[i * k + j] = 1.0;
    }
    Tensor::new(vec![indices.len(), k], data).expect("one-hot shape")
}

/// `p(x|y) = N(mu(y), diag exp(2 log_std(y)))`, computed by an MLP on one-hot `y`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StochasticEncoder {
    net: Mlp,
    rep_dim: usize,
}

/// Diagonal Gaussian posterior of one input.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagGaussian {
    pub mean: Vec<f64>,
    pub log_std: Vec<f64>,
}

impl DiagGaussian {
    pub fn std(&self) -> Vec<f64> {
        self.log_std.iter().map(|s| s.exp()).collect()
    }
}

impl StochasticEncoder {
    pub fn new(y_size: usize, rep_dim: usize, hidden: usize, rng: &mut SimRng) -> Result<Self, IbError> {
        let net = Mlp::new(&[y_size, hidden, 2 * rep_dim], &[Activation::Relu, Activation::Identity], rng)?;
        Ok(Self { net, rep_dim })
    }

    pub fn from_net(net: Mlp) -> Result<Self, IbError> {
        let out = net.output_dim();
        if out % 2 != 0 || out == 0 {
            return Err(IbError::Invalid(format!("encoder output width {out} is not 2 d")));
        }
        Ok(Self { net, rep_dim: out / 2 })
    }

    /// Linear encoder that emits the given posterior for each `y`.
    pub fn from_table(table: &[DiagGaussian]) -> Result<Self, IbError> {
        let d = table.first().map(|g| g.mean.len()).ok_or_else(|| IbError::Invalid("empty table".into()))?;
        let mut w = Vec::with_capacity(table.len() * 2 * d);
        for g in table {
            if g.mean.len() != d || g.log_std.len() != d {
                return Err(IbError::Invalid("ragged posterior table".into()));
            }
            w.extend_from_slice(&g.mean);
            w.extend_from_slice(&g.log_std);
        }
        let layer = crate::nn::Layer {
            weight: Tensor::new(vec![table.len(), 2 * d], w)?,
            bias: Tensor::zeros(&[2 * d]),
            activation: Activation::Identity,
        };
        Self::from_net(Mlp::from_layers(vec![layer])?)
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut Mlp {
        &mut self.net
    }

    pub fn rep_dim(&self) -> usize {
        self.rep_dim
    }

    pub fn input_dim(&self) -> usize {
        self.net.input_dim()
    }

    pub fn posterior(&self, y: usize) -> Result<DiagGaussian, IbError> {
        let out = self.net.eval(one_hot(&[y], self.input_dim()).data())?;
        let d = self.rep_dim;
        Ok(DiagGaussian {
            mean: out[..d].to_vec(),
            log_std: out[d..].iter().map(|s| s.clamp(LOG_STD_MIN, LOG_STD_MAX)).collect(),
        })
    }

    pub fn posteriors(&self) -> Result<Vec<DiagGaussian>, IbError> {
        (0..self.input_dim()).map(|y| self.posterior(y)).collect()
    }

    /// Reparametrised draw `mu + sigma * eps`.
    pub fn sample(&self, y: usize, rng: &mut SimRng) -> Result<Vec<f64>, IbError> {
        let g = self.posterior(y)?;
        Ok(g.mean.iter().zip(g.std()).map(|(m, s)| m + s * crate::rng::normal(rng)).collect())
    }

    /// Records `(mu, log_std)` nodes for a batch of inputs.
    pub(crate) fn record(&self, tape: &mut Tape, bound: &BoundMlp, ys: &[usize]) -> Result<(NodeId, NodeId), IbError> {
        let x = tape.leaf(one_hot(ys, self.input_dim()));
        let out = bound.apply(tape, x)?;
        let mu = tape.slice_cols(out, 0, self.rep_dim)?;
        let raw = tape.slice_cols(out, self.rep_dim, 2 * self.rep_dim)?;
        Ok((mu, tape.clamp(raw, LOG_STD_MIN, LOG_STD_MAX)))
    }
}

/// `q(z|x)`: logits from an MLP on a representation sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decoder {
    net: Mlp,
}

impl Decoder {
    pub fn new(rep_dim: usize, hidden: usize, z_size: usize, rng: &mut SimRng) -> Result<Self, IbError> {
        Ok(Self { net: Mlp::new(&[rep_dim, hidden, z_size], &[Activation::Relu, Activation::Identity], rng)? })
    }

    pub fn from_net(net: Mlp) -> Self {
        Self { net }
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn probs(&self, x: &[f64]) -> Result<Vec<f64>, IbError> {
        Ok(crate::nn::softmax_slice(&self.net.eval(x)?))
    }

    pub fn predict(&self, x: &[f64]) -> Result<usize, IbError> {
        let logits = self.net.eval(x)?;
        Ok(argmax(&logits))
    }
}

/// Lowest index among the maxima.
pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IblConfig {
    pub beta: f64,
    pub rep_dim: usize,
    /// Monte-Carlo draws of `x` per input in each training step.
    pub samples_per_input: usize,
    /// Draws per input when measuring accuracy.
    pub eval_samples: usize,
    pub steps: usize,
    pub batch: usize,
    pub seed: u64,
    pub hidden: usize,
    pub learning_rate: f64,
    pub momentum: f64,
}

impl Default for IblConfig {
    fn default() -> Self {
        Self {
            beta: 0.0,
            rep_dim: 2,
            samples_per_input: 1,
            eval_samples: 64,
            steps: 1500,
            batch: 64,
            seed: 0,
            hidden: 32,
            learning_rate: 0.05,
            momentum: 0.9,
        }
    }
}

impl IblConfig {
    fn validate(&self) -> Result<(), IbError> {
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(IbError::Invalid(format!("beta = {}", self.beta)));
        }
        if self.rep_dim == 0 || self.batch == 0 || self.samples_per_input == 0 || self.hidden == 0 {
            return Err(IbError::Invalid("rep_dim, batch, samples and hidden width must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IblLoss {
    pub total: f64,
    pub cross_entropy_term: f64,
    pub info_term: f64,
}

struct LossGraph {
    total: NodeId,
    ce: NodeId,
    info: NodeId,
    logits: NodeId,
    enc: BoundMlp,
    dec: BoundMlp,
}

fn record_loss(
    tape: &mut Tape,
    encoder: &StochasticEncoder,
    decoder: &Decoder,
    batch: &[(usize, usize)],
    config: &IblConfig,
    rng: &mut SimRng,
) -> Result<LossGraph, IbError> {
    let s = config.samples_per_input.max(1);
    let (ys, zs): (Vec<usize>, Vec<usize>) = batch.iter().flat_map(|&p| std::iter::repeat_n(p, s)).unzip();
    let d = encoder.rep_dim();
    let enc = encoder.net().bind(tape);
    let dec = decoder.net().bind(tape);
    let (mu, ls) = encoder.record(tape, &enc, &ys)?;
    let eps = tape.leaf(Tensor::new(vec![ys.len(), d], normals(rng, ys.len() * d))?);
    let sigma = tape.exp(ls);
    let noise = tape.mul(sigma, eps)?;
    let x = tape.add(mu, noise)?;
    let logits = dec.apply(tape, x)?;
    let logp = tape.log_softmax(logits);
    let picked = tape.gather(logp, &zs)?;
    let mean_logp = tape.mean(picked);
    let ce = tape.scale(mean_logp, -1.0);
    // 0.5 (mu^2 + sigma^2 - 1 - 2 log sigma), summed over coordinates
    let mu2 = tape.square(mu);
    let var = tape.square(sigma);
    let two_ls = tape.scale(ls, 2.0);
    let a = tape.add(mu2, var)?;
    let b = tape.sub(a, two_ls)?;
    let c = tape.offset(b, -1.0);
    let per_row = tape.row_sum(c);
    let kl_mean = tape.mean(per_row);
    let info = tape.scale(kl_mean, 0.5);
    let weighted = tape.scale(info, config.beta);
    let total = tape.add(ce, weighted)?;
    Ok(LossGraph { total, ce, info, logits, enc, dec })
}

/// Monte-Carlo IB Lagrangian `H(z|x) + beta KL(p(x|y) || N(0, I))` on a batch
/// of `(y, z)` pairs.
pub fn ibl_loss(
    encoder: &StochasticEncoder,
    decoder: &Decoder,
    batch: &[(usize, usize)],
    config: &IblConfig,
    rng: &mut SimRng,
) -> Result<IblLoss, IbError> {
    if batch.is_empty() {
        return Err(IbError::Invalid("empty batch".into()));
    }
    let mut tape = Tape::new();
    let g = record_loss(&mut tape, encoder, decoder, batch, config, rng)?;
    Ok(IblLoss {
        total: tape.value(g.total).item(),
        cross_entropy_term: tape.value(g.ce).item(),
        info_term: tape.value(g.info).item(),
    })
}

/// `E_y KL(p(x|y) || N(0, I))`: the variational upper bound on `I(x;y)`.
pub fn info_bound(encoder: &StochasticEncoder, task: &NuisanceTask) -> Result<f64, IbError> {
    let py = task.y_probs();
    let mut total = 0.0;
    for (y, g) in encoder.posteriors()?.iter().enumerate() {
        total += py[y] * kl_diag_to_standard(&g.mean, &g.log_std);
    }
    Ok(total)
}

/// Argmax accuracy, `samples` draws of `x` per `(z, n)` pair, weighted by the priors.
pub fn accuracy(encoder: &StochasticEncoder, decoder: &Decoder, task: &NuisanceTask, samples: usize, rng: &mut SimRng) -> Result<f64, IbError> {
    let probs = task.pair_probs();
    let mut acc = 0.0;
    for z in 0..task.z_size() {
        for n in 0..task.n_size() {
            let y = task.observe(z, n);
            let mut hits = 0usize;
            for _ in 0..samples {
                if decoder.predict(&encoder.sample(y, rng)?)? == z {
                    hits += 1;
                }
            }
            acc += probs[z * task.n_size() + n] * hits as f64 / samples as f64;
        }
    }
    Ok(acc)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub step: usize,
    pub loss: f64,
    pub ce: f64,
    pub info_bound: f64,
    pub acc: f64,
}

pub fn curve_csv(curve: &[CurveRow]) -> String {
    let mut out = String::from("step,loss,ce,info_bound,acc\n");
    for r in curve {
        out.push_str(&format!("{},{},{},{},{}\n", r.step, r.loss, r.ce, r.info_bound, r.acc));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedIb {
    pub encoder: StochasticEncoder,
    pub decoder: Decoder,
    pub curve: Vec<CurveRow>,
}

impl TrainedIb {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("model serialises")
    }

    pub fn from_json(text: &str) -> Result<Self, IbError> {
        serde_json::from_str(text).map_err(|e| IbError::Invalid(e.to_string()))
    }
}

/// Minimises the IB Lagrangian by SGD on minibatches drawn from the task.
///
/// The step size is `learning_rate / (1 + beta)` so that large `beta` does not
/// blow up the update; the objective and its minimiser are unchanged.
pub fn train_ib(task: &NuisanceTask, config: &IblConfig) -> Result<TrainedIb, IbError> {
    config.validate()?;
    let mut init_rng = stream(config.seed, "init");
    let mut encoder = StochasticEncoder::new(task.y_size(), config.rep_dim, config.hidden, &mut init_rng)?;
    let mut decoder = Decoder::new(config.rep_dim, config.hidden, task.z_size(), &mut init_rng)?;
    let eta = config.learning_rate / (1.0 + config.beta);
    let mut sgd = Sgd::new(SgdConfig {
        learning_rate: LearningRate::Constant { eta },
        momentum: config.momentum,
        nesterov: false,
    })?;
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
        let g = record_loss(&mut tape, &encoder, &decoder, &batch, config, &mut rng)?;
        let loss = tape.value(g.total).item();
        if !loss.is_finite() {
            return Err(IbError::Diverged { step });
        }
        let s = config.samples_per_input;
        let logits = tape.value(g.logits);
        let hits = (0..logits.dims2().0).filter(|&i| argmax(logits.row(i)) == batch[i / s].1).count();
        curve.push(CurveRow {
            step,
            loss,
            ce: tape.value(g.ce).item(),
            info_bound: tape.value(g.info).item(),
            acc: hits as f64 / logits.dims2().0 as f64,
        });
        let grads = tape.backward(g.total)?;
        let nodes: Vec<NodeId> = g.enc.param_nodes().into_iter().chain(g.dec.param_nodes()).collect();
        let grads: Vec<Tensor> = nodes.iter().map(|&n| grads.get(n)).collect();
        let mut params = encoder.net_mut().named_params_mut("enc.");
        params.extend(decoder.net.named_params_mut("dec."));
        match sgd.step(params, &grads) {
            Err(crate::nn::NnError::NonFinite(_)) => return Err(IbError::Diverged { step }),
            other => other?,
        }
    }
    Ok(TrainedIb { encoder, decoder, curve })
}
