use serde::{Deserialize, Serialize};
use serde_json::value::RawValue;

use super::{Predictive, SepError, Separator};
use crate::info::kl_diag_to_standard;
use crate::nn::{softmax_slice, Activation, Mlp, NnError, NodeId, Tape, Tensor};
use crate::rng::{normal, SimRng};
use crate::static_ib::{LOG_STD_MAX, LOG_STD_MIN};

/// Bounds on the decoder log-variance of Gaussian outputs.
pub(crate) const LOG_VAR_MIN: f64 = -12.0;
pub(crate) const LOG_VAR_MAX: f64 = 6.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputKind {
    /// Mean and log-variance per task coordinate.
    Gaussian,
    /// Logits over a finite task alphabet; targets are one-hot.
    Categorical,
}

/// Architecture of a [`SepFilterModel`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SepFilterSpec {
    pub rep_dim: usize,
    pub obs_dim: usize,
    pub control_dim: usize,
    /// Task dimension (Gaussian) or alphabet size (categorical).
    pub task_dim: usize,
    pub output: OutputKind,
    pub horizon: usize,
    pub update_hidden: Vec<usize>,
    pub decoder_hidden: Vec<usize>,
}

impl SepFilterSpec {
    /// Scalar-observation, one-step-ahead Gaussian filter.
    pub fn gaussian(obs_dim: usize, control_dim: usize, rep_dim: usize) -> Self {
        Self {
            rep_dim,
            obs_dim,
            control_dim,
            task_dim: obs_dim,
            output: OutputKind::Gaussian,
            horizon: 0,
            update_hidden: vec![32],
            decoder_hidden: vec![16],
        }
    }

    fn decoder_out(&self) -> usize {
        match self.output {
            OutputKind::Gaussian => 2 * self.task_dim,
            OutputKind::Categorical => self.task_dim,
        }
    }
}

fn hidden_widths(input: usize, hidden: &[usize], output: usize) -> (Vec<usize>, Vec<Activation>) {
    let mut widths = vec![input];
    widths.extend_from_slice(hidden);
    widths.push(output);
    let mut acts = vec![Activation::Tanh; hidden.len()];
    acts.push(Activation::Identity);
    (widths, acts)
}

/// Recurrent separating representation.
///
/// The state `phi_t = (mu, log_std)` parameterises a diagonal Gaussian
/// `q(x_t | y^t, u^t)`. The update network sees exactly `(phi_t, y_{t+1}, u_t)`
/// and no likelihood term; decoder `k` maps a sample of `x_t` and the controls
/// `u_t..u_{t+k}` to the law of `z_{t+k}`.
#[derive(Debug, Clone, PartialEq)]
pub struct SepFilterModel {
    spec: SepFilterSpec,
    update: Mlp,
    decoders: Vec<Mlp>,
    phi0: Vec<f64>,
}

impl SepFilterModel {
    pub fn new(spec: SepFilterSpec, rng: &mut SimRng) -> Result<Self, SepError> {
        if spec.rep_dim == 0 || spec.obs_dim == 0 || spec.task_dim == 0 {
            return Err(SepError::Invalid("representation, observation and task dimensions must be positive".into()));
        }
        if spec.output == OutputKind::Categorical && spec.task_dim < 2 {
            return Err(SepError::Invalid("a categorical task needs at least two values".into()));
        }
        let d = spec.rep_dim;
        let (w, a) = hidden_widths(2 * d + spec.obs_dim + spec.control_dim, &spec.update_hidden, 2 * d);
        let update = Mlp::new(&w, &a, rng)?;
        let decoders = (0..=spec.horizon)
            .map(|k| {
                let (w, a) = hidden_widths(d + spec.control_dim * (k + 1), &spec.decoder_hidden, spec.decoder_out());
                Mlp::new(&w, &a, rng)
            })
            .collect::<Result<_, NnError>>()?;
        Ok(Self { phi0: vec![0.0; 2 * d], spec, update, decoders })
    }

    /// Assembles a model from explicit networks, checking every dimension.
    pub fn from_parts(spec: SepFilterSpec, update: Mlp, decoders: Vec<Mlp>, phi0: Vec<f64>) -> Result<Self, SepError> {
        let d = spec.rep_dim;
        let upd_in = 2 * d + spec.obs_dim + spec.control_dim;
        if update.input_dim() != upd_in || update.output_dim() != 2 * d {
            return Err(SepError::Invalid(format!(
                "update network is {} -> {}, expected {upd_in} -> {}",
                update.input_dim(),
                update.output_dim(),
                2 * d
            )));
        }
        if decoders.len() != spec.horizon + 1 {
            return Err(SepError::Invalid(format!("{} decoders for horizon {}", decoders.len(), spec.horizon)));
        }
        for (k, dec) in decoders.iter().enumerate() {
            let want = d + spec.control_dim * (k + 1);
            if dec.input_dim() != want || dec.output_dim() != spec.decoder_out() {
                return Err(SepError::Invalid(format!("decoder {k} has the wrong shape")));
            }
        }
        if phi0.len() != 2 * d {
            return Err(SepError::Invalid(format!("phi0 has length {}, expected {}", phi0.len(), 2 * d)));
        }
        Ok(Self { spec, update, decoders, phi0: clamp_phi(phi0, d) })
    }

    pub fn spec(&self) -> &SepFilterSpec {
        &self.spec
    }

    pub fn rep_dim(&self) -> usize {
        self.spec.rep_dim
    }

    pub fn update_net(&self) -> &Mlp {
        &self.update
    }

    pub fn decoders(&self) -> &[Mlp] {
        &self.decoders
    }

    pub fn phi0(&self) -> &[f64] {
        &self.phi0
    }

    pub(crate) fn parts_mut(&mut self) -> (&mut Mlp, &mut Vec<Mlp>, &mut Vec<f64>) {
        (&mut self.update, &mut self.decoders, &mut self.phi0)
    }

    /// Splits `phi` into `(mean, log_std)`.
    pub fn posterior<'a>(&self, phi: &'a [f64]) -> (&'a [f64], &'a [f64]) {
        phi.split_at(self.spec.rep_dim)
    }

    fn decoder_input(&self, x: &[f64], controls: &[Vec<f64>]) -> Vec<f64> {
        let mut inp = x.to_vec();
        for u in controls {
            inp.extend_from_slice(u);
        }
        inp
    }

    pub fn to_json(&self) -> String {
        #[derive(Serialize)]
        struct Net<'a> {
            widths: Vec<usize>,
            activations: Vec<Activation>,
            weights: &'a RawValue,
        }
        #[derive(Serialize)]
        struct File<'a> {
            spec: &'a SepFilterSpec,
            phi0: &'a RawValue,
            update: Net<'a>,
            decoders: Vec<Net<'a>>,
        }
        let raw = |v: &[f64]| RawValue::from_string(float_array(v)).expect("float array is valid JSON");
        let net_raw = |m: &Mlp| (m.widths(), m.activations(), raw(&m.flat_params()));
        let upd = net_raw(&self.update);
        let decs: Vec<_> = self.decoders.iter().map(net_raw).collect();
        let phi0 = raw(&self.phi0);
        let file = File {
            spec: &self.spec,
            phi0: &phi0,
            update: Net { widths: upd.0, activations: upd.1, weights: &upd.2 },
            decoders: decs.iter().map(|d| Net { widths: d.0.clone(), activations: d.1.clone(), weights: &d.2 }).collect(),
        };
        serde_json::to_string_pretty(&file).expect("model serialises")
    }

    pub fn from_json(text: &str) -> Result<Self, SepError> {
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct Net {
            widths: Vec<usize>,
            activations: Vec<Activation>,
            weights: Vec<f64>,
        }
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct File {
            spec: SepFilterSpec,
            phi0: Vec<f64>,
            update: Net,
            decoders: Vec<Net>,
        }
        let f: File = serde_json::from_str(text).map_err(|e| SepError::Parse(e.to_string()))?;
        let build = |n: Net| -> Result<Mlp, SepError> {
            let mut m = Mlp::zeros(&n.widths, &n.activations)?;
            m.set_flat_params(&n.weights)?;
            Ok(m)
        };
        let update = build(f.update)?;
        let decoders = f.decoders.into_iter().map(build).collect::<Result<_, _>>()?;
        Self::from_parts(f.spec, update, decoders, f.phi0)
    }
}

/// JSON array with 17 significant digits per entry.
pub(crate) fn float_array(v: &[f64]) -> String {
    let items: Vec<String> = v.iter().map(|x| format!("{x:.16e}")).collect();
    format!("[{}]", items.join(","))
}

fn clamp_phi(mut phi: Vec<f64>, d: usize) -> Vec<f64> {
    for v in &mut phi[d..] {
        *v = v.clamp(LOG_STD_MIN, LOG_STD_MAX);
    }
    phi
}

/// One application of the update network: `phi_{t+1} = g(phi_t, y_{t+1}, u_t)`.
pub fn filter_step(model: &SepFilterModel, phi: &[f64], y: &[f64], u: &[f64], t: usize) -> Result<Vec<f64>, SepError> {
    let s = &model.spec;
    if phi.len() != 2 * s.rep_dim || y.len() != s.obs_dim || u.len() != s.control_dim {
        return Err(SepError::Invalid(format!(
            "filter step got phi {}, y {}, u {}; expected {}, {}, {}",
            phi.len(),
            y.len(),
            u.len(),
            2 * s.rep_dim,
            s.obs_dim,
            s.control_dim
        )));
    }
    let mut inp = phi.to_vec();
    inp.extend_from_slice(y);
    inp.extend_from_slice(u);
    let out = model.update.eval(&inp)?;
    if out.iter().any(|v| !v.is_finite()) {
        return Err(SepError::NonFinite { t });
    }
    Ok(clamp_phi(out, s.rep_dim))
}

/// Monte-Carlo predictive of `z_{t+k}` with `k = controls.len() - 1`.
pub fn predict_task(model: &SepFilterModel, phi: &[f64], controls: &[Vec<f64>], samples: usize, rng: &mut SimRng) -> Result<Predictive, SepError> {
    let (mean, log_std) = model.posterior(phi);
    let std: Vec<f64> = log_std.iter().map(|l| l.exp()).collect();
    predict_from_posterior(model, mean, &std, controls, samples, rng)
}

/// Predictive from explicit posterior moments; `std` may contain zeros.
pub fn predict_from_posterior(
    model: &SepFilterModel,
    mean: &[f64],
    std: &[f64],
    controls: &[Vec<f64>],
    samples: usize,
    rng: &mut SimRng,
) -> Result<Predictive, SepError> {
    let s = &model.spec;
    if controls.is_empty() || controls.len() > s.horizon + 1 {
        return Err(SepError::Invalid(format!("{} controls for horizon {}", controls.len(), s.horizon)));
    }
    if controls.iter().any(|u| u.len() != s.control_dim) {
        return Err(SepError::Invalid("control has the wrong dimension".into()));
    }
    if samples == 0 {
        return Err(SepError::Invalid("predictive needs at least one sample".into()));
    }
    let dec = &model.decoders[controls.len() - 1];
    let m = s.task_dim;
    let mut means = Vec::with_capacity(samples);
    let mut vars = Vec::with_capacity(samples);
    let mut probs = vec![0.0; m];
    for _ in 0..samples {
        let x: Vec<f64> = mean.iter().zip(std).map(|(mu, sd)| mu + sd * normal(rng)).collect();
        let out = dec.eval(&model.decoder_input(&x, controls))?;
        match s.output {
            OutputKind::Gaussian => {
                means.push(out[..m].to_vec());
                vars.push(out[m..].iter().map(|lv| lv.clamp(LOG_VAR_MIN, LOG_VAR_MAX).exp()).collect());
            }
            OutputKind::Categorical => {
                for (acc, p) in probs.iter_mut().zip(softmax_slice(&out)) {
                    *acc += p / samples as f64;
                }
            }
        }
    }
    Ok(match s.output {
        OutputKind::Gaussian => Predictive::Mixture { means, vars },
        OutputKind::Categorical => Predictive::Categorical(probs),
    })
}

impl Separator for SepFilterModel {
    type State = Vec<f64>;

    fn initial(&self) -> Vec<f64> {
        self.phi0.clone()
    }

    fn update(&self, state: &Vec<f64>, y: &[f64], u: &[f64], t: usize) -> Result<Vec<f64>, SepError> {
        filter_step(self, state, y, u, t)
    }

    fn predictive(&self, state: &Vec<f64>, controls: &[Vec<f64>], samples: usize, rng: &mut SimRng) -> Result<Predictive, SepError> {
        predict_task(self, state, controls, samples, rng)
    }

    fn info_kl(&self, state: &Vec<f64>) -> f64 {
        let (mu, ls) = self.posterior(state);
        kl_diag_to_standard(mu, ls)
    }
}

/// Tape nodes of a bound model for one batch of sequences.
pub(crate) struct BoundFilter {
    pub update: crate::nn::BoundMlp,
    pub decoders: Vec<crate::nn::BoundMlp>,
    pub phi0: NodeId,
}

impl SepFilterModel {
    pub(crate) fn bind(&self, tape: &mut Tape) -> Result<BoundFilter, SepError> {
        Ok(BoundFilter {
            update: self.update.bind(tape),
            decoders: self.decoders.iter().map(|d| d.bind(tape)).collect(),
            phi0: tape.leaf(Tensor::matrix(1, self.phi0.len(), self.phi0.clone())?),
        })
    }

    /// `phi_{t+1}` as a tape node with the log-std half clamped.
    pub(crate) fn record_update(&self, tape: &mut Tape, b: &BoundFilter, phi: NodeId, y: NodeId, u: Option<NodeId>) -> Result<NodeId, SepError> {
        let d = self.spec.rep_dim;
        let mut parts = vec![phi, y];
        parts.extend(u);
        let inp = tape.concat_cols(&parts)?;
        let out = b.update.apply(tape, inp)?;
        let mu = tape.slice_cols(out, 0, d)?;
        let ls = tape.slice_cols(out, d, 2 * d)?;
        let ls = tape.clamp(ls, LOG_STD_MIN, LOG_STD_MAX);
        Ok(tape.concat_cols(&[mu, ls])?)
    }

    /// Per-row negative log-likelihood `[rows, 1]` of targets under decoder `k`
    /// at one reparametrised sample; `controls` is empty when there are none.
    pub(crate) fn record_nll(
        &self,
        tape: &mut Tape,
        b: &BoundFilter,
        phi: NodeId,
        eps: Tensor,
        k: usize,
        controls: &[NodeId],
        target: &[Vec<f64>],
    ) -> Result<NodeId, SepError> {
        let d = self.spec.rep_dim;
        let m = self.spec.task_dim;
        let mu = tape.slice_cols(phi, 0, d)?;
        let ls = tape.slice_cols(phi, d, 2 * d)?;
        let sd = tape.exp(ls);
        let eps = tape.leaf(eps);
        let noise = tape.mul(sd, eps)?;
        let x = tape.add(mu, noise)?;
        let mut parts = vec![x];
        parts.extend_from_slice(controls);
        let inp = if parts.len() == 1 { x } else { tape.concat_cols(&parts)? };
        let out = b.decoders[k].apply(tape, inp)?;
        match self.spec.output {
            OutputKind::Gaussian => {
                let zm = tape.slice_cols(out, 0, m)?;
                let lv = tape.slice_cols(out, m, 2 * m)?;
                let lv = tape.clamp(lv, LOG_VAR_MIN, LOG_VAR_MAX);
                let rows: Vec<f64> = target.iter().flatten().copied().collect();
                let z = tape.leaf(Tensor::matrix(target.len(), m, rows)?);
                let diff = tape.sub(z, zm)?;
                let sq = tape.square(diff);
                let neg = tape.scale(lv, -1.0);
                let prec = tape.exp(neg);
                let maha = tape.mul(sq, prec)?;
                let s = tape.add(maha, lv)?;
                let s = tape.offset(s, (2.0 * std::f64::consts::PI).ln());
                let s = tape.scale(s, 0.5);
                Ok(tape.row_sum(s))
            }
            OutputKind::Categorical => {
                let idx = target
                    .iter()
                    .map(|z| z.iter().position(|&v| v == 1.0).ok_or_else(|| SepError::Invalid("categorical target is not one-hot".into())))
                    .collect::<Result<Vec<_>, _>>()?;
                let lp = tape.log_softmax(out);
                let g = tape.gather(lp, &idx)?;
                Ok(tape.scale(g, -1.0))
            }
        }
    }
}
