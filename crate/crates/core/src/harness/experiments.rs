use std::error::Error;
use std::time::Instant;

use nalgebra::DVector;

use super::{Experiment, MetricRecord, Params, Status};
use crate::control_sep::{
    belief_policy, belief_representation, brute_force_q, policy_return, reward_sufficiency_check, verify_separation, FinitePOMDP,
};
use crate::info::{
    compose_channels, kl_discrete, mi_identity_check, mutual_information, DiscreteChannel, DiscreteDistribution, DiscreteJoint,
};
use crate::lgss::{batch_posterior_oracle, filter, riccati_iterate, simulate, LgssModel};
use crate::nn::{Activation, Mlp, Tape, Tensor};
use crate::rng::{derive_seed, index, normals, simplex, stream, uniform, SimRng};
use crate::seprep::{
    dyn_ibl_loss, evaluate_vs_kalman, held_out_sequences, hmm_exact_reference, lgss_sequence, nstep_bound_check, train_filter,
    DynIbConfig, FiniteHMM, KalmanSeparator, SepFilterSpec,
};
use crate::static_ib::{
    accuracy, curve_csv, flatness_diagnostic, info_bound, make_nuisance_task, measure_invariance, quantization_slack,
    random_sufficient_encoder, stacked_bottleneck_experiment, task_cross_entropy, tc_beta_sweep, train_ib,
    train_weight_posterior, weight_kl_sweep, ConstructionRule, IblConfig, Quantization, StackLayer, WeightTrainConfig,
};

type Res<T> = Result<T, Box<dyn Error + Send + Sync>>;

pub(super) struct Output {
    pub records: Vec<MetricRecord>,
    pub artifacts: Vec<(String, String)>,
}

struct Recorder {
    experiment: &'static str,
    records: Vec<MetricRecord>,
    artifacts: Vec<(String, String)>,
    lap: Instant,
}

impl Recorder {
    fn new(experiment: Experiment) -> Self {
        Self { experiment: experiment.name(), records: Vec::new(), artifacts: Vec::new(), lap: Instant::now() }
    }

    fn push(&mut self, key: &str, value: f64, tolerance: Option<f64>, status: Status) {
        let seconds = self.lap.elapsed().as_secs_f64();
        self.lap = Instant::now();
        self.records.push(MetricRecord { experiment: self.experiment.into(), key: key.into(), value, tolerance, status, seconds });
    }

    /// `value <= tol`.
    fn at_most(&mut self, key: &str, value: f64, tol: f64) {
        self.push(key, value, Some(tol), if value <= tol { Status::Pass } else { Status::Fail });
    }

    /// `value >= tol`.
    fn at_least(&mut self, key: &str, value: f64, tol: f64) {
        self.push(key, value, Some(tol), if value >= tol { Status::Pass } else { Status::Fail });
    }

    fn report(&mut self, key: &str, value: f64) {
        self.push(key, value, None, Status::Report);
    }

    fn finish(self) -> Output {
        Output { records: self.records, artifacts: self.artifacts }
    }
}

pub(super) fn run(experiment: Experiment, p: &Params, seed: u64) -> Res<Output> {
    let mut rec = Recorder::new(experiment);
    match experiment {
        Experiment::Gradcheck => gradcheck(p, seed, &mut rec)?,
        Experiment::Info => info(p, seed, &mut rec)?,
        Experiment::Kalman => kalman(p, seed, &mut rec)?,
        Experiment::StaticIb => static_ib(p, seed, &mut rec)?,
        Experiment::Seprep => seprep(p, seed, &mut rec)?,
        Experiment::ControlSep => control_sep(p, seed, &mut rec)?,
        Experiment::All => return Err("all is not a single experiment".into()),
    }
    Ok(rec.finish())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn sample_std(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

fn random_mlp(rng: &mut SimRng) -> Res<Mlp> {
    let layers = 1 + index(rng, 3);
    let mut widths = vec![1 + index(rng, 5)];
    widths.extend((1..layers).map(|_| 2 + index(rng, 6)));
    widths.push(2 + index(rng, 4));
    let acts: Vec<Activation> = (0..layers)
        .map(|l| if l + 1 == layers { Activation::Identity } else { [Activation::Tanh, Activation::Relu, Activation::Identity][index(rng, 3)] })
        .collect();
    let mut net = Mlp::new(&widths, &acts, rng)?;
    // Random biases too, so no unit sits exactly on a ReLU kink.
    let flat: Vec<f64> = normals(rng, net.num_params()).into_iter().map(|v| 0.7 * v).collect();
    net.set_flat_params(&flat)?;
    Ok(net)
}

/// Mean cross-entropy by straight-line evaluation, independent of the tape.
fn direct_ce(net: &Mlp, inputs: &[Vec<f64>], labels: &[usize]) -> Res<f64> {
    let mut total = 0.0;
    for (x, &z) in inputs.iter().zip(labels) {
        let logits = net.eval(x)?;
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        total += m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln() - logits[z];
    }
    Ok(total / inputs.len() as f64)
}

fn gradcheck(p: &Params, seed: u64, rec: &mut Recorder) -> Res<()> {
    let mut rng = stream(seed, "nets");
    let h = p.gradcheck_step;
    // Relative error with a floor on the scale, so exactly-zero gradients of
    // dead units are scored by their absolute error.
    let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(1e-4);
    let (mut worst_w, mut worst_x, mut worst_abs) = (0.0f64, 0.0f64, 0.0f64);
    let mut count = 0usize;
    for _ in 0..p.gradcheck_nets {
        let mut net = random_mlp(&mut rng)?;
        let batch = 1 + index(&mut rng, 4);
        let d = net.input_dim();
        let inputs: Vec<Vec<f64>> = (0..batch).map(|_| normals(&mut rng, d)).collect();
        let labels: Vec<usize> = (0..batch).map(|_| index(&mut rng, net.output_dim())).collect();

        let mut tape = Tape::new();
        let bound = net.bind(&mut tape);
        let x = tape.leaf(Tensor::new(vec![batch, d], inputs.concat())?);
        let logits = bound.apply(&mut tape, x)?;
        let lp = tape.log_softmax(logits);
        let picked = tape.gather(lp, &labels)?;
        let m = tape.mean(picked);
        let loss = tape.scale(m, -1.0);
        let grads = tape.backward(loss)?;
        let analytic: Vec<f64> = bound.param_nodes().iter().flat_map(|&n| grads.get(n).data().to_vec()).collect();
        let input_grad = grads.get(x).data().to_vec();

        let w0 = net.flat_params();
        for j in 0..w0.len() {
            let mut w = w0.clone();
            w[j] = w0[j] + h;
            net.set_flat_params(&w)?;
            let up = direct_ce(&net, &inputs, &labels)?;
            w[j] = w0[j] - h;
            net.set_flat_params(&w)?;
            let down = direct_ce(&net, &inputs, &labels)?;
            let numeric = (up - down) / (2.0 * h);
            worst_w = worst_w.max(rel(analytic[j], numeric));
            worst_abs = worst_abs.max((analytic[j] - numeric).abs());
            count += 1;
        }
        net.set_flat_params(&w0)?;
        for (j, &a) in input_grad.iter().enumerate() {
            let (r, c) = (j / d, j % d);
            let mut shifted = inputs.clone();
            shifted[r][c] = inputs[r][c] + h;
            let up = direct_ce(&net, &shifted, &labels)?;
            shifted[r][c] = inputs[r][c] - h;
            let down = direct_ce(&net, &shifted, &labels)?;
            worst_x = worst_x.max(rel(a, (up - down) / (2.0 * h)));
        }
    }
    rec.report("parameters_checked", count as f64);
    rec.report("max_abs_error", worst_abs);
    rec.at_most("max_rel_error_weights", worst_w, p.gradcheck_tol);
    rec.at_most("max_rel_error_inputs", worst_x, p.gradcheck_tol);
    Ok(())
}

fn random_prior(rng: &mut SimRng, k: usize) -> Res<DiscreteDistribution> {
    let mut v = simplex(rng, k);
    // Occasionally drop a symbol to exercise zero-probability rows.
    if k > 2 && index(rng, 5) == 0 {
        v[index(rng, k)] = 0.0;
    }
    Ok(DiscreteDistribution::from_weights(&v)?)
}

fn plain_entropy(p: impl IntoIterator<Item = f64>) -> f64 {
    p.into_iter().filter(|&v| v > 0.0).map(|v| -v * v.ln()).sum()
}

fn info(p: &Params, seed: u64, rec: &mut Recorder) -> Res<()> {
    let mut rng = stream(seed, "mi");
    let (mut identity, mut oracle) = (0.0f64, 0.0f64);
    for _ in 0..p.info_instances {
        let (nx, ny) = (2 + index(&mut rng, 4), 2 + index(&mut rng, 4));
        let prior = random_prior(&mut rng, nx)?;
        let channel = DiscreteChannel::new((0..nx).map(|_| simplex(&mut rng, ny)).collect())?;
        let check = mi_identity_check(&prior, &channel)?;
        identity = identity.max((check.lhs - check.rhs).abs());
        // H(X) + H(Y) - H(X, Y) from hand-rolled sums.
        let px = prior.probs();
        let py: Vec<f64> = (0..ny).map(|j| (0..nx).map(|i| px[i] * channel.row(i)[j]).sum()).collect();
        let hxy = plain_entropy((0..nx).flat_map(|i| (0..ny).map(move |j| (i, j))).map(|(i, j)| px[i] * channel.row(i)[j]));
        let direct = plain_entropy(px.iter().copied()) + plain_entropy(py) - hxy;
        oracle = oracle.max((check.lhs - direct).abs());
    }
    rec.at_most("mi_identity_max_abs_err", identity, p.info_tol);
    rec.at_most("mi_vs_entropy_sum_max_abs_err", oracle, p.info_tol);

    let mut rng = stream(seed, "cross_entropy");
    let mut decomposition = 0.0f64;
    for _ in 0..p.info_instances {
        let (ny, nz) = (2 + index(&mut rng, 4), 2 + index(&mut rng, 4));
        let py = random_prior(&mut rng, ny)?;
        let pz: Vec<Vec<f64>> = (0..ny).map(|_| simplex(&mut rng, nz)).collect();
        let qz: Vec<Vec<f64>> = (0..ny).map(|_| simplex(&mut rng, nz)).collect();
        // H_{p,q}(z|y) = -sum p(y, z) ln q(z|y), summed directly.
        let lhs: f64 = (0..ny)
            .flat_map(|y| (0..nz).map(move |z| (y, z)))
            .map(|(y, z)| {
                let w = py.probs()[y] * pz[y][z];
                if w > 0.0 { -w * qz[y][z].ln() } else { 0.0 }
            })
            .sum();
        let table: Vec<f64> = (0..ny).flat_map(|y| pz[y].iter().map(|v| v * py.probs()[y]).collect::<Vec<_>>()).collect();
        let joint = DiscreteJoint::new(vec!["y".into(), "z".into()], vec![ny, nz], table)?;
        let mut rhs = joint.conditional_entropy(&["z"], &["y"])?;
        for y in 0..ny {
            if py.probs()[y] > 0.0 {
                rhs += py.probs()[y] * kl_discrete(&DiscreteDistribution::new(pz[y].clone())?, &DiscreteDistribution::new(qz[y].clone())?)?.nats;
            }
        }
        decomposition = decomposition.max((lhs - rhs).abs());
    }
    rec.at_most("ce_decomposition_max_abs_err", decomposition, p.info_tol);
    Ok(())
}

fn kalman(p: &Params, seed: u64, rec: &mut Recorder) -> Res<()> {
    let mut rng = stream(seed, "models");
    let (mut mean_err, mut cov_err, mut riccati_err) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..p.kalman_models {
        let n = 1 + index(&mut rng, p.kalman_max_dim);
        let m = 1 + index(&mut rng, p.kalman_max_dim);
        let c = index(&mut rng, 3);
        let model = LgssModel::random_stable(n, m, c, 0.95, &mut rng)?;
        let len = 1 + index(&mut rng, p.kalman_max_len);
        let controls: Vec<DVector<f64>> = (0..len).map(|_| DVector::from_vec(normals(&mut rng, c))).collect();
        let traj = simulate(&model, &controls, &mut rng)?;
        let states = filter(&model, &traj)?;
        for (t, s) in states.iter().enumerate() {
            let oracle = batch_posterior_oracle(&model, &traj, t)?;
            mean_err = mean_err.max((&s.mean - oracle.mean()).abs().max());
            cov_err = cov_err.max((&s.cov - oracle.cov()).abs().max());
        }
        let long = simulate(&model, &vec![model.zero_control(); p.riccati_len], &mut rng)?;
        let last = filter(&model, &long)?.pop().ok_or("empty filter output")?;
        let fixed = riccati_iterate(&model, &model.p0, 5 * p.riccati_len)?;
        riccati_err = riccati_err.max((&last.cov - &fixed.cov).abs().max());
    }
    rec.at_most("filter_vs_batch_mean_max_abs_err", mean_err, p.kalman_tol);
    rec.at_most("filter_vs_batch_cov_max_abs_err", cov_err, p.kalman_tol);
    rec.at_most("riccati_vs_filter_cov_max_abs_err", riccati_err, p.kalman_tol);
    Ok(())
}

fn static_ib(p: &Params, seed: u64, rec: &mut Recorder) -> Res<()> {
    let q = Quantization::default();

    // Invariance bound on sufficient encoders of random bijective tasks.
    let mut rng = stream(seed, "encoders");
    let (mut bound_violation, mut eps_low, mut eps_high, mut sufficiency) = (f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY, 0.0f64);
    let mut slack = 0.0f64;
    for i in 0..p.ib_encoders {
        let (nz, nn) = (2 + index(&mut rng, 3), 1 + index(&mut rng, 4));
        let task = make_nuisance_task(nz, nn, &ConstructionRule::BijectiveRandomPriors, derive_seed(seed, &format!("task{i}")))?;
        let enc = random_sufficient_encoder(&task, &mut rng)?;
        let r = measure_invariance(&enc, &task, &q)?;
        bound_violation = bound_violation.max(r.i_xn - (r.i_xy - r.i_yz));
        eps_low = eps_low.min(r.eps);
        eps_high = eps_high.max(r.eps - r.h_z_given_y);
        sufficiency = sufficiency.max((r.i_xz - r.i_yz).abs());
        if i < 5 {
            slack = slack.max(quantization_slack(&enc, &task, &q)?);
        }
    }
    rec.at_most("invariance_bound_max_violation", bound_violation, p.ib_slack);
    rec.at_least("eps_min", eps_low, -p.dpi_tol);
    rec.at_most("eps_minus_h_z_given_y_max", eps_high, p.ib_slack);
    rec.report("sufficiency_max_abs_gap", sufficiency);
    rec.report("quantization_refinement_slack", slack);

    // Data processing along composed discrete channels.
    let mut rng = stream(seed, "channels");
    let mut dpi = f64::NEG_INFINITY;
    for _ in 0..p.dpi_instances {
        let (ny, n1, n2) = (2 + index(&mut rng, 4), 2 + index(&mut rng, 4), 2 + index(&mut rng, 4));
        let prior = DiscreteDistribution::new(simplex(&mut rng, ny))?;
        let first = DiscreteChannel::new((0..ny).map(|_| simplex(&mut rng, n1)).collect())?;
        let second = DiscreteChannel::new((0..n1).map(|_| simplex(&mut rng, n2)).collect())?;
        let i1 = mutual_information(&first.joint(&prior)?, &["in"], &["out"], &[])?;
        let i2 = mutual_information(&compose_channels(&first, &second)?.joint(&prior)?, &["in"], &["out"], &[])?;
        dpi = dpi.max(i2 - i1);
    }
    rec.at_most("dpi_composed_max_increase", dpi, p.dpi_tol);

    // Stacked layers with injected noise: nuisance information cannot grow
    // while the task information stays intact.
    let mut rng = stream(seed, "stacks");
    let (mut nuisance_growth, mut lost) = (f64::NEG_INFINITY, 0.0f64);
    for i in 0..p.dpi_stacks {
        let task = make_nuisance_task(2 + index(&mut rng, 3), 2 + index(&mut rng, 3), &ConstructionRule::BijectiveRandomPriors, derive_seed(seed, &format!("stack{i}")))?;
        let enc = random_sufficient_encoder(&task, &mut rng)?;
        let sd0 = enc.posterior(0)?.std()[0];
        let layer = StackLayer { gain: 1.0, noise_std: uniform(&mut rng, 0.1, 0.5) * sd0 };
        let report = stacked_bottleneck_experiment(&task, &enc, &[layer], &q)?;
        let (a, b) = (report.layers[0], report.layers[1]);
        nuisance_growth = nuisance_growth.max(b.i_xn - a.i_xn);
        lost = lost.max((a.i_xz - b.i_xz).abs());
    }
    rec.at_most("stack_nuisance_max_increase", nuisance_growth, p.dpi_tol);
    rec.at_most("stack_task_info_max_loss", lost, 1e-9);

    // Endpoints of the trade-off.
    let task = make_nuisance_task(p.ib_z, p.ib_n, &ConstructionRule::Bijective, 0)?;
    let chance = 1.0 / p.ib_z as f64;
    let (mut acc0, mut acc_hi, mut info_hi) = (Vec::new(), Vec::new(), Vec::new());
    for s in 0..p.ib_seeds {
        for (beta, accs) in [(0.0, &mut acc0), (p.ib_beta_high, &mut acc_hi)] {
            let cfg = IblConfig { beta, steps: p.ib_steps, seed: derive_seed(seed, &format!("ib{s}")), ..IblConfig::default() };
            let trained = train_ib(&task, &cfg)?;
            let mut eval = stream(seed, &format!("acc{s}"));
            accs.push(accuracy(&trained.encoder, &trained.decoder, &task, cfg.eval_samples, &mut eval)?);
            if beta > 0.0 {
                info_hi.push(info_bound(&trained.encoder, &task)?);
            } else if s == 0 {
                rec.artifacts.push(("ib_beta0_curve.csv".into(), curve_csv(&trained.curve)));
            }
        }
    }
    rec.at_least("beta0_accuracy", mean(&acc0), p.ib_acc_min);
    rec.at_most("beta_high_info_bound", mean(&info_hi), p.ib_info_max);
    rec.at_most("beta_high_accuracy_minus_chance", (mean(&acc_hi) - chance).abs(), p.ib_chance_tol);

    // Report-only sweeps.
    let seeds: Vec<u64> = (0..p.ib_seeds as u64).map(|s| derive_seed(seed, &format!("sweep{s}"))).collect();
    let base = IblConfig { steps: p.sweep_steps, ..IblConfig::default() };
    for pt in tc_beta_sweep(&task, &p.sweep_betas, &seeds, &base)? {
        rec.report(&format!("tc_mean[beta={:?}]", pt.beta), pt.mean());
        rec.report(&format!("tc_std[beta={:?}]", pt.beta), pt.std());
    }
    let wbase = WeightTrainConfig { steps: p.sweep_steps, ..WeightTrainConfig::default() };
    for pt in weight_kl_sweep(&task, &p.sweep_betas, &seeds, &wbase)? {
        rec.report(&format!("weight_kl_mean[beta={:?}]", pt.beta), pt.mean());
        rec.report(&format!("weight_kl_std[beta={:?}]", pt.beta), pt.std());
    }

    // Flatness diagnostic on a trained two-layer classifier.
    let cfg = WeightTrainConfig { steps: p.flatness_steps, seed: derive_seed(seed, "flatness"), ..WeightTrainConfig::default() };
    let (posterior, _) = train_weight_posterior(&task, &cfg)?;
    let loss = |w: &[f64]| task_cross_entropy(&posterior.net_with(w).expect("weight count matches"), &task).unwrap_or(f64::NAN);
    let f = flatness_diagnostic(&loss, &posterior.mean, cfg.beta, posterior.kl());
    rec.report("flatness_info_estimate", f.info_estimate);
    rec.report("flatness_bound_rhs", f.bound_rhs);
    rec.report("flatness_hessian_trace", f.hessian_trace);
    rec.at_least("flatness_finite", if f.finite { 1.0 } else { 0.0 }, 1.0);
    // Quadratic model expanded at the trained weights, with known curvatures.
    let mut rng = stream(seed, "curvature");
    let curv: Vec<f64> = (0..posterior.mean.len()).map(|_| uniform(&mut rng, 0.1, 5.0)).collect();
    let centre = posterior.mean.clone();
    let quadratic = |w: &[f64]| 0.5 * w.iter().zip(&centre).zip(&curv).map(|((x, c), l)| l * (x - c).powi(2)).sum::<f64>();
    let probe = flatness_diagnostic(&quadratic, &posterior.mean, cfg.beta, 0.0);
    rec.at_most("quadratic_trace_abs_err", (probe.hessian_trace - curv.iter().sum::<f64>()).abs(), p.trace_tol);
    Ok(())
}

fn scalar_lgss() -> Res<LgssModel> {
    // Stationary start: P0 = q / (1 - a^2).
    Ok(LgssModel::scalar(0.9, 1.0, 0.1, 0.1, 0.0, 0.1 / 0.19)?)
}

fn seprep(p: &Params, seed: u64, rec: &mut Recorder) -> Res<()> {
    // Exact n-step bound on enumerable HMMs.
    let mut rng = stream(seed, "hmms");
    let (mut below, mut exact_slack, mut marginal_gap) = (f64::INFINITY, 0.0f64, 0.0f64);
    for i in 0..p.hmm_instances {
        let hmm = FiniteHMM::random(2 + index(&mut rng, 2), 2 + index(&mut rng, 2), &mut rng)?;
        let horizon = 2 + index(&mut rng, p.hmm_horizon.max(2) - 1);
        let lead = p.hmm_lead;
        let reference = hmm_exact_reference(&hmm, horizon, lead)?;
        let exact = nstep_bound_check(&hmm, horizon, lead, &|h, k| hmm.task_predictive(h, k))?;
        let marginal = nstep_bound_check(&hmm, horizon, lead, &|h, k| hmm.task_marginal(h.len(), k))?;
        let blend = nstep_bound_check(&hmm, horizon, lead, &|h, k| {
            let o = hmm.num_obs() as f64;
            hmm.task_predictive(h, k).iter().map(|v| 0.6 * v + 0.4 / o).collect()
        })?;
        let table_seed = derive_seed(seed, &format!("table{i}"));
        let random = nstep_bound_check(&hmm, horizon, lead, &|h, k| simplex(&mut stream(table_seed, &format!("{h:?}/{k}")), hmm.num_obs()))?;
        for c in [&exact, &marginal, &blend, &random] {
            below = below.min(c.slack);
        }
        exact_slack = exact_slack.max(exact.slack.abs());
        let info = reference.history_information.ok_or("history information unavailable")?;
        marginal_gap = marginal_gap.max((marginal.slack - info).abs());
    }
    rec.at_least("nstep_min_slack", below, -1e-12);
    rec.at_most("nstep_exact_posterior_slack", exact_slack, p.hmm_tol);
    rec.at_most("nstep_marginal_slack_vs_history_info", marginal_gap, p.hmm_tol);

    // Hand-built Kalman filter as a separating representation.
    let sys = scalar_lgss()?;
    let eval_seed = derive_seed(seed, "embed");
    let mut rng = stream(seed, "embed_models");
    let mut worst = 0.0f64;
    for model in [sys.clone(), LgssModel::random_stable(3, 2, 1, 0.9, &mut rng)?] {
        let e = evaluate_vs_kalman(&KalmanSeparator::new(model.clone()), &model, p.embed_len, p.embed_trajectories, eval_seed, 1)?;
        worst = e.rows.iter().fold(worst, |w, r| w.max((r.nll_learned - r.nll_kalman).abs()));
    }
    rec.at_most("kalman_separator_nll_max_abs_err", worst, p.embed_tol);

    // Learned filters on the scalar system, swept over beta.
    let eval_seed = derive_seed(seed, "heldout");
    let held = held_out_sequences(&sys, p.sep_eval_len, p.sep_eval_trajectories, derive_seed(seed, "ce_heldout"))?;
    let spec = SepFilterSpec::gaussian(1, 0, 1);
    let mut betas = p.sep_betas.clone();
    if !betas.contains(&p.sep_beta) {
        betas.push(p.sep_beta);
    }
    let mut ce_by_beta = Vec::new();
    let (mut nll, mut kal, mut kl) = (Vec::new(), Vec::new(), Vec::new());
    for &beta in &betas {
        let mut ces = Vec::new();
        for s in 0..p.sep_seeds {
            let cfg = DynIbConfig { beta, steps: p.sep_steps, seed: derive_seed(seed, &format!("filter{s}")), ..DynIbConfig::default() };
            let mut source = |r: &mut SimRng| lgss_sequence(&sys, cfg.train_len, r);
            let trained = train_filter(&mut source, spec.clone(), &cfg)?;
            let loss = dyn_ibl_loss(&trained.model, &held, beta, 0, p.sep_samples, &mut stream(seed, &format!("ce{s}")))?;
            ces.push(loss.ce_term);
            if beta == p.sep_beta {
                let e = evaluate_vs_kalman(&trained.model, &sys, p.sep_eval_len, p.sep_eval_trajectories, eval_seed, p.sep_samples)?;
                nll.push(e.nll_learned);
                kal.push(e.nll_kalman);
                kl.push(e.mean_kl);
                if s == 0 {
                    rec.artifacts.push(("filter_curve.csv".into(), trained.curve_csv()));
                    rec.artifacts.push(("filter_model.json".into(), trained.model.to_json()));
                    rec.artifacts.push(("kalman_eval.csv".into(), e.to_csv()));
                }
            }
        }
        if p.sep_betas.contains(&beta) {
            ce_by_beta.push((beta, ces));
        }
    }
    let kalman_nll = mean(&kal);
    rec.report("kalman_nll", kalman_nll);
    rec.report("learned_nll", mean(&nll));
    rec.at_most("learned_nll_rel_gap", (mean(&nll) - kalman_nll).abs() / kalman_nll.abs(), p.sep_rel_tol);
    rec.at_most("learned_mean_kl", mean(&kl), p.sep_kl_max);

    ce_by_beta.sort_by(|a, b| b.0.total_cmp(&a.0));
    for (beta, ces) in &ce_by_beta {
        rec.report(&format!("ce_mean[beta={beta:?}]"), mean(ces));
        rec.report(&format!("ce_std[beta={beta:?}]"), sample_std(ces));
    }
    for w in ce_by_beta.windows(2) {
        let ((b0, c0), (b1, c1)) = (&w[0], &w[1]);
        let band = 2.0 * sample_std(c0).max(sample_std(c1));
        rec.at_most(&format!("ce_increase[beta={b0:?}->{b1:?}]"), mean(c1) - mean(c0), band);
    }
    Ok(())
}

fn control_sep(p: &Params, seed: u64, rec: &mut Recorder) -> Res<()> {
    let mut rng = stream(seed, "pomdps");
    let mut instances = Vec::with_capacity(p.pomdp_instances + 1);
    for i in 0..p.pomdp_instances {
        let (s, a, o) = (2 + index(&mut rng, 3), 2 + index(&mut rng, 2), 2 + index(&mut rng, 2));
        let h = 2 + index(&mut rng, 4);
        instances.push(FinitePOMDP::random(s, a, o, h, i % 2 == 1, &mut rng)?);
    }
    instances.push(FinitePOMDP::belief_collision(4));
    let (mut spread, mut policy_gap, mut reconstruction) = (0.0f64, 0.0f64, 0.0f64);
    let mut shared = 0usize;
    let mut collision_shared = 0usize;
    for (i, pomdp) in instances.iter().enumerate() {
        let tree = brute_force_q(pomdp)?;
        let report = verify_separation(&tree, p.pomdp_tol, p.pomdp_tol);
        spread = spread.max(report.max_q_spread);
        shared += report.shared_groups;
        if i == instances.len() - 1 {
            collision_shared = report.shared_groups;
        }
        let policy = belief_policy(&tree, p.pomdp_tol);
        let ret = policy_return(pomdp, &|d, b| policy.action(d, b))?;
        policy_gap = policy_gap.max((ret - tree.optimal_return()).abs());
        reconstruction = reconstruction.max(reward_sufficiency_check(pomdp, &belief_representation(pomdp))?.max_dev);
    }
    rec.report("instances", instances.len() as f64);
    rec.report("shared_belief_groups", shared as f64);
    rec.at_least("collision_shared_groups", collision_shared as f64, 1.0);
    rec.at_most("max_q_spread", spread, p.pomdp_tol);
    rec.at_most("belief_policy_return_gap", policy_gap, p.pomdp_tol);
    rec.at_most("reward_sufficiency_q_max_dev", reconstruction, p.pomdp_tol);
    Ok(())
}
