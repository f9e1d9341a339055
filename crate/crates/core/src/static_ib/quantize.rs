//! Exact information measurement of Gaussian encoders by quantising `x`.

use super::{DiagGaussian, IbError, NuisanceTask, StochasticEncoder};
use crate::info::{mutual_information, DiscreteJoint};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quantization {
    /// Cell width.
    pub step: f64,
    /// Half-width of the gridded range, in aggregate standard deviations.
    pub sigmas: f64,
    /// Refuse grids with more cells than this.
    pub max_cells: usize,
}

impl Default for Quantization {
    fn default() -> Self {
        Self { step: 0.05, sigmas: 5.0, max_cells: 2_000_000 }
    }
}

impl Quantization {
    pub fn refined(&self) -> Self {
        Self { step: self.step / 2.0, max_cells: self.max_cells * 4, ..*self }
    }
}

/// Uniform grid on one axis; the two edge cells extend to infinity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid {
    pub lo: f64,
    pub step: f64,
    pub cells: usize,
}

impl Grid {
    fn covering(mean: f64, sd: f64, q: &Quantization) -> Self {
        let half = (q.sigmas * sd).max(q.step);
        let cells = ((2.0 * half / q.step).ceil() as usize).max(2);
        Self { lo: mean - half, step: q.step, cells }
    }

    /// Boundary `k` for `k = 1..cells`; boundaries 0 and `cells` are infinite.
    fn boundary(&self, k: usize) -> f64 {
        if k == 0 {
            f64::NEG_INFINITY
        } else if k >= self.cells {
            f64::INFINITY
        } else {
            self.lo + k as f64 * self.step
        }
    }

    fn center(&self, k: usize) -> f64 {
        self.lo + (k as f64 + 0.5) * self.step
    }

    fn cell_of(&self, x: f64) -> usize {
        let k = ((x - self.lo) / self.step).floor();
        if k < 0.0 {
            0
        } else {
            (k as usize).min(self.cells - 1)
        }
    }

    /// Mass of `N(mean, sd^2)` in every cell; a Dirac point mass if `sd == 0`.
    pub fn masses(&self, mean: f64, sd: f64) -> Vec<f64> {
        if sd == 0.0 {
            let mut out = vec![0.0; self.cells];
            out[self.cell_of(mean)] = 1.0;
            return out;
        }
        let scale = sd * std::f64::consts::SQRT_2;
        // Tails evaluated on the far side of the mean keep tiny masses accurate.
        let upper = |b: f64| 0.5 * libm::erfc((b - mean) / scale);
        let lower = |b: f64| 0.5 * libm::erfc((mean - b) / scale);
        (0..self.cells)
            .map(|k| {
                let (a, b) = (self.boundary(k), self.boundary(k + 1));
                if a >= mean {
                    upper(a) - upper(b)
                } else if b <= mean {
                    lower(b) - lower(a)
                } else {
                    1.0 - lower(a) - upper(b)
                }
            })
            .collect()
    }
}

/// Quantised channel `y -> x` for product-form posteriors: `per_dim[y][d]`
/// holds the cell masses of coordinate `d`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedChannel {
    pub grids: Vec<Grid>,
    pub per_dim: Vec<Vec<Vec<f64>>>,
}

fn aggregate_moments(posteriors: &[DiagGaussian], weights: &[f64], d: usize) -> (f64, f64) {
    let mean: f64 = posteriors.iter().zip(weights).map(|(g, w)| w * g.mean[d]).sum();
    let second: f64 = posteriors.iter().zip(weights).map(|(g, w)| w * (g.mean[d].powi(2) + (2.0 * g.log_std[d]).exp())).sum();
    (mean, (second - mean * mean).max(0.0).sqrt())
}

impl QuantizedChannel {
    pub fn from_posteriors(posteriors: &[DiagGaussian], weights: &[f64], q: &Quantization) -> Result<Self, IbError> {
        let dim = posteriors.first().map(|g| g.mean.len()).unwrap_or(0);
        let grids: Vec<Grid> = (0..dim)
            .map(|d| {
                let (m, s) = aggregate_moments(posteriors, weights, d);
                Grid::covering(m, s, q)
            })
            .collect();
        let total: f64 = grids.iter().map(|g| g.cells as f64).product();
        if total > q.max_cells as f64 {
            return Err(IbError::TooManyCells(total as usize));
        }
        let per_dim = posteriors
            .iter()
            .map(|g| (0..dim).map(|d| grids[d].masses(g.mean[d], g.log_std[d].exp())).collect())
            .collect();
        Ok(Self { grids, per_dim })
    }

    pub fn from_encoder(encoder: &StochasticEncoder, task: &NuisanceTask, q: &Quantization) -> Result<Self, IbError> {
        Self::from_posteriors(&encoder.posteriors()?, &task.y_probs(), q)
    }

    pub fn cells(&self) -> usize {
        self.grids.iter().map(|g| g.cells).product()
    }

    /// Full row `p(x-cell | y)`, row-major over coordinates.
    pub fn row(&self, y: usize) -> Vec<f64> {
        let mut row = vec![1.0];
        for masses in &self.per_dim[y] {
            row = row.iter().flat_map(|&a| masses.iter().map(move |&b| a * b)).collect();
        }
        row
    }

    /// Applies `x' = gain x + N(0, noise^2)` coordinatewise, cell by cell from
    /// the cell centres, and requantises on a fresh grid.
    pub fn propagate(&self, layer: &StackLayer, weights: &[f64], q: &Quantization) -> Result<Self, IbError> {
        let mut grids = Vec::with_capacity(self.grids.len());
        let mut kernels = Vec::with_capacity(self.grids.len());
        for (d, g) in self.grids.iter().enumerate() {
            let (mut m, mut s2) = (0.0, 0.0);
            // Moments of the quantised aggregate, mapped through the layer.
            let agg: Vec<f64> = (0..g.cells).map(|k| self.per_dim.iter().zip(weights).map(|(r, w)| w * r[d][k]).sum()).collect();
            for (k, p) in agg.iter().enumerate() {
                m += p * g.center(k);
                s2 += p * g.center(k).powi(2);
            }
            let var = (s2 - m * m).max(0.0) * layer.gain * layer.gain + layer.noise_std * layer.noise_std;
            let next = if layer.gain == 1.0 && layer.noise_std == 0.0 { *g } else { Grid::covering(layer.gain * m, var.sqrt(), q) };
            let kernel: Vec<Vec<f64>> = (0..g.cells).map(|k| next.masses(layer.gain * g.center(k), layer.noise_std)).collect();
            grids.push(next);
            kernels.push(kernel);
        }
        let per_dim = self
            .per_dim
            .iter()
            .map(|row| {
                row.iter()
                    .zip(&kernels)
                    .zip(&grids)
                    .map(|((masses, kernel), next)| {
                        let mut out = vec![0.0; next.cells];
                        for (k, &p) in masses.iter().enumerate() {
                            if p == 0.0 {
                                continue;
                            }
                            for (o, &w) in out.iter_mut().zip(&kernel[k]) {
                                *o += p * w;
                            }
                        }
                        out
                    })
                    .collect()
            })
            .collect();
        Ok(Self { grids, per_dim })
    }

    /// Exact joint over axes `z`, `n`, `x` induced by the task.
    pub fn joint_with_task(&self, task: &NuisanceTask) -> Result<DiscreteJoint, IbError> {
        let cells = self.cells();
        let pairs = task.pair_probs();
        let rows: Vec<Vec<f64>> = (0..task.y_size()).map(|y| self.row(y)).collect();
        let mut probs = Vec::with_capacity(pairs.len() * cells);
        for z in 0..task.z_size() {
            for n in 0..task.n_size() {
                let p = pairs[z * task.n_size() + n];
                probs.extend(rows[task.observe(z, n)].iter().map(|r| p * r));
            }
        }
        Ok(DiscreteJoint::new(vec!["z".into(), "n".into(), "x".into()], vec![task.z_size(), task.n_size(), cells], probs)?)
    }
}

/// All quantities in nats, by exact enumeration over `(z, n, y)` and quantised `x`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InvarianceReport {
    pub i_xy: f64,
    pub i_xz: f64,
    pub i_yz: f64,
    pub i_xn: f64,
    pub i_xz_given_n: f64,
    pub h_z_given_y: f64,
    /// `I(x;z|n) - I(y;z)`
    pub eps: f64,
}

impl InvarianceReport {
    /// `I(x;y) - I(y;z) - I(x;n)`; non-negative when the invariance bound holds.
    pub fn bound_margin(&self) -> f64 {
        self.i_xy - self.i_yz - self.i_xn
    }

    pub fn bound_holds(&self, tol: f64) -> bool {
        self.i_xn <= self.i_xy - self.i_yz + tol
    }

    pub fn bracket_holds(&self, floor: f64, tol: f64) -> bool {
        self.eps >= floor && self.eps <= self.h_z_given_y + tol
    }

    fn max_abs_diff(&self, other: &Self) -> f64 {
        [
            self.i_xy - other.i_xy,
            self.i_xz - other.i_xz,
            self.i_xn - other.i_xn,
            self.i_xz_given_n - other.i_xz_given_n,
        ]
        .iter()
        .fold(0.0f64, |m, d| m.max(d.abs()))
    }
}

pub fn report_from_joint(joint: &DiscreteJoint, task: &NuisanceTask) -> Result<InvarianceReport, IbError> {
    let tj = task.joint();
    let i_yz = mutual_information(&tj, &["y"], &["z"], &[])?;
    let i_xz_given_n = mutual_information(joint, &["x"], &["z"], &["n"])?;
    Ok(InvarianceReport {
        // x depends on (z, n) only through y = f(z, n), so I(x;y) = I(x;z,n).
        i_xy: mutual_information(joint, &["x"], &["z", "n"], &[])?,
        i_xz: mutual_information(joint, &["x"], &["z"], &[])?,
        i_yz,
        i_xn: mutual_information(joint, &["x"], &["n"], &[])?,
        i_xz_given_n,
        h_z_given_y: tj.conditional_entropy(&["z"], &["y"])?.max(0.0),
        eps: i_xz_given_n - i_yz,
    })
}

pub fn measure_invariance(encoder: &StochasticEncoder, task: &NuisanceTask, q: &Quantization) -> Result<InvarianceReport, IbError> {
    if encoder.input_dim() != task.y_size() {
        return Err(IbError::Invalid(format!("encoder takes {} inputs, task has {} observations", encoder.input_dim(), task.y_size())));
    }
    let channel = QuantizedChannel::from_encoder(encoder, task, q)?;
    report_from_joint(&channel.joint_with_task(task)?, task)
}

/// Largest change of any reported quantity when the grid step is halved.
pub fn quantization_slack(encoder: &StochasticEncoder, task: &NuisanceTask, q: &Quantization) -> Result<f64, IbError> {
    let coarse = measure_invariance(encoder, task, q)?;
    let fine = measure_invariance(encoder, task, &q.refined())?;
    Ok(coarse.max_abs_diff(&fine))
}

/// One link `x_{k+1} = gain x_k + N(0, noise_std^2)` of a stacked chain.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StackLayer {
    pub gain: f64,
    pub noise_std: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerReport {
    pub layer: usize,
    pub i_xy: f64,
    pub i_xn: f64,
    pub i_xz: f64,
    /// Bayes-optimal accuracy of predicting `z` from the quantised layer.
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StackReport {
    pub layers: Vec<LayerReport>,
    /// `I(x_{k+1};y) <= I(x_k;y) + 1e-12` for every link.
    pub dpi_holds: bool,
}

fn bayes_accuracy(joint: &DiscreteJoint) -> Result<f64, IbError> {
    let zx = joint.marginal(&["x", "z"])?;
    let nz = zx.dims()[1];
    Ok(zx.probs().chunks(nz).map(|c| c.iter().cloned().fold(0.0, f64::max)).sum())
}

/// Builds `y -> x_1 -> x_2 -> ...` with `x_1` from the encoder and each later
/// layer from `layers`, and measures every layer exactly.
pub fn stacked_bottleneck_experiment(
    task: &NuisanceTask,
    encoder: &StochasticEncoder,
    layers: &[StackLayer],
    q: &Quantization,
) -> Result<StackReport, IbError> {
    if layers.is_empty() {
        return Err(IbError::Invalid("a stack needs at least two layers".into()));
    }
    let weights = task.y_probs();
    let mut channel = QuantizedChannel::from_encoder(encoder, task, q)?;
    let mut reports = Vec::with_capacity(layers.len() + 1);
    for k in 0..=layers.len() {
        if k > 0 {
            channel = channel.propagate(&layers[k - 1], &weights, q)?;
        }
        let joint = channel.joint_with_task(task)?;
        reports.push(LayerReport {
            layer: k + 1,
            i_xy: mutual_information(&joint, &["x"], &["z", "n"], &[])?,
            i_xn: mutual_information(&joint, &["x"], &["n"], &[])?,
            i_xz: mutual_information(&joint, &["x"], &["z"], &[])?,
            accuracy: bayes_accuracy(&joint)?,
        });
    }
    let dpi_holds = reports.windows(2).all(|w| w[1].i_xy <= w[0].i_xy + 1e-12);
    Ok(StackReport { layers: reports, dpi_holds })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::info::{compose_channels, DiscreteChannel};
    use crate::rng::seeded;
    use crate::static_ib::{make_nuisance_task, ConstructionRule};

    fn task(nz: usize, nn: usize) -> NuisanceTask {
        make_nuisance_task(nz, nn, &ConstructionRule::Bijective, 0).unwrap()
    }

    #[test]
    fn cell_masses_sum_to_one_and_keep_far_tails() {
        let g = Grid { lo: -1.0, step: 0.05, cells: 40 };
        let m = g.masses(0.3, 0.2);
        assert!((m.iter().sum::<f64>() - 1.0).abs() < 1e-14);
        let far = g.masses(-0.9, 0.01);
        // 30 sd away from the mean: tiny but representable.
        assert!(far[8] > 0.0 && far[8] < 1e-150);
    }

    #[test]
    fn constant_encoder_carries_no_information() {
        let t = task(2, 2);
        let enc = StochasticEncoder::from_table(&vec![DiagGaussian { mean: vec![0.3], log_std: vec![-1.0] }; 4]).unwrap();
        let r = measure_invariance(&enc, &t, &Quantization::default()).unwrap();
        assert!(r.i_xy.abs() < 1e-12 && r.i_xn.abs() < 1e-12);
    }

    #[test]
    fn constant_encoder_breaks_the_bound_without_sufficiency() {
        // The invariance bound needs a sufficient x: a constant x has
        // I(x;n) = 0 but I(x;y) - I(y;z) = -H(z) < 0.
        let t = task(2, 2);
        let enc = StochasticEncoder::from_table(&vec![DiagGaussian { mean: vec![0.0], log_std: vec![0.0] }; 4]).unwrap();
        let r = measure_invariance(&enc, &t, &Quantization::default()).unwrap();
        assert!(!r.bound_holds(0.02));
        assert!((r.eps + 2f64.ln()).abs() < 1e-12);
        // The identity I(x;n) = I(x;y) - I(x;z|n) still holds.
        assert!((r.i_xn - (r.i_xy - r.i_xz_given_n)).abs() < 1e-12);
    }

    #[test]
    fn deterministic_encoder_saturates_the_bound() {
        let t = task(2, 2);
        let table: Vec<DiagGaussian> =
            (0..4).map(|y| DiagGaussian { mean: vec![y as f64 * 2.0 - 3.0], log_std: vec![-6.0] }).collect();
        let enc = StochasticEncoder::from_table(&table).unwrap();
        let r = measure_invariance(&enc, &t, &Quantization::default()).unwrap();
        let ln2 = 2f64.ln();
        assert!((r.i_xn - ln2).abs() < 1e-12);
        assert!(r.eps.abs() < 1e-12);
        assert!(r.bound_margin().abs() < 1e-12);
    }

    #[test]
    fn stack_with_identity_layer_keeps_information() {
        let t = task(2, 2);
        let table: Vec<DiagGaussian> = (0..4).map(|y| DiagGaussian { mean: vec![y as f64 - 1.5], log_std: vec![-1.0] }).collect();
        let enc = StochasticEncoder::from_table(&table).unwrap();
        let q = Quantization::default();
        let same = stacked_bottleneck_experiment(&t, &enc, &[StackLayer { gain: 1.0, noise_std: 0.0 }], &q).unwrap();
        assert_eq!(same.layers[0].i_xy, same.layers[1].i_xy);
        let noisy = stacked_bottleneck_experiment(&t, &enc, &[StackLayer { gain: 1.0, noise_std: 0.5 }], &q).unwrap();
        assert!(noisy.dpi_holds);
        assert!(noisy.layers[1].i_xy < noisy.layers[0].i_xy);
        assert!(noisy.layers[1].i_xn <= noisy.layers[0].i_xn);
    }

    #[test]
    fn one_dimensional_propagation_equals_channel_composition() {
        let t = task(2, 2);
        let table: Vec<DiagGaussian> =
            (0..4).map(|y| DiagGaussian { mean: vec![0.4 * y as f64], log_std: vec![-1.5 + 0.2 * y as f64] }).collect();
        let q = Quantization::default();
        let c1 = QuantizedChannel::from_posteriors(&table, &t.y_probs(), &q).unwrap();
        let layer = StackLayer { gain: 0.7, noise_std: 0.3 };
        let c2 = c1.propagate(&layer, &t.y_probs(), &q).unwrap();
        let first = DiscreteChannel::new((0..4).map(|y| c1.row(y)).collect()).unwrap();
        let g = c1.grids[0];
        let kernel = DiscreteChannel::new((0..g.cells).map(|k| c2.grids[0].masses(0.7 * g.center(k), 0.3)).collect()).unwrap();
        let composed = compose_channels(&first, &kernel).unwrap();
        for y in 0..4 {
            let diff = composed.row(y).iter().zip(c2.row(y)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(diff < 1e-14);
        }
    }

    #[test]
    fn refinement_slack_is_small_for_smooth_encoders() {
        let t = task(2, 2);
        let mut rng = seeded(3);
        let enc = StochasticEncoder::new(4, 2, 8, &mut rng).unwrap();
        let slack = quantization_slack(&enc, &t, &Quantization::default()).unwrap();
        assert!(slack < 0.02, "{slack}");
    }
}
