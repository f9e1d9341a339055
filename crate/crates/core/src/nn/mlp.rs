use serde::{Deserialize, Serialize};

use super::{softmax_slice, NnError, NodeId, Tape, Tensor};
use crate::rng::{uniform, SimRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
    Softmax,
}

impl Activation {
    fn apply_value(self, row: &mut [f64]) {
        match self {
            Activation::Identity => {}
            Activation::Relu => row.iter_mut().for_each(|v| *v = v.max(0.0)),
            Activation::Tanh => row.iter_mut().for_each(|v| *v = v.tanh()),
            Activation::Softmax => {
                let s = softmax_slice(row);
                row.copy_from_slice(&s);
            }
        }
    }

    fn apply_node(self, tape: &mut Tape, x: NodeId) -> NodeId {
        match self {
            Activation::Identity => x,
            Activation::Relu => tape.relu(x),
            Activation::Tanh => tape.tanh(x),
            Activation::Softmax => tape.softmax(x),
        }
    }
}

/// One dense layer: `activation(x W + b)` with `W` of shape `[d_in, d_out]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub weight: Tensor,
    pub bias: Tensor,
    pub activation: Activation,
}

impl Layer {
    pub fn d_in(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn d_out(&self) -> usize {
        self.weight.shape()[1]
    }
}

/// Feedforward network `phi_K(W_K ... phi_1(W_1 y))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    layers: Vec<Layer>,
}

/// An [`Mlp`] whose parameters live on a tape.
#[derive(Debug, Clone)]
pub struct BoundMlp {
    layers: Vec<(NodeId, NodeId, Activation)>,
}

impl Mlp {
    pub fn from_layers(layers: Vec<Layer>) -> Result<Self, NnError> {
        if layers.is_empty() {
            return Err(NnError::Empty("network without layers".into()));
        }
        for (k, layer) in layers.iter().enumerate() {
            if layer.weight.shape().len() != 2 || layer.bias.len() != layer.d_out() {
                return Err(NnError::Shape(format!("layer {k}: weight {:?}, bias {:?}", layer.weight.shape(), layer.bias.shape())));
            }
            if k > 0 && layers[k - 1].d_out() != layer.d_in() {
                return Err(NnError::Shape(format!("layer {k} expects {} inputs, previous emits {}", layer.d_in(), layers[k - 1].d_out())));
            }
            if layer.activation == Activation::Softmax && k + 1 != layers.len() {
                return Err(NnError::Invalid(format!("softmax on hidden layer {k}")));
            }
        }
        Ok(Self { layers })
    }

    /// Glorot-uniform weights in `±sqrt(6/(d_in+d_out))`, zero biases.
    pub fn new(widths: &[usize], activations: &[Activation], rng: &mut SimRng) -> Result<Self, NnError> {
        Self::build(widths, activations, |d_in, d_out| {
            let bound = (6.0 / (d_in + d_out) as f64).sqrt();
            (0..d_in * d_out).map(|_| uniform(rng, -bound, bound)).collect()
        })
    }

    pub fn zeros(widths: &[usize], activations: &[Activation]) -> Result<Self, NnError> {
        Self::build(widths, activations, |d_in, d_out| vec![0.0; d_in * d_out])
    }

    fn build(
        widths: &[usize],
        activations: &[Activation],
        mut init: impl FnMut(usize, usize) -> Vec<f64>,
    ) -> Result<Self, NnError> {
        if widths.len() < 2 || activations.len() + 1 != widths.len() {
            return Err(NnError::Shape(format!("{} widths for {} activations", widths.len(), activations.len())));
        }
        let mut layers = Vec::with_capacity(activations.len());
        for (k, &act) in activations.iter().enumerate() {
            let (d_in, d_out) = (widths[k], widths[k + 1]);
            layers.push(Layer {
                weight: Tensor::new(vec![d_in, d_out], init(d_in, d_out))?,
                bias: Tensor::new(vec![d_out], vec![0.0; d_out])?,
                activation: act,
            });
        }
        Self::from_layers(layers)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].d_in()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].d_out()
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_dim()];
        w.extend(self.layers.iter().map(Layer::d_out));
        w
    }

    pub fn activations(&self) -> Vec<Activation> {
        self.layers.iter().map(|l| l.activation).collect()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Parameters in binding order `W1, b1, W2, b2, ...`.
    pub fn params(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    pub fn named_params_mut(&mut self, prefix: &str) -> Vec<(String, &mut Tensor)> {
        self.layers
            .iter_mut()
            .enumerate()
            .flat_map(|(k, l)| {
                [(format!("{prefix}W{}", k + 1), &mut l.weight), (format!("{prefix}b{}", k + 1), &mut l.bias)]
            })
            .collect()
    }

    pub fn flat_params(&self) -> Vec<f64> {
        self.params().into_iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<(), NnError> {
        if flat.len() != self.num_params() {
            return Err(NnError::Shape(format!("{} values for {} parameters", flat.len(), self.num_params())));
        }
        let mut offset = 0;
        for layer in &mut self.layers {
            for t in [&mut layer.weight, &mut layer.bias] {
                let n = t.len();
                t.data_mut().copy_from_slice(&flat[offset..offset + n]);
                offset += n;
            }
        }
        Ok(())
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundMlp {
        BoundMlp {
            layers: self
                .layers
                .iter()
                .map(|l| (tape.leaf(l.weight.clone()), tape.leaf(l.bias.clone()), l.activation))
                .collect(),
        }
    }

    /// Records the forward pass of `input` (one row or a batch of rows).
    pub fn forward(&self, tape: &mut Tape, input: &Tensor) -> Result<(BoundMlp, NodeId), NnError> {
        if input.dims2().1 != self.input_dim() {
            return Err(NnError::Shape(format!("input width {} for network expecting {}", input.dims2().1, self.input_dim())));
        }
        let bound = self.bind(tape);
        let (r, c) = input.dims2();
        let x = tape.leaf(Tensor::from_parts(vec![r, c], input.data().to_vec()));
        let out = bound.apply(tape, x)?;
        Ok((bound, out))
    }

    /// Straight-line evaluation of one input row, no tape.
    pub fn eval(&self, input: &[f64]) -> Result<Vec<f64>, NnError> {
        if input.len() != self.input_dim() {
            return Err(NnError::Shape(format!("input width {} for network expecting {}", input.len(), self.input_dim())));
        }
        let mut x = input.to_vec();
        for layer in &self.layers {
            let (d_in, d_out) = (layer.d_in(), layer.d_out());
            let w = layer.weight.data();
            let mut next = layer.bias.data().to_vec();
            for (i, &xi) in x.iter().enumerate().take(d_in) {
                for j in 0..d_out {
                    next[j] += xi * w[i * d_out + j];
                }
            }
            layer.activation.apply_value(&mut next);
            x = next;
        }
        Ok(x)
    }
}

impl BoundMlp {
    /// Builds a bound network from existing nodes, e.g. sampled weights.
    pub fn from_nodes(layers: Vec<(NodeId, NodeId, Activation)>) -> Self {
        Self { layers }
    }

    pub fn param_nodes(&self) -> Vec<NodeId> {
        self.layers.iter().flat_map(|&(w, b, _)| [w, b]).collect()
    }

    pub fn apply(&self, tape: &mut Tape, x: NodeId) -> Result<NodeId, NnError> {
        let mut h = x;
        for &(w, b, act) in &self.layers {
            let z = tape.matmul(h, w)?;
            let z = tape.add_bias(z, b)?;
            h = act.apply_node(tape, z);
        }
        Ok(h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn identity_network_passes_input_through() {
        let layer = Layer {
            weight: Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
            bias: Tensor::vector(vec![0.0, 0.0]),
            activation: Activation::Identity,
        };
        let mlp = Mlp::from_layers(vec![layer]).unwrap();
        let mut tape = Tape::new();
        let (_, out) = mlp.forward(&mut tape, &Tensor::vector(vec![1.0, 2.0])).unwrap();
        assert_eq!(tape.value(out).data(), &[1.0, 2.0]);
    }

    #[test]
    fn zero_relu_network_outputs_zero() {
        let mlp = Mlp::zeros(&[3, 4, 2], &[Activation::Relu, Activation::Relu]).unwrap();
        assert_eq!(mlp.eval(&[5.0, -3.0, 1.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn tape_forward_matches_straight_line_evaluation() {
        let mut rng = seeded(11);
        let mlp = Mlp::new(&[4, 6, 3], &[Activation::Tanh, Activation::Softmax], &mut rng).unwrap();
        let rows = vec![vec![0.1, -0.4, 2.0, 0.3], vec![1.0, 1.0, -1.0, 0.0]];
        let mut tape = Tape::new();
        let (_, out) = mlp.forward(&mut tape, &Tensor::from_rows(&rows).unwrap()).unwrap();
        for (i, row) in rows.iter().enumerate() {
            let direct = mlp.eval(row).unwrap();
            for j in 0..3 {
                assert!((tape.value(out).get2(i, j) - direct[j]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn dimension_checks() {
        let mut rng = seeded(1);
        let mlp = Mlp::new(&[2, 3], &[Activation::Relu], &mut rng).unwrap();
        let mut tape = Tape::new();
        assert!(mlp.forward(&mut tape, &Tensor::vector(vec![1.0, 2.0, 3.0])).is_err());
        assert!(Mlp::new(&[2, 3, 2], &[Activation::Softmax, Activation::Relu], &mut rng).is_err());
    }

    #[test]
    fn glorot_bounds_and_flat_roundtrip() {
        let mut rng = seeded(5);
        let mut mlp = Mlp::new(&[10, 6], &[Activation::Identity], &mut rng).unwrap();
        let bound = (6.0f64 / 16.0).sqrt();
        assert!(mlp.layers()[0].weight.data().iter().all(|w| w.abs() <= bound));
        let flat: Vec<f64> = (0..mlp.num_params()).map(|i| i as f64).collect();
        mlp.set_flat_params(&flat).unwrap();
        assert_eq!(mlp.flat_params(), flat);
    }
}
