use rand::Rng;

use crate::error::{Error, Result};
use crate::numkernel::{Gradients, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Relu,
}

/// Fully connected layer `x W + b` with `W: in x out`, `b: 1 x out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Feedforward network with a hidden activation after every layer but the
/// last; the output layer is linear.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
    pub activation: Activation,
}

impl Mlp {
    /// Glorot-uniform weights, zero biases. `sizes` lists layer widths
    /// including input and output.
    pub fn new<R: Rng + ?Sized>(sizes: &[usize], activation: Activation, rng: &mut R) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs input and output sizes");
        let layers = sizes
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let data = (0..fan_in * fan_out)
                    .map(|_| rng.random_range(-limit..limit))
                    .collect();
                Dense {
                    weight: Tensor::matrix(fan_in, fan_out, data).expect("positive sizes"),
                    bias: Tensor::zeros(&[1, fan_out]),
                }
            })
            .collect();
        Self { layers, activation }
    }

    pub fn zeros(sizes: &[usize], activation: Activation) -> Self {
        let layers = sizes
            .windows(2)
            .map(|w| Dense {
                weight: Tensor::zeros(&[w[0], w[1]]),
                bias: Tensor::zeros(&[1, w[1]]),
            })
            .collect();
        Self { layers, activation }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty").weight.cols()
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    pub fn bind<'t>(&self, tape: &'t Tape) -> BoundMlp<'t> {
        BoundMlp {
            vars: self.params().into_iter().map(|p| tape.leaf(p.clone())).collect(),
            activation: self.activation,
        }
    }

    /// Forward pass outside any training graph.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        if x.cols() != self.input_dim() {
            return Err(Error::Shape {
                op: "mlp_input",
                lhs: x.shape().to_vec(),
                rhs: self.layers[0].weight.shape().to_vec(),
            });
        }
        let mut h = x.clone();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = h.matmul(&layer.weight)?;
            let c = h.cols();
            for row in h.data_mut().chunks_mut(c) {
                for (v, b) in row.iter_mut().zip(layer.bias.data()) {
                    *v += b;
                }
            }
            if i < last {
                h = match self.activation {
                    Activation::Tanh => h.map(f64::tanh),
                    Activation::Relu => h.map(|v| v.max(0.0)),
                };
            }
        }
        Ok(h)
    }
}

/// An [`Mlp`] whose parameters are leaves on a tape.
pub struct BoundMlp<'t> {
    vars: Vec<Var<'t>>,
    activation: Activation,
}

impl<'t> BoundMlp<'t> {
    pub fn forward(&self, x: Var<'t>) -> Result<Var<'t>> {
        let n_layers = self.vars.len() / 2;
        let mut h = x;
        for i in 0..n_layers {
            h = h.matmul(self.vars[2 * i])?.add_row(self.vars[2 * i + 1])?;
            if i + 1 < n_layers {
                h = match self.activation {
                    Activation::Tanh => h.tanh(),
                    Activation::Relu => h.relu(),
                };
            }
        }
        Ok(h)
    }

    pub fn vars(&self) -> &[Var<'t>] {
        &self.vars
    }

    /// Gradients in the same order as [`Mlp::params`].
    pub fn grads(&self, g: &Gradients) -> Vec<Tensor> {
        self.vars.iter().map(|v| g.wrt(*v)).collect()
    }
}
