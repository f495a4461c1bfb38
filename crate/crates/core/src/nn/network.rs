use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Activation, Loss};
use crate::error::{Error, Result};
use crate::linalg::{Matrix, Vector};

/// One dense layer: `h ↦ φ(W h)`. There is no bias term.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub weights: Matrix,
    pub activation: Activation,
}

/// Bias-free feed-forward network `x ↦ W_L φ(W_{L-1} φ(⋯ φ(W_0 x)))`.
///
/// Each layer owns its weight matrix and the activation applied right after
/// it; the last layer's activation is the identity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    layers: Vec<Layer>,
}

/// Intermediate values of one forward pass.
#[derive(Debug, Clone)]
pub struct Trace {
    /// Input to each layer; `inputs[0]` is `x`.
    pub inputs: Vec<Vector>,
    /// Pre-activations `W_i h_i`.
    pub pre: Vec<Vector>,
    pub output: Vector,
}

impl Network {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidArgument("a network needs at least one layer".into()));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[1].weights.cols() != pair[0].weights.rows() {
                return Err(Error::Dimension(format!(
                    "layer {} outputs {} values but layer {} expects {}",
                    i,
                    pair[0].weights.rows(),
                    i + 1,
                    pair[1].weights.cols()
                )));
            }
        }
        if layers.iter().any(|l| l.weights.is_empty()) {
            return Err(Error::Dimension("layer with an empty weight matrix".into()));
        }
        let last = layers.last().expect("nonempty");
        if last.activation != Activation::Identity {
            return Err(Error::InvalidArgument(format!(
                "the output layer must be linear, found {}",
                last.activation
            )));
        }
        Ok(Network { layers })
    }

    /// Builds a network from weight matrices, using `hidden` after every layer
    /// except the last.
    pub fn from_weights(weights: Vec<Matrix>, hidden: Activation) -> Result<Self> {
        let n = weights.len();
        let layers = weights
            .into_iter()
            .enumerate()
            .map(|(i, w)| Layer {
                weights: w,
                activation: if i + 1 == n { Activation::Identity } else { hidden },
            })
            .collect();
        Network::new(layers)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weights.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].weights.rows()
    }

    pub fn weights(&self) -> impl Iterator<Item = &Matrix> {
        self.layers.iter().map(|l| &l.weights)
    }

    /// Replaces the weights of layer `k`; shapes must match.
    pub fn with_layer_weights(&self, k: usize, weights: Matrix) -> Result<Network> {
        let old = &self
            .layers
            .get(k)
            .ok_or_else(|| Error::InvalidArgument(format!("no layer {k}")))?
            .weights;
        if old.rows() != weights.rows() || old.cols() != weights.cols() {
            return Err(Error::Dimension(format!(
                "layer {k} is {}x{}, replacement is {}x{}",
                old.rows(),
                old.cols(),
                weights.rows(),
                weights.cols()
            )));
        }
        let mut net = self.clone();
        net.layers[k].weights = weights;
        Ok(net)
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::Dimension(format!(
                "network expects {} inputs, got {}",
                self.input_dim(),
                x.len()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vector> {
        self.check_input(x)?;
        let mut h = Vector::from(x);
        for layer in &self.layers {
            let mut z = layer.weights.matvec(&h);
            if layer.activation != Activation::Identity {
                z.iter_mut().for_each(|v| *v = layer.activation.apply(*v));
            }
            h = z;
        }
        Ok(h)
    }

    pub fn trace(&self, x: &[f64]) -> Result<Trace> {
        self.check_input(x)?;
        let mut inputs = Vec::with_capacity(self.depth());
        let mut pre = Vec::with_capacity(self.depth());
        let mut h = Vector::from(x);
        for layer in &self.layers {
            let z = layer.weights.matvec(&h);
            let next: Vector = z.iter().map(|v| layer.activation.apply(*v)).collect::<Vec<_>>().into();
            inputs.push(h);
            pre.push(z);
            h = next;
        }
        Ok(Trace {
            inputs,
            pre,
            output: h,
        })
    }

    /// Index of the largest logit, ties to the lowest class.
    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        Ok(super::argmax(&self.forward(x)?))
    }

    pub fn loss(&self, loss: Loss, x: &[f64], label: usize) -> Result<f64> {
        let out = self.forward(x)?;
        check_label(label, out.dim())?;
        Ok(loss.value(&out, label))
    }

    /// Backpropagates an output-side gradient through the trace, returning the
    /// gradient with respect to the input and, when requested, accumulating
    /// `scale ×` the weight gradients into `weight_grads`.
    fn backward(
        &self,
        trace: &Trace,
        output_grad: Vector,
        mut weight_grads: Option<(&mut [Matrix], f64)>,
    ) -> Vector {
        let mut g = output_grad;
        for (i, layer) in self.layers.iter().enumerate().rev() {
            if layer.activation != Activation::Identity {
                for (gk, zk) in g.iter_mut().zip(trace.pre[i].iter()) {
                    *gk *= layer.activation.derivative(*zk);
                }
            }
            if let Some((grads, scale)) = weight_grads.as_mut() {
                let gw = &mut grads[i];
                let cols = gw.cols();
                let h = &trace.inputs[i];
                for (r, gr) in g.iter().enumerate() {
                    let f = gr * *scale;
                    if f == 0.0 {
                        continue;
                    }
                    let row = &mut gw.data_mut()[r * cols..(r + 1) * cols];
                    for (w, hv) in row.iter_mut().zip(h.iter()) {
                        *w += f * hv;
                    }
                }
            }
            g = layer.weights.matvec_t(&g);
        }
        g
    }

    /// `∇_x ℓ(net(x), y)` by reverse-mode accumulation.
    pub fn input_gradient(&self, loss: Loss, x: &[f64], label: usize) -> Result<Vector> {
        if !loss.is_differentiable() {
            return Err(Error::NotDifferentiable("zero_one"));
        }
        let trace = self.trace(x)?;
        check_label(label, trace.output.dim())?;
        let og = loss.gradient(&trace.output, label)?;
        Ok(self.backward(&trace, og, None))
    }

    /// Loss value and input gradient from a single forward pass.
    pub fn loss_and_input_gradient(
        &self,
        loss: Loss,
        x: &[f64],
        label: usize,
    ) -> Result<(f64, Vector)> {
        if !loss.is_differentiable() {
            return Err(Error::NotDifferentiable("zero_one"));
        }
        let trace = self.trace(x)?;
        check_label(label, trace.output.dim())?;
        let value = loss.value(&trace.output, label);
        let og = loss.gradient(&trace.output, label)?;
        Ok((value, self.backward(&trace, og, None)))
    }

    /// Per-layer gradients of the batch-mean loss, together with that mean.
    pub fn weight_gradients(
        &self,
        loss: Loss,
        batch: &[(&[f64], usize)],
    ) -> Result<(Vec<Matrix>, f64)> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        if !loss.is_differentiable() {
            return Err(Error::NotDifferentiable("zero_one"));
        }
        let mut grads: Vec<Matrix> = self
            .weights()
            .map(|w| Matrix::zeros(w.rows(), w.cols()))
            .collect();
        let scale = 1.0 / batch.len() as f64;
        let mut total = 0.0;
        for (x, y) in batch {
            let trace = self.trace(x)?;
            check_label(*y, trace.output.dim())?;
            total += loss.value(&trace.output, *y);
            let og = loss.gradient(&trace.output, *y)?;
            self.backward(&trace, og, Some((&mut grads, scale)));
        }
        Ok((grads, total * scale))
    }

    /// Jacobian of the output with respect to the input, `J[a][b] = ∂out_a/∂x_b`.
    pub fn input_jacobian(&self, x: &[f64]) -> Result<Matrix> {
        let trace = self.trace(x)?;
        let mut jac = Matrix::identity(self.input_dim());
        for (i, layer) in self.layers.iter().enumerate() {
            let mut next = layer.weights.matmul(&jac)?;
            if layer.activation != Activation::Identity {
                let cols = next.cols();
                for (r, z) in trace.pre[i].iter().enumerate() {
                    let d = layer.activation.derivative(*z);
                    next.data_mut()[r * cols..(r + 1) * cols]
                        .iter_mut()
                        .for_each(|v| *v *= d);
                }
            }
            jac = next;
        }
        Ok(jac)
    }
}

fn check_label(label: usize, classes: usize) -> Result<()> {
    if label >= classes {
        return Err(Error::Dimension(format!(
            "label {label} out of range for {classes} outputs"
        )));
    }
    Ok(())
}

/// Dense layer widths plus the hidden activation, written `d0-d1-…-dk:act`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Architecture {
    pub widths: Vec<usize>,
    pub hidden: Activation,
}

impl Architecture {
    pub fn new(widths: Vec<usize>, hidden: Activation) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "architecture needs at least two positive widths, got {widths:?}"
            )));
        }
        Ok(Architecture { widths, hidden })
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        self.widths[self.widths.len() - 1]
    }

    /// Weights drawn uniformly from `[−1/√fan_in, 1/√fan_in]`.
    pub fn init(&self, seed: u64) -> Network {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weights = self
            .widths
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = 1.0 / (fan_in as f64).sqrt();
                let data = (0..fan_in * fan_out)
                    .map(|_| rng.random_range(-bound..bound))
                    .collect();
                Matrix::new(fan_out, fan_in, data).expect("finite init")
            })
            .collect();
        Network::from_weights(weights, self.hidden).expect("consistent widths")
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let widths: Vec<String> = self.widths.iter().map(usize::to_string).collect();
        write!(f, "{}:{}", widths.join("-"), self.hidden)
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (dims, act) = s.split_once(':').unwrap_or((s, "tanh"));
        let widths = dims
            .split('-')
            .map(|d| {
                d.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::InvalidArgument(format!("bad width `{d}` in `{s}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        Architecture::new(widths, act.parse()?)
    }
}

impl TryFrom<String> for Architecture {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Architecture> for String {
    fn from(a: Architecture) -> String {
        a.to_string()
    }
}
