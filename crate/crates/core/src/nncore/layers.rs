use rand::Rng;
use serde::{Deserialize, Serialize};

use super::params::kaiming_uniform;
use super::{NnError, ParameterSet, Scalar, Tape, Tensor, Var};

/// One stage of a [`Sequential`] graph.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Layer {
    Dense { name: String, inputs: usize, outputs: usize },
    Conv1d { name: String, in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize },
    Relu,
    /// `x + body(x)`; the body must preserve shape.
    Residual { name: String, body: Vec<Layer> },
    /// `[n, c, len] -> [n, c]`.
    GlobalAvgPool,
}

impl Layer {
    pub fn dense(name: impl Into<String>, inputs: usize, outputs: usize) -> Self {
        Layer::Dense { name: name.into(), inputs, outputs }
    }

    pub fn conv1d(name: impl Into<String>, in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        Layer::Conv1d { name: name.into(), in_channels, out_channels, kernel, stride, padding }
    }

    fn label(&self) -> String {
        match self {
            Layer::Dense { name, .. } | Layer::Conv1d { name, .. } | Layer::Residual { name, .. } => name.clone(),
            Layer::Relu => "relu".into(),
            Layer::GlobalAvgPool => "global_avg_pool".into(),
        }
    }

    fn init<R: Rng + ?Sized>(&self, params: &mut ParameterSet<f32>, rng: &mut R) {
        match self {
            Layer::Dense { name, inputs, outputs } => {
                params.insert(format!("{name}.weight"), kaiming_uniform(&[*outputs, *inputs], *inputs, rng));
                params.insert(format!("{name}.bias"), Tensor::zeros(&[*outputs]));
            }
            Layer::Conv1d { name, in_channels, out_channels, kernel, .. } => {
                let fan_in = in_channels * kernel;
                params.insert(format!("{name}.weight"), kaiming_uniform(&[*out_channels, *in_channels, *kernel], fan_in, rng));
                params.insert(format!("{name}.bias"), Tensor::zeros(&[*out_channels]));
            }
            Layer::Residual { body, .. } => body.iter().for_each(|l| l.init(params, rng)),
            Layer::Relu | Layer::GlobalAvgPool => {}
        }
    }

    fn forward<T: Scalar>(&self, tape: &mut Tape<T>, params: &ParameterSet<T>, x: Var) -> Result<Var, NnError> {
        let out = match self {
            Layer::Dense { name, inputs, .. } => {
                let s = tape.value(x).shape();
                if s.len() != 2 || s[1] != *inputs {
                    return Err(NnError::Shape(format!("{name}: expected [n, {inputs}], got {s:?}")));
                }
                let w = tape.param(params, &format!("{name}.weight"))?;
                let b = tape.param(params, &format!("{name}.bias"))?;
                tape.dense(x, w, b)?
            }
            Layer::Conv1d { name, in_channels, stride, padding, .. } => {
                let s = tape.value(x).shape();
                if s.len() != 3 || s[1] != *in_channels {
                    return Err(NnError::Shape(format!("{name}: expected [n, {in_channels}, len], got {s:?}")));
                }
                let w = tape.param(params, &format!("{name}.weight"))?;
                let b = tape.param(params, &format!("{name}.bias"))?;
                tape.conv1d(x, w, b, *stride, *padding)?
            }
            Layer::Relu => tape.relu(x),
            Layer::Residual { name, body } => {
                let mut h = x;
                for l in body {
                    h = l.forward(tape, params, h)?;
                }
                if tape.value(h).shape() != tape.value(x).shape() {
                    return Err(NnError::Shape(format!("{name}: residual body changes shape")));
                }
                tape.add(x, h)?
            }
            Layer::GlobalAvgPool => tape.global_avg_pool(x)?,
        };
        if !tape.value(out).all_finite() {
            return Err(NnError::NonFinite { layer: self.label() });
        }
        Ok(out)
    }
}

/// Layers applied in order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sequential {
    pub layers: Vec<Layer>,
}

impl Sequential {
    pub fn new(layers: Vec<Layer>) -> Self {
        Sequential { layers }
    }

    /// Fan-in scaled weights, zero biases.
    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> ParameterSet<f32> {
        let mut params = ParameterSet::new();
        self.layers.iter().for_each(|l| l.init(&mut params, rng));
        params
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, params: &ParameterSet<T>, x: Var) -> Result<Var, NnError> {
        if !tape.value(x).all_finite() {
            return Err(NnError::NonFinite { layer: "input".into() });
        }
        let mut h = x;
        for l in &self.layers {
            h = l.forward(tape, params, h)?;
        }
        Ok(h)
    }
}

/// Loss applied to the output of a graph.
#[derive(Clone, Debug, PartialEq)]
pub enum LossHead {
    /// Sum of squared residuals over the batch size.
    SquaredError { target: Tensor<f32> },
    /// Mean softmax cross-entropy against class indices.
    SoftmaxCrossEntropy { targets: Vec<usize> },
}

impl LossHead {
    pub fn apply<T: Scalar>(&self, tape: &mut Tape<T>, output: Var) -> Result<Var, NnError> {
        let loss = match self {
            LossHead::SquaredError { target } => tape.squared_error(output, &target.cast())?,
            LossHead::SoftmaxCrossEntropy { targets } => tape.softmax_cross_entropy(output, targets)?,
        };
        if !tape.scalar(loss).is_finite() {
            return Err(NnError::NonFinite { layer: "loss".into() });
        }
        Ok(loss)
    }
}

/// A scalar function of a parameter set, evaluable at any precision.
pub trait Objective {
    fn loss<T: Scalar>(&self, tape: &mut Tape<T>, params: &ParameterSet<T>) -> Result<Var, NnError>;
}

/// A graph applied to a fixed input, scored by a loss head.
pub struct Supervised<'a> {
    pub graph: &'a Sequential,
    pub input: &'a Tensor<f32>,
    pub head: &'a LossHead,
}

impl Objective for Supervised<'_> {
    fn loss<T: Scalar>(&self, tape: &mut Tape<T>, params: &ParameterSet<T>) -> Result<Var, NnError> {
        let x = tape.leaf(self.input.cast());
        let y = self.graph.forward(tape, params, x)?;
        self.head.apply(tape, y)
    }
}

/// Evaluate `objective` and add its gradient into the accumulators of `params`.
pub fn backprop<T: Scalar, O: Objective>(objective: &O, params: &mut ParameterSet<T>) -> Result<T, NnError> {
    let mut tape = Tape::new();
    let loss = objective.loss(&mut tape, params)?;
    let grads = tape.backward(loss)?;
    tape.accumulate_param_grads(&grads, params)?;
    Ok(tape.scalar(loss))
}

/// Forward and backward pass of `graph` on `input`; gradients are added to
/// the accumulators in `params` (the caller clears them).
pub fn forward_backward(
    graph: &Sequential,
    params: &mut ParameterSet<f32>,
    input: &Tensor<f32>,
    head: &LossHead,
) -> Result<f32, NnError> {
    backprop(&Supervised { graph, input, head }, params)
}
