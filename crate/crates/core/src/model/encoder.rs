use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{LabeledFeatures, ModelError, FEATURE_DIM};
use crate::data::Window;
use crate::nncore::{Layer, NnError, ParameterSet, Scalar, Sequential, Tape, Tensor, Var};

/// Residual 1-D convolutional encoder shape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub in_channels: usize,
    pub stem_channels: usize,
    pub channels: usize,
    pub feature_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig { in_channels: 8, stem_channels: 32, channels: 64, feature_dim: FEATURE_DIM }
    }
}

fn residual(name: &str, c: usize) -> Layer {
    Layer::Residual {
        name: name.into(),
        body: vec![
            Layer::conv1d(format!("{name}.conv1"), c, c, 3, 1, 1),
            Layer::Relu,
            Layer::conv1d(format!("{name}.conv2"), c, c, 3, 1, 1),
        ],
    }
}

/// The encoder architecture; parameters live in a separate [`ParameterSet`]
/// under the `encoder.` prefix.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    pub config: EncoderConfig,
    graph: Sequential,
}

impl Encoder {
    pub fn new(config: EncoderConfig) -> Self {
        let (s, c) = (config.stem_channels, config.channels);
        let graph = Sequential::new(vec![
            Layer::conv1d("encoder.stem", config.in_channels, s, 7, 2, 3),
            Layer::Relu,
            residual("encoder.block1", s),
            Layer::Relu,
            Layer::conv1d("encoder.down1", s, c, 3, 2, 1),
            Layer::Relu,
            residual("encoder.block2", c),
            Layer::Relu,
            Layer::conv1d("encoder.down2", c, c, 3, 2, 1),
            Layer::Relu,
            residual("encoder.block3", c),
            Layer::Relu,
            Layer::GlobalAvgPool,
            Layer::dense("encoder.out", c, config.feature_dim),
        ]);
        Encoder { config, graph }
    }

    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> ParameterSet<f32> {
        self.graph.init_params(rng)
    }

    pub fn param_count(&self) -> usize {
        self.init_params(&mut crate::rng::stream(0, "param-count", &[])).num_scalars()
    }

    /// `[n, channels, len] -> [n, feature_dim]` on `tape`.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, params: &ParameterSet<T>, x: Var) -> Result<Var, NnError> {
        self.graph.forward(tape, params, x)
    }

    /// Encode windows in fixed-size chunks, preserving order.
    pub fn encode(&self, params: &ParameterSet<f32>, windows: &[&Window]) -> Result<LabeledFeatures, ModelError> {
        const CHUNK: usize = 64;
        let dim = self.config.feature_dim;
        let mut data = Vec::with_capacity(windows.len() * dim);
        for chunk in windows.chunks(CHUNK) {
            let mut tape = Tape::<f32>::new();
            let x = tape.leaf(windows_to_tensor(chunk, self.config.in_channels)?);
            let z = self.forward(&mut tape, params, x)?;
            data.extend_from_slice(tape.value(z).data());
        }
        let labels = windows.iter().map(|w| w.label).collect();
        LabeledFeatures::new(Tensor::new(vec![windows.len(), dim], data)?, labels)
    }
}

/// Stack windows into `[n, channels, len]`.
pub fn windows_to_tensor(windows: &[&Window], channels: usize) -> Result<Tensor<f32>, ModelError> {
    let Some(first) = windows.first() else {
        return Err(ModelError::Shape("empty window batch".into()));
    };
    let len = first.samples.len() / channels.max(1);
    let mut data = Vec::with_capacity(windows.len() * channels * len);
    for w in windows {
        if w.channels != channels || w.samples.len() != channels * len {
            return Err(ModelError::Shape(format!(
                "window with {} channels x {} samples, expected {channels} x {len}",
                w.channels,
                w.samples.len() / w.channels.max(1)
            )));
        }
        data.extend_from_slice(&w.samples);
    }
    Ok(Tensor::new(vec![windows.len(), channels, len], data)?)
}
