use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::graph::{Activation, Layer, ModuleGraph, NormKind};
use crate::error::{invalid, Error, Result};
use crate::tensor::{Init, PoolKind, Precision, Tensor};

/// Configuration of the default convolutional backbone.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub widths: Vec<usize>,
    pub norm: NormKind,
    pub feature_dim: usize,
    pub input_size: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig { in_channels: 3, widths: vec![16, 32, 64], norm: NormKind::Layer, feature_dim: 64, input_size: 32 }
    }
}

/// Seeded source of Kaiming-uniform tensors.
pub struct Initializer {
    rng: ChaCha8Rng,
}

impl Initializer {
    pub fn new(seed: u64) -> Self {
        Initializer { rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    /// Uniform in `±sqrt(6 / fan_in)`.
    pub fn kaiming(&mut self, shape: &[usize], fan_in: usize) -> Tensor {
        let bound = (6.0 / fan_in as f64).sqrt();
        Tensor::new(shape, Init::Uniform { lo: -bound, hi: bound, seed: self.rng.random() }).expect("non-empty shape")
    }

    pub fn zeros(&self, shape: &[usize]) -> Tensor {
        Tensor::new(shape, Init::Zeros).expect("non-empty shape")
    }
}

/// Builds the "TinyNet" backbone: per width `conv3x3 → norm → relu →
/// maxpool 2`, then global average pooling and a linear map to `feature_dim`.
///
/// ```
/// use pretext::nn::{build_backbone, BackboneConfig};
/// let net = build_backbone(&BackboneConfig::default(), 0).unwrap();
/// assert_eq!(net.output_shape(&[5, 3, 32, 32]).unwrap(), vec![5, 64]);
/// ```
pub fn build_backbone(cfg: &BackboneConfig, seed: u64) -> Result<ModuleGraph> {
    build_backbone_with(cfg, seed, Precision::Single)
}

pub fn build_backbone_with(cfg: &BackboneConfig, seed: u64, precision: Precision) -> Result<ModuleGraph> {
    if cfg.widths.is_empty() {
        return invalid("backbone needs at least one width");
    }
    if cfg.feature_dim < 1 || cfg.in_channels < 1 || cfg.widths.contains(&0) {
        return invalid("backbone dimensions must be positive");
    }
    let mut init = Initializer::new(seed);
    let mut g = ModuleGraph::new(precision);
    let mut c = cfg.in_channels;
    let mut size = cfg.input_size;
    for &w in &cfg.widths {
        g.conv2d(init.kaiming(&[w, c, 3, 3], c * 9), init.zeros(&[w]), 1, 1);
        g.norm(cfg.norm, w);
        g.act(Activation::Relu);
        // Pooling stops once the map is a single pixel.
        if size >= 2 {
            g.push(Layer::Pool { kind: PoolKind::Max, k: 2, stride: 2 });
            size /= 2;
        }
        c = w;
    }
    g.push(Layer::GlobalAvgPool);
    g.linear(init.kaiming(&[c, cfg.feature_dim], c), init.zeros(&[cfg.feature_dim]));
    g.set_feature_dim(cfg.feature_dim);
    Ok(g)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FinalActivation {
    #[default]
    None,
    Relu,
}

/// Linear layers of widths `dims` with ReLU between them.
///
/// ```
/// use pretext::nn::{build_mlp_head, FinalActivation};
/// let head = build_mlp_head(&[64, 128, 4], FinalActivation::None, 1).unwrap();
/// assert_eq!(head.feature_dim(), 4);
/// assert_eq!(head.layers().len(), 3);
/// ```
pub fn build_mlp_head(dims: &[usize], last: FinalActivation, seed: u64) -> Result<ModuleGraph> {
    build_mlp_head_with(dims, last, seed, Precision::Single)
}

pub fn build_mlp_head_with(dims: &[usize], last: FinalActivation, seed: u64, precision: Precision) -> Result<ModuleGraph> {
    if dims.len() < 2 {
        return invalid("an MLP head needs at least two widths");
    }
    if dims.contains(&0) {
        return invalid("MLP widths must be positive");
    }
    let mut init = Initializer::new(seed);
    let mut g = ModuleGraph::new(precision);
    for (i, pair) in dims.windows(2).enumerate() {
        g.linear(init.kaiming(&[pair[0], pair[1]], pair[0]), init.zeros(&[pair[1]]));
        let is_last = i + 2 == dims.len();
        if !is_last || last == FinalActivation::Relu {
            g.act(Activation::Relu);
        }
    }
    g.set_feature_dim(*dims.last().unwrap());
    Ok(g)
}

/// Output squashing for decoders and generators.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecoderOutput {
    #[default]
    Linear,
    Sigmoid,
    /// `(tanh(x) + 1) / 2`, landing in `[0, 1]`.
    TanhUnit,
}

/// Vector-to-image decoder: `linear → unflatten → (convT k4 s2 p1 → relu)*`,
/// each stage doubling resolution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub in_dim: usize,
    /// Channel widths of the stages; the last stage emits `out_channels`.
    pub widths: Vec<usize>,
    pub out_channels: usize,
    pub out_size: usize,
    pub output: DecoderOutput,
}

impl DecoderConfig {
    pub fn new(in_dim: usize, out_channels: usize, out_size: usize, output: DecoderOutput) -> Self {
        DecoderConfig { in_dim, widths: vec![64, 32, 16], out_channels, out_size, output }
    }
}

pub fn build_decoder(cfg: &DecoderConfig, seed: u64) -> Result<ModuleGraph> {
    build_decoder_with(cfg, seed, Precision::Single)
}

pub fn build_decoder_with(cfg: &DecoderConfig, seed: u64, precision: Precision) -> Result<ModuleGraph> {
    let stages = cfg.widths.len();
    if stages == 0 || cfg.in_dim == 0 || cfg.out_channels == 0 {
        return invalid("decoder needs at least one stage and positive widths");
    }
    let scale = 1usize << stages;
    if !cfg.out_size.is_multiple_of(scale) || cfg.out_size < scale {
        return Err(Error::Config(format!(
            "decoder output size {} is not a multiple of 2^{stages}",
            cfg.out_size
        )));
    }
    let s0 = cfg.out_size / scale;
    let c0 = cfg.widths[0];
    let mut init = Initializer::new(seed);
    let mut g = ModuleGraph::new(precision);
    g.linear(init.kaiming(&[cfg.in_dim, c0 * s0 * s0], cfg.in_dim), init.zeros(&[c0 * s0 * s0]));
    g.act(Activation::Relu);
    g.push(Layer::Unflatten { c: c0, h: s0, w: s0 });
    for i in 0..stages {
        let cin = cfg.widths[i];
        let last = i + 1 == stages;
        let cout = if last { cfg.out_channels } else { cfg.widths[i + 1] };
        g.conv_transpose2d(init.kaiming(&[cin, cout, 4, 4], cin * 4), init.zeros(&[cout]), 2, 1);
        if !last {
            g.act(Activation::Relu);
        }
    }
    match cfg.output {
        DecoderOutput::Linear => {}
        DecoderOutput::Sigmoid => {
            g.act(Activation::Sigmoid);
        }
        DecoderOutput::TanhUnit => {
            g.act(Activation::Tanh);
            g.push(Layer::Affine { scale: 0.5, shift: 0.5 });
        }
    }
    g.set_feature_dim(cfg.out_channels * cfg.out_size * cfg.out_size);
    Ok(g)
}
