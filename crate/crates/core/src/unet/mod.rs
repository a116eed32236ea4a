//! Residual U-Net: topology, parameters, reference primitives, the fast
//! inference engine, fp16 quantization and the weight file format.
//!
//! Tensors are `[freq][time][channel]`. Pooling and upsampling act on the
//! frequency axis only, so the time axis keeps its 32 frames end to end.
//! Encoder level `i` has `F0·2^i` filters; each decoder level upsamples,
//! concatenates the matching encoder output and runs a residual block; a 1×1
//! convolution produces the single-channel magnitude estimate.

pub mod engine;
pub(crate) mod graph;
mod io;
pub mod ops;
mod quant;
mod tensor;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub use engine::InferenceEngine;
pub(crate) use graph::build_graph;
pub use graph::{activation_pattern, forward, forward_linear, GraphBuilder, LayerRef};
pub use io::{load_weights, parse_weights, read_weights, save_weights, write_weights, MAGIC};
pub use quant::{dequantize, f16_round, quantize_fp16, QuantReport, FP16_MAX};
pub use tensor::Tensor3;

use crate::error::{invalid, Result};

/// Input channels: microphone magnitude (channel 0) and far-end magnitude
/// (channel 1).
pub const INPUT_CHANNELS: usize = 2;

/// Floating point type the reference primitives and training run on.
pub trait Scalar:
    num_traits::Float + Default + Send + Sync + std::fmt::Debug + std::iter::Sum + 'static
{
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ResidualConfig {
    /// Entry conv, `N` stacked convs, identity shortcut from the entry conv.
    Conf1,
    /// As `Conf1` with a linear 3×3 conv on the shortcut.
    Conf2,
}

impl ResidualConfig {
    pub fn code(self) -> u32 {
        match self {
            Self::Conf1 => 1,
            Self::Conf2 => 2,
        }
    }

    pub fn from_code(code: u32) -> Option<Self> {
        match code {
            1 => Some(Self::Conf1),
            2 => Some(Self::Conf2),
            _ => None,
        }
    }
}

impl std::fmt::Display for ResidualConfig {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Conf1 => f.write_str("conf1"),
            Self::Conf2 => f.write_str("conf2"),
        }
    }
}

impl std::str::FromStr for ResidualConfig {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "conf1" | "1" => Ok(Self::Conf1),
            "conf2" | "2" => Ok(Self::Conf2),
            _ => Err(invalid(format!("unknown residual config {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NetTopology {
    pub num_encoders: usize,
    pub num_decoders: usize,
    pub base_filters: usize,
    pub residual: ResidualConfig,
    /// Stacked 3×3 convolutions inside each residual block.
    pub depth: usize,
}

impl NetTopology {
    /// 4 encoders, 3 decoders, 16 base filters, Conf1, two stacked convs.
    pub fn paper() -> Self {
        Self {
            num_encoders: 4,
            num_decoders: 3,
            base_filters: 16,
            residual: ResidualConfig::Conf1,
            depth: 2,
        }
    }

    pub fn new(
        num_encoders: usize,
        base_filters: usize,
        residual: ResidualConfig,
        depth: usize,
    ) -> Result<Self> {
        let t = Self {
            num_encoders,
            num_decoders: num_encoders.saturating_sub(1),
            base_filters,
            residual,
            depth,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_encoders == 0 || self.num_encoders > 8 {
            return Err(invalid(format!(
                "{} encoders is out of range 1..=8",
                self.num_encoders
            )));
        }
        if self.num_decoders + 1 != self.num_encoders {
            return Err(invalid(format!(
                "{} decoders for {} encoders; decoders must be encoders - 1",
                self.num_decoders, self.num_encoders
            )));
        }
        if self.base_filters == 0 {
            return Err(invalid("base filter count must be positive"));
        }
        if self.depth == 0 {
            return Err(invalid("residual depth must be at least 1"));
        }
        Ok(())
    }

    pub fn filters(&self, level: usize) -> usize {
        self.base_filters << level
    }

    /// Frequency sizes must survive `num_encoders - 1` halvings.
    pub fn check_geometry(&self, freq: usize, time: usize) -> Result<()> {
        let div = 1usize << (self.num_encoders - 1);
        if freq == 0 || time == 0 || !freq.is_multiple_of(div) {
            return Err(invalid(format!(
                "input {freq}x{time} incompatible with {} encoders (freq must be a positive multiple of {div})",
                self.num_encoders
            )));
        }
        Ok(())
    }

    /// Layer shapes in the canonical order used by [`Network::layers`] and
    /// the weight file.
    pub fn layer_shapes(&self) -> Vec<LayerRef> {
        let mut shapes = graph::ShapeCollector::default();
        build_graph(self, &mut shapes, ()).expect("shape collection cannot fail");
        shapes.layers
    }

    pub fn param_count(&self) -> usize {
        self.layer_shapes().iter().map(LayerRef::param_count).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LayerKind {
    Conv3x3,
    Conv1x1,
    /// Transposed convolution, kernel 2×1, stride 2 along frequency.
    UpConv2x1,
}

impl LayerKind {
    /// Kernel taps; weights are stored `[tap][in][out]`.
    pub fn taps(self) -> usize {
        match self {
            Self::Conv3x3 => 9,
            Self::Conv1x1 => 1,
            Self::UpConv2x1 => 2,
        }
    }

    pub fn code(self) -> u8 {
        match self {
            Self::Conv3x3 => 0,
            Self::Conv1x1 => 1,
            Self::UpConv2x1 => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Linear,
    Relu,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer<T> {
    pub kind: LayerKind,
    pub in_ch: usize,
    pub out_ch: usize,
    /// `[tap][in][out]`
    pub weights: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> Layer<T> {
    pub fn zeros(kind: LayerKind, in_ch: usize, out_ch: usize) -> Self {
        Self {
            kind,
            in_ch,
            out_ch,
            weights: vec![T::zero(); kind.taps() * in_ch * out_ch],
            bias: vec![T::zero(); out_ch],
        }
    }

    #[inline]
    pub fn weight(&self, tap: usize, ci: usize, co: usize) -> T {
        self.weights[(tap * self.in_ch + ci) * self.out_ch + co]
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    pub fn cast<U: Scalar>(&self) -> Layer<U> {
        Layer {
            kind: self.kind,
            in_ch: self.in_ch,
            out_ch: self.out_ch,
            weights: self
                .weights
                .iter()
                .map(|w| U::from_f64(w.as_f64()))
                .collect(),
            bias: self.bias.iter().map(|b| U::from_f64(b.as_f64())).collect(),
        }
    }
}

/// Network parameters over scalar type `T`, layers in canonical order.
#[derive(Debug, Clone, PartialEq)]
pub struct Network<T> {
    topology: NetTopology,
    layers: Vec<Layer<T>>,
}

impl<T: Scalar> Network<T> {
    pub fn zeros(topology: NetTopology) -> Result<Self> {
        topology.validate()?;
        let layers = topology
            .layer_shapes()
            .iter()
            .map(|l| Layer::zeros(l.kind, l.in_ch, l.out_ch))
            .collect();
        Ok(Self { topology, layers })
    }

    /// He-normal weights for ReLU layers, LeCun-normal for linear ones, zero
    /// biases.
    pub fn init(topology: NetTopology, seed: u64) -> Result<Self> {
        let mut net = Self::zeros(topology)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (layer, shape) in net.layers.iter_mut().zip(topology.layer_shapes()) {
            let fan_in = (layer.kind.taps() * layer.in_ch) as f64;
            let gain = if shape.activation == Activation::Relu {
                2.0
            } else {
                1.0
            };
            let normal = Normal::new(0.0, (gain / fan_in).sqrt()).expect("positive std");
            for w in layer.weights.iter_mut() {
                *w = T::from_f64(normal.sample(&mut rng));
            }
        }
        Ok(net)
    }

    /// Weights whose (clamped or linear) output equals input channel 0 for
    /// non-negative inputs, used to check the pipeline around the network.
    ///
    /// Only the top path carries signal: the first encoder block and the last
    /// decoder block pass one channel through their centre taps, every other
    /// layer is zero, and the head reads that channel back out.
    pub fn identity(topology: NetTopology) -> Result<Self> {
        let mut net = Self::zeros(topology)?;
        let block = 1 + topology.depth + usize::from(topology.residual == ResidualConfig::Conf2);
        let head = net.layers.len() - 1;
        let centre = LayerKind::Conv3x3.taps() / 2;
        let f0 = topology.base_filters;
        let mut pass = |i: usize, tap: usize, ci: usize| {
            let l = &mut net.layers[i];
            let idx = (tap * l.in_ch + ci) * l.out_ch;
            l.weights[idx] = T::one();
        };
        // Encoder level 0 entry, then the decoder level 0 entry whose input is
        // [upsampled | skip] with the skip's channel 0 at index f0.
        let conf2 = topology.residual == ResidualConfig::Conf2;
        pass(0, centre, 0);
        if conf2 {
            pass(block - 1, centre, 0);
        }
        if topology.num_decoders > 0 {
            pass(head - block, centre, f0);
            if conf2 {
                pass(head - 1, centre, 0);
            }
        }
        pass(head, 0, 0);
        Ok(net)
    }

    pub fn from_layers(topology: NetTopology, layers: Vec<Layer<T>>) -> Result<Self> {
        topology.validate()?;
        let shapes = topology.layer_shapes();
        if shapes.len() != layers.len() {
            return Err(invalid(format!(
                "topology needs {} layers, got {}",
                shapes.len(),
                layers.len()
            )));
        }
        for (i, (s, l)) in shapes.iter().zip(&layers).enumerate() {
            if s.kind != l.kind
                || s.in_ch != l.in_ch
                || s.out_ch != l.out_ch
                || l.weights.len() != s.kind.taps() * s.in_ch * s.out_ch
                || l.bias.len() != s.out_ch
            {
                return Err(invalid(format!("layer {i} does not match the topology")));
            }
        }
        Ok(Self { topology, layers })
    }

    pub fn topology(&self) -> &NetTopology {
        &self.topology
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer<T>] {
        &mut self.layers
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    pub fn params(&self) -> impl Iterator<Item = &T> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(l.bias.iter()))
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut T> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weights.iter_mut().chain(l.bias.iter_mut()))
    }

    pub fn all_finite(&self) -> bool {
        self.params().all(|p| p.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> Network<U> {
        Network {
            topology: self.topology,
            layers: self.layers.iter().map(Layer::cast).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Precision {
    Fp32,
    Fp16,
}

impl Precision {
    pub fn tag(self) -> u8 {
        match self {
            Self::Fp32 => 0,
            Self::Fp16 => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Self::Fp32),
            1 => Some(Self::Fp16),
            _ => None,
        }
    }

    pub fn bytes_per_value(self) -> usize {
        match self {
            Self::Fp32 => 4,
            Self::Fp16 => 2,
        }
    }
}

impl std::fmt::Display for Precision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Fp32 => "fp32",
            Self::Fp16 => "fp16",
        })
    }
}

impl std::str::FromStr for Precision {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fp32" | "f32" => Ok(Self::Fp32),
            "fp16" | "f16" => Ok(Self::Fp16),
            _ => Err(invalid(format!("unknown precision {s:?}"))),
        }
    }
}

/// Deployable weights: fp32 values plus a storage precision tag. Fp16-tagged
/// weights hold values that are exactly representable in half precision.
#[derive(Debug, Clone, PartialEq)]
pub struct NetWeights {
    pub network: Network<f32>,
    pub precision: Precision,
}

impl NetWeights {
    pub fn new(network: Network<f32>) -> Self {
        Self {
            network,
            precision: Precision::Fp32,
        }
    }

    pub fn topology(&self) -> &NetTopology {
        self.network.topology()
    }

    pub fn stored_bytes(&self) -> usize {
        self.network.param_count() * self.precision.bytes_per_value()
    }
}
