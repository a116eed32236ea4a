//! One description of the network wiring, replayed by several builders:
//! shape collection, the reference forward pass, the training tape and the
//! fast engine's plan compiler.

use crate::error::{invalid, Result};

use super::{ops, Activation, LayerKind, NetTopology, Network, Scalar, Tensor3, INPUT_CHANNELS};

/// A parameterised layer as seen by the graph walk.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerRef {
    /// Position in the canonical layer order.
    pub index: usize,
    pub kind: LayerKind,
    pub in_ch: usize,
    pub out_ch: usize,
    pub activation: Activation,
}

impl LayerRef {
    pub fn param_count(&self) -> usize {
        self.kind.taps() * self.in_ch * self.out_ch + self.out_ch
    }
}

pub trait GraphBuilder {
    type Node: Clone;

    /// 3×3 or 1×1 same-padded convolution.
    fn conv(&mut self, x: &Self::Node, layer: LayerRef) -> Result<Self::Node>;
    fn pool(&mut self, x: &Self::Node) -> Result<Self::Node>;
    fn upsample(&mut self, x: &Self::Node, layer: LayerRef) -> Result<Self::Node>;
    fn add(&mut self, a: &Self::Node, b: &Self::Node) -> Result<Self::Node>;
    fn concat(&mut self, a: &Self::Node, b: &Self::Node) -> Result<Self::Node>;
}

struct Counter(usize);

impl Counter {
    fn next(
        &mut self,
        kind: LayerKind,
        in_ch: usize,
        out_ch: usize,
        activation: Activation,
    ) -> LayerRef {
        let index = self.0;
        self.0 += 1;
        LayerRef {
            index,
            kind,
            in_ch,
            out_ch,
            activation,
        }
    }
}

fn residual<B: GraphBuilder>(
    topo: &NetTopology,
    b: &mut B,
    ids: &mut Counter,
    x: &B::Node,
    in_ch: usize,
    filters: usize,
) -> Result<B::Node> {
    use Activation::*;
    let a = b.conv(x, ids.next(LayerKind::Conv3x3, in_ch, filters, Relu))?;
    let mut h = a.clone();
    for _ in 0..topo.depth {
        h = b.conv(&h, ids.next(LayerKind::Conv3x3, filters, filters, Relu))?;
    }
    let shortcut = match topo.residual {
        super::ResidualConfig::Conf1 => a,
        super::ResidualConfig::Conf2 => {
            b.conv(&a, ids.next(LayerKind::Conv3x3, filters, filters, Linear))?
        }
    };
    b.add(&shortcut, &h)
}

/// Walks the topology from `input`, returning the node of the linear 1×1
/// head. Layer indices follow: per encoder level the block's entry conv,
/// its stacked convs and (Conf2) the shortcut conv; per decoder level the
/// upsampling layer then the block; finally the head.
pub(crate) fn build_graph<B: GraphBuilder>(
    topo: &NetTopology,
    b: &mut B,
    input: B::Node,
) -> Result<B::Node> {
    topo.validate()?;
    let mut ids = Counter(0);
    let mut skips = Vec::with_capacity(topo.num_encoders);
    let mut x = input;
    let mut ch = INPUT_CHANNELS;
    for level in 0..topo.num_encoders {
        if level > 0 {
            x = b.pool(&x)?;
        }
        let f = topo.filters(level);
        x = residual(topo, b, &mut ids, &x, ch, f)?;
        ch = f;
        skips.push(x.clone());
    }
    for level in (0..topo.num_decoders).rev() {
        let f = topo.filters(level);
        let up = b.upsample(
            &x,
            ids.next(LayerKind::UpConv2x1, ch, f, Activation::Linear),
        )?;
        let cat = b.concat(&up, &skips[level])?;
        x = residual(topo, b, &mut ids, &cat, 2 * f, f)?;
        ch = f;
    }
    b.conv(&x, ids.next(LayerKind::Conv1x1, ch, 1, Activation::Linear))
}

#[derive(Default)]
pub(crate) struct ShapeCollector {
    pub layers: Vec<LayerRef>,
}

impl GraphBuilder for ShapeCollector {
    type Node = ();

    fn conv(&mut self, _: &(), layer: LayerRef) -> Result<()> {
        self.layers.push(layer);
        Ok(())
    }
    fn pool(&mut self, _: &()) -> Result<()> {
        Ok(())
    }
    fn upsample(&mut self, _: &(), layer: LayerRef) -> Result<()> {
        self.layers.push(layer);
        Ok(())
    }
    fn add(&mut self, _: &(), _: &()) -> Result<()> {
        Ok(())
    }
    fn concat(&mut self, _: &(), _: &()) -> Result<()> {
        Ok(())
    }
}

struct Eager<'a, T> {
    net: &'a Network<T>,
}

impl<T: Scalar> GraphBuilder for Eager<'_, T> {
    type Node = std::rc::Rc<Tensor3<T>>;

    fn conv(&mut self, x: &Self::Node, layer: LayerRef) -> Result<Self::Node> {
        Ok(ops::conv2d(x, &self.net.layers()[layer.index], layer.activation)?.into())
    }
    fn pool(&mut self, x: &Self::Node) -> Result<Self::Node> {
        Ok(ops::maxpool_freq(x)?.into())
    }
    fn upsample(&mut self, x: &Self::Node, layer: LayerRef) -> Result<Self::Node> {
        Ok(ops::upsample_freq(x, &self.net.layers()[layer.index])?.into())
    }
    fn add(&mut self, a: &Self::Node, b: &Self::Node) -> Result<Self::Node> {
        Ok(ops::add(a, b)?.into())
    }
    fn concat(&mut self, a: &Self::Node, b: &Self::Node) -> Result<Self::Node> {
        Ok(ops::concat(a, b)?.into())
    }
}

pub(crate) fn check_input<T: Scalar>(topo: &NetTopology, input: &Tensor3<T>) -> Result<()> {
    if input.chans() != INPUT_CHANNELS {
        return Err(invalid(format!(
            "network input needs {INPUT_CHANNELS} channels, got {}",
            input.chans()
        )));
    }
    topo.check_geometry(input.freq(), input.time())
}

/// Reference forward pass without the output clamp.
pub fn forward_linear<T: Scalar>(net: &Network<T>, input: &Tensor3<T>) -> Result<Tensor3<T>> {
    check_input(net.topology(), input)?;
    let mut eager = Eager { net };
    let out = build_graph(net.topology(), &mut eager, std::rc::Rc::new(input.clone()))?;
    Ok(std::rc::Rc::try_unwrap(out).unwrap_or_else(|rc| (*rc).clone()))
}

/// Reference forward pass: magnitude estimate of shape `freq × time × 1`,
/// clamped at zero.
pub fn forward<T: Scalar>(net: &Network<T>, input: &Tensor3<T>) -> Result<Tensor3<T>> {
    let out = forward_linear(net, input)?;
    Ok(out.map(|v| if v < T::zero() { T::zero() } else { v }))
}

struct PatternProbe<'a, T> {
    net: &'a Network<T>,
    pattern: Vec<bool>,
}

impl<T: Scalar> GraphBuilder for PatternProbe<'_, T> {
    type Node = std::rc::Rc<Tensor3<T>>;

    fn conv(&mut self, x: &Self::Node, layer: LayerRef) -> Result<Self::Node> {
        let y = ops::conv2d(x, &self.net.layers()[layer.index], Activation::Linear)?;
        if layer.activation == Activation::Relu {
            self.pattern.extend(y.data().iter().map(|&v| v > T::zero()));
            return Ok(y.map(|v| if v > T::zero() { v } else { T::zero() }).into());
        }
        Ok(y.into())
    }
    fn pool(&mut self, x: &Self::Node) -> Result<Self::Node> {
        let (nf, nt, c) = x.shape();
        for k in 0..nf / 2 {
            for t in 0..nt {
                for ch in 0..c {
                    self.pattern
                        .push(x.get(2 * k + 1, t, ch) > x.get(2 * k, t, ch));
                }
            }
        }
        Ok(ops::maxpool_freq(x)?.into())
    }
    fn upsample(&mut self, x: &Self::Node, layer: LayerRef) -> Result<Self::Node> {
        Ok(ops::upsample_freq(x, &self.net.layers()[layer.index])?.into())
    }
    fn add(&mut self, a: &Self::Node, b: &Self::Node) -> Result<Self::Node> {
        Ok(ops::add(a, b)?.into())
    }
    fn concat(&mut self, a: &Self::Node, b: &Self::Node) -> Result<Self::Node> {
        Ok(ops::concat(a, b)?.into())
    }
}

/// Every ReLU's on/off state and every pooling choice in a forward pass.
/// The network is piecewise linear in its inputs and smooth in its
/// parameters wherever this pattern stays fixed.
pub fn activation_pattern<T: Scalar>(net: &Network<T>, input: &Tensor3<T>) -> Result<Vec<bool>> {
    check_input(net.topology(), input)?;
    let mut probe = PatternProbe {
        net,
        pattern: Vec::new(),
    };
    build_graph(net.topology(), &mut probe, std::rc::Rc::new(input.clone()))?;
    Ok(probe.pattern)
}
