//! Reference primitives. Straightforward loops over `[freq][time][chan]`
//! tensors; the fast engine is checked against these.

use crate::error::{invalid, Result};

use super::{Activation, Layer, LayerKind, Scalar, Tensor3};

fn check_layer<T: Scalar>(input: &Tensor3<T>, layer: &Layer<T>, kinds: &[LayerKind]) -> Result<()> {
    if !kinds.contains(&layer.kind) {
        return Err(invalid(format!(
            "{:?} layer used where {kinds:?} expected",
            layer.kind
        )));
    }
    if layer.in_ch != input.chans() {
        return Err(invalid(format!(
            "layer expects {} input channels, tensor has {}",
            layer.in_ch,
            input.chans()
        )));
    }
    if layer.weights.len() != layer.kind.taps() * layer.in_ch * layer.out_ch
        || layer.bias.len() != layer.out_ch
    {
        return Err(invalid("layer parameter lengths do not match its shape"));
    }
    Ok(())
}

#[inline]
fn activate<T: Scalar>(v: &mut [T], act: Activation) {
    if act == Activation::Relu {
        for x in v {
            if *x < T::zero() {
                *x = T::zero();
            }
        }
    }
}

/// Same-padded, stride-1 convolution. 3×3 taps are ordered row-major over
/// (frequency offset, time offset) from (-1, -1) to (+1, +1).
pub fn conv2d<T: Scalar>(
    input: &Tensor3<T>,
    layer: &Layer<T>,
    act: Activation,
) -> Result<Tensor3<T>> {
    check_layer(input, layer, &[LayerKind::Conv3x3, LayerKind::Conv1x1])?;
    let (nf, nt, cin) = input.shape();
    let cout = layer.out_ch;
    let radius = if layer.kind == LayerKind::Conv3x3 {
        1isize
    } else {
        0
    };
    let width = 2 * radius + 1;
    let mut out = Tensor3::zeros(nf, nt, cout);
    for k in 0..nf {
        for t in 0..nt {
            let idx = out.index(k, t, 0);
            let acc = &mut out.data_mut()[idx..idx + cout];
            acc.copy_from_slice(&layer.bias);
            for dy in -radius..=radius {
                let kk = k as isize + dy;
                if kk < 0 || kk >= nf as isize {
                    continue;
                }
                for dx in -radius..=radius {
                    let tt = t as isize + dx;
                    if tt < 0 || tt >= nt as isize {
                        continue;
                    }
                    let tap = ((dy + radius) * width + dx + radius) as usize;
                    let px = input.pixel(kk as usize, tt as usize);
                    for (ci, &v) in px.iter().enumerate() {
                        let w =
                            &layer.weights[(tap * cin + ci) * cout..(tap * cin + ci + 1) * cout];
                        for (a, &wv) in acc.iter_mut().zip(w) {
                            *a = *a + v * wv;
                        }
                    }
                }
            }
            activate(acc, act);
        }
    }
    Ok(out)
}

/// 2×1 max pooling along frequency.
pub fn maxpool_freq<T: Scalar>(input: &Tensor3<T>) -> Result<Tensor3<T>> {
    let (nf, nt, c) = input.shape();
    if nf % 2 != 0 {
        return Err(invalid(format!("cannot pool odd frequency size {nf}")));
    }
    Ok(Tensor3::from_fn(nf / 2, nt, c, |k, t, ch| {
        let a = input.get(2 * k, t, ch);
        let b = input.get(2 * k + 1, t, ch);
        if b > a {
            b
        } else {
            a
        }
    }))
}

/// Transposed 2×1 convolution with stride 2 along frequency: input row `k`
/// writes output rows `2k` (tap 0) and `2k + 1` (tap 1).
pub fn upsample_freq<T: Scalar>(input: &Tensor3<T>, layer: &Layer<T>) -> Result<Tensor3<T>> {
    check_layer(input, layer, &[LayerKind::UpConv2x1])?;
    let (nf, nt, cin) = input.shape();
    let cout = layer.out_ch;
    let mut out = Tensor3::zeros(2 * nf, nt, cout);
    for k in 0..nf {
        for t in 0..nt {
            let px = input.pixel(k, t);
            for tap in 0..2 {
                let idx = out.index(2 * k + tap, t, 0);
                let acc = &mut out.data_mut()[idx..idx + cout];
                acc.copy_from_slice(&layer.bias);
                for (ci, &v) in px.iter().enumerate() {
                    let w = &layer.weights[(tap * cin + ci) * cout..(tap * cin + ci + 1) * cout];
                    for (a, &wv) in acc.iter_mut().zip(w) {
                        *a = *a + v * wv;
                    }
                }
            }
        }
    }
    Ok(out)
}

pub fn add<T: Scalar>(a: &Tensor3<T>, b: &Tensor3<T>) -> Result<Tensor3<T>> {
    if a.shape() != b.shape() {
        return Err(invalid(format!(
            "add of {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (f, t, c) = a.shape();
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| x + y)
        .collect();
    Tensor3::from_vec(f, t, c, data)
}

/// Channel concatenation: `a`'s channels first.
pub fn concat<T: Scalar>(a: &Tensor3<T>, b: &Tensor3<T>) -> Result<Tensor3<T>> {
    if a.freq() != b.freq() || a.time() != b.time() {
        return Err(invalid(format!(
            "concat of {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (nf, nt, ca) = a.shape();
    let cb = b.chans();
    let mut data = Vec::with_capacity(nf * nt * (ca + cb));
    for k in 0..nf {
        for t in 0..nt {
            data.extend_from_slice(a.pixel(k, t));
            data.extend_from_slice(b.pixel(k, t));
        }
    }
    Tensor3::from_vec(nf, nt, ca + cb, data)
}

/// The layers of one residual block.
#[derive(Debug, Clone, Copy)]
pub struct ResidualLayers<'a, T> {
    pub entry: &'a Layer<T>,
    pub stack: &'a [Layer<T>],
    /// Present for Conf2.
    pub shortcut: Option<&'a Layer<T>>,
}

/// `a = relu(conv(input))`, `out = shortcut(a) + stack(a)` where the
/// shortcut is the identity (Conf1) or a linear 3×3 conv (Conf2).
pub fn residual_block<T: Scalar>(
    input: &Tensor3<T>,
    layers: ResidualLayers<'_, T>,
) -> Result<Tensor3<T>> {
    let a = conv2d(input, layers.entry, Activation::Relu)?;
    let mut h = a.clone();
    for l in layers.stack {
        h = conv2d(&h, l, Activation::Relu)?;
    }
    match layers.shortcut {
        None => add(&a, &h),
        Some(s) => add(&conv2d(&a, s, Activation::Linear)?, &h),
    }
}
