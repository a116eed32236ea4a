//! Reverse-mode differentiation over the U-Net primitives. The forward pass
//! records every node's value; `backward` walks the tape in reverse and
//! accumulates parameter gradients into a network-shaped buffer.

use crate::error::Result;
use crate::unet::graph::{build_graph, GraphBuilder, LayerRef};
use crate::unet::{ops, Activation, Layer, LayerKind, Network, Scalar, Tensor3};

enum Op {
    Input,
    Conv { x: usize, layer: LayerRef },
    Pool { x: usize },
    Up { x: usize, layer: LayerRef },
    Add { a: usize, b: usize },
    Concat { a: usize, b: usize },
}

pub(crate) struct Tape<'a, T> {
    net: &'a Network<T>,
    values: Vec<Tensor3<T>>,
    ops: Vec<Op>,
}

impl<T: Scalar> GraphBuilder for Tape<'_, T> {
    type Node = usize;

    fn conv(&mut self, x: &usize, layer: LayerRef) -> Result<usize> {
        let y = ops::conv2d(
            &self.values[*x],
            &self.net.layers()[layer.index],
            layer.activation,
        )?;
        Ok(self.push(y, Op::Conv { x: *x, layer }))
    }

    fn pool(&mut self, x: &usize) -> Result<usize> {
        let y = ops::maxpool_freq(&self.values[*x])?;
        Ok(self.push(y, Op::Pool { x: *x }))
    }

    fn upsample(&mut self, x: &usize, layer: LayerRef) -> Result<usize> {
        let y = ops::upsample_freq(&self.values[*x], &self.net.layers()[layer.index])?;
        Ok(self.push(y, Op::Up { x: *x, layer }))
    }

    fn add(&mut self, a: &usize, b: &usize) -> Result<usize> {
        let y = ops::add(&self.values[*a], &self.values[*b])?;
        Ok(self.push(y, Op::Add { a: *a, b: *b }))
    }

    fn concat(&mut self, a: &usize, b: &usize) -> Result<usize> {
        let y = ops::concat(&self.values[*a], &self.values[*b])?;
        Ok(self.push(y, Op::Concat { a: *a, b: *b }))
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor3<T>>, g: Tensor3<T>) {
    match slot {
        None => *slot = Some(g),
        Some(acc) => {
            for (a, v) in acc.data_mut().iter_mut().zip(g.data()) {
                *a = *a + *v;
            }
        }
    }
}

impl<'a, T: Scalar> Tape<'a, T> {
    fn push(&mut self, value: Tensor3<T>, op: Op) -> usize {
        self.values.push(value);
        self.ops.push(op);
        self.values.len() - 1
    }

    /// Runs the forward pass and returns the tape with the index of the
    /// linear head output.
    pub fn forward(net: &'a Network<T>, input: &Tensor3<T>) -> Result<(Self, usize)> {
        crate::unet::graph::check_input(net.topology(), input)?;
        let mut tape = Self {
            net,
            values: Vec::new(),
            ops: Vec::new(),
        };
        let x = tape.push(input.clone(), Op::Input);
        let out = build_graph(net.topology(), &mut tape, x)?;
        Ok((tape, out))
    }

    pub fn value(&self, node: usize) -> &Tensor3<T> {
        &self.values[node]
    }

    /// Gradients of every parameter given `d loss / d output`.
    pub fn backward(&self, output: usize, grad_out: Tensor3<T>) -> Network<T> {
        let mut grads = Network::zeros(*self.net.topology()).expect("topology already validated");
        let mut node_grads: Vec<Option<Tensor3<T>>> =
            (0..self.values.len()).map(|_| None).collect();
        node_grads[output] = Some(grad_out);
        for i in (0..=output).rev() {
            let Some(g) = node_grads[i].take() else {
                continue;
            };
            match &self.ops[i] {
                Op::Input => {}
                Op::Conv { x, layer } => {
                    let gx = conv_backward(
                        &self.values[*x],
                        &self.values[i],
                        g,
                        &self.net.layers()[layer.index],
                        layer.activation,
                        &mut grads.layers_mut()[layer.index],
                    );
                    accumulate(&mut node_grads[*x], gx);
                }
                Op::Pool { x } => {
                    let gx = pool_backward(&self.values[*x], &g);
                    accumulate(&mut node_grads[*x], gx);
                }
                Op::Up { x, layer } => {
                    let gx = up_backward(
                        &self.values[*x],
                        &g,
                        &self.net.layers()[layer.index],
                        &mut grads.layers_mut()[layer.index],
                    );
                    accumulate(&mut node_grads[*x], gx);
                }
                Op::Add { a, b } => {
                    accumulate(&mut node_grads[*b], g.clone());
                    accumulate(&mut node_grads[*a], g);
                }
                Op::Concat { a, b } => {
                    let ca = self.values[*a].chans();
                    let cb = self.values[*b].chans();
                    let (nf, nt, _) = g.shape();
                    let ga = Tensor3::from_fn(nf, nt, ca, |k, t, c| g.get(k, t, c));
                    let gb = Tensor3::from_fn(nf, nt, cb, |k, t, c| g.get(k, t, ca + c));
                    accumulate(&mut node_grads[*a], ga);
                    accumulate(&mut node_grads[*b], gb);
                }
            }
        }
        grads
    }
}

/// Returns the input gradient and adds weight and bias gradients to `dl`.
fn conv_backward<T: Scalar>(
    x: &Tensor3<T>,
    y: &Tensor3<T>,
    mut g: Tensor3<T>,
    layer: &Layer<T>,
    act: Activation,
    dl: &mut Layer<T>,
) -> Tensor3<T> {
    if act == Activation::Relu {
        for (gv, yv) in g.data_mut().iter_mut().zip(y.data()) {
            if *yv <= T::zero() {
                *gv = T::zero();
            }
        }
    }
    let (nf, nt, cin) = x.shape();
    let cout = layer.out_ch;
    let radius = if layer.kind == LayerKind::Conv3x3 {
        1isize
    } else {
        0
    };
    let width = 2 * radius + 1;
    let mut gx = Tensor3::zeros(nf, nt, cin);
    for k in 0..nf {
        for t in 0..nt {
            let gp = g.pixel(k, t);
            for (b, &gv) in dl.bias.iter_mut().zip(gp) {
                *b = *b + gv;
            }
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
                    let (kk, tt) = (kk as usize, tt as usize);
                    for ci in 0..cin {
                        let xv = x.get(kk, tt, ci);
                        let row = (tap * cin + ci) * cout;
                        let w = &layer.weights[row..row + cout];
                        let dw = &mut dl.weights[row..row + cout];
                        let mut acc = T::zero();
                        for ((d, &wv), &gv) in dw.iter_mut().zip(w).zip(gp) {
                            *d = *d + xv * gv;
                            acc = acc + wv * gv;
                        }
                        let i = gx.index(kk, tt, ci);
                        gx.data_mut()[i] = gx.data()[i] + acc;
                    }
                }
            }
        }
    }
    gx
}

/// Routes each gradient to the element the forward pass selected (the first
/// on ties).
fn pool_backward<T: Scalar>(x: &Tensor3<T>, g: &Tensor3<T>) -> Tensor3<T> {
    let (nf, nt, c) = g.shape();
    let mut gx = Tensor3::zeros(x.freq(), nt, c);
    for k in 0..nf {
        for t in 0..nt {
            for ch in 0..c {
                let src = if x.get(2 * k + 1, t, ch) > x.get(2 * k, t, ch) {
                    2 * k + 1
                } else {
                    2 * k
                };
                gx.set(src, t, ch, g.get(k, t, ch));
            }
        }
    }
    gx
}

fn up_backward<T: Scalar>(
    x: &Tensor3<T>,
    g: &Tensor3<T>,
    layer: &Layer<T>,
    dl: &mut Layer<T>,
) -> Tensor3<T> {
    let (nf, nt, cin) = x.shape();
    let cout = layer.out_ch;
    let mut gx = Tensor3::zeros(nf, nt, cin);
    for k in 0..nf {
        for t in 0..nt {
            for tap in 0..2 {
                let gp = g.pixel(2 * k + tap, t);
                for (b, &gv) in dl.bias.iter_mut().zip(gp) {
                    *b = *b + gv;
                }
                for ci in 0..cin {
                    let xv = x.get(k, t, ci);
                    let row = (tap * cin + ci) * cout;
                    let mut acc = T::zero();
                    for ((d, &wv), &gv) in dl.weights[row..row + cout]
                        .iter_mut()
                        .zip(&layer.weights[row..row + cout])
                        .zip(gp)
                    {
                        *d = *d + xv * gv;
                        acc = acc + wv * gv;
                    }
                    let i = gx.index(k, t, ci);
                    gx.data_mut()[i] = gx.data()[i] + acc;
                }
            }
        }
    }
    gx
}
