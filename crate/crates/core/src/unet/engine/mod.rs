//! Inference engine compiled for one input geometry.
//!
//! Activations live in zero-bordered buffers of shape
//! `(freq + 2) × (time + 2) × chans`, so a 3×3 convolution reads its nine
//! taps at fixed offsets with no bounds checks. Every graph node owns its
//! buffer and all buffers are allocated at construction; [`InferenceEngine::run`]
//! does not allocate.

mod kernels;

use half::f16;

use kernels::{panel_lanes, tile_portable, Elem, FastKernel, Tile, MAX_LANES, MR};

use super::graph::{build_graph, GraphBuilder, LayerRef};
use super::{
    quantize_fp16, Activation, Layer, LayerKind, NetWeights, Precision, Tensor3, INPUT_CHANNELS,
};
use crate::error::{invalid, Result};

struct Panel<E> {
    co: usize,
    width: usize,
    lanes: usize,
    /// `[tap][ci][lane]`
    w: Vec<E>,
    bias: Vec<E>,
}

/// One panel set per output phase: a single phase for convolutions, two
/// for the stride-2 upsampler.
struct Packed<E> {
    phases: Vec<Vec<Panel<E>>>,
}

fn pack<E: Elem>(layer: &Layer<f32>) -> Packed<E> {
    let (phases, taps) = match layer.kind {
        LayerKind::UpConv2x1 => (2, 1),
        k => (1, k.taps()),
    };
    let cin = layer.in_ch;
    let cout = layer.out_ch;
    let phases = (0..phases)
        .map(|phase| {
            let mut panels = Vec::new();
            let mut co = 0;
            while co < cout {
                let lanes = panel_lanes::<E>(cout - co);
                let width = lanes.min(cout - co);
                let mut w = vec![E::default(); E::panel_len(taps, cin, lanes)];
                for tap in 0..taps {
                    for ci in 0..cin {
                        for l in 0..width {
                            w[E::w_index(tap, ci, cin, lanes, l)] =
                                E::from_f32(layer.weight(phase * taps + tap, ci, co + l));
                        }
                    }
                }
                let mut bias = vec![E::default(); lanes];
                for l in 0..width {
                    bias[l] = E::from_f32(layer.bias[co + l]);
                }
                panels.push(Panel {
                    co,
                    width,
                    lanes,
                    w,
                    bias,
                });
                co += width;
            }
            panels
        })
        .collect();
    Packed { phases }
}

#[derive(Debug, Clone, Copy)]
struct Shape {
    freq: usize,
    chans: usize,
}

#[derive(Debug)]
enum Step {
    Conv {
        src: usize,
        dst: usize,
        layer: usize,
        relu: bool,
        center: bool,
        /// Byte offsets of the taps from a row's first padded pixel.
        taps: Vec<isize>,
    },
    Up {
        src: usize,
        dst: usize,
        layer: usize,
    },
    Pool {
        src: usize,
        dst: usize,
    },
    Add {
        a: usize,
        b: usize,
        dst: usize,
    },
    Concat {
        a: usize,
        b: usize,
        dst: usize,
    },
}

struct Compiler {
    time: usize,
    elem_bytes: usize,
    shapes: Vec<Shape>,
    steps: Vec<Step>,
}

impl Compiler {
    fn alloc(&mut self, freq: usize, chans: usize) -> usize {
        self.shapes.push(Shape { freq, chans });
        self.shapes.len() - 1
    }
}

impl GraphBuilder for Compiler {
    type Node = usize;

    fn conv(&mut self, x: &usize, layer: LayerRef) -> Result<usize> {
        let s = self.shapes[*x];
        let dst = self.alloc(s.freq, layer.out_ch);
        let center = layer.kind == LayerKind::Conv1x1;
        let tp = (self.time + 2) as isize;
        let pix = (s.chans * self.elem_bytes) as isize;
        let taps = if center {
            vec![0]
        } else {
            (0..3)
                .flat_map(|dy| (0..3).map(move |dx| (dy * tp + dx) * pix))
                .collect()
        };
        self.steps.push(Step::Conv {
            src: *x,
            dst,
            layer: layer.index,
            relu: layer.activation == Activation::Relu,
            center,
            taps,
        });
        Ok(dst)
    }

    fn pool(&mut self, x: &usize) -> Result<usize> {
        let s = self.shapes[*x];
        let dst = self.alloc(s.freq / 2, s.chans);
        self.steps.push(Step::Pool { src: *x, dst });
        Ok(dst)
    }

    fn upsample(&mut self, x: &usize, layer: LayerRef) -> Result<usize> {
        let s = self.shapes[*x];
        let dst = self.alloc(s.freq * 2, layer.out_ch);
        self.steps.push(Step::Up {
            src: *x,
            dst,
            layer: layer.index,
        });
        Ok(dst)
    }

    fn add(&mut self, a: &usize, b: &usize) -> Result<usize> {
        let s = self.shapes[*a];
        let dst = self.alloc(s.freq, s.chans);
        self.steps.push(Step::Add { a: *a, b: *b, dst });
        Ok(dst)
    }

    fn concat(&mut self, a: &usize, b: &usize) -> Result<usize> {
        let (sa, sb) = (self.shapes[*a], self.shapes[*b]);
        let dst = self.alloc(sa.freq, sa.chans + sb.chans);
        self.steps.push(Step::Concat { a: *a, b: *b, dst });
        Ok(dst)
    }
}

struct Exec<E> {
    freq: usize,
    time: usize,
    shapes: Vec<Shape>,
    bufs: Vec<Vec<E>>,
    steps: Vec<Step>,
    packed: Vec<Packed<E>>,
    tile: Vec<E>,
    fast: Option<FastKernel<E>>,
    output: usize,
}

/// Padded buffer length, rounded up to whole 64-element blocks for the
/// vector elementwise loops.
fn padded_len(freq: usize, time: usize, chans: usize) -> usize {
    ((freq + 2) * (time + 2) * chans).div_ceil(64) * 64
}

impl<E: Elem> Exec<E> {
    fn new(weights: &NetWeights, freq: usize, time: usize, simd: bool) -> Result<Self> {
        let topo = weights.topology();
        let mut c = Compiler {
            time,
            elem_bytes: std::mem::size_of::<E>(),
            shapes: Vec::new(),
            steps: Vec::new(),
        };
        let input = c.alloc(freq, INPUT_CHANNELS);
        let output = build_graph(topo, &mut c, input)?;
        let bufs = c
            .shapes
            .iter()
            .map(|s| vec![E::default(); padded_len(s.freq, time, s.chans)])
            .collect();
        Ok(Self {
            freq,
            time,
            bufs,
            shapes: c.shapes,
            steps: c.steps,
            packed: weights.network.layers().iter().map(pack).collect(),
            tile: vec![E::default(); MR * MAX_LANES],
            fast: if simd { E::fast_kernel() } else { None },
            output,
        })
    }

    /// Index of interior pixel `(k, t)` in a buffer with `chans` channels.
    #[inline]
    fn at(&self, k: usize, t: usize, chans: usize) -> usize {
        ((k + 1) * (self.time + 2) + t + 1) * chans
    }

    /// Runs every panel over one output row. `a` points at the input pixel
    /// feeding output time 0 before tap offsets; `dst` at output time 0.
    #[allow(clippy::too_many_arguments)]
    unsafe fn row(
        fast: Option<FastKernel<E>>,
        tile: &mut [E],
        time: usize,
        a: *const E,
        cin: usize,
        taps: &[isize],
        panels: &[Panel<E>],
        relu: bool,
        dst: *mut E,
        cout: usize,
    ) {
        let stride = cin * std::mem::size_of::<E>();
        let mut t0 = 0;
        while t0 < time {
            let mr = MR.min(time - t0);
            for p in panels {
                let lanes = p.lanes;
                let t = Tile {
                    a: a.add(t0 * cin),
                    stride,
                    taps,
                    cin,
                    w: p.w.as_ptr(),
                    bias: p.bias.as_ptr(),
                    relu,
                    out: tile.as_mut_ptr(),
                };
                match fast {
                    Some(k) if mr == MR && (!E::PAIRED || cin.is_multiple_of(2)) => k(lanes, &t),
                    _ => tile_portable(mr, lanes, &t),
                }
                for m in 0..mr {
                    std::ptr::copy_nonoverlapping(
                        tile.as_ptr().add(m * lanes),
                        dst.add((t0 + m) * cout + p.co),
                        p.width,
                    );
                }
            }
            t0 += mr;
        }
    }

    fn run(&mut self, input: &[f32], output: &mut [f32]) {
        let (freq, time) = (self.freq, self.time);
        for k in 0..freq {
            for t in 0..time {
                let o = self.at(k, t, INPUT_CHANNELS);
                for c in 0..INPUT_CHANNELS {
                    self.bufs[0][o + c] = E::from_f32(input[(k * time + t) * INPUT_CHANNELS + c]);
                }
            }
        }
        for si in 0..self.steps.len() {
            match &self.steps[si] {
                Step::Conv {
                    src,
                    dst,
                    layer,
                    relu,
                    center,
                    taps,
                } => {
                    let (sin, sout) = (self.shapes[*src], self.shapes[*dst]);
                    let sp = self.bufs[*src].as_ptr();
                    let dp = self.bufs[*dst].as_mut_ptr();
                    for k in 0..sin.freq {
                        let a = if *center {
                            self.at(k, 0, sin.chans)
                        } else {
                            k * (time + 2) * sin.chans
                        };
                        let d = self.at(k, 0, sout.chans);
                        // SAFETY: src and dst are distinct buffers sized for
                        // their padded shapes; taps stay inside the border.
                        unsafe {
                            Self::row(
                                self.fast,
                                &mut self.tile,
                                time,
                                sp.add(a),
                                sin.chans,
                                taps,
                                &self.packed[*layer].phases[0],
                                *relu,
                                dp.add(d),
                                sout.chans,
                            );
                        }
                    }
                }
                Step::Up { src, dst, layer } => {
                    let (sin, sout) = (self.shapes[*src], self.shapes[*dst]);
                    let sp = self.bufs[*src].as_ptr();
                    let dp = self.bufs[*dst].as_mut_ptr();
                    for k in 0..sin.freq {
                        for phase in 0..2 {
                            let a = self.at(k, 0, sin.chans);
                            let d = self.at(2 * k + phase, 0, sout.chans);
                            // SAFETY: as for convolutions, with a single tap.
                            unsafe {
                                Self::row(
                                    self.fast,
                                    &mut self.tile,
                                    time,
                                    sp.add(a),
                                    sin.chans,
                                    &[0],
                                    &self.packed[*layer].phases[phase],
                                    false,
                                    dp.add(d),
                                    sout.chans,
                                );
                            }
                        }
                    }
                }
                Step::Pool { src, dst } => {
                    let sd = self.shapes[*dst];
                    let n = time * sd.chans;
                    let mut out = std::mem::take(&mut self.bufs[*dst]);
                    let inp = &self.bufs[*src];
                    for k in 0..sd.freq {
                        let r0 = self.at(2 * k, 0, sd.chans);
                        let r1 = self.at(2 * k + 1, 0, sd.chans);
                        let d = self.at(k, 0, sd.chans);
                        for ((o, &x), &y) in out[d..d + n]
                            .iter_mut()
                            .zip(&inp[r0..r0 + n])
                            .zip(&inp[r1..r1 + n])
                        {
                            *o = if y > x { y } else { x };
                        }
                    }
                    self.bufs[*dst] = out;
                }
                Step::Add { a, b, dst } => {
                    let mut out = std::mem::take(&mut self.bufs[*dst]);
                    E::add_slices(&mut out, &self.bufs[*a], &self.bufs[*b]);
                    self.bufs[*dst] = out;
                }
                Step::Concat { a, b, dst } => {
                    let (ca, cb) = (self.shapes[*a].chans, self.shapes[*b].chans);
                    let cd = ca + cb;
                    let mut out = std::mem::take(&mut self.bufs[*dst]);
                    for k in 0..self.shapes[*dst].freq {
                        for t in 0..time {
                            let d = self.at(k, t, cd);
                            let ia = self.at(k, t, ca);
                            let ib = self.at(k, t, cb);
                            out[d..d + ca].copy_from_slice(&self.bufs[*a][ia..ia + ca]);
                            out[d + ca..d + cd].copy_from_slice(&self.bufs[*b][ib..ib + cb]);
                        }
                    }
                    self.bufs[*dst] = out;
                }
            }
        }
        let head = &self.bufs[self.output];
        for k in 0..freq {
            for t in 0..time {
                output[k * time + t] = head[self.at(k, t, 1)].to_f32().max(0.0);
            }
        }
    }
}

enum Backend {
    F32(Exec<f32>),
    F16(Exec<f16>),
}

/// Fast forward pass for a fixed `freq × time` input. Output matches
/// [`super::forward`] up to floating point reassociation (fp32) or half
/// precision rounding (fp16).
pub struct InferenceEngine {
    precision: Precision,
    freq: usize,
    time: usize,
    simd: bool,
    backend: Backend,
}

impl InferenceEngine {
    /// Uses AVX-512 kernels when the CPU supports them.
    pub fn new(
        weights: &NetWeights,
        precision: Precision,
        freq: usize,
        time: usize,
    ) -> Result<Self> {
        Self::build(weights, precision, freq, time, true)
    }

    /// Scalar kernels only.
    pub fn portable(
        weights: &NetWeights,
        precision: Precision,
        freq: usize,
        time: usize,
    ) -> Result<Self> {
        Self::build(weights, precision, freq, time, false)
    }

    fn build(
        weights: &NetWeights,
        precision: Precision,
        freq: usize,
        time: usize,
        simd: bool,
    ) -> Result<Self> {
        weights.topology().check_geometry(freq, time)?;
        if !weights.network.all_finite() {
            return Err(invalid("weights contain non-finite values"));
        }
        let backend = match precision {
            Precision::Fp32 => Backend::F32(Exec::new(weights, freq, time, simd)?),
            Precision::Fp16 => {
                let quantized;
                let w = if weights.precision == Precision::Fp16 {
                    weights
                } else {
                    quantized = quantize_fp16(weights).0;
                    &quantized
                };
                Backend::F16(Exec::new(w, freq, time, simd)?)
            }
        };
        Ok(Self {
            precision,
            freq,
            time,
            simd,
            backend,
        })
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.freq, self.time)
    }

    /// Name of the convolution kernel in use.
    pub fn kernel_name(&self) -> &'static str {
        match &self.backend {
            Backend::F32(e) if e.fast.is_some() => "avx512f",
            Backend::F16(e) if e.fast.is_some() => "avx512fp16",
            _ if self.simd => "portable (no simd support)",
            _ => "portable",
        }
    }

    /// `input` is `[freq][time][2]`, `output` is `[freq][time]`.
    pub fn run(&mut self, input: &[f32], output: &mut [f32]) -> Result<()> {
        let n = self.freq * self.time;
        if input.len() != n * INPUT_CHANNELS || output.len() != n {
            return Err(invalid(format!(
                "engine for {}x{} got {} input and {} output values",
                self.freq,
                self.time,
                input.len(),
                output.len()
            )));
        }
        if input.iter().any(|v| !v.is_finite()) {
            return Err(invalid("non-finite network input"));
        }
        match &mut self.backend {
            Backend::F32(e) => e.run(input, output),
            Backend::F16(e) => e.run(input, output),
        }
        Ok(())
    }

    pub fn forward(&mut self, input: &Tensor3<f32>) -> Result<Tensor3<f32>> {
        if input.shape() != (self.freq, self.time, INPUT_CHANNELS) {
            return Err(invalid(format!("engine input shape {:?}", input.shape())));
        }
        let mut out = vec![0.0; self.freq * self.time];
        self.run(input.data(), &mut out)?;
        Tensor3::from_vec(self.freq, self.time, 1, out)
    }
}
