//! Stride-by-stride processing of far-end/microphone streams.
//!
//! A [`StreamProcessor`] consumes 640 new samples of each stream and emits
//! 640 samples of near-end estimate. The spectral engines (U-Net and the
//! identity passthrough) keep 2560 samples of history and resynthesize only
//! the newest stride. The PFB-LMS engine works in 1024-sample blocks and so
//! lags by a fixed number of samples, which [`stream_process`] removes when
//! it writes whole files.

mod bench;
mod config;
mod latency;

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use crate::dsp::{magnitude_phase_into, AudioBuffer, ComplexSpectrogram, Grid, StftPlan};
use crate::error::{invalid, Result};
use crate::features::{normalize_into, FrameAssembler, Reconstructor};
use crate::metrics::Canceller;
use crate::pfblms::{PfbLms, DEFAULT_BLOCK, DEFAULT_MU, DEFAULT_TAPS};
use crate::unet::{load_weights, InferenceEngine, NetWeights, Precision, INPUT_CHANNELS};
use crate::wav::{read_wav, write_wav};
use crate::{FRAME_LEN, FREQ_BINS, SAMPLE_RATE, STRIDE, TIME_FRAMES};

pub use bench::{
    bench, compare_precisions, BenchReport, PrecisionComparison, BUDGET_MS,
    PAPER_FP16_REDUCTION_PCT,
};
pub use config::{load_key_values, parse_key_values};
pub use latency::{LatencyBreakdown, StageStats, StageTimes};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EngineKind {
    Unet,
    Pfblms,
    Passthrough,
}

impl fmt::Display for EngineKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EngineKind::Unet => "unet",
            EngineKind::Pfblms => "pfblms",
            EngineKind::Passthrough => "passthrough",
        })
    }
}

impl FromStr for EngineKind {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "unet" => Ok(EngineKind::Unet),
            "pfblms" => Ok(EngineKind::Pfblms),
            "passthrough" => Ok(EngineKind::Passthrough),
            other => Err(invalid(format!("unknown engine '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EngineConfig {
    pub engine: EngineKind,
    /// Weight file for the U-Net engine.
    pub weights: Option<PathBuf>,
    pub precision: Precision,
    pub stride: usize,
    pub frame: usize,
    pub pfb_taps: usize,
    pub pfb_block: usize,
    pub pfb_mu: f64,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            engine: EngineKind::Unet,
            weights: None,
            precision: Precision::Fp32,
            stride: STRIDE,
            frame: FRAME_LEN,
            pfb_taps: DEFAULT_TAPS,
            pfb_block: DEFAULT_BLOCK,
            pfb_mu: DEFAULT_MU,
        }
    }
}

impl EngineConfig {
    pub fn with_engine(engine: EngineKind) -> Self {
        Self {
            engine,
            ..Self::default()
        }
    }

    /// Sets a field by name. Returns `Ok(false)` for keys this config does
    /// not own.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        use config::parse_value;
        match key {
            "engine" => self.engine = value.parse()?,
            "weights" => self.weights = Some(PathBuf::from(value)),
            "precision" => self.precision = value.parse()?,
            "stride" => self.stride = parse_value(key, value)?,
            "frame" => self.frame = parse_value(key, value)?,
            "pfb_taps" => self.pfb_taps = parse_value(key, value)?,
            "pfb_block" => self.pfb_block = parse_value(key, value)?,
            "pfb_mu" => self.pfb_mu = parse_value(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// The feature geometry is fixed, so only the default 640/2560 pair is
    /// accepted.
    pub fn validate(&self) -> Result<()> {
        if self.stride == 0 || !self.frame.is_multiple_of(self.stride) {
            return Err(invalid(format!(
                "stride {} must divide frame {}",
                self.stride, self.frame
            )));
        }
        if self.stride != STRIDE || self.frame != FRAME_LEN {
            return Err(invalid(format!(
                "only stride {STRIDE} with frame {FRAME_LEN} is supported (got {}/{})",
                self.stride, self.frame
            )));
        }
        Ok(())
    }
}

enum Model {
    Identity,
    Unet(Box<InferenceEngine>),
}

/// Feature pipeline around a magnitude model. All buffers are allocated
/// once.
struct SpectralPath {
    model: Model,
    assembler: FrameAssembler,
    plan: StftPlan,
    spec: ComplexSpectrogram,
    x_mag: Grid<f64>,
    y_mag: Grid<f64>,
    x_phase: Grid<f64>,
    y_phase: Grid<f64>,
    x_norm: Grid<f64>,
    y_norm: Grid<f64>,
    net_in: Vec<f32>,
    net_out: Vec<f32>,
    estimate: Grid<f64>,
    recon: Reconstructor,
}

impl SpectralPath {
    fn new(model: Model) -> Self {
        let grid = || Grid::zeros(FREQ_BINS, TIME_FRAMES);
        let n = FREQ_BINS * TIME_FRAMES;
        Self {
            model,
            assembler: FrameAssembler::new(),
            plan: StftPlan::new(),
            spec: ComplexSpectrogram::zeros(),
            x_mag: grid(),
            y_mag: grid(),
            x_phase: grid(),
            y_phase: grid(),
            x_norm: grid(),
            y_norm: grid(),
            net_in: vec![0.0; n * INPUT_CHANNELS],
            net_out: vec![0.0; n],
            estimate: grid(),
            recon: Reconstructor::new(),
        }
    }

    fn process(
        &mut self,
        far: &[f64],
        mic: &[f64],
        out: &mut [f64],
        t: &mut StageTimes,
    ) -> Result<()> {
        let clock = Instant::now();
        self.assembler.push_stride(far, mic)?;
        let t1 = Instant::now();
        t.get_buffer = ms(clock, t1);

        self.plan
            .forward_into(self.assembler.far_frame(), &mut self.spec)?;
        magnitude_phase_into(&self.spec, &mut self.x_mag, &mut self.x_phase)?;
        self.plan
            .forward_into(self.assembler.mic_frame(), &mut self.spec)?;
        magnitude_phase_into(&self.spec, &mut self.y_mag, &mut self.y_phase)?;
        normalize_into(&self.x_mag, &mut self.x_norm)?;
        let y_scale = normalize_into(&self.y_mag, &mut self.y_norm)?;
        if let Model::Unet(_) = self.model {
            for ((pair, &y), &x) in self
                .net_in
                .chunks_exact_mut(INPUT_CHANNELS)
                .zip(self.y_norm.data())
                .zip(self.x_norm.data())
            {
                pair[0] = y as f32;
                pair[1] = x as f32;
            }
        }
        let t2 = Instant::now();
        t.data_preparation = ms(t1, t2);

        match &mut self.model {
            Model::Identity => self.estimate.data_mut().copy_from_slice(self.y_norm.data()),
            Model::Unet(engine) => {
                engine.run(&self.net_in, &mut self.net_out)?;
                for (e, &v) in self.estimate.data_mut().iter_mut().zip(&self.net_out) {
                    *e = v as f64;
                }
            }
        }
        let t3 = Instant::now();
        t.model_inference = ms(t2, t3);

        self.recon
            .reconstruct_into(&mut self.plan, &self.estimate, &self.y_phase, y_scale, out)?;
        t.data_extraction = ms(t3, Instant::now());
        Ok(())
    }

    fn reset(&mut self) {
        self.assembler.reset();
    }
}

/// Block adaptive filter behind a fixed-delay FIFO so that every stride can
/// be answered with exactly 640 samples.
struct PfbPath {
    filter: PfbLms,
    config: (usize, usize, f64),
    delay: usize,
    far_in: Vec<f64>,
    mic_in: Vec<f64>,
    err: Vec<f64>,
    out_fifo: Vec<f64>,
}

impl PfbPath {
    fn new(taps: usize, block: usize, mu: f64) -> Result<Self> {
        let filter = PfbLms::new(taps, block, mu)?;
        let delay = fifo_delay(STRIDE, block);
        let cap = block + STRIDE;
        let mut out_fifo = Vec::with_capacity(delay + cap + block);
        out_fifo.resize(delay, 0.0);
        Ok(Self {
            filter,
            config: (taps, block, mu),
            delay,
            far_in: Vec::with_capacity(cap),
            mic_in: Vec::with_capacity(cap),
            err: vec![0.0; block],
            out_fifo,
        })
    }

    fn process(
        &mut self,
        far: &[f64],
        mic: &[f64],
        out: &mut [f64],
        t: &mut StageTimes,
    ) -> Result<()> {
        if far.len() != STRIDE || mic.len() != STRIDE || out.len() != STRIDE {
            return Err(invalid(format!("stride blocks must have {STRIDE} samples")));
        }
        let clock = Instant::now();
        self.far_in.extend_from_slice(far);
        self.mic_in.extend_from_slice(mic);
        let t1 = Instant::now();
        t.get_buffer = ms(clock, t1);
        t.data_preparation = 0.0;

        let b = self.filter.block_size();
        while self.far_in.len() >= b {
            self.filter
                .process_block_into(&self.far_in[..b], &self.mic_in[..b], &mut self.err)?;
            self.out_fifo.extend_from_slice(&self.err);
            self.far_in.drain(..b);
            self.mic_in.drain(..b);
        }
        let t2 = Instant::now();
        t.model_inference = ms(t1, t2);

        out.copy_from_slice(&self.out_fifo[..STRIDE]);
        self.out_fifo.drain(..STRIDE);
        t.data_extraction = ms(t2, Instant::now());
        Ok(())
    }

    fn reset(&mut self) -> Result<()> {
        let (taps, block, mu) = self.config;
        *self = Self::new(taps, block, mu)?;
        Ok(())
    }
}

/// Smallest output delay that keeps a FIFO fed in `block` chunks ahead of a
/// reader taking `stride` samples per call.
fn fifo_delay(stride: usize, block: usize) -> usize {
    let period = block / gcd(stride, block);
    (1..=period)
        .map(|k| (k * stride) % block)
        .max()
        .unwrap_or(0)
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn ms(a: Instant, b: Instant) -> f64 {
    (b - a).as_secs_f64() * 1e3
}

enum Backend {
    Spectral(Box<SpectralPath>),
    Pfb(Box<PfbPath>),
}

/// Causal 40 ms-stride near-end estimator.
pub struct StreamProcessor {
    kind: EngineKind,
    precision: Precision,
    backend: Backend,
    timings: Option<Vec<StageTimes>>,
}

impl StreamProcessor {
    /// Builds the configured engine, loading U-Net weights from
    /// `config.weights`.
    pub fn new(config: &EngineConfig) -> Result<Self> {
        match config.engine {
            EngineKind::Unet => {
                let path = config
                    .weights
                    .as_ref()
                    .ok_or_else(|| invalid("the unet engine needs a weights file"))?;
                let weights = load_weights(path)?;
                Self::with_weights(config, &weights)
            }
            _ => Self::build(config, None),
        }
    }

    /// Like [`new`](Self::new) with weights already in memory.
    pub fn with_weights(config: &EngineConfig, weights: &NetWeights) -> Result<Self> {
        Self::build(config, Some(weights))
    }

    fn build(config: &EngineConfig, weights: Option<&NetWeights>) -> Result<Self> {
        config.validate()?;
        let backend = match config.engine {
            EngineKind::Passthrough => {
                Backend::Spectral(Box::new(SpectralPath::new(Model::Identity)))
            }
            EngineKind::Unet => {
                let w = weights.ok_or_else(|| invalid("the unet engine needs weights"))?;
                let engine = InferenceEngine::new(w, config.precision, FREQ_BINS, TIME_FRAMES)?;
                log::debug!("unet engine using {} kernels", engine.kernel_name());
                Backend::Spectral(Box::new(SpectralPath::new(Model::Unet(Box::new(engine)))))
            }
            EngineKind::Pfblms => Backend::Pfb(Box::new(PfbPath::new(
                config.pfb_taps,
                config.pfb_block,
                config.pfb_mu,
            )?)),
        };
        Ok(Self {
            kind: config.engine,
            precision: config.precision,
            backend,
            timings: None,
        })
    }

    pub fn engine(&self) -> EngineKind {
        self.kind
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    /// Samples by which the output lags the input (0 for the spectral
    /// engines).
    pub fn latency_samples(&self) -> usize {
        match &self.backend {
            Backend::Spectral(_) => 0,
            Backend::Pfb(p) => p.delay,
        }
    }

    /// Starts recording per-stride stage times, reserving room for
    /// `expected_strides` entries up front.
    pub fn enable_timing(&mut self, expected_strides: usize) {
        self.timings = Some(Vec::with_capacity(expected_strides));
    }

    pub fn take_timings(&mut self) -> Vec<StageTimes> {
        self.timings
            .as_mut()
            .map(std::mem::take)
            .unwrap_or_default()
    }

    /// Clears all history, as at the start of a new stream.
    pub fn reset(&mut self) -> Result<()> {
        match &mut self.backend {
            Backend::Spectral(p) => p.reset(),
            Backend::Pfb(p) => p.reset()?,
        }
        Ok(())
    }

    /// Consumes one 640-sample stride of each input and writes 640 output
    /// samples.
    pub fn process_stride(&mut self, far: &[f64], mic: &[f64], out: &mut [f64]) -> Result<()> {
        let start = Instant::now();
        let mut t = StageTimes::default();
        match &mut self.backend {
            Backend::Spectral(p) => p.process(far, mic, out, &mut t)?,
            Backend::Pfb(p) => p.process(far, mic, out, &mut t)?,
        }
        if let Some(times) = &mut self.timings {
            t.total = ms(start, Instant::now());
            times.push(t);
        }
        Ok(())
    }
}

/// Runs whole signals through `proc` (which should be freshly reset). The
/// output has `floor(len / 640) * 640` samples aligned with the input; the
/// engine's internal delay is flushed with trailing zeros and removed.
pub fn stream_process(
    proc: &mut StreamProcessor,
    far: &AudioBuffer,
    mic: &AudioBuffer,
) -> Result<AudioBuffer> {
    if far.sample_rate() != mic.sample_rate() {
        return Err(invalid(format!(
            "sample rates differ: far {} Hz, mic {} Hz",
            far.sample_rate(),
            mic.sample_rate()
        )));
    }
    if mic.sample_rate() != SAMPLE_RATE {
        return Err(invalid(format!(
            "expected {SAMPLE_RATE} Hz input, got {} Hz",
            mic.sample_rate()
        )));
    }
    if far.len() != mic.len() {
        log::warn!(
            "far-end has {} samples, microphone {}; trimming to the shorter",
            far.len(),
            mic.len()
        );
    }
    let n = far.len().min(mic.len());
    let strides = n / STRIDE;
    let delay = proc.latency_samples();
    let total = strides + delay.div_ceil(STRIDE);
    let mut out = vec![0.0; total * STRIDE];
    let zeros = [0.0; STRIDE];
    for (i, chunk) in out.chunks_exact_mut(STRIDE).enumerate() {
        let (f, m) = if i < strides {
            let r = i * STRIDE..(i + 1) * STRIDE;
            (&far.samples()[r.clone()], &mic.samples()[r])
        } else {
            (&zeros[..], &zeros[..])
        };
        proc.process_stride(f, m, chunk)?;
    }
    out.drain(..delay);
    out.truncate(strides * STRIDE);
    AudioBuffer::new(out, SAMPLE_RATE)
}

/// File-level `cancel`: reads both WAVs, processes, writes `out_path`.
/// Returns the stage breakdown when `timing` is set.
pub fn cancel_files(
    config: &EngineConfig,
    far_path: &Path,
    mic_path: &Path,
    out_path: &Path,
    timing: bool,
) -> Result<Option<LatencyBreakdown>> {
    let far = read_wav(far_path)?;
    let mic = read_wav(mic_path)?;
    let mut proc = StreamProcessor::new(config)?;
    if timing {
        proc.enable_timing(mic.len() / STRIDE + 2);
    }
    let out = stream_process(&mut proc, &far, &mic)?;
    write_wav(out_path, &out)?;
    Ok(timing.then(|| LatencyBreakdown::from_samples(&proc.take_timings())))
}

/// Adapts a stream engine to corpus evaluation; each entry gets a fresh
/// processor.
pub struct EngineCanceller {
    config: EngineConfig,
    weights: Option<Arc<NetWeights>>,
}

impl EngineCanceller {
    /// Loads U-Net weights once up front when the config names them.
    pub fn new(config: EngineConfig) -> Result<Self> {
        config.validate()?;
        let weights = match (config.engine, &config.weights) {
            (EngineKind::Unet, Some(p)) => Some(Arc::new(load_weights(p)?)),
            (EngineKind::Unet, None) => {
                return Err(invalid("the unet engine needs a weights file"))
            }
            _ => None,
        };
        Ok(Self { config, weights })
    }

    pub fn with_weights(config: EngineConfig, weights: NetWeights) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            weights: Some(Arc::new(weights)),
        })
    }
}

impl Canceller for EngineCanceller {
    fn name(&self) -> String {
        match self.config.engine {
            EngineKind::Unet => format!("unet-{}", self.config.precision),
            other => other.to_string(),
        }
    }

    fn cancel(&self, _index: usize, far: &AudioBuffer, mic: &AudioBuffer) -> Result<Vec<f64>> {
        let mut proc = match &self.weights {
            Some(w) => StreamProcessor::with_weights(&self.config, w)?,
            None => StreamProcessor::build(&self.config, None)?,
        };
        Ok(stream_process(&mut proc, far, mic)?.into_samples())
    }
}
