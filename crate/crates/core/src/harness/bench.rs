use std::fmt::Write as _;

use super::{EngineConfig, EngineKind, LatencyBreakdown, StreamProcessor};
use crate::dsp::{convolve, AudioBuffer};
use crate::error::{invalid, Result};
use crate::synth::{gen_rir, speech_shaped_noise};
use crate::unet::{NetWeights, Precision};
use crate::{SAMPLE_RATE, STRIDE};

/// Real-time budget per stride: the stride duration itself.
pub const BUDGET_MS: f64 = 40.0;
/// Inference-time reduction from fp16 reported on the reference hardware.
pub const PAPER_FP16_REDUCTION_PCT: f64 = 52.5;

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub label: String,
    pub breakdown: LatencyBreakdown,
    pub budget_ms: f64,
    /// p95 of the per-stride total is within the budget.
    pub pass: bool,
}

impl BenchReport {
    pub fn to_text(&self) -> String {
        let mut out = format!("engine: {}\n", self.label);
        out.push_str(&self.breakdown.to_table());
        let _ = writeln!(
            out,
            "budget {:.1} ms, p95 total {:.3} ms over {} strides: {}",
            self.budget_ms,
            self.breakdown.total_ms.p95,
            self.breakdown.strides,
            if self.pass { "PASS" } else { "FAIL" }
        );
        out
    }
}

/// Far/mic pair with a reverberant echo and an independent near-end talker.
fn bench_signals(duration_s: f64) -> Result<(AudioBuffer, AudioBuffer)> {
    let n = (duration_s * SAMPLE_RATE as f64) as usize;
    if n < STRIDE {
        return Err(invalid(format!(
            "bench duration {duration_s} s is shorter than one stride"
        )));
    }
    let far = speech_shaped_noise(n, 1);
    let near = speech_shaped_noise(n, 2);
    let echo = convolve(&far, &gen_rir(64.0, 20.0, 3)?);
    let mic = near.iter().zip(&echo).map(|(s, d)| s + 0.5 * d).collect();
    Ok((
        AudioBuffer::new(far, SAMPLE_RATE)?,
        AudioBuffer::new(mic, SAMPLE_RATE)?,
    ))
}

fn label(cfg: &EngineConfig) -> String {
    match cfg.engine {
        EngineKind::Unet => format!("unet-{}", cfg.precision),
        other => other.to_string(),
    }
}

/// Streams through `proc` once, recording stage times. The first stride of
/// each pass is a warm-up and is not recorded.
fn timed_pass(
    proc: &mut StreamProcessor,
    far: &AudioBuffer,
    mic: &AudioBuffer,
    sink: &mut Vec<super::StageTimes>,
) -> Result<()> {
    proc.reset()?;
    let strides = mic.len() / STRIDE;
    let mut out = [0.0; STRIDE];
    proc.enable_timing(strides);
    for i in 0..strides {
        let r = i * STRIDE..(i + 1) * STRIDE;
        proc.process_stride(&far.samples()[r.clone()], &mic.samples()[r], &mut out)?;
    }
    sink.extend(proc.take_timings().into_iter().skip(1));
    Ok(())
}

/// Times `repetitions` passes over `duration_s` seconds of synthetic input.
pub fn bench(
    config: &EngineConfig,
    weights: Option<&NetWeights>,
    duration_s: f64,
    repetitions: usize,
) -> Result<BenchReport> {
    let (far, mic) = bench_signals(duration_s)?;
    let mut proc = match weights {
        Some(w) => StreamProcessor::with_weights(config, w)?,
        None => StreamProcessor::new(config)?,
    };
    let mut times = Vec::new();
    for _ in 0..repetitions.max(1) {
        timed_pass(&mut proc, &far, &mic, &mut times)?;
    }
    Ok(report(label(config), &times))
}

fn report(label: String, times: &[super::StageTimes]) -> BenchReport {
    let breakdown = LatencyBreakdown::from_samples(times);
    BenchReport {
        label,
        pass: breakdown.total_ms.p95 <= BUDGET_MS,
        breakdown,
        budget_ms: BUDGET_MS,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrecisionComparison {
    pub fp32: BenchReport,
    pub fp16: BenchReport,
    /// Median fp16 inference time over median fp32 inference time.
    pub inference_ratio: f64,
    pub total_ratio: f64,
}

impl PrecisionComparison {
    pub fn reduction_pct(&self) -> f64 {
        (1.0 - self.inference_ratio) * 100.0
    }

    pub fn to_text(&self) -> String {
        let mut out = self.fp32.to_text();
        out.push_str(&self.fp16.to_text());
        let _ = writeln!(
            out,
            "fp16/fp32 median inference ratio {:.3} ({:.1} % reduction; reference hardware reported {PAPER_FP16_REDUCTION_PCT} %), total ratio {:.3}",
            self.inference_ratio,
            self.reduction_pct(),
            self.total_ratio
        );
        out
    }
}

/// Benchmarks the U-Net engine at both precisions, alternating passes so
/// that machine noise hits both alike.
pub fn compare_precisions(
    weights: &NetWeights,
    duration_s: f64,
    repetitions: usize,
) -> Result<PrecisionComparison> {
    let (far, mic) = bench_signals(duration_s)?;
    let cfg = |precision| EngineConfig {
        precision,
        ..EngineConfig::with_engine(EngineKind::Unet)
    };
    let (c32, c16) = (cfg(Precision::Fp32), cfg(Precision::Fp16));
    let mut p32 = StreamProcessor::with_weights(&c32, weights)?;
    let mut p16 = StreamProcessor::with_weights(&c16, weights)?;
    let (mut t32, mut t16) = (Vec::new(), Vec::new());
    for _ in 0..repetitions.max(1) {
        timed_pass(&mut p32, &far, &mic, &mut t32)?;
        timed_pass(&mut p16, &far, &mic, &mut t16)?;
    }
    let (fp32, fp16) = (report(label(&c32), &t32), report(label(&c16), &t16));
    let inference_ratio =
        fp16.breakdown.model_inference_ms.median / fp32.breakdown.model_inference_ms.median;
    let total_ratio = fp16.breakdown.total_ms.median / fp32.breakdown.total_ms.median;
    Ok(PrecisionComparison {
        fp32,
        fp16,
        inference_ratio,
        total_ratio,
    })
}
