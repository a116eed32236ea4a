//! Sliding 160 ms frame assembly, spectrogram normalization and the
//! reconstruction of the newest 40 ms from a predicted magnitude.

use crate::dsp::{recombine_into, ComplexSpectrogram, Grid, StftPlan};
use crate::error::{invalid, Result};
use crate::{FRAME_LEN, FREQ_BINS, STRIDE, TIME_FRAMES};

/// Floor on the normalization scale so silent frames stay invertible.
pub const NORM_EPS: f64 = 1e-8;

/// Keeps the last 2560 samples of the far-end and microphone streams.
///
/// History starts as zeros. Each [`push_stride`](Self::push_stride) shifts in
/// 640 new samples per channel and exposes the refreshed frames.
#[derive(Debug, Clone)]
pub struct FrameAssembler {
    far: Vec<f64>,
    mic: Vec<f64>,
}

impl Default for FrameAssembler {
    fn default() -> Self {
        Self::new()
    }
}

impl FrameAssembler {
    pub fn new() -> Self {
        Self {
            far: vec![0.0; FRAME_LEN],
            mic: vec![0.0; FRAME_LEN],
        }
    }

    pub fn push_stride(
        &mut self,
        far_block: &[f64],
        mic_block: &[f64],
    ) -> Result<(&[f64], &[f64])> {
        if far_block.len() != STRIDE || mic_block.len() != STRIDE {
            return Err(invalid(format!(
                "stride blocks must have {STRIDE} samples (got far {}, mic {})",
                far_block.len(),
                mic_block.len()
            )));
        }
        for (buf, block) in [(&mut self.far, far_block), (&mut self.mic, mic_block)] {
            buf.copy_within(STRIDE.., 0);
            buf[FRAME_LEN - STRIDE..].copy_from_slice(block);
        }
        Ok((&self.far, &self.mic))
    }

    pub fn far_frame(&self) -> &[f64] {
        &self.far
    }

    pub fn mic_frame(&self) -> &[f64] {
        &self.mic
    }

    pub fn reset(&mut self) {
        self.far.fill(0.0);
        self.mic.fill(0.0);
    }
}

/// Magnitude grid divided by its own maximum, with the scale kept for
/// inversion.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedFeature {
    pub grid: Grid<f64>,
    pub scale: f64,
}

impl NormalizedFeature {
    pub fn denormalize(&self) -> Grid<f64> {
        self.grid.map(|v| v * self.scale)
    }
}

pub fn normalize(mag: &Grid<f64>) -> Result<NormalizedFeature> {
    let mut grid = Grid::zeros(mag.freq(), mag.time());
    let scale = normalize_into(mag, &mut grid)?;
    Ok(NormalizedFeature { grid, scale })
}

/// Writes `mag / scale` into `out` and returns `scale = max(max(mag), ε)`.
pub fn normalize_into(mag: &Grid<f64>, out: &mut Grid<f64>) -> Result<f64> {
    mag.check_shape(out, "normalize")?;
    let mut max = 0.0f64;
    for &v in mag.data() {
        if !v.is_finite() || v < 0.0 {
            return Err(invalid(format!(
                "magnitude entry {v} is negative or non-finite"
            )));
        }
        max = max.max(v);
    }
    let scale = max.max(NORM_EPS);
    for (o, &v) in out.data_mut().iter_mut().zip(mag.data()) {
        *o = v / scale;
    }
    Ok(scale)
}

/// Reusable buffers for turning a predicted normalized magnitude back into the
/// newest stride of audio.
pub struct Reconstructor {
    mag: Grid<f64>,
    spec: ComplexSpectrogram,
    frame: Vec<f64>,
}

impl Default for Reconstructor {
    fn default() -> Self {
        Self::new()
    }
}

impl Reconstructor {
    pub fn new() -> Self {
        Self {
            mag: Grid::zeros(FREQ_BINS, TIME_FRAMES),
            spec: ComplexSpectrogram::zeros(),
            frame: vec![0.0; FRAME_LEN],
        }
    }

    /// Denormalizes `net_output` by `scale`, attaches `y_phase`, inverts, and
    /// writes the last 640 samples into `out`.
    pub fn reconstruct_into(
        &mut self,
        plan: &mut StftPlan,
        net_output: &Grid<f64>,
        y_phase: &Grid<f64>,
        scale: f64,
        out: &mut [f64],
    ) -> Result<()> {
        net_output.check_shape(&self.mag, "network output")?;
        y_phase.check_shape(&self.mag, "microphone phase")?;
        if out.len() != STRIDE {
            return Err(invalid(format!("output block must have {STRIDE} samples")));
        }
        for (m, &v) in self.mag.data_mut().iter_mut().zip(net_output.data()) {
            *m = v * scale;
        }
        recombine_into(&self.mag, y_phase, &mut self.spec)?;
        plan.inverse_into(&self.spec, &mut self.frame)?;
        out.copy_from_slice(&self.frame[FRAME_LEN - STRIDE..]);
        Ok(())
    }
}

pub fn reconstruct(net_output: &Grid<f64>, y_phase: &Grid<f64>, scale: f64) -> Result<Vec<f64>> {
    let mut out = vec![0.0; STRIDE];
    Reconstructor::new().reconstruct_into(
        &mut StftPlan::new(),
        net_output,
        y_phase,
        scale,
        &mut out,
    )?;
    Ok(out)
}
