use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use super::grid::Grid;
use super::window::hann_window;
use crate::error::{invalid, Result};
use crate::{FRAME_LEN, FREQ_BINS, HOP, TIME_FRAMES, WINDOW_LEN};

/// Zero padding applied to each side of a segment (`(WINDOW_LEN - HOP) / 2`).
pub const PAD: usize = (WINDOW_LEN - HOP) / 2;

const PADDED_LEN: usize = FRAME_LEN + 2 * PAD;

/// Overlap-add normalizers below this are treated as uncovered samples.
const NORM_FLOOR: f64 = 1e-8;

/// One-sided STFT of a 2560-sample segment: `bins[(k, t)]` for 160 bins × 32
/// frames.
///
/// Scaling is the unnormalized DFT of the windowed frame, so for every frame
/// `Σ_k c_k |X_k|² = W · Σ_n (w[n] x[n])²` with `c_0 = c_{W/2} = 1` and
/// `c_k = 2` otherwise.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexSpectrogram {
    pub bins: Grid<Complex64>,
    pub window_size: usize,
    pub hop: usize,
}

impl ComplexSpectrogram {
    pub fn zeros() -> Self {
        Self {
            bins: Grid::zeros(FREQ_BINS, TIME_FRAMES),
            window_size: WINDOW_LEN,
            hop: HOP,
        }
    }

    fn check_geometry(&self) -> Result<()> {
        if self.window_size != WINDOW_LEN
            || self.hop != HOP
            || self.bins.shape() != (FREQ_BINS, TIME_FRAMES)
        {
            return Err(invalid(format!(
                "spectrogram geometry {:?} (window {}, hop {}) is not {FREQ_BINS}x{TIME_FRAMES} (window {WINDOW_LEN}, hop {HOP})",
                self.bins.shape(),
                self.window_size,
                self.hop
            )));
        }
        Ok(())
    }
}

/// Reusable FFT plans and scratch for the fixed segment geometry. Once built,
/// the `*_into` methods do not allocate.
pub struct StftPlan {
    window: Vec<f64>,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
    frame: Vec<Complex64>,
    scratch: Vec<Complex64>,
    padded: Vec<f64>,
    norm: Vec<f64>,
}

impl Default for StftPlan {
    fn default() -> Self {
        Self::new()
    }
}

impl StftPlan {
    pub fn new() -> Self {
        let window = hann_window(WINDOW_LEN).expect("window length is a constant >= 2");
        let mut planner = FftPlanner::new();
        let fwd = planner.plan_fft_forward(WINDOW_LEN);
        let inv = planner.plan_fft_inverse(WINDOW_LEN);
        let scratch_len = fwd
            .get_inplace_scratch_len()
            .max(inv.get_inplace_scratch_len());

        let mut norm = vec![0.0; PADDED_LEN];
        for t in 0..TIME_FRAMES {
            for (n, w) in window.iter().enumerate() {
                norm[t * HOP + n] += w * w;
            }
        }

        Self {
            window,
            fwd,
            inv,
            frame: vec![Complex64::default(); WINDOW_LEN],
            scratch: vec![Complex64::default(); scratch_len],
            padded: vec![0.0; PADDED_LEN],
            norm,
        }
    }

    pub fn window(&self) -> &[f64] {
        &self.window
    }

    /// Sum of squared synthesis windows covering each output sample of a
    /// segment (padding excluded).
    pub fn window_square_sum(&self) -> &[f64] {
        &self.norm[PAD..PAD + FRAME_LEN]
    }

    pub fn forward(&mut self, segment: &[f64]) -> Result<ComplexSpectrogram> {
        let mut out = ComplexSpectrogram::zeros();
        self.forward_into(segment, &mut out)?;
        Ok(out)
    }

    pub fn forward_into(&mut self, segment: &[f64], out: &mut ComplexSpectrogram) -> Result<()> {
        if segment.len() != FRAME_LEN {
            return Err(invalid(format!(
                "stft segment has {} samples, expected {FRAME_LEN}",
                segment.len()
            )));
        }
        out.check_geometry()?;
        // `inverse_into` shares this buffer and leaves overlap-add residue
        // in the margins.
        self.padded[..PAD].fill(0.0);
        self.padded[PAD..PAD + FRAME_LEN].copy_from_slice(segment);
        self.padded[PAD + FRAME_LEN..].fill(0.0);

        for t in 0..TIME_FRAMES {
            let start = t * HOP;
            for (n, slot) in self.frame.iter_mut().enumerate() {
                *slot = Complex64::new(self.padded[start + n] * self.window[n], 0.0);
            }
            self.fwd
                .process_with_scratch(&mut self.frame, &mut self.scratch);
            for k in 0..FREQ_BINS {
                out.bins[(k, t)] = self.frame[k];
            }
        }
        Ok(())
    }

    pub fn inverse(&mut self, spec: &ComplexSpectrogram) -> Result<Vec<f64>> {
        let mut out = vec![0.0; FRAME_LEN];
        self.inverse_into(spec, &mut out)?;
        Ok(out)
    }

    /// Weighted overlap-add synthesis with the analysis window, normalized by
    /// the per-sample window-square sum.
    pub fn inverse_into(&mut self, spec: &ComplexSpectrogram, out: &mut [f64]) -> Result<()> {
        spec.check_geometry()?;
        if out.len() != FRAME_LEN {
            return Err(invalid(format!(
                "istft output has {} samples, expected {FRAME_LEN}",
                out.len()
            )));
        }
        self.padded.fill(0.0);
        let scale = 1.0 / WINDOW_LEN as f64;

        for t in 0..TIME_FRAMES {
            for k in 0..FREQ_BINS {
                self.frame[k] = spec.bins[(k, t)];
            }
            // Hermitian mirror; the DC and Nyquist bins keep only their real
            // part through the final `.re`.
            for k in 1..WINDOW_LEN - FREQ_BINS + 1 {
                self.frame[WINDOW_LEN - k] = spec.bins[(k, t)].conj();
            }
            self.inv
                .process_with_scratch(&mut self.frame, &mut self.scratch);
            let start = t * HOP;
            for (n, w) in self.window.iter().enumerate() {
                self.padded[start + n] += w * self.frame[n].re * scale;
            }
        }

        for (i, o) in out.iter_mut().enumerate() {
            let n = self.norm[PAD + i];
            *o = if n < NORM_FLOOR {
                0.0
            } else {
                self.padded[PAD + i] / n
            };
        }
        Ok(())
    }
}

/// Forward STFT of one 2560-sample segment.
pub fn stft(segment: &[f64]) -> Result<ComplexSpectrogram> {
    StftPlan::new().forward(segment)
}

/// Inverse STFT back to a 2560-sample segment.
pub fn istft(spec: &ComplexSpectrogram) -> Result<Vec<f64>> {
    StftPlan::new().inverse(spec)
}

/// Splits a spectrogram into magnitude and phase; the phase of a zero entry
/// is 0.
pub fn magnitude_phase(spec: &ComplexSpectrogram) -> (Grid<f64>, Grid<f64>) {
    let (f, t) = spec.bins.shape();
    let mut mag = Grid::zeros(f, t);
    let mut phase = Grid::zeros(f, t);
    magnitude_phase_into(spec, &mut mag, &mut phase).expect("shapes constructed to match");
    (mag, phase)
}

pub fn magnitude_phase_into(
    spec: &ComplexSpectrogram,
    mag: &mut Grid<f64>,
    phase: &mut Grid<f64>,
) -> Result<()> {
    spec.bins.check_shape(mag, "magnitude grid")?;
    spec.bins.check_shape(phase, "phase grid")?;
    for ((c, m), p) in spec
        .bins
        .data()
        .iter()
        .zip(mag.data_mut())
        .zip(phase.data_mut())
    {
        *m = c.norm();
        // atan2(0, 0) is already 0, but -0.0 parts would give ±π.
        *p = if *m == 0.0 { 0.0 } else { c.im.atan2(c.re) };
    }
    Ok(())
}

pub fn recombine(mag: &Grid<f64>, phase: &Grid<f64>) -> Result<ComplexSpectrogram> {
    let mut out = ComplexSpectrogram {
        bins: Grid::zeros(mag.freq(), mag.time()),
        window_size: WINDOW_LEN,
        hop: HOP,
    };
    recombine_into(mag, phase, &mut out)?;
    Ok(out)
}

pub fn recombine_into(
    mag: &Grid<f64>,
    phase: &Grid<f64>,
    out: &mut ComplexSpectrogram,
) -> Result<()> {
    mag.check_shape(phase, "recombine")?;
    mag.check_shape(&out.bins, "recombine output")?;
    for ((o, m), p) in out
        .bins
        .data_mut()
        .iter_mut()
        .zip(mag.data())
        .zip(phase.data())
    {
        if !m.is_finite() || !p.is_finite() {
            return Err(invalid("non-finite magnitude or phase"));
        }
        *o = Complex64::from_polar(*m, *p);
    }
    Ok(())
}
