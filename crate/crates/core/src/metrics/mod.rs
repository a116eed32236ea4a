//! Echo-suppression and quality measures.
//!
//! ERLE is computed over frames where the near-end talker is silent, using a
//! per-frame energy mask built from the ground-truth near-end signal. PESQ is
//! not implemented; a log-spectral distance stands in as the quality proxy
//! and is labeled as such in reports.

mod corpus;

use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::dsp::{hann_window, mean_square, AudioBuffer};
use crate::error::{invalid, Error, Result};
use crate::STRIDE;

pub use corpus::{evaluate_corpus, Canceller, MetricsReport, SampleMetrics, ScenarioSummary};

/// Frame length of the activity mask (one 40 ms stride).
pub const MASK_FRAME: usize = STRIDE;
pub const DEFAULT_THRESHOLD_DBFS: f64 = -40.0;

pub const LSD_FRAME: usize = 512;
pub const LSD_HOP: usize = 256;
/// Log-magnitude floor of the spectral distortion, in dB re full scale.
pub const LSD_FLOOR_DB: f64 = -80.0;

/// Per-frame speech activity of a signal.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivityMask {
    active: Vec<bool>,
    threshold_dbfs: f64,
}

impl ActivityMask {
    pub fn from_frames(active: Vec<bool>, threshold_dbfs: f64) -> Self {
        Self {
            active,
            threshold_dbfs,
        }
    }

    pub fn frames(&self) -> &[bool] {
        &self.active
    }

    pub fn threshold_dbfs(&self) -> f64 {
        self.threshold_dbfs
    }

    pub fn len(&self) -> usize {
        self.active.len()
    }

    pub fn is_empty(&self) -> bool {
        self.active.is_empty()
    }

    pub fn count(&self) -> usize {
        self.active.iter().filter(|&&a| a).count()
    }

    /// Complement: the frames where the signal is inactive.
    pub fn inverted(&self) -> Self {
        Self {
            active: self.active.iter().map(|a| !a).collect(),
            threshold_dbfs: self.threshold_dbfs,
        }
    }
}

/// Marks 640-sample frames whose mean power exceeds `threshold_dbfs`.
/// A trailing partial frame is dropped.
pub fn activity_mask(s: &[f64], threshold_dbfs: f64) -> ActivityMask {
    let active = s
        .chunks_exact(MASK_FRAME)
        .map(|frame| {
            let ms = mean_square(frame);
            ms > 0.0 && 10.0 * ms.log10() > threshold_dbfs
        })
        .collect();
    ActivityMask::from_frames(active, threshold_dbfs)
}

/// Sums `x²` over the frames selected by `mask`.
pub fn masked_energy(x: &[f64], mask: &ActivityMask) -> f64 {
    x.chunks_exact(MASK_FRAME)
        .zip(mask.frames())
        .filter(|(_, &sel)| sel)
        .map(|(frame, _)| frame.iter().map(|v| v * v).sum::<f64>())
        .sum()
}

/// Echo return loss enhancement in dB over the frames selected by `mask`
/// (normally the near-end-inactive frames).
///
/// A zero residual gives `+∞`; a zero microphone and residual give 0 dB.
pub fn erle(y: &AudioBuffer, s_hat: &AudioBuffer, mask: &ActivityMask) -> Result<f64> {
    erle_samples(y.samples(), s_hat.samples(), mask)
}

pub fn erle_samples(y: &[f64], s_hat: &[f64], mask: &ActivityMask) -> Result<f64> {
    if y.len() != s_hat.len() {
        return Err(invalid(format!(
            "erle needs equal lengths (mic {}, estimate {})",
            y.len(),
            s_hat.len()
        )));
    }
    if mask.len() != y.len() / MASK_FRAME {
        return Err(invalid(format!(
            "mask has {} frames, signal has {}",
            mask.len(),
            y.len() / MASK_FRAME
        )));
    }
    if mask.count() == 0 {
        return Err(Error::Undefined(
            "erle over an empty frame selection".into(),
        ));
    }
    let num = masked_energy(y, mask);
    let den = masked_energy(s_hat, mask);
    Ok(match (num > 0.0, den > 0.0) {
        (_, true) => 10.0 * (num / den).log10(),
        (true, false) => f64::INFINITY,
        (false, false) => 0.0,
    })
}

/// Framed log-magnitude spectra with a fixed FFT plan.
struct LogSpectra {
    window: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
    buf: Vec<Complex64>,
    scale: f64,
}

impl LogSpectra {
    fn new() -> Self {
        let window = hann_window(LSD_FRAME).expect("constant frame length");
        // Full-scale sine at a bin centre maps to 0 dB.
        let scale = 2.0 / window.iter().sum::<f64>();
        Self {
            window,
            fft: FftPlanner::new().plan_fft_forward(LSD_FRAME),
            buf: vec![Complex64::default(); LSD_FRAME],
            scale,
        }
    }

    fn frame(&mut self, x: &[f64], out: &mut [f64]) {
        for (i, b) in self.buf.iter_mut().enumerate() {
            *b = Complex64::new(x.get(i).copied().unwrap_or(0.0) * self.window[i], 0.0);
        }
        self.fft.process(&mut self.buf);
        for (o, c) in out.iter_mut().zip(&self.buf) {
            let mag = c.norm() * self.scale;
            *o = if mag > 0.0 {
                (20.0 * mag.log10()).max(LSD_FLOOR_DB)
            } else {
                LSD_FLOOR_DB
            };
        }
    }
}

/// Frame starts of the distortion measure; a signal shorter than one frame
/// is zero-padded into a single frame.
fn lsd_starts(len: usize) -> impl Iterator<Item = usize> {
    let n = if len == 0 {
        0
    } else if len <= LSD_FRAME {
        1
    } else {
        1 + (len - LSD_FRAME) / LSD_HOP
    };
    (0..n).map(|i| i * LSD_HOP)
}

/// Mean over frames of the RMS difference between log-magnitude spectra
/// (512-sample Hann frames, 256 hop, one-sided, floored at -80 dB).
///
/// This is a quality proxy, not PESQ. Lower is better; identical inputs give 0.
pub fn spectral_distortion(s_hat: &[f64], s: &[f64]) -> Result<f64> {
    if s_hat.len() != s.len() {
        return Err(invalid(format!(
            "spectral distortion needs equal lengths ({} vs {})",
            s_hat.len(),
            s.len()
        )));
    }
    let bins = LSD_FRAME / 2 + 1;
    let mut spec = LogSpectra::new();
    let (mut a, mut b) = (vec![0.0; bins], vec![0.0; bins]);
    let (mut total, mut frames) = (0.0, 0usize);
    for start in lsd_starts(s.len()) {
        spec.frame(&s_hat[start..], &mut a);
        spec.frame(&s[start..], &mut b);
        let mse = a.iter().zip(&b).map(|(p, q)| (p - q).powi(2)).sum::<f64>() / bins as f64;
        total += mse.sqrt();
        frames += 1;
    }
    Ok(if frames == 0 {
        0.0
    } else {
        total / frames as f64
    })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn noise(len: usize, amp: f64, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..len).map(|_| rng.gen_range(-amp..amp)).collect()
    }

    fn buf(x: Vec<f64>) -> AudioBuffer {
        AudioBuffer::new(x, 16_000).unwrap()
    }

    #[test]
    fn mask_silence_and_sine() {
        let m = activity_mask(&vec![0.0; 6400], -40.0);
        assert_eq!(m.len(), 10);
        assert_eq!(m.count(), 0);

        let sine: Vec<f64> = (0..6500).map(|n| (0.05 * n as f64).sin()).collect();
        let m = activity_mask(&sine, -40.0);
        assert_eq!(m.len(), 10);
        assert_eq!(m.count(), 10);
    }

    #[test]
    fn mask_burst_in_frames_three_to_five() {
        let mut s = vec![0.0; 10 * MASK_FRAME];
        let burst = noise(3 * MASK_FRAME, 0.3, 7);
        s[3 * MASK_FRAME..6 * MASK_FRAME].copy_from_slice(&burst);
        let m = activity_mask(&s, -40.0);
        let expected: Vec<bool> = (0..10).map(|i| (3..=5).contains(&i)).collect();
        assert_eq!(m.frames(), &expected[..]);
        assert_eq!(m.inverted().count(), 7);
    }

    #[test]
    fn mask_threshold_is_strict() {
        let s = vec![0.01; MASK_FRAME];
        let level = 10.0 * mean_square(&s).log10();
        assert!(!activity_mask(&s, level).frames()[0]);
        assert!(activity_mask(&s, level - 1e-9).frames()[0]);
    }

    #[test]
    fn erle_examples() {
        let y = noise(6400, 0.5, 1);
        let all = ActivityMask::from_frames(vec![true; 10], -40.0);
        assert_eq!(erle(&buf(y.clone()), &buf(y.clone()), &all).unwrap(), 0.0);

        let tenth: Vec<f64> = y.iter().map(|v| v / 10.0).collect();
        let e = erle(&buf(y.clone()), &buf(tenth), &all).unwrap();
        assert!((e - 20.0).abs() < 1e-9);

        let zero = vec![0.0; 6400];
        assert_eq!(erle_samples(&y, &zero, &all).unwrap(), f64::INFINITY);
        assert_eq!(erle_samples(&zero, &zero, &all).unwrap(), 0.0);

        let none = ActivityMask::from_frames(vec![false; 10], -40.0);
        assert!(matches!(
            erle_samples(&y, &y, &none),
            Err(Error::Undefined(_))
        ));
        assert!(erle_samples(&y, &y[..640], &all).is_err());
    }

    #[test]
    fn erle_counts_only_masked_frames() {
        // Attenuate by 6.02 dB inside the masked frames, leave the rest alone.
        let y = noise(10 * MASK_FRAME, 0.5, 2);
        let sel: Vec<bool> = (0..10).map(|i| i % 3 == 0).collect();
        let g = 10f64.powf(-6.02 / 20.0);
        let s_hat: Vec<f64> = y
            .iter()
            .enumerate()
            .map(|(n, v)| if sel[n / MASK_FRAME] { v * g } else { *v * 0.5 })
            .collect();
        let e = erle_samples(&y, &s_hat, &ActivityMask::from_frames(sel, -40.0)).unwrap();
        assert!((e - 6.02).abs() < 0.01, "{e}");
    }

    proptest! {
        #[test]
        fn erle_scale_invariant(seed in 0u64..1000, c in 0.01f64..100.0, att in 0.05f64..1.0) {
            let y = noise(4 * MASK_FRAME, 0.5, seed);
            let s: Vec<f64> = y.iter().map(|v| v * att).collect();
            let m = ActivityMask::from_frames(vec![true, false, true, true], -40.0);
            let a = erle_samples(&y, &s, &m).unwrap();
            let ys: Vec<f64> = y.iter().map(|v| v * c).collect();
            let ss: Vec<f64> = s.iter().map(|v| v * c).collect();
            let b = erle_samples(&ys, &ss, &m).unwrap();
            prop_assert!((a - b).abs() < 1e-9);
        }

        #[test]
        fn distortion_nonnegative(seed in 0u64..1000) {
            let a = noise(3000, 0.3, seed);
            let b = noise(3000, 0.3, seed + 1);
            prop_assert!(spectral_distortion(&a, &b).unwrap() >= 0.0);
            prop_assert_eq!(spectral_distortion(&a, &a).unwrap(), 0.0);
        }
    }

    #[test]
    fn distortion_doubling_is_six_db() {
        let s = noise(8000, 0.2, 3);
        let s2: Vec<f64> = s.iter().map(|v| 2.0 * v).collect();
        let d = spectral_distortion(&s2, &s).unwrap();
        assert!((d - 20.0 * 2f64.log10()).abs() < 0.01, "{d}");
    }

    #[test]
    fn distortion_against_silence_is_floor_driven() {
        // Oracle: naive DFT per frame, floored, compared against the floor.
        let s = noise(1500, 0.2, 4);
        let zero = vec![0.0; s.len()];
        let w = hann_window(LSD_FRAME).unwrap();
        let scale = 2.0 / w.iter().sum::<f64>();
        let mut expected = 0.0;
        let starts = [0, 256, 512, 768];
        for &st in &starts {
            let mut acc = 0.0;
            for k in 0..=LSD_FRAME / 2 {
                let (mut re, mut im) = (0.0, 0.0);
                for n in 0..LSD_FRAME {
                    let ang = -2.0 * std::f64::consts::PI * (k * n) as f64 / LSD_FRAME as f64;
                    let v = s[st + n] * w[n];
                    re += v * ang.cos();
                    im += v * ang.sin();
                }
                let db = (20.0 * ((re * re + im * im).sqrt() * scale).log10()).max(LSD_FLOOR_DB);
                acc += (db - LSD_FLOOR_DB).powi(2);
            }
            expected += (acc / (LSD_FRAME / 2 + 1) as f64).sqrt();
        }
        expected /= starts.len() as f64;
        let d = spectral_distortion(&zero, &s).unwrap();
        assert!((d - expected).abs() < 1e-9, "{d} vs {expected}");
    }

    #[test]
    fn distortion_edge_lengths() {
        assert_eq!(spectral_distortion(&[], &[]).unwrap(), 0.0);
        let s = noise(100, 0.2, 5);
        assert_eq!(spectral_distortion(&s, &s).unwrap(), 0.0);
        assert!(spectral_distortion(&s, &s[..50]).is_err());
    }
}
