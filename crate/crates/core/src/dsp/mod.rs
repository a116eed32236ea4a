//! Windowing, short-time Fourier analysis/synthesis and basic signal types.
//!
//! The STFT geometry is fixed: 2560-sample segments, a 318-sample periodic
//! Hann window and an 80-sample hop, giving a 160×32 one-sided grid. The
//! segment is zero-padded by 119 samples on each side so that exactly 32
//! frames cover it.

mod audio;
mod grid;
mod stft;
mod window;

pub use audio::AudioBuffer;
pub use grid::Grid;
pub use stft::{
    istft, magnitude_phase, magnitude_phase_into, recombine, recombine_into, stft,
    ComplexSpectrogram, StftPlan, PAD,
};
pub use window::hann_window;

pub use rustfft::num_complex::Complex64;

/// Mean of squared samples; 0 for an empty slice.
pub fn mean_square(x: &[f64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64
}

pub fn energy(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

pub fn rms(x: &[f64]) -> f64 {
    mean_square(x).sqrt()
}

/// Causal linear convolution `(x ∗ h)[n]` for `n < x.len()`, via FFT.
pub fn convolve(x: &[f64], h: &[f64]) -> Vec<f64> {
    if x.is_empty() || h.is_empty() {
        return vec![0.0; x.len()];
    }
    let n = (x.len() + h.len() - 1).next_power_of_two();
    let mut planner = rustfft::FftPlanner::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let lift = |v: &[f64]| {
        let mut out = vec![Complex64::default(); n];
        for (o, &s) in out.iter_mut().zip(v) {
            o.re = s;
        }
        out
    };
    let (mut a, mut b) = (lift(x), lift(h));
    fwd.process(&mut a);
    fwd.process(&mut b);
    for (p, q) in a.iter_mut().zip(&b) {
        *p *= q;
    }
    inv.process(&mut a);
    a[..x.len()].iter().map(|c| c.re / n as f64).collect()
}
