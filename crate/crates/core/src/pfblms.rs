//! Partitioned block frequency-domain NLMS echo canceller.
//!
//! Overlap-save filtering with `P = ceil(num_taps / B)` partitions of `B`
//! taps each, transformed with a `2B`-point FFT. Updates are gradient
//! constrained: every partition's time-domain image keeps zeros in its upper
//! half, and taps past `num_taps` in the last partition are held at zero.
//!
//! Step-size convention: the correlation gradient in each bin is divided by
//! the per-sample input power of that bin (averaged over the `P` most recent
//! input spectra) plus `δ = 1e-6`. For white input this behaves like
//! block-LMS with per-block contraction `1 - μB`, i.e. time-domain NLMS with
//! normalized step `μ·L` for a filter of `L` taps.

use std::collections::VecDeque;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{invalid, Error, Result};

/// Paper baseline: 4000 taps, 1024-sample blocks, μ = 1e-4.
pub const DEFAULT_TAPS: usize = 4000;
pub const DEFAULT_BLOCK: usize = 1024;
pub const DEFAULT_MU: f64 = 1e-4;

/// Regularizer added to the per-bin power normalizer.
pub const POWER_REGULARIZER: f64 = 1e-6;
/// Consecutive diverging blocks that trigger a step-size halving.
pub const DIVERGENCE_WINDOW: usize = 8;

pub struct PfbLms {
    num_taps: usize,
    block: usize,
    mu: f64,
    coeffs: Vec<Vec<Complex64>>,
    // X_{t-p} at index p.
    history: VecDeque<Vec<Complex64>>,
    prev_far: Vec<f64>,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
    scratch: Vec<Complex64>,
    work: Vec<Complex64>,
    err_spec: Vec<Complex64>,
    power: Vec<f64>,
    err: Vec<f64>,
    diverging_run: usize,
    halvings: usize,
}

impl PfbLms {
    /// `mu = 0` freezes adaptation.
    pub fn new(num_taps: usize, block: usize, mu: f64) -> Result<Self> {
        if num_taps == 0 {
            return Err(invalid("num_taps must be at least 1"));
        }
        if block == 0 || !block.is_power_of_two() {
            return Err(invalid(format!("block size {block} is not a power of two")));
        }
        if !mu.is_finite() || mu < 0.0 {
            return Err(invalid(format!(
                "step size {mu} must be finite and non-negative"
            )));
        }
        let partitions = num_taps.div_ceil(block);
        let n = 2 * block;
        let mut planner = FftPlanner::new();
        let fwd = planner.plan_fft_forward(n);
        let inv = planner.plan_fft_inverse(n);
        let scratch_len = fwd
            .get_inplace_scratch_len()
            .max(inv.get_inplace_scratch_len());
        let zeros = vec![Complex64::default(); n];
        Ok(Self {
            num_taps,
            block,
            mu,
            coeffs: vec![zeros.clone(); partitions],
            history: (0..partitions).map(|_| zeros.clone()).collect(),
            prev_far: vec![0.0; block],
            fwd,
            inv,
            scratch: vec![Complex64::default(); scratch_len],
            work: zeros.clone(),
            err_spec: zeros,
            power: vec![0.0; n],
            err: vec![0.0; block],
            diverging_run: 0,
            halvings: 0,
        })
    }

    pub fn with_defaults() -> Self {
        Self::new(DEFAULT_TAPS, DEFAULT_BLOCK, DEFAULT_MU).expect("default configuration is valid")
    }

    pub fn partitions(&self) -> usize {
        self.coeffs.len()
    }

    pub fn block_size(&self) -> usize {
        self.block
    }

    pub fn num_taps(&self) -> usize {
        self.num_taps
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }

    pub fn halvings(&self) -> usize {
        self.halvings
    }

    /// Loads a time-domain impulse response (at most `num_taps` long).
    pub fn set_taps(&mut self, taps: &[f64]) -> Result<()> {
        if taps.len() > self.num_taps {
            return Err(invalid(format!(
                "{} taps exceed the filter length {}",
                taps.len(),
                self.num_taps
            )));
        }
        let b = self.block;
        for (p, coeffs) in self.coeffs.iter_mut().enumerate() {
            coeffs.fill(Complex64::default());
            let lo = (p * b).min(taps.len());
            let hi = ((p + 1) * b).min(taps.len());
            for (c, &t) in coeffs.iter_mut().zip(&taps[lo..hi]) {
                *c = Complex64::new(t, 0.0);
            }
            self.fwd.process_with_scratch(coeffs, &mut self.scratch);
        }
        Ok(())
    }

    /// Real part of the `2B`-sample time-domain image of partition `p`.
    pub fn partition_image(&self, p: usize) -> Vec<f64> {
        let mut buf = self.coeffs[p].clone();
        let mut scratch = vec![Complex64::default(); self.inv.get_inplace_scratch_len()];
        self.inv.process_with_scratch(&mut buf, &mut scratch);
        let scale = 1.0 / buf.len() as f64;
        buf.iter().map(|c| c.re * scale).collect()
    }

    /// Current impulse response estimate, `num_taps` long.
    pub fn taps(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.partitions() * self.block);
        for p in 0..self.partitions() {
            out.extend_from_slice(&self.partition_image(p)[..self.block]);
        }
        out.truncate(self.num_taps);
        out
    }

    pub fn process_block(&mut self, far_block: &[f64], mic_block: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.block];
        self.process_block_into(far_block, mic_block, &mut out)?;
        Ok(out)
    }

    /// Filters one block, writes `mic - echo_estimate` into `err_out`, adapts,
    /// and runs the divergence check.
    pub fn process_block_into(
        &mut self,
        far_block: &[f64],
        mic_block: &[f64],
        err_out: &mut [f64],
    ) -> Result<()> {
        let b = self.block;
        if far_block.len() != b || mic_block.len() != b || err_out.len() != b {
            return Err(invalid(format!(
                "blocks must have {b} samples (far {}, mic {}, out {})",
                far_block.len(),
                mic_block.len(),
                err_out.len()
            )));
        }
        let n = 2 * b;
        let inv_n = 1.0 / n as f64;

        // Newest input spectrum of [previous block | current block].
        let mut newest = self.history.pop_back().expect("at least one partition");
        for (i, slot) in newest.iter_mut().enumerate() {
            let v = if i < b {
                self.prev_far[i]
            } else {
                far_block[i - b]
            };
            *slot = Complex64::new(v, 0.0);
        }
        self.fwd
            .process_with_scratch(&mut newest, &mut self.scratch);
        self.history.push_front(newest);
        self.prev_far.copy_from_slice(far_block);

        // Echo estimate: valid half of Σ_p IFFT(W_p ⊙ X_{t-p}).
        self.work.fill(Complex64::default());
        for (w, x) in self.coeffs.iter().zip(&self.history) {
            for ((acc, wk), xk) in self.work.iter_mut().zip(w).zip(x) {
                *acc += wk * xk;
            }
        }
        self.inv
            .process_with_scratch(&mut self.work, &mut self.scratch);
        for i in 0..b {
            self.err[i] = mic_block[i] - self.work[b + i].re * inv_n;
        }
        err_out.copy_from_slice(&self.err);

        if self.mu > 0.0 {
            self.adapt()?;
        }
        let err = std::mem::take(&mut self.err);
        self.check_divergence(&err, mic_block);
        self.err = err;
        Ok(())
    }

    fn adapt(&mut self) -> Result<()> {
        let b = self.block;
        let n = 2 * b;
        let inv_n = 1.0 / n as f64;
        let parts = self.partitions();

        for (i, slot) in self.err_spec.iter_mut().enumerate() {
            *slot = Complex64::new(if i < b { 0.0 } else { self.err[i - b] }, 0.0);
        }
        self.fwd
            .process_with_scratch(&mut self.err_spec, &mut self.scratch);

        self.power.fill(0.0);
        for x in &self.history {
            for (p, xk) in self.power.iter_mut().zip(x) {
                *p += xk.norm_sqr();
            }
        }
        let power_scale = inv_n / parts as f64;
        for p in self.power.iter_mut() {
            *p = *p * power_scale + POWER_REGULARIZER;
        }

        let last_len = self.num_taps - (parts - 1) * b;
        for p in 0..parts {
            let x = &self.history[p];
            for k in 0..n {
                self.work[k] = x[k].conj() * self.err_spec[k] / self.power[k];
            }
            self.inv
                .process_with_scratch(&mut self.work, &mut self.scratch);
            let keep = if p + 1 == parts { last_len } else { b };
            for (i, g) in self.work.iter_mut().enumerate() {
                *g = if i < keep {
                    Complex64::new(g.re * inv_n, 0.0)
                } else {
                    Complex64::default()
                };
            }
            self.fwd
                .process_with_scratch(&mut self.work, &mut self.scratch);
            for (w, g) in self.coeffs[p].iter_mut().zip(&self.work) {
                *w += g * self.mu;
            }
        }

        if self
            .coeffs
            .iter()
            .flatten()
            .any(|c| !c.re.is_finite() || !c.im.is_finite())
        {
            return Err(Error::Numerical(
                "PFB-LMS coefficients became non-finite".into(),
            ));
        }
        Ok(())
    }

    /// Records whether this block diverged (`mean err² > mean mic²`). After
    /// eight consecutive diverging blocks μ is halved and the window restarts.
    pub fn check_divergence(&mut self, err_block: &[f64], mic_block: &[f64]) -> bool {
        let err_ms = crate::dsp::mean_square(err_block);
        let mic_ms = crate::dsp::mean_square(mic_block);
        if err_ms > mic_ms {
            self.diverging_run += 1;
        } else {
            self.diverging_run = 0;
        }
        if self.diverging_run >= DIVERGENCE_WINDOW {
            self.diverging_run = 0;
            self.mu *= 0.5;
            self.halvings += 1;
            log::debug!("PFB-LMS diverging, step size halved to {}", self.mu);
            true
        } else {
            false
        }
    }

    /// Runs a whole signal through the filter. The tail is zero-padded to a
    /// full block and the output is trimmed back to the input length.
    pub fn process_signal(&mut self, far: &[f64], mic: &[f64]) -> Result<Vec<f64>> {
        if far.len() != mic.len() {
            return Err(invalid("far-end and microphone lengths differ"));
        }
        let b = self.block;
        let mut out = vec![0.0; far.len().div_ceil(b) * b];
        let mut far_blk = vec![0.0; b];
        let mut mic_blk = vec![0.0; b];
        for (i, chunk) in out.chunks_mut(b).enumerate() {
            let lo = i * b;
            let hi = (lo + b).min(far.len());
            far_blk.fill(0.0);
            mic_blk.fill(0.0);
            far_blk[..hi - lo].copy_from_slice(&far[lo..hi]);
            mic_blk[..hi - lo].copy_from_slice(&mic[lo..hi]);
            self.process_block_into(&far_blk, &mic_blk, chunk)?;
        }
        out.truncate(far.len());
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    use super::*;

    fn colored_noise(len: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut y1, mut y2) = (0.0, 0.0);
        (0..len)
            .map(|_| {
                let e: f64 = rng.sample(StandardNormal);
                let y = 0.05 * e + 1.3 * y1 - 0.45 * y2;
                y2 = y1;
                y1 = y;
                y
            })
            .collect()
    }

    fn direct_fir(x: &[f64], h: &[f64]) -> Vec<f64> {
        (0..x.len())
            .map(|n| {
                h.iter()
                    .enumerate()
                    .take(n + 1)
                    .map(|(j, hj)| hj * x[n - j])
                    .sum()
            })
            .collect()
    }

    fn erle_db(mic: &[f64], err: &[f64]) -> f64 {
        10.0 * (crate::dsp::energy(mic) / crate::dsp::energy(err)).log10()
    }

    #[test]
    fn partition_counts() {
        assert_eq!(PfbLms::new(4000, 1024, 1e-4).unwrap().partitions(), 4);
        assert_eq!(PfbLms::new(1024, 1024, 1e-4).unwrap().partitions(), 1);
        assert_eq!(PfbLms::new(2500, 1024, 1e-4).unwrap().partitions(), 3);
        assert!(PfbLms::new(4000, 1000, 1e-4).is_err());
        assert!(PfbLms::new(0, 1024, 1e-4).is_err());
    }

    #[test]
    fn zero_far_end_passes_mic_through() {
        let mut f = PfbLms::new(256, 64, 1e-2).unwrap();
        let mic = colored_noise(64, 1);
        for _ in 0..3 {
            let err = f.process_block(&[0.0; 64], &mic).unwrap();
            assert_eq!(err, mic);
        }
        assert!(f.taps().iter().all(|&t| t == 0.0));
    }

    #[test]
    fn frozen_filter_matches_direct_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let h: Vec<f64> = (0..300).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let x: Vec<f64> = (0..128 * 12).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mic = direct_fir(&x, &h);
        let mut f = PfbLms::new(300, 128, 0.0).unwrap();
        f.set_taps(&h).unwrap();
        let err = f.process_signal(&x, &mic).unwrap();
        let rel = crate::dsp::rms(&err) / crate::dsp::rms(&mic);
        assert!(rel < 1e-6, "relative residual {rel}");
    }

    #[test]
    fn taps_round_trip_through_partitions() {
        let h: Vec<f64> = (0..200).map(|i| (i as f64 * 0.1).sin()).collect();
        let mut f = PfbLms::new(200, 64, 0.0).unwrap();
        f.set_taps(&h).unwrap();
        for (a, b) in f.taps().iter().zip(&h) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    /// Time-domain NLMS with the same μ under the per-sample-power convention
    /// (normalized step μ·L).
    fn nlms_oracle(far: &[f64], mic: &[f64], taps: usize, mu: f64) -> Vec<f64> {
        let mut w = vec![0.0; taps];
        let mut energy = 0.0;
        let mut err = Vec::with_capacity(far.len());
        for n in 0..far.len() {
            energy += far[n] * far[n];
            if n >= taps {
                energy -= far[n - taps] * far[n - taps];
            }
            let xn = |j: usize| if n >= j { far[n - j] } else { 0.0 };
            let est: f64 = (0..taps).map(|j| w[j] * xn(j)).sum();
            let e = mic[n] - est;
            let norm = energy.max(0.0) / taps as f64 + POWER_REGULARIZER;
            for (j, wj) in w.iter_mut().enumerate() {
                *wj += mu * xn(j) * e / norm;
            }
            err.push(e);
        }
        err
    }

    #[test]
    fn converges_on_short_fir_like_nlms_oracle() {
        let fs = crate::SAMPLE_RATE as usize;
        let far = colored_noise(10 * fs, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let h: Vec<f64> = (0..64)
            .map(|j| rng.gen_range(-1.0..1.0) * (-(j as f64) / 12.0).exp())
            .collect();
        let mic = direct_fir(&far, &h);
        let tail = 8 * fs..10 * fs;

        let mut f = PfbLms::new(64, 1024, DEFAULT_MU).unwrap();
        let err = f.process_signal(&far, &mic).unwrap();
        let ours = erle_db(&mic[tail.clone()], &err[tail.clone()]);

        let oracle_err = nlms_oracle(&far, &mic, 64, DEFAULT_MU);
        let oracle = erle_db(&mic[tail.clone()], &oracle_err[tail]);
        assert!(ours >= 20.0, "pfb-lms ERLE {ours}");
        assert!(oracle >= 20.0, "oracle ERLE {oracle}");
    }

    #[test]
    fn gradient_constraint_holds() {
        let far = colored_noise(1024 * 6, 2);
        let h: Vec<f64> = (0..500).map(|j| 0.5f64.powi(j / 40)).collect();
        let mic = direct_fir(&far, &h);
        let mut f = PfbLms::new(500, 256, 1e-3).unwrap();
        for (fb, mb) in far.chunks(256).zip(mic.chunks(256)) {
            f.process_block(fb, mb).unwrap();
            for p in 0..f.partitions() {
                let img = f.partition_image(p);
                let keep = if p + 1 == f.partitions() {
                    500 - 256
                } else {
                    256
                };
                assert!(img[keep..].iter().all(|v| v.abs() < 1e-9));
            }
        }
    }

    #[test]
    fn divergence_examples() {
        let mic = vec![0.1; 64];
        let mut f = PfbLms::new(64, 64, 1e-4).unwrap();
        for _ in 0..8 {
            assert!(!f.check_divergence(&[0.0; 64], &mic));
        }

        let twice: Vec<f64> = mic.iter().map(|v| 2.0 * v).collect();
        let halved: Vec<bool> = (0..8).map(|_| f.check_divergence(&twice, &mic)).collect();
        assert_eq!(halved.iter().filter(|&&h| h).count(), 1);
        assert!(halved[7]);
        assert_eq!(f.mu(), 5e-5);

        // Alternating blocks never fill the window.
        let mut g = PfbLms::new(64, 64, 1e-4).unwrap();
        for i in 0..64 {
            let e: &[f64] = if i % 2 == 0 { &twice } else { &[0.0; 64] };
            assert!(!g.check_divergence(e, &mic));
        }
        assert_eq!(g.mu(), 1e-4);
    }
}
