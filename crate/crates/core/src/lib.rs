//! Streaming acoustic echo cancellation built around a Residual U-Net.
//!
//! The microphone signal `y = s + d + v` is processed in 40 ms strides. Each
//! stride is appended to 120 ms of history, both the far-end and microphone
//! frames are turned into 160×32 magnitude spectrograms, the network predicts
//! the near-end magnitude, and the newest 40 ms are resynthesized with the
//! microphone phase.
//!
//! Module map:
//!
//! - [`dsp`]: Hann window, the fixed-geometry STFT/iSTFT, magnitude/phase.
//! - [`features`]: sliding frame assembly, normalization, reconstruction.
//! - [`pfblms`]: partitioned block frequency-domain NLMS baseline.
//! - [`unet`]: network topology, reference primitives, the fast fp32/fp16
//!   inference engine, quantization and the weight file format.
//! - [`train`]: tape-based reverse-mode gradients, the spectral RMS loss,
//!   SGD/Adam/Nadam, the training loop and hyperparameter random search.
//! - [`synth`]: synthetic single/double-talk mixtures and corpus writer.
//! - [`metrics`]: activity masks, ERLE, log-spectral distortion, corpus
//!   evaluation.
//! - [`harness`]: stream processor, latency breakdown, benchmarks, config.

pub mod dsp;
pub mod error;
pub mod features;
pub mod harness;
pub mod metrics;
pub mod pfblms;
pub mod synth;
pub mod train;
pub mod unet;
pub mod wav;

pub use error::{Error, Result};

/// Sample rate of every signal handled by the pipeline.
pub const SAMPLE_RATE: u32 = 16_000;
/// 160 ms analysis frame.
pub const FRAME_LEN: usize = 2560;
/// 40 ms stride of new samples.
pub const STRIDE: usize = 640;
/// Hann window length of the STFT.
pub const WINDOW_LEN: usize = 318;
/// STFT hop (2560 / 32).
pub const HOP: usize = 80;
/// One-sided bins: 318 / 2 + 1.
pub const FREQ_BINS: usize = WINDOW_LEN / 2 + 1;
/// STFT frames per 160 ms frame.
pub const TIME_FRAMES: usize = FRAME_LEN / HOP;
/// Newest STFT frames covering one stride (640 / 80).
pub const STRIDE_FRAMES: usize = STRIDE / HOP;
