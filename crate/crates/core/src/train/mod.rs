//! Training: the newest-frames spectral RMS loss, backpropagation through
//! the U-Net, SGD/Adam/Nadam, a seeded training loop and random search over
//! the hyperparameter grid.

mod optim;
mod search;
pub(crate) mod tape;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use optim::{Optimizer, OptimizerConfig, OptimizerKind};
pub use search::{
    random_search, SearchConfig, SearchReport, SearchSpace, TrialConfig, TrialResult,
};

use crate::dsp::{magnitude_phase, StftPlan};
use crate::error::{invalid, Result};
use crate::features::normalize;
use crate::unet::{NetTopology, Network, Scalar, Tensor3, INPUT_CHANNELS};
use crate::{FRAME_LEN, FREQ_BINS, STRIDE_FRAMES, TIME_FRAMES};

use tape::Tape;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LossConfig {
    /// Newest time frames scored.
    pub tf_frames: usize,
    pub freq_bins: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tf_frames: STRIDE_FRAMES,
            freq_bins: FREQ_BINS,
        }
    }
}

impl LossConfig {
    pub fn new(tf_frames: usize, freq_bins: usize) -> Self {
        Self {
            tf_frames,
            freq_bins,
        }
    }

    fn check<T: Scalar>(&self, s_hat: &Tensor3<T>, s: &Tensor3<T>) -> Result<()> {
        if s_hat.shape() != s.shape() {
            return Err(invalid(format!(
                "loss on shapes {:?} and {:?}",
                s_hat.shape(),
                s.shape()
            )));
        }
        let (f, t, c) = s.shape();
        if c != 1 || f != self.freq_bins {
            return Err(invalid(format!(
                "loss expects {}xTx1, got {f}x{t}x{c}",
                self.freq_bins
            )));
        }
        if self.tf_frames == 0 || self.tf_frames > t {
            return Err(invalid(format!(
                "{} scored frames out of {t}",
                self.tf_frames
            )));
        }
        Ok(())
    }
}

/// RMS difference over the newest `tf_frames` frames and all bins.
pub fn loss<T: Scalar>(s_hat: &Tensor3<T>, s: &Tensor3<T>, cfg: &LossConfig) -> Result<T> {
    Ok(loss_and_grad(s_hat, s, cfg)?.0)
}

/// Loss and its gradient with respect to `s_hat`: `r / (M·K·L)` inside the
/// scored region, zero elsewhere, and zero everywhere when `L = 0`.
pub fn loss_and_grad<T: Scalar>(
    s_hat: &Tensor3<T>,
    s: &Tensor3<T>,
    cfg: &LossConfig,
) -> Result<(T, Tensor3<T>)> {
    cfg.check(s_hat, s)?;
    let (nf, nt, _) = s.shape();
    let first = nt - cfg.tf_frames;
    let count = T::from_f64((nf * cfg.tf_frames) as f64);
    let mut sum = T::zero();
    for k in 0..nf {
        for t in first..nt {
            let r = s_hat.get(k, t, 0) - s.get(k, t, 0);
            sum = sum + r * r;
        }
    }
    let l = (sum / count).sqrt();
    if !l.is_finite() {
        return Err(crate::Error::Numerical("non-finite loss".into()));
    }
    let mut g = Tensor3::zeros(nf, nt, 1);
    if l > T::zero() {
        let denom = count * l;
        for k in 0..nf {
            for t in first..nt {
                g.set(k, t, 0, (s_hat.get(k, t, 0) - s.get(k, t, 0)) / denom);
            }
        }
    }
    Ok((l, g))
}

/// One (input, target) pair: normalized `[Y, X]` magnitudes and the near-end
/// magnitude divided by the microphone frame's scale.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample<T> {
    pub input: Tensor3<T>,
    pub target: Tensor3<T>,
}

impl<T: Scalar> TrainSample<T> {
    pub fn new(input: Tensor3<T>, target: Tensor3<T>) -> Result<Self> {
        if input.chans() != INPUT_CHANNELS
            || target.chans() != 1
            || (input.freq(), input.time()) != (target.freq(), target.time())
        {
            return Err(invalid(format!(
                "sample shapes {:?} / {:?}",
                input.shape(),
                target.shape()
            )));
        }
        Ok(Self { input, target })
    }

    pub fn cast<U: Scalar>(&self) -> TrainSample<U> {
        TrainSample {
            input: self.input.cast(),
            target: self.target.cast(),
        }
    }
}

impl TrainSample<f64> {
    /// Builds a sample from aligned 2560-sample frames, keeping the lowest
    /// `freq` bins.
    pub fn from_frames(
        plan: &mut StftPlan,
        far: &[f64],
        mic: &[f64],
        near: &[f64],
        freq: usize,
    ) -> Result<Self> {
        if freq == 0 || freq > FREQ_BINS {
            return Err(invalid(format!("cannot keep {freq} of {FREQ_BINS} bins")));
        }
        let (x_mag, _) = magnitude_phase(&plan.forward(far)?);
        let (y_mag, _) = magnitude_phase(&plan.forward(mic)?);
        let (s_mag, _) = magnitude_phase(&plan.forward(near)?);
        let x = normalize(&x_mag)?;
        let y = normalize(&y_mag)?;
        let input = Tensor3::from_fn(freq, TIME_FRAMES, INPUT_CHANNELS, |k, t, c| {
            if c == 0 {
                y.grid[(k, t)]
            } else {
                x.grid[(k, t)]
            }
        });
        let target = Tensor3::from_fn(freq, TIME_FRAMES, 1, |k, t, _| s_mag[(k, t)] / y.scale);
        Self::new(input, target)
    }

    /// Cuts `count` aligned frames at uniformly random offsets out of one
    /// mixture.
    pub fn random_frames(
        far: &[f64],
        mic: &[f64],
        near: &[f64],
        count: usize,
        freq: usize,
        seed: u64,
    ) -> Result<Vec<Self>> {
        let len = far.len();
        if mic.len() != len || near.len() != len {
            return Err(invalid("far, mic and near signals differ in length"));
        }
        if len < FRAME_LEN {
            return Err(invalid(format!(
                "mixture of {len} samples is shorter than a {FRAME_LEN}-sample frame"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut plan = StftPlan::new();
        (0..count)
            .map(|_| {
                let o = rng.gen_range(0..=len - FRAME_LEN);
                let r = o..o + FRAME_LEN;
                Self::from_frames(&mut plan, &far[r.clone()], &mic[r.clone()], &near[r], freq)
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub topology: NetTopology,
    pub optimizer: OptimizerConfig,
    pub loss: LossConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub network: Network<T>,
    /// Mean batch loss before each optimizer step.
    pub step_losses: Vec<f64>,
    /// Mean of the step losses in each epoch.
    pub epoch_losses: Vec<f64>,
}

/// Loss and parameter gradients for one sample.
pub fn sample_gradients<T: Scalar>(
    net: &Network<T>,
    sample: &TrainSample<T>,
    cfg: &LossConfig,
) -> Result<(T, Network<T>)> {
    let (tape, out) = Tape::forward(net, &sample.input)?;
    let (l, g) = loss_and_grad(tape.value(out), &sample.target, cfg)?;
    Ok((l, tape.backward(out, g)))
}

/// Mean loss of the linear network output over `data`.
pub fn evaluate<T: Scalar>(
    net: &Network<T>,
    data: &[TrainSample<T>],
    cfg: &LossConfig,
) -> Result<f64> {
    if data.is_empty() {
        return Err(invalid("evaluation on an empty dataset"));
    }
    let mut total = 0.0;
    for s in data {
        let y = crate::unet::forward_linear(net, &s.input)?;
        total += loss(&y, &s.target, cfg)?.as_f64();
    }
    Ok(total / data.len() as f64)
}

/// Trains a freshly initialized network.
pub fn train<T: Scalar>(data: &[TrainSample<T>], cfg: &TrainConfig) -> Result<TrainOutcome<T>> {
    let net = Network::init(cfg.topology, cfg.seed)?;
    train_from(net, data, cfg)
}

/// Continues training `net`. Batches are drawn from a per-epoch shuffle
/// seeded by `cfg.seed`; the last batch of an epoch may be short.
pub fn train_from<T: Scalar>(
    mut net: Network<T>,
    data: &[TrainSample<T>],
    cfg: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    if data.is_empty() {
        return Err(invalid("training on an empty dataset"));
    }
    if cfg.batch_size == 0 {
        return Err(invalid("batch size must be positive"));
    }
    if net.topology() != &cfg.topology {
        return Err(invalid("network topology differs from the training config"));
    }
    let mut opt = Optimizer::new(cfg.optimizer, net.param_count())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5ee_d0fb_a7c4);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut step_losses = Vec::new();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut grads = Network::<T>::zeros(cfg.topology)?;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_sum = 0.0;
        let mut batches = 0;
        for batch in order.chunks(cfg.batch_size) {
            grads.params_mut().for_each(|g| *g = T::zero());
            let mut batch_loss = 0.0;
            for &i in batch {
                let (l, g) = sample_gradients(&net, &data[i], &cfg.loss)?;
                batch_loss += l.as_f64();
                for (a, b) in grads.params_mut().zip(g.params()) {
                    *a = *a + *b;
                }
            }
            let n = T::from_f64(batch.len() as f64);
            grads.params_mut().for_each(|g| *g = *g / n);
            batch_loss /= batch.len() as f64;
            opt.step(&mut net, &grads)?;
            step_losses.push(batch_loss);
            epoch_sum += batch_loss;
            batches += 1;
        }
        epoch_losses.push(epoch_sum / batches as f64);
    }
    Ok(TrainOutcome {
        network: net,
        step_losses,
        epoch_losses,
    })
}
