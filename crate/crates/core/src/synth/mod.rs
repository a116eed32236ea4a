//! Synthetic echo scenarios: `y = s + f(x) + v`.
//!
//! The far-end signal is optionally clipped, convolved with a static room
//! impulse response and scaled to a requested signal-to-echo ratio. SER is
//! measured over the near-end frames whose power exceeds -40 dBFS, so pauses
//! in the near-end talker do not dilute it.

mod corpus;

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::dsp::{convolve, mean_square, AudioBuffer};
use crate::error::{invalid, Result};
use crate::metrics::{activity_mask, masked_energy, DEFAULT_THRESHOLD_DBFS};
use crate::SAMPLE_RATE;

pub use corpus::{
    gen_corpus, read_manifest, CorpusConfig, CorpusEntry, CorpusGenerator, ManifestRow,
    ScenarioMix, MANIFEST_FILE,
};

/// Requested SER values when drawn at random: -10..=10 dB in 1 dB steps.
pub const SER_GRID: std::ops::RangeInclusive<i32> = -10..=10;

/// RMS of the synthetic speech over its talk spurts (about -26 dBFS).
pub const SPEECH_RMS: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Nonlinearity {
    None,
    HardClip(f64),
}

impl fmt::Display for Nonlinearity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Nonlinearity::None => f.write_str("none"),
            Nonlinearity::HardClip(c) => write!(f, "hard_clip({c})"),
        }
    }
}

impl FromStr for Nonlinearity {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "none" {
            return Ok(Nonlinearity::None);
        }
        s.strip_prefix("hard_clip(")
            .and_then(|r| r.strip_suffix(')'))
            .and_then(|v| v.trim().parse::<f64>().ok())
            .map(Nonlinearity::HardClip)
            .ok_or_else(|| invalid(format!("unknown nonlinearity '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Scenario {
    SingleTalkFar,
    SingleTalkNear,
    DoubleTalk,
}

impl Scenario {
    pub const ALL: [Scenario; 3] = [
        Scenario::SingleTalkFar,
        Scenario::SingleTalkNear,
        Scenario::DoubleTalk,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Scenario::SingleTalkFar => "single_talk_far",
            Scenario::SingleTalkNear => "single_talk_near",
            Scenario::DoubleTalk => "double_talk",
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Scenario {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        Scenario::ALL
            .into_iter()
            .find(|sc| sc.as_str() == s.trim())
            .ok_or_else(|| invalid(format!("unknown scenario '{s}'")))
    }
}

/// Parameters the impulse response was drawn with, kept for the manifest.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RirParams {
    pub length_ms: f64,
    pub decay_ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixtureSpec {
    pub ser_db: f64,
    pub near_noise_snr_db: Option<f64>,
    pub far_noise_snr_db: Option<f64>,
    pub nonlinearity: Nonlinearity,
    pub rir: Vec<f64>,
    pub rir_params: Option<RirParams>,
    pub scenario: Scenario,
}

impl MixtureSpec {
    fn validate(&self) -> Result<()> {
        if !(-10.0..=10.0).contains(&self.ser_db) {
            return Err(invalid(format!("ser_db {} outside [-10, 10]", self.ser_db)));
        }
        for snr in [self.near_noise_snr_db, self.far_noise_snr_db]
            .into_iter()
            .flatten()
        {
            if !snr.is_finite() {
                return Err(invalid("noise SNR must be finite"));
            }
        }
        if self.rir.is_empty() || self.rir.iter().any(|v| !v.is_finite()) {
            return Err(invalid("impulse response must be non-empty and finite"));
        }
        Ok(())
    }
}

/// One generated scenario. `mic == near_end + echo + noise` by construction.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSample {
    pub far_end: AudioBuffer,
    pub echo: AudioBuffer,
    pub mic: AudioBuffer,
    pub near_end: AudioBuffer,
    pub noise: AudioBuffer,
    pub spec: MixtureSpec,
}

impl SyntheticSample {
    pub fn len(&self) -> usize {
        self.mic.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mic.is_empty()
    }

    /// Multiplies every signal by `g`; SER and SNR are unchanged.
    pub fn scale(&mut self, g: f64) {
        for b in [
            &mut self.far_end,
            &mut self.echo,
            &mut self.mic,
            &mut self.near_end,
            &mut self.noise,
        ] {
            b.samples_mut().iter_mut().for_each(|v| *v *= g);
        }
    }

    pub fn peak(&self) -> f64 {
        [
            &self.far_end,
            &self.echo,
            &self.mic,
            &self.near_end,
            &self.noise,
        ]
        .iter()
        .flat_map(|b| b.samples())
        .fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

/// Filtered noise with syllable-rate amplitude modulation and pauses, a
/// stand-in for speech when no recordings are supplied.
///
/// White noise goes through the low-pass `y[n] = e[n] + 1.3 y[n-1] - 0.45 y[n-2]`.
/// Talk spurts of 0.4 to 1.6 s alternate with 0.1 to 0.5 s of silence, and
/// inside a spurt the envelope follows a 3 to 5 Hz raised sine.
pub fn speech_shaped_noise(len: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fs = SAMPLE_RATE as f64;
    let mut out = vec![0.0; len];
    let (mut y1, mut y2) = (0.0, 0.0);
    let mut talking = rng.gen_bool(0.7);
    let mut n = 0;
    while n < len {
        let secs = if talking {
            rng.gen_range(0.4..1.6)
        } else {
            rng.gen_range(0.1..0.5)
        };
        let end = (n + (secs * fs) as usize).min(len);
        let rate = rng.gen_range(3.0..5.0);
        let phase = rng.gen_range(0.0..std::f64::consts::PI);
        for (i, o) in out[n..end].iter_mut().enumerate() {
            let e: f64 = rng.sample(StandardNormal);
            let y = e + 1.3 * y1 - 0.45 * y2;
            y2 = y1;
            y1 = y;
            if talking {
                let env = (std::f64::consts::PI * rate * i as f64 / fs + phase).sin();
                *o = y * (0.1 + 0.9 * env * env);
            }
        }
        n = end;
        talking = !talking;
    }
    let active: Vec<f64> = out.iter().copied().filter(|v| *v != 0.0).collect();
    let r = mean_square(&active).sqrt();
    if r > 0.0 {
        out.iter_mut().for_each(|v| *v *= SPEECH_RMS / r);
    }
    out
}

/// Exponentially decaying noise with a dominant direct-path tap, scaled to
/// unit energy. `decay_time_ms` is the envelope time constant; 0 is treated
/// as one sample.
pub fn gen_rir(length_ms: f64, decay_time_ms: f64, seed: u64) -> Result<Vec<f64>> {
    if !(length_ms > 0.0) || !length_ms.is_finite() {
        return Err(invalid(format!(
            "rir length {length_ms} ms must be positive"
        )));
    }
    if !(decay_time_ms >= 0.0) || !decay_time_ms.is_finite() {
        return Err(invalid(format!(
            "decay time {decay_time_ms} ms must be non-negative"
        )));
    }
    let per_ms = SAMPLE_RATE as f64 / 1000.0;
    let len = (length_ms * per_ms).round() as usize;
    if len == 0 {
        return Err(invalid(format!(
            "rir length {length_ms} ms is shorter than a sample"
        )));
    }
    let tau = (decay_time_ms * per_ms).max(1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut h: Vec<f64> = (0..len)
        .map(|n| rng.sample::<f64, _>(StandardNormal) * (-(n as f64) / tau).exp())
        .collect();
    let tail_peak = h[1..].iter().fold(0.0f64, |m, v| m.max(v.abs()));
    h[0] = if tail_peak > 0.0 {
        2.0 * tail_peak
    } else {
        1.0
    };
    let norm = h.iter().map(|v| v * v).sum::<f64>().sqrt();
    h.iter_mut().for_each(|v| *v /= norm);
    Ok(h)
}

pub fn apply_nonlinearity(x: &[f64], nl: Nonlinearity) -> Result<Vec<f64>> {
    if x.iter().any(|v| !v.is_finite()) {
        return Err(invalid("non-finite sample before nonlinearity"));
    }
    match nl {
        Nonlinearity::None => Ok(x.to_vec()),
        Nonlinearity::HardClip(c) if c > 0.0 && c.is_finite() => {
            Ok(x.iter().map(|v| v.clamp(-c, c)).collect())
        }
        Nonlinearity::HardClip(c) => Err(invalid(format!("clip threshold {c} must be positive"))),
    }
}

/// SER in dB over the active near-end frames: `10 log10(Σ s² / Σ d²)`.
pub fn measured_ser_db(s: &[f64], d: &[f64]) -> Result<f64> {
    let mask = activity_mask(s, DEFAULT_THRESHOLD_DBFS);
    let es = masked_energy(s, &mask);
    let ed = masked_energy(d, &mask);
    if es <= 0.0 || ed <= 0.0 {
        return Err(invalid(
            "SER undefined: no near-end activity or no echo there",
        ));
    }
    Ok(10.0 * (es / ed).log10())
}

/// Mean power of the active near-end frames, or 0 when there are none.
fn active_power(s: &[f64]) -> f64 {
    let mask = activity_mask(s, DEFAULT_THRESHOLD_DBFS);
    let frames = mask.count();
    if frames == 0 {
        return 0.0;
    }
    masked_energy(s, &mask) / (frames * crate::metrics::MASK_FRAME) as f64
}

fn white_noise(len: usize, power: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let sd = power.sqrt();
    (0..len)
        .map(|_| sd * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

/// Builds one mixture from near-end speech `s` and far-end speech `x`.
///
/// Inputs are trimmed to the shorter length. Far-end noise is added to `x`
/// before the echo path; near-end noise is referenced to the active near-end
/// power, or to the echo power for far-end single talk.
pub fn mix(
    s: &AudioBuffer,
    x: &AudioBuffer,
    spec: &MixtureSpec,
    seed: u64,
) -> Result<SyntheticSample> {
    spec.validate()?;
    if s.sample_rate() != x.sample_rate() {
        return Err(invalid(format!(
            "sample rates differ: near {} Hz, far {} Hz",
            s.sample_rate(),
            x.sample_rate()
        )));
    }
    let rate = s.sample_rate();
    let n = s.len().min(x.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut near = s.samples()[..n].to_vec();
    let mut far = x.samples()[..n].to_vec();
    let mut echo = vec![0.0; n];
    match spec.scenario {
        Scenario::SingleTalkNear => far.fill(0.0),
        Scenario::SingleTalkFar => near.fill(0.0),
        Scenario::DoubleTalk => {}
    }

    if spec.scenario != Scenario::SingleTalkNear {
        if let Some(snr) = spec.far_noise_snr_db {
            let p = mean_square(&far);
            if p <= 0.0 {
                return Err(invalid("far-end noise SNR requested for a silent far end"));
            }
            let noise = white_noise(n, p / 10f64.powf(snr / 10.0), &mut rng);
            far.iter_mut().zip(&noise).for_each(|(a, b)| *a += b);
        }
        echo = convolve(&apply_nonlinearity(&far, spec.nonlinearity)?, &spec.rir);
    }

    if spec.scenario == Scenario::DoubleTalk {
        let mask = activity_mask(&near, DEFAULT_THRESHOLD_DBFS);
        let es = masked_energy(&near, &mask);
        if es <= 0.0 {
            return Err(invalid(
                "SER undefined: near-end signal has no active frames",
            ));
        }
        let ed = masked_energy(&echo, &mask);
        if ed <= 0.0 {
            return Err(invalid(
                "SER undefined: echo is silent where the near end talks",
            ));
        }
        let g = (es / (ed * 10f64.powf(spec.ser_db / 10.0))).sqrt();
        echo.iter_mut().for_each(|v| *v *= g);
    }

    let noise = match spec.near_noise_snr_db {
        Some(snr) => {
            let reference = match spec.scenario {
                Scenario::SingleTalkFar => mean_square(&echo),
                _ => active_power(&near),
            };
            if reference <= 0.0 {
                return Err(invalid("near-end noise SNR has no reference power"));
            }
            white_noise(n, reference / 10f64.powf(snr / 10.0), &mut rng)
        }
        None => vec![0.0; n],
    };
    let mic: Vec<f64> = (0..n).map(|i| near[i] + echo[i] + noise[i]).collect();

    Ok(SyntheticSample {
        far_end: AudioBuffer::new(far, rate)?,
        echo: AudioBuffer::new(echo, rate)?,
        mic: AudioBuffer::new(mic, rate)?,
        near_end: AudioBuffer::new(near, rate)?,
        noise: AudioBuffer::new(noise, rate)?,
        spec: spec.clone(),
    })
}
