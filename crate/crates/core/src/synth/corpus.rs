use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    gen_rir, mix, speech_shaped_noise, MixtureSpec, Nonlinearity, RirParams, Scenario,
    SyntheticSample, SER_GRID,
};
use crate::dsp::AudioBuffer;
use crate::error::{invalid, io_err, Error, Result};
use crate::wav::{read_wav, write_wav};
use crate::SAMPLE_RATE;

pub const MANIFEST_FILE: &str = "meta.csv";

/// Peak level the written quadruple is scaled down to when it would clip.
const HEADROOM_PEAK: f64 = 0.99;

/// Relative weights of the three scenarios.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScenarioMix {
    pub double_talk: f64,
    pub single_talk_far: f64,
    pub single_talk_near: f64,
}

impl Default for ScenarioMix {
    fn default() -> Self {
        Self {
            double_talk: 0.5,
            single_talk_far: 0.25,
            single_talk_near: 0.25,
        }
    }
}

impl ScenarioMix {
    pub fn only(scenario: Scenario) -> Self {
        let mut m = Self {
            double_talk: 0.0,
            single_talk_far: 0.0,
            single_talk_near: 0.0,
        };
        match scenario {
            Scenario::DoubleTalk => m.double_talk = 1.0,
            Scenario::SingleTalkFar => m.single_talk_far = 1.0,
            Scenario::SingleTalkNear => m.single_talk_near = 1.0,
        }
        m
    }

    fn weights(&self) -> [(Scenario, f64); 3] {
        [
            (Scenario::DoubleTalk, self.double_talk),
            (Scenario::SingleTalkFar, self.single_talk_far),
            (Scenario::SingleTalkNear, self.single_talk_near),
        ]
    }

    fn draw(&self, rng: &mut ChaCha8Rng) -> Scenario {
        let total: f64 = self.weights().iter().map(|w| w.1).sum();
        let mut u = rng.gen_range(0.0..total);
        for (sc, w) in self.weights() {
            if u < w {
                return sc;
            }
            u -= w;
        }
        Scenario::DoubleTalk
    }
}

/// Ranges every per-sample condition is drawn from.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusConfig {
    pub num_samples: usize,
    pub seed: u64,
    pub duration_s: f64,
    pub mix: ScenarioMix,
    pub near_noise_prob: f64,
    pub far_noise_prob: f64,
    pub clip_prob: f64,
    /// Inclusive integer SNR range in dB.
    pub snr_db: (i32, i32),
    /// Clip threshold as a fraction of the far-end peak.
    pub clip_fraction: (f64, f64),
    pub rir_length_ms: (f64, f64),
    pub rir_decay_ms: (f64, f64),
    /// Directory of 16 kHz mono WAVs; synthetic speech is used when unset.
    pub source_dir: Option<PathBuf>,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            num_samples: 100,
            seed: 0,
            duration_s: 10.0,
            mix: ScenarioMix::default(),
            near_noise_prob: 0.5,
            far_noise_prob: 0.3,
            clip_prob: 0.5,
            snr_db: (0, 40),
            clip_fraction: (0.2, 0.8),
            rir_length_ms: (100.0, 250.0),
            rir_decay_ms: (10.0, 60.0),
            source_dir: None,
        }
    }
}

impl CorpusConfig {
    fn validate(&self) -> Result<()> {
        if !(self.duration_s > 0.0) || !self.duration_s.is_finite() {
            return Err(invalid("duration must be positive"));
        }
        let w = self.mix.weights();
        if w.iter().any(|(_, v)| !(*v >= 0.0)) || w.iter().map(|x| x.1).sum::<f64>() <= 0.0 {
            return Err(invalid(
                "scenario weights must be non-negative with a positive sum",
            ));
        }
        for p in [self.near_noise_prob, self.far_noise_prob, self.clip_prob] {
            if !(0.0..=1.0).contains(&p) {
                return Err(invalid(format!("probability {p} outside [0, 1]")));
            }
        }
        let ordered = |(a, b): (f64, f64)| a.is_finite() && b.is_finite() && a <= b;
        if self.snr_db.0 > self.snr_db.1
            || !ordered(self.rir_length_ms)
            || !ordered(self.rir_decay_ms)
            || !ordered(self.clip_fraction)
            || self.rir_length_ms.0 <= 0.0
            || self.clip_fraction.0 <= 0.0
        {
            return Err(invalid("corpus ranges must be ordered and positive"));
        }
        Ok(())
    }
}

fn draw(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..hi)
    }
}

/// Deterministic per-index sample generator. Sample `i` depends only on the
/// corpus seed and `i`, so parallel and serial generation agree.
pub struct CorpusGenerator {
    cfg: CorpusConfig,
    sources: Vec<AudioBuffer>,
}

impl CorpusGenerator {
    pub fn new(cfg: CorpusConfig) -> Result<Self> {
        cfg.validate()?;
        let sources = match &cfg.source_dir {
            Some(dir) => load_sources(dir)?,
            None => Vec::new(),
        };
        Ok(Self { cfg, sources })
    }

    pub fn config(&self) -> &CorpusConfig {
        &self.cfg
    }

    fn sample_len(&self) -> usize {
        (self.cfg.duration_s * SAMPLE_RATE as f64).round() as usize
    }

    fn speech(&self, rng: &mut ChaCha8Rng, avoid: Option<usize>) -> (Vec<f64>, Option<usize>) {
        let n = self.sample_len();
        if self.sources.is_empty() {
            return (speech_shaped_noise(n, rng.gen()), None);
        }
        let mut pick = rng.gen_range(0..self.sources.len());
        if Some(pick) == avoid && self.sources.len() > 1 {
            pick = (pick + 1) % self.sources.len();
        }
        let src = self.sources[pick].samples();
        let offset = rng.gen_range(0..src.len());
        (
            src.iter().cycle().skip(offset).take(n).copied().collect(),
            Some(pick),
        )
    }

    pub fn sample(&self, index: usize) -> Result<SyntheticSample> {
        let c = &self.cfg;
        let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
        rng.set_stream(index as u64);

        let scenario = c.mix.draw(&mut rng);
        let ser_db = rng.gen_range(SER_GRID) as f64;
        let snr = |p: f64, rng: &mut ChaCha8Rng| {
            rng.gen_bool(p)
                .then(|| rng.gen_range(c.snr_db.0..=c.snr_db.1) as f64)
        };
        let near_noise_snr_db = snr(c.near_noise_prob, &mut rng);
        let far_noise_snr_db = snr(c.far_noise_prob, &mut rng);
        let clip = rng
            .gen_bool(c.clip_prob)
            .then(|| draw(&mut rng, c.clip_fraction));
        let params = RirParams {
            length_ms: draw(&mut rng, c.rir_length_ms),
            decay_ms: draw(&mut rng, c.rir_decay_ms),
        };
        let rir = gen_rir(params.length_ms, params.decay_ms, rng.gen())?;
        let (near, used) = self.speech(&mut rng, None);
        let (far, _) = self.speech(&mut rng, used);
        let mix_seed = rng.gen();

        let far_peak = far.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let far_active = scenario != Scenario::SingleTalkNear;
        let nonlinearity = match clip {
            Some(f) if far_active && far_peak > 0.0 => Nonlinearity::HardClip(f * far_peak),
            _ => Nonlinearity::None,
        };
        let spec = MixtureSpec {
            ser_db: if scenario == Scenario::DoubleTalk {
                ser_db
            } else {
                0.0
            },
            near_noise_snr_db,
            far_noise_snr_db: far_noise_snr_db.filter(|_| far_active),
            nonlinearity,
            rir,
            rir_params: Some(params),
            scenario,
        };
        let s = AudioBuffer::new(near, SAMPLE_RATE)?;
        let x = AudioBuffer::new(far, SAMPLE_RATE)?;
        mix(&s, &x, &spec, mix_seed).map_err(|e| invalid(format!("sample {index}: {e}")))
    }
}

fn load_sources(dir: &Path) -> Result<Vec<AudioBuffer>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("wav")))
        .collect();
    paths.sort();
    let mut out = Vec::with_capacity(paths.len());
    for p in paths {
        let a = read_wav(&p)?;
        if a.sample_rate() != SAMPLE_RATE {
            return Err(invalid(format!(
                "{}: expected {SAMPLE_RATE} Hz",
                p.display()
            )));
        }
        if !a.is_empty() {
            out.push(a);
        }
    }
    if out.is_empty() {
        return Err(invalid(format!("{}: no usable WAV files", dir.display())));
    }
    Ok(out)
}

/// One manifest line. File names are relative to the corpus directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub index: usize,
    pub scenario: String,
    pub ser_db: Option<f64>,
    pub near_noise_snr_db: Option<f64>,
    pub far_noise_snr_db: Option<f64>,
    pub nonlinearity: String,
    pub rir_length_ms: f64,
    pub rir_decay_ms: f64,
    /// Joint scale applied before writing to keep the peak below full scale.
    pub gain: f64,
    pub farend: String,
    pub echo: String,
    pub mic: String,
    pub nearend: String,
}

/// The four signals of one corpus entry, read back from disk.
#[derive(Debug, Clone)]
pub struct CorpusEntry {
    pub row: ManifestRow,
    pub far_end: AudioBuffer,
    pub echo: AudioBuffer,
    pub mic: AudioBuffer,
    pub near_end: AudioBuffer,
}

impl ManifestRow {
    pub fn scenario(&self) -> Result<Scenario> {
        self.scenario.parse()
    }

    pub fn load(&self, dir: &Path) -> Result<CorpusEntry> {
        Ok(CorpusEntry {
            row: self.clone(),
            far_end: read_wav(dir.join(&self.farend))?,
            echo: read_wav(dir.join(&self.echo))?,
            mic: read_wav(dir.join(&self.mic))?,
            near_end: read_wav(dir.join(&self.nearend))?,
        })
    }
}

fn write_sample(dir: &Path, index: usize, mut sample: SyntheticSample) -> Result<ManifestRow> {
    let peak = sample.peak();
    let gain = if peak > HEADROOM_PEAK {
        HEADROOM_PEAK / peak
    } else {
        1.0
    };
    if gain != 1.0 {
        sample.scale(gain);
    }
    let name = |kind: &str| format!("{index:05}_{kind}.wav");
    for (kind, buf) in [
        ("farend", &sample.far_end),
        ("echo", &sample.echo),
        ("mic", &sample.mic),
        ("nearend", &sample.near_end),
    ] {
        write_wav(dir.join(name(kind)), buf)?;
    }
    let spec = &sample.spec;
    let params = spec.rir_params.unwrap_or(RirParams {
        length_ms: spec.rir.len() as f64 * 1000.0 / SAMPLE_RATE as f64,
        decay_ms: 0.0,
    });
    Ok(ManifestRow {
        index,
        scenario: spec.scenario.to_string(),
        ser_db: (spec.scenario == Scenario::DoubleTalk).then_some(spec.ser_db),
        near_noise_snr_db: spec.near_noise_snr_db,
        far_noise_snr_db: spec.far_noise_snr_db,
        nonlinearity: spec.nonlinearity.to_string(),
        rir_length_ms: params.length_ms,
        rir_decay_ms: params.decay_ms,
        gain,
        farend: name("farend"),
        echo: name("echo"),
        mic: name("mic"),
        nearend: name("nearend"),
    })
}

/// Writes `num_samples` WAV quadruples plus `meta.csv` into `out_dir`.
pub fn gen_corpus(cfg: &CorpusConfig, out_dir: &Path) -> Result<Vec<ManifestRow>> {
    let generator = CorpusGenerator::new(cfg.clone())?;
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let rows = (0..cfg.num_samples)
        .into_par_iter()
        .map(|i| write_sample(out_dir, i, generator.sample(i)?))
        .collect::<Result<Vec<_>>>()?;
    write_manifest(&out_dir.join(MANIFEST_FILE), &rows)?;
    log::info!("wrote {} samples to {}", rows.len(), out_dir.display());
    Ok(rows)
}

fn write_manifest(path: &Path, rows: &[ManifestRow]) -> Result<()> {
    let csv_err = |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    if rows.is_empty() {
        w.write_record([
            "index",
            "scenario",
            "ser_db",
            "near_noise_snr_db",
            "far_noise_snr_db",
            "nonlinearity",
            "rir_length_ms",
            "rir_decay_ms",
            "gain",
            "farend",
            "echo",
            "mic",
            "nearend",
        ])
        .map_err(csv_err)?;
    }
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestRow>> {
    let path = dir.join(MANIFEST_FILE);
    let csv_err = |source| Error::Csv {
        path: path.clone(),
        source,
    };
    let mut r = csv::Reader::from_path(&path).map_err(csv_err)?;
    r.deserialize().map(|row| row.map_err(csv_err)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(n: usize, seed: u64) -> CorpusConfig {
        CorpusConfig {
            num_samples: n,
            seed,
            duration_s: 0.5,
            ..CorpusConfig::default()
        }
    }

    #[test]
    fn empty_corpus() {
        let dir = tempfile::tempdir().unwrap();
        let rows = gen_corpus(&small(0, 1), dir.path()).unwrap();
        assert!(rows.is_empty());
        let files: Vec<_> = fs::read_dir(dir.path()).unwrap().collect();
        assert_eq!(files.len(), 1);
        assert!(read_manifest(dir.path()).unwrap().is_empty());
    }

    #[test]
    fn manifest_is_reproducible() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let ra = gen_corpus(&small(6, 7), a.path()).unwrap();
        let rb = gen_corpus(&small(6, 7), b.path()).unwrap();
        assert_eq!(ra, rb);
        let ma = fs::read(a.path().join(MANIFEST_FILE)).unwrap();
        let mb = fs::read(b.path().join(MANIFEST_FILE)).unwrap();
        assert_eq!(ma, mb);
        for r in &ra {
            let wa = fs::read(a.path().join(&r.mic)).unwrap();
            assert_eq!(wa, fs::read(b.path().join(&r.mic)).unwrap());
        }
        assert_eq!(read_manifest(a.path()).unwrap(), ra);
    }

    #[test]
    fn sample_depends_only_on_seed_and_index() {
        let g = CorpusGenerator::new(small(10, 3)).unwrap();
        let s5 = g.sample(5).unwrap();
        assert_eq!(g.sample(5).unwrap(), s5);
        assert_ne!(g.sample(4).unwrap().mic, s5.mic);
        let g2 = CorpusGenerator::new(small(10, 4)).unwrap();
        assert_ne!(g2.sample(5).unwrap().mic, s5.mic);
    }

    #[test]
    fn written_files_satisfy_mixture() {
        let dir = tempfile::tempdir().unwrap();
        let rows = gen_corpus(&small(4, 9), dir.path()).unwrap();
        for r in &rows {
            let e = r.load(dir.path()).unwrap();
            assert_eq!(e.mic.len(), 8000);
            if r.near_noise_snr_db.is_some() {
                continue;
            }
            // Each file is rounded to 16 bits separately.
            for i in 0..e.mic.len() {
                let d = e.mic.samples()[i] - e.near_end.samples()[i] - e.echo.samples()[i];
                assert!(d.abs() < 2.0 / 32768.0, "{d}");
            }
            assert!(r.gain > 0.0 && r.gain <= 1.0);
        }
    }

    #[test]
    fn user_sources() {
        let src = tempfile::tempdir().unwrap();
        for k in 0..2 {
            let a = AudioBuffer::new(speech_shaped_noise(32_000, k), SAMPLE_RATE).unwrap();
            write_wav(src.path().join(format!("talker{k}.wav")), &a).unwrap();
        }
        let cfg = CorpusConfig {
            source_dir: Some(src.path().to_path_buf()),
            mix: ScenarioMix::only(Scenario::DoubleTalk),
            ..small(3, 1)
        };
        let g = CorpusGenerator::new(cfg).unwrap();
        let s = g.sample(0).unwrap();
        assert_eq!(s.len(), 8000);

        let empty = tempfile::tempdir().unwrap();
        let cfg = CorpusConfig {
            source_dir: Some(empty.path().to_path_buf()),
            ..small(1, 1)
        };
        assert!(CorpusGenerator::new(cfg).is_err());
    }

    #[test]
    fn scenario_mix_only() {
        let g = CorpusGenerator::new(CorpusConfig {
            mix: ScenarioMix::only(Scenario::SingleTalkFar),
            ..small(5, 2)
        })
        .unwrap();
        for i in 0..5 {
            assert_eq!(g.sample(i).unwrap().spec.scenario, Scenario::SingleTalkFar);
        }
    }

    #[test]
    fn bad_config() {
        assert!(CorpusGenerator::new(CorpusConfig {
            duration_s: 0.0,
            ..small(1, 1)
        })
        .is_err());
        assert!(CorpusGenerator::new(CorpusConfig {
            clip_prob: 1.5,
            ..small(1, 1)
        })
        .is_err());
        assert!(CorpusGenerator::new(CorpusConfig {
            snr_db: (10, 0),
            ..small(1, 1)
        })
        .is_err());
    }
}
