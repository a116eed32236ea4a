use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use super::{activity_mask, erle_samples, spectral_distortion, DEFAULT_THRESHOLD_DBFS};
use crate::dsp::AudioBuffer;
use crate::error::Result;
use crate::synth::{read_manifest, Scenario};

/// Anything that maps a far-end/microphone pair to a near-end estimate.
pub trait Canceller: Sync {
    fn name(&self) -> String;

    /// Returns the estimate for corpus entry `index`. It may be shorter than
    /// the input (e.g. trimmed to whole strides); metrics use the common
    /// prefix.
    fn cancel(&self, index: usize, far: &AudioBuffer, mic: &AudioBuffer) -> Result<Vec<f64>>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleMetrics {
    pub index: usize,
    pub scenario: Scenario,
    /// Over near-end-inactive frames; `None` when there are none.
    pub erle_db: Option<f64>,
    /// Log-spectral distance to the near end; `None` when it is silent.
    pub distortion_db: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioSummary {
    pub scenario: Scenario,
    pub samples: usize,
    pub erle_db: Option<f64>,
    pub distortion_db: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub method: String,
    pub samples: Vec<SampleMetrics>,
    pub failures: Vec<(usize, String)>,
    pub summary: Vec<ScenarioSummary>,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for v in values {
        sum += v;
        n += 1;
    }
    (n > 0).then(|| sum / n as f64)
}

fn fmt_opt(v: Option<f64>) -> String {
    match v {
        Some(x) if x.is_infinite() => "inf".into(),
        Some(x) => format!("{x:.3}"),
        None => String::new(),
    }
}

impl MetricsReport {
    fn build(method: String, samples: Vec<SampleMetrics>, failures: Vec<(usize, String)>) -> Self {
        let summary = Scenario::ALL
            .into_iter()
            .filter_map(|sc| {
                let of: Vec<&SampleMetrics> = samples.iter().filter(|m| m.scenario == sc).collect();
                (!of.is_empty()).then(|| ScenarioSummary {
                    scenario: sc,
                    samples: of.len(),
                    erle_db: mean(of.iter().filter_map(|m| m.erle_db)),
                    distortion_db: mean(of.iter().filter_map(|m| m.distortion_db)),
                })
            })
            .collect();
        Self {
            method,
            samples,
            failures,
            summary,
        }
    }

    pub fn summary_for(&self, scenario: Scenario) -> Option<&ScenarioSummary> {
        self.summary.iter().find(|s| s.scenario == scenario)
    }

    /// Per-scenario table: `method,scenario,erle_db,lsd_db,samples`.
    pub fn to_table(&self) -> String {
        let mut out = String::from("method,scenario,erle_db,lsd_db,samples\n");
        for s in &self.summary {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                self.method,
                s.scenario,
                fmt_opt(s.erle_db),
                fmt_opt(s.distortion_db),
                s.samples
            );
        }
        out
    }

    pub fn samples_csv(&self) -> String {
        let mut out = String::from("index,scenario,erle_db,lsd_db\n");
        for m in &self.samples {
            let _ = writeln!(
                out,
                "{},{},{},{}",
                m.index,
                m.scenario,
                fmt_opt(m.erle_db),
                fmt_opt(m.distortion_db)
            );
        }
        out
    }

    /// Human-readable block. The quality column is a log-spectral distance
    /// proxy, not PESQ.
    pub fn summary_text(&self) -> String {
        let mut out = format!("method: {}\n", self.method);
        let _ = writeln!(
            out,
            "{:<18} {:>10} {:>10} {:>8}",
            "scenario", "ERLE dB", "LSD dB", "samples"
        );
        for s in &self.summary {
            let _ = writeln!(
                out,
                "{:<18} {:>10} {:>10} {:>8}",
                s.scenario.as_str(),
                fmt_opt(s.erle_db),
                fmt_opt(s.distortion_db),
                s.samples
            );
        }
        let _ = writeln!(out, "LSD = log-spectral distance (quality proxy, not PESQ)");
        if !self.failures.is_empty() {
            let _ = writeln!(
                out,
                "{} sample(s) failed and were skipped",
                self.failures.len()
            );
        }
        out
    }
}

fn sample_metrics(
    canceller: &dyn Canceller,
    dir: &Path,
    row: &crate::synth::ManifestRow,
) -> Result<SampleMetrics> {
    let scenario = row.scenario()?;
    let e = row.load(dir)?;
    let out = canceller.cancel(row.index, &e.far_end, &e.mic)?;
    let n = out.len().min(e.mic.len()).min(e.near_end.len());
    let (y, s, s_hat) = (&e.mic.samples()[..n], &e.near_end.samples()[..n], &out[..n]);
    let talk = activity_mask(s, DEFAULT_THRESHOLD_DBFS);
    let quiet = talk.inverted();
    let erle_db = if quiet.count() > 0 {
        Some(erle_samples(y, s_hat, &quiet)?)
    } else {
        None
    };
    let distortion_db = if talk.count() > 0 {
        Some(spectral_distortion(s_hat, s)?)
    } else {
        None
    };
    Ok(SampleMetrics {
        index: row.index,
        scenario,
        erle_db,
        distortion_db,
    })
}

/// Runs `canceller` over every corpus entry in parallel and aggregates per
/// scenario. Failed entries are listed and skipped; the result does not
/// depend on thread scheduling.
pub fn evaluate_corpus(canceller: &dyn Canceller, corpus_dir: &Path) -> Result<MetricsReport> {
    let rows = read_manifest(corpus_dir)?;
    let results: Vec<Result<SampleMetrics>> = rows
        .par_iter()
        .map(|row| sample_metrics(canceller, corpus_dir, row))
        .collect();
    let mut samples = Vec::with_capacity(rows.len());
    let mut failures = Vec::new();
    for (row, r) in rows.iter().zip(results) {
        match r {
            Ok(m) => samples.push(m),
            Err(e) => {
                log::warn!("sample {} skipped: {e}", row.index);
                failures.push((row.index, e.to_string()));
            }
        }
    }
    Ok(MetricsReport::build(canceller.name(), samples, failures))
}
