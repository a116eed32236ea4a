use std::fmt::Write as _;

/// Wall-clock milliseconds of one stride, split like the stage table:
/// get buffer, data preparation (assemble + STFT + normalize), model
/// inference, data extraction (denormalize + iSTFT + copy out).
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StageTimes {
    pub get_buffer: f64,
    pub data_preparation: f64,
    pub model_inference: f64,
    pub data_extraction: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StageStats {
    pub mean: f64,
    pub median: f64,
    pub p95: f64,
}

impl StageStats {
    /// Nearest-rank order statistics; all zero for an empty slice.
    pub fn from_values(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self::default();
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let rank = |p: f64| v[((p * v.len() as f64).ceil() as usize).clamp(1, v.len()) - 1];
        Self {
            mean: v.iter().sum::<f64>() / v.len() as f64,
            median: rank(0.5),
            p95: rank(0.95),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LatencyBreakdown {
    pub get_buffer_ms: StageStats,
    pub data_preparation_ms: StageStats,
    pub model_inference_ms: StageStats,
    pub data_extraction_ms: StageStats,
    pub total_ms: StageStats,
    pub strides: usize,
}

impl LatencyBreakdown {
    pub fn from_samples(samples: &[StageTimes]) -> Self {
        let col = |f: fn(&StageTimes) -> f64| {
            StageStats::from_values(&samples.iter().map(f).collect::<Vec<_>>())
        };
        Self {
            get_buffer_ms: col(|s| s.get_buffer),
            data_preparation_ms: col(|s| s.data_preparation),
            model_inference_ms: col(|s| s.model_inference),
            data_extraction_ms: col(|s| s.data_extraction),
            total_ms: col(|s| s.total),
            strides: samples.len(),
        }
    }

    pub fn rows(&self) -> [(&'static str, StageStats); 5] {
        [
            ("get_buffer", self.get_buffer_ms),
            ("data_preparation", self.data_preparation_ms),
            ("model_inference", self.model_inference_ms),
            ("data_extraction", self.data_extraction_ms),
            ("total", self.total_ms),
        ]
    }

    /// `stage,mean_ms,median_ms,p95_ms` table.
    pub fn to_table(&self) -> String {
        let mut out = String::from("stage,mean_ms,median_ms,p95_ms\n");
        for (name, s) in self.rows() {
            let _ = writeln!(out, "{name},{:.4},{:.4},{:.4}", s.mean, s.median, s.p95);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn order_statistics() {
        let v: Vec<f64> = (1..=20).map(f64::from).collect();
        let s = StageStats::from_values(&v);
        assert_eq!(s.median, 10.0);
        assert_eq!(s.p95, 19.0);
        assert_eq!(s.mean, 10.5);
        assert_eq!(StageStats::from_values(&[]), StageStats::default());
        assert_eq!(StageStats::from_values(&[3.0]).p95, 3.0);
    }

    proptest! {
        #[test]
        fn p95_not_below_median(v in proptest::collection::vec(0.0f64..50.0, 1..200)) {
            let s = StageStats::from_values(&v);
            prop_assert!(s.p95 >= s.median);
            prop_assert!(s.mean >= 0.0);
        }
    }

    #[test]
    fn table_has_every_stage() {
        let t = StageTimes {
            get_buffer: 0.1,
            data_preparation: 1.0,
            model_inference: 5.0,
            data_extraction: 0.5,
            total: 6.6,
        };
        let b = LatencyBreakdown::from_samples(&[t, t]);
        assert_eq!(b.strides, 2);
        let table = b.to_table();
        assert_eq!(table.lines().count(), 6);
        assert!(table.contains("model_inference,5.0000,5.0000,5.0000"));
    }
}
