use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{
    evaluate, train, LossConfig, OptimizerConfig, OptimizerKind, TrainConfig, TrainSample,
};
use crate::error::{invalid, Result};
use crate::unet::{NetTopology, ResidualConfig, Scalar};

/// Grid of candidate configurations.
#[derive(Debug, Clone, PartialEq)]
pub struct SearchSpace {
    pub optimizers: Vec<OptimizerKind>,
    pub learning_rates: Vec<f64>,
    /// Encoder counts; each network has one decoder fewer.
    pub encoders: Vec<usize>,
    pub residuals: Vec<ResidualConfig>,
    pub base_filters: Vec<usize>,
}

impl Default for SearchSpace {
    /// The 72-point grid: 3 optimizers × 3 learning rates × {4-3, 3-2}
    /// × {Conf1, Conf2} × F0 ∈ {8, 16}.
    fn default() -> Self {
        Self {
            optimizers: vec![
                OptimizerKind::Nadam,
                OptimizerKind::Sgd,
                OptimizerKind::Adam,
            ],
            learning_rates: vec![1e-3, 1e-4, 1e-5],
            encoders: vec![4, 3],
            residuals: vec![ResidualConfig::Conf1, ResidualConfig::Conf2],
            base_filters: vec![8, 16],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrialConfig {
    /// Position in the grid enumeration.
    pub index: usize,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub encoders: usize,
    pub residual: ResidualConfig,
    pub base_filters: usize,
}

impl TrialConfig {
    pub fn topology(&self, depth: usize) -> Result<NetTopology> {
        NetTopology::new(self.encoders, self.base_filters, self.residual, depth)
    }
}

impl SearchSpace {
    pub fn configs(&self) -> Vec<TrialConfig> {
        let mut out = Vec::new();
        for &optimizer in &self.optimizers {
            for &learning_rate in &self.learning_rates {
                for &encoders in &self.encoders {
                    for &residual in &self.residuals {
                        for &base_filters in &self.base_filters {
                            out.push(TrialConfig {
                                index: out.len(),
                                optimizer,
                                learning_rate,
                                encoders,
                                residual,
                                base_filters,
                            });
                        }
                    }
                }
            }
        }
        out
    }

    pub fn len(&self) -> usize {
        self.optimizers.len()
            * self.learning_rates.len()
            * self.encoders.len()
            * self.residuals.len()
            * self.base_filters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SearchConfig {
    pub budget: usize,
    pub epochs: usize,
    pub batch_size: usize,
    /// Stacked convs per residual block, fixed across trials.
    pub depth: usize,
    pub loss: LossConfig,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialResult {
    pub config: TrialConfig,
    pub params: usize,
    /// Mean loss of the last epoch, infinite if training failed.
    pub train_loss: f64,
    pub val_loss: f64,
}

/// Trials ranked by validation loss, best first.
#[derive(Debug, Clone, PartialEq)]
pub struct SearchReport {
    pub results: Vec<TrialResult>,
}

impl SearchReport {
    pub fn best(&self) -> Option<&TrialResult> {
        self.results.first()
    }

    /// Comma-separated table with a header row.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "rank",
            "optimizer",
            "learning_rate",
            "encoders",
            "decoders",
            "residual",
            "base_filters",
            "params",
            "train_loss",
            "val_loss",
        ])
        .expect("in-memory write");
        for (rank, r) in self.results.iter().enumerate() {
            let c = &r.config;
            w.write_record([
                (rank + 1).to_string(),
                c.optimizer.to_string(),
                format!("{:e}", c.learning_rate),
                c.encoders.to_string(),
                (c.encoders - 1).to_string(),
                c.residual.to_string(),
                c.base_filters.to_string(),
                r.params.to_string(),
                format!("{:.6}", r.train_loss),
                format!("{:.6}", r.val_loss),
            ])
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("ascii table")
    }
}

/// Trains `budget` grid points drawn without replacement and ranks them by
/// validation loss. Each trial's seed depends only on the search seed and the
/// grid index, so results do not depend on scheduling.
pub fn random_search<T: Scalar>(
    space: &SearchSpace,
    cfg: &SearchConfig,
    train_set: &[TrainSample<T>],
    val_set: &[TrainSample<T>],
) -> Result<SearchReport> {
    if cfg.budget == 0 || cfg.budget > space.len() {
        return Err(invalid(format!(
            "budget {} outside 1..={}",
            cfg.budget,
            space.len()
        )));
    }
    if train_set.is_empty() || val_set.is_empty() {
        return Err(invalid(
            "search needs non-empty training and validation sets",
        ));
    }
    let mut configs = space.configs();
    configs.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed));
    configs.truncate(cfg.budget);
    for c in &configs {
        c.topology(cfg.depth)?
            .check_geometry(train_set[0].input.freq(), train_set[0].input.time())?;
    }

    let mut results: Vec<TrialResult> = configs
        .par_iter()
        .map(|c| -> Result<TrialResult> {
            let topology = c.topology(cfg.depth)?;
            let tc = TrainConfig {
                topology,
                optimizer: OptimizerConfig::new(c.optimizer, c.learning_rate),
                loss: cfg.loss,
                epochs: cfg.epochs,
                batch_size: cfg.batch_size,
                seed: cfg
                    .seed
                    .wrapping_mul(0x9e37_79b9_7f4a_7c15)
                    .wrapping_add(c.index as u64),
            };
            let (train_loss, val_loss) = match train(train_set, &tc) {
                Ok(out) => {
                    let tl = out.epoch_losses.last().copied().unwrap_or(f64::INFINITY);
                    let vl = evaluate(&out.network, val_set, &cfg.loss).unwrap_or(f64::INFINITY);
                    (tl, vl)
                }
                Err(crate::Error::Numerical(msg)) => {
                    log::warn!("trial {} diverged: {msg}", c.index);
                    (f64::INFINITY, f64::INFINITY)
                }
                Err(e) => return Err(e),
            };
            let sanitize = |v: f64| if v.is_finite() { v } else { f64::INFINITY };
            Ok(TrialResult {
                config: *c,
                params: topology.param_count(),
                train_loss: sanitize(train_loss),
                val_loss: sanitize(val_loss),
            })
        })
        .collect::<Result<_>>()?;
    results.sort_by(|a, b| {
        a.val_loss
            .total_cmp(&b.val_loss)
            .then(a.config.index.cmp(&b.config.index))
    });
    Ok(SearchReport { results })
}
