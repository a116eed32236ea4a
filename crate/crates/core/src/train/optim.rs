use crate::error::{invalid, Error, Result};
use crate::unet::{Network, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OptimizerKind {
    Sgd,
    Adam,
    Nadam,
}

impl std::fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Sgd => "sgd",
            Self::Adam => "adam",
            Self::Nadam => "nadam",
        })
    }
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sgd" => Ok(Self::Sgd),
            "adam" => Ok(Self::Adam),
            "nadam" => Ok(Self::Nadam),
            _ => Err(invalid(format!("unknown optimizer {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    /// Zero is accepted and freezes the weights.
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// SGD momentum.
    pub momentum: f64,
}

impl OptimizerConfig {
    pub fn new(kind: OptimizerKind, learning_rate: f64) -> Self {
        Self {
            kind,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            momentum: 0.0,
        }
    }

    /// Sets a field by its config-file name; `Ok(false)` for other keys.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        let num = || {
            value
                .trim()
                .parse::<f64>()
                .map_err(|_| invalid(format!("bad value '{value}' for '{key}'")))
        };
        match key {
            "kind" | "optimizer" => self.kind = value.parse()?,
            "learning_rate" => self.learning_rate = num()?,
            "beta1" => self.beta1 = num()?,
            "beta2" => self.beta2 = num()?,
            "eps" => self.eps = num()?,
            "momentum" => self.momentum = num()?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(invalid(format!(
                "learning rate {} must be finite and >= 0",
                self.learning_rate
            )));
        }
        for (name, b) in [
            ("beta1", self.beta1),
            ("beta2", self.beta2),
            ("momentum", self.momentum),
        ] {
            if !(0.0..1.0).contains(&b) {
                return Err(invalid(format!("{name} = {b} outside [0, 1)")));
            }
        }
        if !(self.eps > 0.0) {
            return Err(invalid("eps must be positive"));
        }
        Ok(())
    }
}

/// Optimizer state over a network's flattened parameters.
#[derive(Debug, Clone)]
pub struct Optimizer {
    cfg: OptimizerConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    steps: u64,
}

impl Optimizer {
    pub fn new(cfg: OptimizerConfig, param_count: usize) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            m: vec![0.0; param_count],
            v: vec![0.0; param_count],
            steps: 0,
        })
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.cfg
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update. A non-finite gradient rejects the step and leaves
    /// weights and state untouched.
    pub fn step<T: Scalar>(&mut self, net: &mut Network<T>, grads: &Network<T>) -> Result<()> {
        let n = net.param_count();
        if grads.param_count() != n || n != self.m.len() {
            return Err(invalid("gradient shape does not match the network"));
        }
        if grads.params().any(|g| !g.is_finite()) {
            return Err(Error::Numerical(
                "non-finite gradient, step rejected".into(),
            ));
        }
        self.steps += 1;
        let c = self.cfg;
        let t = self.steps as i32;
        let lr = c.learning_rate;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc1_next = 1.0 - c.beta1.powi(t + 1);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (((w, g), m), v) in net
            .params_mut()
            .zip(grads.params())
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            let g = g.as_f64();
            let delta = match c.kind {
                OptimizerKind::Sgd => {
                    *m = c.momentum * *m + g;
                    lr * *m
                }
                OptimizerKind::Adam => {
                    *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                    *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                    lr * (*m / bc1) / ((*v / bc2).sqrt() + c.eps)
                }
                OptimizerKind::Nadam => {
                    *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                    *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                    let m_hat = c.beta1 * *m / bc1_next + (1.0 - c.beta1) * g / bc1;
                    lr * m_hat / ((*v / bc2).sqrt() + c.eps)
                }
            };
            if lr != 0.0 {
                *w = T::from_f64(w.as_f64() - delta);
            }
        }
        Ok(())
    }
}
