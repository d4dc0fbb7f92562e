//! First-order optimizers over named parameters.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use crate::autodiff::{Gradients, Param};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
        })
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(Error::Config(format!("unknown optimizer `{other}`"))),
        }
    }
}

#[derive(Debug, Clone)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step_count: u64,
    moments: HashMap<String, Moments>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Self {
            kind,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step_count: 0,
            moments: HashMap::new(),
        }
    }

    pub fn sgd(lr: f64) -> Self {
        Self::new(OptimizerKind::Sgd, lr)
    }

    pub fn adam(lr: f64) -> Self {
        Self::new(OptimizerKind::Adam, lr)
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn learning_rate(&self) -> f64 {
        self.lr
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Applies one update to every parameter in `params`.
    ///
    /// All gradients are validated before any parameter is touched, so a
    /// missing or misshapen gradient leaves the parameters unchanged.
    pub fn step(&mut self, params: Vec<&mut Param>, grads: &Gradients) -> Result<()> {
        let mut pairs = Vec::with_capacity(params.len());
        for p in params {
            let g = grads
                .param(p.name())
                .ok_or_else(|| Error::MissingGradient(p.name().to_string()))?;
            if g.shape() != p.value().shape() {
                return Err(Error::InvalidArgument(format!(
                    "gradient for `{}` has shape {:?}, parameter has {:?}",
                    p.name(),
                    g.shape(),
                    p.value().shape()
                )));
            }
            pairs.push((p, g));
        }

        self.step_count += 1;
        let t = self.step_count as i32;
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in pairs {
                    for (w, d) in p.value_mut().data_mut().iter_mut().zip(g.data()) {
                        *w -= self.lr * d;
                    }
                }
            }
            OptimizerKind::Adam => {
                let (b1, b2) = (self.beta1, self.beta2);
                let c1 = 1.0 - b1.powi(t);
                let c2 = 1.0 - b2.powi(t);
                for (p, g) in pairs {
                    let n = g.numel();
                    let mom = self
                        .moments
                        .entry(p.name().to_string())
                        .or_insert_with(|| Moments {
                            m: vec![0.0; n],
                            v: vec![0.0; n],
                        });
                    let w = p.value_mut().data_mut();
                    for (((w, &d), m), v) in w.iter_mut().zip(g.data()).zip(&mut mom.m).zip(&mut mom.v) {
                        *m = b1 * *m + (1.0 - b1) * d;
                        *v = b2 * *v + (1.0 - b2) * d * d;
                        *w -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
                    }
                }
            }
        }
        Ok(())
    }
}
