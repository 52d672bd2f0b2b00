use serde::{Deserialize, Serialize};

use super::{Param, Real, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Step decay: the rate is multiplied by `factor` once per milestone passed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub initial: f64,
    pub milestones: Vec<usize>,
    pub factor: f64,
}

impl LrSchedule {
    pub fn constant(lr: f64) -> Self {
        LrSchedule {
            initial: lr,
            milestones: Vec::new(),
            factor: 1.0,
        }
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let passed = self.milestones.iter().filter(|&&m| epoch >= m).count();
        self.initial * self.factor.powi(passed as i32)
    }
}

#[derive(Debug, Clone)]
pub struct OptimizerState<F> {
    pub kind: OptimizerKind,
    pub schedule: LrSchedule,
    lr: f64,
    step: u64,
    moments: Vec<(Tensor<F>, Tensor<F>)>,
}

impl<F: Real> OptimizerState<F> {
    pub fn new(kind: OptimizerKind, schedule: LrSchedule) -> Self {
        let lr = schedule.lr_at(0);
        OptimizerState {
            kind,
            schedule,
            lr,
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn set_epoch(&mut self, epoch: usize) {
        self.lr = self.schedule.lr_at(epoch);
    }

    /// Applies one update to every parameter and clears their gradients.
    ///
    /// The parameter list must be passed in the same order on every call;
    /// Adam moments are matched to parameters by position.
    pub fn step(&mut self, params: &mut [&mut Param<F>]) -> Result<()> {
        if let Some(i) = params.iter().position(|p| p.grad.is_none()) {
            return Err(Error::Contract(format!("parameter {i} has no gradient")));
        }
        if let OptimizerKind::Adam { .. } = self.kind {
            if self.moments.is_empty() {
                self.moments = params
                    .iter()
                    .map(|p| {
                        let s = p.value.shape().to_vec();
                        (Tensor::zeros(s.clone()), Tensor::zeros(s))
                    })
                    .collect();
            }
            if self.moments.len() != params.len()
                || self
                    .moments
                    .iter()
                    .zip(params.iter())
                    .any(|((m, _), p)| m.shape() != p.value.shape())
            {
                return Err(Error::Contract(
                    "parameter list changed shape between optimizer steps".into(),
                ));
            }
        }
        self.step += 1;
        let lr = F::from_f64_lossy(self.lr);
        match self.kind {
            OptimizerKind::Sgd => {
                for p in params.iter_mut() {
                    let g = p.grad.take().expect("checked above");
                    for (v, &g) in p.value.data_mut().iter_mut().zip(g.data()) {
                        *v -= lr * g;
                    }
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let t = self.step as i32;
                let bc1 = F::from_f64_lossy(1.0 - beta1.powi(t));
                let bc2 = F::from_f64_lossy(1.0 - beta2.powi(t));
                let (b1, b2, eps) = (
                    F::from_f64_lossy(beta1),
                    F::from_f64_lossy(beta2),
                    F::from_f64_lossy(eps),
                );
                let one = F::one();
                for (p, (m, v)) in params.iter_mut().zip(self.moments.iter_mut()) {
                    let g = p.grad.take().expect("checked above");
                    for (((w, &g), m), v) in p
                        .value
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .zip(m.data_mut())
                        .zip(v.data_mut())
                    {
                        *m = b1 * *m + (one - b1) * g;
                        *v = b2 * *v + (one - b2) * g * g;
                        let mhat = *m / bc1;
                        let vhat = *v / bc2;
                        *w -= lr * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}
