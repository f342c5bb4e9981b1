use serde::{Deserialize, Serialize};

use super::{NnError, Tensor};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainSchedule {
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
    pub batch_size: usize,
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<(), NnError> {
        if self.warmup_epochs > self.total_epochs {
            return Err(NnError::InvalidConfig(format!(
                "warmup_epochs {} exceeds total_epochs {}",
                self.warmup_epochs, self.total_epochs
            )));
        }
        if !(self.base_lr >= 0.0) || !self.base_lr.is_finite() {
            return Err(NnError::InvalidConfig(format!("base_lr {} is invalid", self.base_lr)));
        }
        if self.batch_size == 0 {
            return Err(NnError::InvalidConfig("batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// Linear warmup from 0 to `base_lr`, then cosine decay to 0 at
/// `total_epochs`. `epoch` may be fractional.
pub fn lr_at(epoch: f64, s: &TrainSchedule) -> f64 {
    let warm = s.warmup_epochs as f64;
    let total = s.total_epochs as f64;
    if epoch < warm {
        return s.base_lr * epoch.max(0.0) / warm;
    }
    if epoch >= total || total <= warm {
        return if epoch >= total { 0.0 } else { s.base_lr };
    }
    let progress = (epoch - warm) / (total - warm);
    s.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        Self {
            step: 0,
            m: params.iter().map(|t| vec![0.0; t.len()]).collect(),
            v: params.iter().map(|t| vec![0.0; t.len()]).collect(),
        }
    }
}

pub fn adam_step(
    params: &mut [Tensor],
    grads: &[Tensor],
    state: &mut AdamState,
    lr: f64,
) -> Result<(), NnError> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(NnError::ShapeMismatch(format!(
            "{} parameters, {} gradients, {} optimizer slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.m) {
        if p.shape != g.shape || p.len() != m.len() {
            return Err(NnError::ShapeMismatch(format!(
                "parameter {:?} vs gradient {:?}",
                p.shape, g.shape
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - BETA1.powi(t);
    let c2 = 1.0 - BETA2.powi(t);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        for i in 0..p.len() {
            let gi = g.data[i] as f64;
            m[i] = BETA1 * m[i] + (1.0 - BETA1) * gi;
            v[i] = BETA2 * v[i] + (1.0 - BETA2) * gi * gi;
            let update = lr * (m[i] / c1) / ((v[i] / c2).sqrt() + EPSILON);
            p.data[i] = (p.data[i] as f64 - update) as f32;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sched() -> TrainSchedule {
        TrainSchedule {
            base_lr: 1e-3,
            warmup_epochs: 10,
            total_epochs: 50,
            batch_size: 32,
        }
    }

    #[test]
    fn schedule_junctions() {
        let s = sched();
        assert_eq!(lr_at(0.0, &s), 0.0);
        assert_eq!(lr_at(10.0, &s), 1e-3);
        assert_eq!(lr_at(50.0, &s), 0.0);
        assert!((lr_at(5.0, &s) - 5e-4).abs() < 1e-15);
        assert!((lr_at(30.0, &s) - 5e-4).abs() < 1e-12);
        let no_warm = TrainSchedule {
            warmup_epochs: 0,
            ..s
        };
        assert_eq!(lr_at(0.0, &no_warm), 1e-3);
    }

    #[test]
    fn schedule_validation() {
        let bad = TrainSchedule {
            warmup_epochs: 60,
            ..sched()
        };
        assert!(bad.validate().is_err());
        assert!(sched().validate().is_ok());
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = vec![Tensor::new(vec![2], vec![1.0, -1.0]).unwrap()];
        let g = vec![Tensor::new(vec![2], vec![0.5, -3.0]).unwrap()];
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &g, &mut st, 0.1).unwrap();
        assert!((p[0].data[0] - 0.9).abs() < 1e-6);
        assert!((p[0].data[1] + 0.9).abs() < 1e-6);
        let wrong = vec![Tensor::zeros(&[3])];
        assert!(adam_step(&mut p, &wrong, &mut st, 0.1).is_err());
    }

    #[test]
    fn minimizes_quadratic() {
        let mut p = vec![Tensor::new(vec![1], vec![5.0]).unwrap()];
        let mut st = AdamState::new(&p);
        for _ in 0..2000 {
            let g = vec![Tensor::new(vec![1], vec![2.0 * (p[0].data[0] - 2.0)]).unwrap()];
            adam_step(&mut p, &g, &mut st, 0.05).unwrap();
        }
        assert!((p[0].data[0] - 2.0).abs() < 1e-2);
    }
}
