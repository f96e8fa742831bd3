use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::transformer::ParamStore;

use super::config::{OptimizerKind, TrainConfig};

/// Per-parameter optimizer buffers, aligned with the parameter store order.
/// Parameters that never received a gradient keep `steps == 0` and are never
/// touched, not even by weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub kind: OptimizerKind,
    pub steps: Vec<u64>,
    /// Adam first moment, or SGD momentum.
    pub first: Vec<Tensor<f32>>,
    /// Adam second moment; empty for SGD.
    pub second: Vec<Tensor<f32>>,
}

impl OptimState {
    pub fn new(kind: OptimizerKind, params: &ParamStore<f32>) -> Self {
        let zeros = || params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        OptimState {
            kind,
            steps: vec![0; params.len()],
            first: zeros(),
            second: if kind == OptimizerKind::Adamw {
                zeros()
            } else {
                Vec::new()
            },
        }
    }

    pub fn check(&self, params: &ParamStore<f32>) -> Result<()> {
        let want_second = if self.kind == OptimizerKind::Adamw {
            params.len()
        } else {
            0
        };
        if self.steps.len() != params.len() || self.first.len() != params.len() || self.second.len() != want_second {
            return Err(Error::invalid("optimizer state does not match the parameters"));
        }
        Ok(())
    }

    /// One update at learning rate `lr`. `grads[k]` is `None` for parameters
    /// outside the graph.
    pub fn step(&mut self, cfg: &TrainConfig, lr: f64, params: &mut ParamStore<f32>, grads: &[Option<Tensor<f32>>]) {
        for (k, (p, g)) in params.tensors_mut().iter_mut().zip(grads).enumerate() {
            let Some(g) = g else { continue };
            self.steps[k] += 1;
            match self.kind {
                OptimizerKind::Sgd => sgd(cfg, lr, p, g, &mut self.first[k]),
                OptimizerKind::Adamw => adamw(cfg, lr, self.steps[k], p, g, &mut self.first[k], &mut self.second[k]),
            }
        }
    }
}

fn sgd(cfg: &TrainConfig, lr: f64, p: &mut Tensor<f32>, g: &Tensor<f32>, buf: &mut Tensor<f32>) {
    for ((w, &gi), b) in p.data_mut().iter_mut().zip(g.data()).zip(buf.data_mut()) {
        let grad = gi as f64 + cfg.weight_decay * *w as f64;
        let v = cfg.momentum * *b as f64 + grad;
        *b = v as f32;
        *w = (*w as f64 - lr * v) as f32;
    }
}

fn adamw(
    cfg: &TrainConfig,
    lr: f64,
    step: u64,
    p: &mut Tensor<f32>,
    g: &Tensor<f32>,
    m: &mut Tensor<f32>,
    v: &mut Tensor<f32>,
) {
    let c1 = 1.0 - cfg.beta1.powi(step as i32);
    let c2 = 1.0 - cfg.beta2.powi(step as i32);
    for (((w, &gi), mi), vi) in p
        .data_mut()
        .iter_mut()
        .zip(g.data())
        .zip(m.data_mut())
        .zip(v.data_mut())
    {
        let gi = gi as f64;
        let mn = cfg.beta1 * *mi as f64 + (1.0 - cfg.beta1) * gi;
        let vn = cfg.beta2 * *vi as f64 + (1.0 - cfg.beta2) * gi * gi;
        *mi = mn as f32;
        *vi = vn as f32;
        let decayed = *w as f64 * (1.0 - lr * cfg.weight_decay);
        *w = (decayed - lr * (mn / c1) / ((vn / c2).sqrt() + cfg.adam_eps)) as f32;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(v: f32) -> ParamStore<f32> {
        let mut p = ParamStore::default();
        p.insert("w", Tensor::full(&[2], v));
        p.insert("unused", Tensor::full(&[1], 5.0));
        p
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        let cfg = TrainConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut p = store(1.0);
        let mut st = OptimState::new(OptimizerKind::Adamw, &p);
        let g = vec![Some(Tensor::new(&[2], vec![0.3, -2.0]).unwrap()), None];
        st.step(&cfg, 0.1, &mut p, &g);
        let w = p.get("w").unwrap().data();
        assert!((w[0] - 0.9).abs() < 1e-6 && (w[1] - 1.1).abs() < 1e-6);
        assert_eq!(p.get("unused").unwrap().data(), &[5.0]);
        assert_eq!(st.steps, vec![1, 0]);
    }

    #[test]
    fn sgd_with_momentum() {
        let cfg = TrainConfig {
            weight_decay: 0.0,
            momentum: 0.5,
            ..Default::default()
        };
        let mut p = store(0.0);
        let mut st = OptimState::new(OptimizerKind::Sgd, &p);
        let g = vec![Some(Tensor::full(&[2], 1.0)), None];
        st.step(&cfg, 0.1, &mut p, &g);
        st.step(&cfg, 0.1, &mut p, &g);
        // Velocities 1 then 1.5.
        assert!((p.get("w").unwrap().data()[0] + 0.25).abs() < 1e-7);
        assert!(st.check(&p).is_ok());
    }

    #[test]
    fn decoupled_decay_with_zero_gradient() {
        let cfg = TrainConfig {
            weight_decay: 0.5,
            ..Default::default()
        };
        let mut p = store(2.0);
        let mut st = OptimState::new(OptimizerKind::Adamw, &p);
        st.step(&cfg, 0.1, &mut p, &[Some(Tensor::zeros(&[2])), None]);
        assert!((p.get("w").unwrap().data()[0] - 1.9).abs() < 1e-6);
    }
}
