use serde::{Deserialize, Serialize};

use crate::error::{invalid_arg, Result};

use super::{Classifier, Layer};

/// Step decay: `initial_lr` until `drop_epoch`, then divided by `drop_factor`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub initial_lr: f64,
    pub drop_epoch: usize,
    pub drop_factor: f64,
}

impl LrSchedule {
    pub fn lr(&self, epoch: usize) -> f64 {
        if epoch >= self.drop_epoch {
            self.initial_lr / self.drop_factor
        } else {
            self.initial_lr
        }
    }
}

#[derive(Clone, Debug)]
pub struct OptimizerState {
    velocity: Vec<Layer>,
    pub momentum: f64,
    pub weight_decay: f64,
    pub schedule: LrSchedule,
}

impl OptimizerState {
    pub fn new(model: &Classifier, momentum: f64, weight_decay: f64, schedule: LrSchedule) -> Self {
        Self {
            velocity: model.zero_gradients(),
            momentum,
            weight_decay,
            schedule,
        }
    }
}

/// Classical momentum with coupled weight decay:
/// `v <- m v + (g + wd theta)`, `theta <- theta - lr(epoch) v`.
pub fn sgd_step(model: &mut Classifier, state: &mut OptimizerState, grads: &[Layer], epoch: usize) -> Result<()> {
    if grads.len() != model.layers.len()
        || state.velocity.len() != model.layers.len()
        || grads.iter().zip(&model.layers).any(|(g, l)| !g.same_shape(l))
    {
        return Err(invalid_arg("gradient shapes do not match the model"));
    }
    let lr = state.schedule.lr(epoch);
    let (m, wd) = (state.momentum, state.weight_decay);
    for ((layer, grad), vel) in model.layers.iter_mut().zip(grads).zip(&mut state.velocity) {
        let params = layer
            .weights
            .as_mut_slice()
            .iter_mut()
            .chain(layer.bias.iter_mut());
        let g = grad.weights.as_slice().iter().chain(&grad.bias);
        let v = vel.weights.as_mut_slice().iter_mut().chain(vel.bias.iter_mut());
        for ((p, &gv), vv) in params.zip(g).zip(v) {
            *vv = m * *vv + (gv + wd * *p);
            *p -= lr * *vv;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::init_model;

    fn constant_grads(model: &Classifier, value: f64) -> Vec<Layer> {
        let mut g = model.zero_gradients();
        for l in &mut g {
            l.weights.as_mut_slice().iter_mut().for_each(|v| *v = value);
            l.bias.iter_mut().for_each(|v| *v = value);
        }
        g
    }

    #[test]
    fn plain_step_subtracts_gradient() {
        let mut model = init_model(&[3, 2], 1).unwrap();
        let before = model.clone();
        let sched = LrSchedule { initial_lr: 1.0, drop_epoch: 10, drop_factor: 10.0 };
        let mut st = OptimizerState::new(&model, 0.0, 0.0, sched);
        { let g = constant_grads(&model, 0.25); sgd_step(&mut model, &mut st, &g, 0) }.unwrap();
        for (a, b) in model.layers()[0].weights.as_slice().iter().zip(before.layers()[0].weights.as_slice()) {
            assert_eq!(*a, b - 0.25);
        }
    }

    #[test]
    fn schedule_drops_at_epoch() {
        let s = LrSchedule { initial_lr: 0.02, drop_epoch: 150, drop_factor: 10.0 };
        assert_eq!(s.lr(149), 0.02);
        assert!((s.lr(150) - 0.002).abs() < 1e-18);
    }

    #[test]
    fn momentum_second_step_is_1_9_times() {
        let mut model = init_model(&[2, 2], 1).unwrap();
        let sched = LrSchedule { initial_lr: 0.1, drop_epoch: 100, drop_factor: 10.0 };
        let mut st = OptimizerState::new(&model, 0.9, 0.0, sched);
        let g = constant_grads(&model, 1.0);
        sgd_step(&mut model, &mut st, &g, 0).unwrap();
        let mid = model.clone();
        sgd_step(&mut model, &mut st, &g, 1).unwrap();
        let step = mid.layers()[0].weights.as_slice()[0] - model.layers()[0].weights.as_slice()[0];
        assert!((step - 1.9 * 0.1).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut model = init_model(&[2, 2], 1).unwrap();
        let other = init_model(&[2, 3], 1).unwrap();
        let sched = LrSchedule { initial_lr: 0.1, drop_epoch: 100, drop_factor: 10.0 };
        let mut st = OptimizerState::new(&model, 0.9, 0.0, sched);
        assert!(sgd_step(&mut model, &mut st, &other.zero_gradients(), 0).is_err());
    }
}
