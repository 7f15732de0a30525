use super::param::Parameter;
use super::tensor::Tensor;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// Adam with bias-corrected moments and decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub lr: f64,
    pub weight_decay: f64,
    step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &[Parameter], lr: f64, weight_decay: f64) -> Self {
        AdamState {
            lr,
            weight_decay,
            step: 0,
            first: params.iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
            second: params.iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update from the current gradients. Gradients are left
    /// untouched; non-trainable parameters are skipped entirely.
    pub fn step(&mut self, params: &mut [Parameter]) {
        assert_eq!(params.len(), self.first.len(), "optimizer/parameter count mismatch");
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - BETA1.powi(t);
        let c2 = 1.0 - BETA2.powi(t);
        for ((p, m), v) in params.iter_mut().zip(&mut self.first).zip(&mut self.second) {
            assert_eq!(m.shape(), p.value.shape(), "moment shape mismatch");
            if !p.trainable {
                continue;
            }
            let value = p.value.data_mut();
            let grad = p.grad.data();
            for k in 0..value.len() {
                let g = grad[k];
                let mk = &mut m.data_mut()[k];
                *mk = BETA1 * *mk + (1.0 - BETA1) * g;
                let vk = &mut v.data_mut()[k];
                *vk = BETA2 * *vk + (1.0 - BETA2) * g * g;
                let m_hat = m.data()[k] / c1;
                let v_hat = v.data()[k] / c2;
                value[k] -= self.lr * (m_hat / (v_hat.sqrt() + EPSILON) + self.weight_decay * value[k]);
            }
        }
    }
}

/// Free-function form of [`AdamState::step`].
pub fn adam_step(params: &mut [Parameter], state: &mut AdamState) {
    state.step(params);
}
