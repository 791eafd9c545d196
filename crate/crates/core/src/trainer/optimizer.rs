/// Adaptive moments with decoupled weight decay.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step: u64,
}

impl OptimizerState {
    pub fn zeros(n: usize) -> Self {
        Self {
            first_moment: vec![0.0; n],
            second_moment: vec![0.0; n],
            step: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub config: AdamConfig,
    pub state: OptimizerState,
}

impl AdamW {
    pub fn new(config: AdamConfig, n: usize) -> Self {
        Self {
            config,
            state: OptimizerState::zeros(n),
        }
    }

    pub fn with_state(config: AdamConfig, state: OptimizerState) -> Self {
        Self { config, state }
    }

    /// Descends along `grad` (the gradient of the loss).
    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        let c = self.config;
        let s = &mut self.state;
        s.step += 1;
        let t = s.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for i in 0..params.len() {
            let g = grad[i];
            s.first_moment[i] = c.beta1 * s.first_moment[i] + (1.0 - c.beta1) * g;
            s.second_moment[i] = c.beta2 * s.second_moment[i] + (1.0 - c.beta2) * g * g;
            let m_hat = s.first_moment[i] / bc1;
            let v_hat = s.second_moment[i] / bc2;
            params[i] -= c.learning_rate * c.weight_decay * params[i];
            params[i] -= c.learning_rate * m_hat / (v_hat.sqrt() + c.eps);
        }
    }
}

/// Rescales `grad` in place so its L2 norm is at most `max_norm`. Returns the pre-clip norm.
pub fn clip_grad_norm(grad: &mut [f64], max_norm: f64) -> f64 {
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        grad.iter_mut().for_each(|g| *g *= scale);
    }
    norm
}
