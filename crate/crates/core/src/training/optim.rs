use crate::error::{Error, Result};
use crate::numerics::ParamSet;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam moments, one flat buffer per parameter in set order.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub steps: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &ParamSet) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|(_, p)| vec![0.0; p.value().len()]).collect();
        Self {
            config,
            steps: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Applies one bias-corrected update from the gradient buffers.
    pub fn step(&mut self, params: &mut ParamSet, lr: f64) -> Result<()> {
        if self.m.len() != params.len() {
            return Err(Error::contract("optimizer state does not match parameter set"));
        }
        self.steps += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powf(self.steps as f64);
        let bc2 = 1.0 - beta2.powf(self.steps as f64);
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let g = p.grad().data().to_vec();
            for (((w, g), m), v) in p.value_mut().data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                *w -= lr * (*m / bc1) / ((*v / bc2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// `θ⁻ <- μ θ⁻ + (1 - μ) θ`, outside any tape.
pub fn ema_update(target: &mut ParamSet, online: &ParamSet, mu: f64) -> Result<()> {
    if !target.is_congruent(online) {
        return Err(Error::contract("EMA between non-congruent parameter sets"));
    }
    for (t, (_, o)) in target.iter_mut().zip(online.iter()) {
        for (a, &b) in t.value_mut().data_mut().iter_mut().zip(o.value().data()) {
            *a = mu * *a + (1.0 - mu) * b;
        }
    }
    Ok(())
}
