use super::tensor::Tensor;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            ..Default::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam over a fixed list of parameter tensors.
#[derive(Clone, Debug)]
pub struct Adam {
    config: AdamConfig,
    step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &[&Tensor]) -> Result<Self> {
        if !(config.lr > 0.0) || !config.lr.is_finite() {
            return Err(Error::invalid(format!("Adam learning rate must be > 0, got {}", config.lr)));
        }
        let zeros = |p: &&Tensor| Tensor::new(p.shape().to_vec(), vec![0.0; p.len()]).expect("shape");
        Ok(Adam {
            config,
            step: 0,
            first: params.iter().map(zeros).collect(),
            second: params.iter().map(zeros).collect(),
        })
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    /// Applies one update. Fails without touching any state if a gradient
    /// is non-finite or mis-shaped.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[&Tensor]) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != params.len() {
            return Err(Error::shape(
                "adam_step",
                format!("{} params, {} grads, {} moments", params.len(), grads.len(), self.first.len()),
            ));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.shape() != self.first[i].shape() {
                return Err(Error::shape(
                    "adam_step",
                    format!("param {} is {:?}, grad is {:?}", i, p.shape(), g.shape()),
                ));
            }
            if !g.all_finite() {
                return Err(Error::NonFinite(format!("gradient {} passed to adam_step", i)));
            }
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *mv = beta1 * *mv + (1.0 - beta1) * gv;
                *vv = beta2 * *vv + (1.0 - beta2) * gv * gv;
                let m_hat = *mv / bc1;
                let v_hat = *vv / bc2;
                *pv -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
