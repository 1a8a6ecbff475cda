use super::params::{ParamId, ParamStore};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Multiplier applied to every group's learning rate at each epoch boundary.
    pub decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            decay: 0.96,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamGroup {
    pub name: String,
    pub params: Vec<ParamId>,
    pub base_lr: f64,
}

/// Adaptive-moment optimizer with bias correction and epoch-wise exponential
/// learning-rate decay.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    groups: Vec<ParamGroup>,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    step: u64,
    epoch: u32,
}

impl Adam {
    pub fn new(config: AdamConfig, groups: Vec<ParamGroup>, store: &ParamStore) -> Self {
        let sizes: Vec<usize> = store.ids().map(|id| store.get(id).values.len()).collect();
        Self {
            config,
            groups,
            first: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            second: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
            epoch: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn epoch(&self) -> u32 {
        self.epoch
    }

    pub fn groups(&self) -> &[ParamGroup] {
        &self.groups
    }

    pub fn lr(&self, group: &str) -> Option<f64> {
        self.groups
            .iter()
            .find(|g| g.name == group)
            .map(|g| g.base_lr * self.config.decay.powi(self.epoch as i32))
    }

    pub fn end_epoch(&mut self) {
        self.epoch += 1;
    }

    /// Apply one update from the accumulated gradients, then clear them.
    ///
    /// A non-finite gradient aborts the step before any parameter changes.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        for g in &self.groups {
            for &id in &g.params {
                let t = store.get(id);
                if let Some(pos) = t.grad.iter().position(|v| !v.is_finite()) {
                    return Err(Error::NonFinite(format!(
                        "gradient of `{}` at {pos} is {}",
                        t.name, t.grad[pos]
                    )));
                }
            }
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, eps, decay } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        let decay = decay.powi(self.epoch as i32);
        for g in &self.groups {
            let lr = g.base_lr * decay;
            for &id in &g.params {
                let t = store.get_mut(id);
                let m = &mut self.first[id.index()];
                let v = &mut self.second[id.index()];
                for i in 0..t.values.len() {
                    let gi = t.grad[i];
                    m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                    v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                    let m_hat = m[i] / bc1;
                    let v_hat = v[i] / bc2;
                    t.values[i] -= lr * m_hat / (v_hat.sqrt() + eps);
                }
                if let Some(pos) = t.values.iter().position(|v| !v.is_finite()) {
                    return Err(Error::NonFinite(format!("`{}` at {pos} after update", t.name)));
                }
            }
        }
        store.zero_grads();
        Ok(())
    }
}
