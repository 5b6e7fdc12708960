//! Adam with bias correction, optionally with decoupled weight decay (AdamW).

use crate::params::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// AdamW when true; otherwise weight decay is added to the gradient.
    pub decoupled: bool,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0, decoupled: false }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    /// a gradient entry was NaN or infinite; nothing changed
    SkippedNonFinite,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    steps: u64,
    skipped: u64,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &ParamStore) -> Self {
        Self { config, first: params.zeros_like(), second: params.zeros_like(), steps: 0, skipped: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn skipped(&self) -> u64 {
        self.skipped
    }

    /// Applies one update to the parameters selected by `update`; unselected
    /// parameters and their moments are left untouched.
    pub fn step(
        &mut self,
        params: &mut ParamStore,
        grads: &[Vec<f64>],
        lr: f64,
        update: impl Fn(usize) -> bool,
    ) -> StepOutcome {
        let finite = grads
            .iter()
            .enumerate()
            .filter(|(i, _)| update(*i))
            .all(|(_, g)| g.iter().all(|v| v.is_finite()));
        if !finite {
            self.skipped += 1;
            return StepOutcome::SkippedNonFinite;
        }
        self.steps += 1;
        let c = self.config;
        let t = self.steps as i32;
        let bias1 = 1.0 - c.beta1.powi(t);
        let bias2 = 1.0 - c.beta2.powi(t);
        for (i, p) in params.as_mut_slice().iter_mut().enumerate() {
            if !update(i) {
                continue;
            }
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            for j in 0..p.values.len() {
                let w = p.values[j];
                let mut g = grads[i][j];
                if !c.decoupled {
                    g += c.weight_decay * w;
                }
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g * g;
                let m_hat = m[j] / bias1;
                let v_hat = v[j] / bias2;
                let mut next = w - lr * m_hat / (v_hat.sqrt() + c.eps);
                if c.decoupled {
                    next -= lr * c.weight_decay * w;
                }
                p.values[j] = next;
            }
        }
        StepOutcome::Applied
    }
}
