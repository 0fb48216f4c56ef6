//! Adaptive-moment optimizer with decoupled weight decay over two groups.

use crate::error::{Error, Result};
use crate::params::{ParamGroup, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Learning-rate multiplier of the transformer group.
    pub transformer_lr_mult: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 5e-4,
            transformer_lr_mult: 0.1,
        }
    }
}

/// Per-parameter moments, aligned with the store's parameter order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub cfg: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamW {
    pub fn new(params: &ParamStore, cfg: AdamConfig) -> Result<Self> {
        if params.is_empty() {
            return Err(Error::Config("optimizer needs at least one parameter".into()));
        }
        let zeros: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        Ok(Self { cfg, step: 0, m: zeros.clone(), v: zeros })
    }

    pub fn group_lr(&self, base_lr: f64, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::Transformer => base_lr * self.cfg.transformer_lr_mult,
            ParamGroup::Base => base_lr,
        }
    }

    /// One update. `grads[i]` is the gradient of parameter `i`; `None`
    /// means the parameter did not reach the loss and counts as zero.
    pub fn update(&mut self, params: &mut ParamStore, grads: &[Option<Tensor>], base_lr: f64) -> Result<()> {
        if grads.len() != self.m.len() || params.len() != self.m.len() {
            return Err(Error::Shape("gradient list does not match parameters".into()));
        }
        self.step += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let ids: Vec<_> = params.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let lr = self.group_lr(base_lr, params.get(id).group);
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            let p = params.value_mut(id).data_mut();
            for j in 0..p.len() {
                let g = grads[i].as_ref().map_or(0.0, |g| g.data()[j]);
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g * g;
                p[j] -= lr * c.weight_decay * p[j];
                p[j] -= lr * (m[j] / bc1) / ((v[j] / bc2).sqrt() + c.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{Init, ParamBuilder};

    #[test]
    fn quadratic_two_steps_by_hand() {
        // f(x) = (x - 3)^2 from x = 1, lr 0.1, wd 0.01.
        let mut b = ParamBuilder::new(0);
        let id = b.add("x", &[1], Init::Constant(1.0));
        let mut store = b.finish();
        let cfg = AdamConfig { weight_decay: 0.01, ..AdamConfig::default() };
        let mut opt = AdamW::new(&store, cfg).unwrap();
        let lr = 0.1;

        // Step 1: g = -4, m = -0.4, v = 0.016, m_hat = -4, v_hat = 16.
        let x0 = 1.0;
        let g = 2.0 * (x0 - 3.0);
        opt.update(&mut store, &[Some(Tensor::new(&[1], vec![g]).unwrap())], lr).unwrap();
        let x1 = x0 - lr * 0.01 * x0 - lr * (-4.0) / (4.0 + 1e-8);
        assert_eq!(store.get(id).value.data()[0], x1);

        // Step 2 by hand.
        let g2 = 2.0 * (x1 - 3.0);
        let m2 = 0.9 * (-0.4) + 0.1 * g2;
        let v2 = 0.999 * 0.016 + 0.001 * g2 * g2;
        let mh = m2 / (1.0 - 0.81);
        let vh = v2 / (1.0 - 0.999f64 * 0.999);
        let x2 = x1 - lr * 0.01 * x1 - lr * mh / (vh.sqrt() + 1e-8);
        opt.update(&mut store, &[Some(Tensor::new(&[1], vec![g2]).unwrap())], lr).unwrap();
        assert!((store.get(id).value.data()[0] - x2).abs() < 1e-15);
    }

    #[test]
    fn transformer_group_runs_at_tenth_rate() {
        let mut b = ParamBuilder::new(0);
        b.add("base", &[1], Init::Zeros);
        b.in_group(ParamGroup::Transformer, |b| b.add("enc", &[1], Init::Zeros));
        let store = b.finish();
        let opt = AdamW::new(&store, AdamConfig::default()).unwrap();
        assert_eq!(opt.group_lr(1e-4, ParamGroup::Base), 1e-4);
        assert!((opt.group_lr(1e-4, ParamGroup::Transformer) - 1e-5).abs() < 1e-20);
    }

    #[test]
    fn empty_parameter_set_is_rejected() {
        assert!(AdamW::new(&ParamStore::default(), AdamConfig::default()).is_err());
    }
}
