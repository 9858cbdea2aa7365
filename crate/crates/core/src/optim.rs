//! AdamW with decoupled weight decay and a warmup + cosine schedule.

use std::collections::BTreeMap;

use crate::error::{Result, WwtError};
use crate::model::WwtParams;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

/// Matrices decay; biases, norm parameters, positional embeddings and slot
/// queries do not.
pub fn decays(name: &str) -> bool {
    name.ends_with(".weight")
}

impl AdamW {
    pub fn new(beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        AdamW {
            beta1,
            beta2,
            eps,
            weight_decay,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update of every parameter that has a gradient.
    pub fn step(
        &mut self,
        params: &mut WwtParams<f32>,
        grads: &BTreeMap<String, Tensor<f32>>,
        lr: f64,
    ) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, g) in grads {
            let p = params.get_mut(name)?;
            if p.shape() != g.shape() {
                return Err(WwtError::shape("adamw", p.shape(), g.shape()));
            }
            let n = g.numel();
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let wd = if decays(name) { self.weight_decay } else { 0.0 };
            for (i, (pv, gv)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                let gi = *gv as f64;
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                let x = *pv as f64;
                *pv = (x - lr * (mh / (vh.sqrt() + self.eps) + wd * x)) as f32;
            }
        }
        Ok(())
    }
}

/// Linear warmup over `warmup` steps to `base`, then cosine decay to `min`
/// at `total`.
pub fn cosine_lr(step: usize, total: usize, warmup: usize, base: f64, min: f64) -> f64 {
    if step < warmup {
        return base * (step + 1) as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1);
    let prog = ((step - warmup) as f64 / span as f64).min(1.0);
    min + 0.5 * (base - min) * (1.0 + (std::f64::consts::PI * prog).cos())
}

/// Global L2 norm of a gradient set.
pub fn grad_norm(grads: &BTreeMap<String, Tensor<f32>>) -> f64 {
    grads
        .values()
        .flat_map(|t| t.data().iter())
        .map(|v| (*v as f64).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Rescale gradients so their global norm is at most `max_norm`.
pub fn clip_grad_norm(grads: &mut BTreeMap<String, Tensor<f32>>, max_norm: f64) -> f64 {
    let n = grad_norm(grads);
    if max_norm > 0.0 && n > max_norm {
        let s = (max_norm / n) as f32;
        for t in grads.values_mut() {
            t.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    n
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(name: &str, v: f32) -> WwtParams<f32> {
        let mut p = WwtParams::from_map(BTreeMap::new());
        p.insert(name, Tensor::from_vec(&[1], vec![v]).unwrap());
        p
    }

    #[test]
    fn two_hand_stepped_updates() {
        let (b1, b2, eps, wd, lr) = (0.9, 0.999, 1e-8, 0.05, 0.1);
        let mut opt = AdamW::new(b1, b2, eps, wd);
        let mut p = one("fc.weight", 1.0);
        let gs = [0.5f32, -0.25];
        let (mut x, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        for (k, g) in gs.iter().enumerate() {
            let mut grads = BTreeMap::new();
            grads.insert(
                "fc.weight".to_string(),
                Tensor::from_vec(&[1], vec![*g]).unwrap(),
            );
            opt.step(&mut p, &grads, lr).unwrap();
            let g = *g as f64;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let t = (k + 1) as i32;
            let upd = (m / (1.0 - b1.powi(t))) / ((v / (1.0 - b2.powi(t))).sqrt() + eps);
            x = (x - lr * (upd + wd * x)) as f32 as f64;
            assert_eq!(p.get("fc.weight").unwrap().data()[0] as f64, x);
        }
    }

    #[test]
    fn biases_do_not_decay() {
        let mut opt = AdamW::new(0.9, 0.999, 1e-8, 0.5);
        let mut p = one("fc.bias", 2.0);
        let mut grads = BTreeMap::new();
        grads.insert(
            "fc.bias".to_string(),
            Tensor::from_vec(&[1], vec![0.0]).unwrap(),
        );
        opt.step(&mut p, &grads, 0.1).unwrap();
        assert_eq!(p.get("fc.bias").unwrap().data()[0], 2.0);
    }

    #[test]
    fn schedule_shape() {
        assert!((cosine_lr(0, 100, 10, 1.0, 0.0) - 0.1).abs() < 1e-15);
        assert_eq!(cosine_lr(9, 100, 10, 1.0, 0.0), 1.0);
        assert_eq!(cosine_lr(10, 100, 10, 1.0, 0.0), 1.0);
        assert!((cosine_lr(55, 100, 10, 1.0, 0.0) - 0.5).abs() < 1e-12);
        assert!(cosine_lr(100, 100, 10, 1.0, 0.01) - 0.01 < 1e-15);
        let mut prev = 2.0;
        for s in 10..=100 {
            let lr = cosine_lr(s, 100, 10, 1.0, 0.0);
            assert!(lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn clipping_bounds_the_norm() {
        let mut g = BTreeMap::new();
        g.insert(
            "a".to_string(),
            Tensor::from_vec(&[2], vec![3.0f32, 4.0]).unwrap(),
        );
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((grad_norm(&g) - 1.0).abs() < 1e-6);
    }
}
