//! Adam with bias correction.

use std::collections::BTreeMap;

use autograd::{Gradients, Tensor};

use crate::backbone::ParamStore;

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Number of updates applied so far.
    pub step: u64,
    pub m: BTreeMap<String, Tensor<f32>>,
    pub v: BTreeMap<String, Tensor<f32>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    /// One update of every parameter that has a gradient.
    pub fn update(&mut self, params: &mut ParamStore<f32>, grads: &Gradients<f32>) {
        self.step += 1;
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        let lr = self.lr as f32;
        let (c1, c2, eps) = (c1 as f32, c2 as f32, self.eps as f32);
        for (name, p) in params.iter_mut() {
            let Some(g) = grads.param(name) else { continue };
            let m = self.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(p.shape()));
            let v = self.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(p.shape()));
            for (((w, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *w -= lr * (m_hat / (v_hat.sqrt() + eps));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use autograd::Graph;

    fn quadratic_step(opt: &mut Adam, params: &mut ParamStore<f32>) -> f32 {
        let mut g = Graph::<f32>::new();
        let x = g.param("x", params.get("x").unwrap());
        let s = g.sqr(x);
        let loss = g.mean(s);
        let grads = g.backward(loss);
        opt.update(params, &grads);
        g.value(loss).item()
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut params = ParamStore::default();
        params.insert("x", Tensor::from_f64(&[2], &[3.0, -2.0]));
        let mut opt = Adam::new(0.1);
        quadratic_step(&mut opt, &mut params);
        // bias-corrected first step is lr·sign(g)
        let x = params.get("x").unwrap().data();
        assert!((x[0] - 2.9).abs() < 1e-6 && (x[1] + 1.9).abs() < 1e-6);
        assert_eq!(opt.step, 1);
    }

    #[test]
    fn zero_learning_rate_is_a_no_op() {
        let mut params = ParamStore::default();
        params.insert("x", Tensor::from_f64(&[3], &[0.3, -1.7, 2.2]));
        let before = params.clone();
        let mut opt = Adam::new(0.0);
        for _ in 0..3 {
            quadratic_step(&mut opt, &mut params);
        }
        assert_eq!(params, before);
    }

    #[test]
    fn converges_on_quadratic() {
        let mut params = ParamStore::default();
        params.insert("x", Tensor::from_f64(&[2], &[1.0, -1.0]));
        let mut opt = Adam::new(0.05);
        let first = quadratic_step(&mut opt, &mut params);
        let mut last = first;
        for _ in 0..300 {
            last = quadratic_step(&mut opt, &mut params);
        }
        assert!(last < 1e-3 * first);
    }
}
