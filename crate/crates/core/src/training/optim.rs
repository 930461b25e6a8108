//! Adam with polynomial learning-rate decay.

use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub state: AdamState,
    /// Only parameters flagged here are updated.
    trainable: Vec<bool>,
}

impl Adam {
    pub fn new(store: &ParamStore, trainable: impl Fn(&str) -> bool) -> Self {
        let zeros = || store.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect::<Vec<_>>();
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            state: AdamState { step: 0, m: zeros(), v: zeros() },
            trainable: store.iter().map(|(n, _)| trainable(n)).collect(),
        }
    }

    pub fn is_trainable(&self, index: usize) -> bool {
        self.trainable[index]
    }

    pub fn restore(&mut self, state: AdamState) -> Result<()> {
        let same = state.m.len() == self.state.m.len()
            && state.m.iter().zip(&self.state.m).all(|(a, b)| a.shape() == b.shape())
            && state.v.iter().zip(&self.state.v).all(|(a, b)| a.shape() == b.shape());
        if !same {
            return Err(Error::Config("optimizer state does not match the model parameters".into()));
        }
        self.state = state;
        Ok(())
    }

    /// One update from per-parameter gradients (indexed like the store); missing entries count as zero.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>], lr: f64) {
        self.state.step += 1;
        let t = self.state.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let i = id.index();
            if !self.trainable[i] {
                continue;
            }
            let Some(g) = grads.get(i).and_then(Option::as_ref) else {
                continue;
            };
            let m = self.state.m[i].data_mut();
            let v = self.state.v[i].data_mut();
            let p = store.get_mut(id).data_mut();
            for k in 0..p.len() {
                let gk = g.data()[k];
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * gk;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * gk * gk;
                let mh = m[k] / c1;
                let vh = v[k] / c2;
                p[k] -= lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

/// `base * (1 - epoch / epochs)^power` for 0-based `epoch`.
pub fn poly_lr(base: f64, epoch: usize, epochs: usize, power: f64) -> f64 {
    let frac = 1.0 - epoch as f64 / epochs.max(1) as f64;
    base * frac.max(0.0).powf(power)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::from_vec(&[2], vec![1.0, -1.0]).unwrap());
        store.add("frozen", Tensor::full(&[1], 5.0));
        let mut opt = Adam::new(&store, |n| n != "frozen");
        let grads = vec![Some(Tensor::from_vec(&[2], vec![0.5, -2.0]).unwrap()), Some(Tensor::full(&[1], 1.0))];
        opt.step(&mut store, &grads, 0.1);
        let v = store.get(a).data();
        assert!((v[0] - 0.9).abs() < 1e-6 && (v[1] + 0.9).abs() < 1e-6);
        assert_eq!(store.get(store.id("frozen").unwrap()).data(), &[5.0]);
    }

    #[test]
    fn poly_schedule() {
        assert_eq!(poly_lr(1.0, 0, 10, 0.9), 1.0);
        assert!((poly_lr(1.0, 5, 10, 1.0) - 0.5).abs() < 1e-15);
        assert!(poly_lr(1.0, 9, 10, 0.9) > 0.0);
        assert_eq!(poly_lr(1.0, 10, 10, 0.9), 0.0);
    }

    #[test]
    fn minimises_a_quadratic() {
        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::full(&[1], 3.0));
        let mut opt = Adam::new(&store, |_| true);
        for _ in 0..2000 {
            let g = 2.0 * (store.get(x).data()[0] - 1.0);
            opt.step(&mut store, &[Some(Tensor::full(&[1], g))], 0.01);
        }
        assert!((store.get(x).data()[0] - 1.0).abs() < 1e-2);
    }
}
