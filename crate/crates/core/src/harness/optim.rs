use crate::error::{dim_err, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Adaptive moment estimation with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros = || store.params().map(|(_, t)| Tensor::zeros(t.shape())).collect::<Vec<_>>();
        Adam { beta1, beta2, eps, step: 0, m: zeros(), v: zeros() }
    }

    /// One update of every parameter in `store` from `grads` (store order).
    pub fn update(&mut self, store: &mut ParamStore, grads: &[Tensor], lr: f64) -> Result<()> {
        if grads.len() != self.m.len() || store.len() != self.m.len() {
            return Err(dim_err!("adam holds {} moments, got {} gradients", self.m.len(), grads.len()));
        }
        self.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        for (i, id) in store.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let g = &grads[i];
            g.expect_same_shape(&self.m[i])?;
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let p = store.get_mut(id).data_mut();
            for k in 0..p.len() {
                let gk = g.data()[k];
                m[k] = b1 * m[k] + (1.0 - b1) * gk;
                v[k] = b2 * v[k] + (1.0 - b2) * gk * gk;
                p[k] -= lr * (m[k] / c1) / ((v[k] / c2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::new(&[2], vec![1.0, -1.0]).unwrap());
        let mut adam = Adam::new(&store, 0.9, 0.999, 1e-8);
        adam.update(&mut store, &[Tensor::new(&[2], vec![3.0, -0.5]).unwrap()], 0.1).unwrap();
        let w = store.params().next().unwrap().1;
        assert!((w.data()[0] - 0.9).abs() < 1e-7);
        assert!((w.data()[1] + 0.9).abs() < 1e-7);
    }

    #[test]
    fn convex_quadratic_decreases() {
        // f(w) = Σ a_k (w_k − t_k)²
        let a = [1.0, 4.0, 0.25];
        let t = [0.5, -2.0, 3.0];
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::zeros(&[3]));
        let mut adam = Adam::new(&store, 0.9, 0.999, 1e-8);
        let f = |w: &Tensor| (0..3).map(|k| a[k] * (w.data()[k] - t[k]).powi(2)).sum::<f64>();
        let mut losses = vec![f(store.get(id))];
        for _ in 0..150 {
            let w = store.get(id).clone();
            let g = Tensor::from_fn(&[3], |k| 2.0 * a[k] * (w.data()[k] - t[k]));
            adam.update(&mut store, &[g], 1e-2).unwrap();
            losses.push(f(store.get(id)));
        }
        assert!(losses[5..].windows(2).all(|w| w[1] < w[0]));
    }
}
