//! Adam with decoupled (or optionally coupled) weight decay.

use crate::model::Params;
use crate::real::Real;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Add `weight_decay * p` to the gradient instead of decaying the weights directly.
    pub coupled_wd: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub m: Params<T>,
    pub v: Params<T>,
    pub step: u64,
}

impl<T: Real> Adam<T> {
    pub fn new(like: &Params<T>) -> Adam<T> {
        let zeros = Params {
            tensors: like
                .tensors
                .iter()
                .map(|t| crate::real::Mat::zeros(t.rows, t.cols))
                .collect(),
        };
        Adam {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    pub fn update(&mut self, params: &mut Params<T>, grads: &Params<T>, cfg: &AdamConfig) {
        self.step += 1;
        let t = self.step as f64;
        let b1 = T::cast(cfg.beta1);
        let b2 = T::cast(cfg.beta2);
        let one = T::one();
        let c1 = T::cast(1.0 / (1.0 - libm::pow(cfg.beta1, t)));
        let c2 = T::cast(1.0 / (1.0 - libm::pow(cfg.beta2, t)));
        let lr = T::cast(cfg.lr);
        let eps = T::cast(cfg.eps);
        let wd = T::cast(cfg.weight_decay);
        for (((p, g), m), v) in params
            .tensors
            .iter_mut()
            .zip(&grads.tensors)
            .zip(self.m.tensors.iter_mut())
            .zip(self.v.tensors.iter_mut())
        {
            for (((pv, gv), mv), vv) in p
                .data
                .iter_mut()
                .zip(&g.data)
                .zip(m.data.iter_mut())
                .zip(v.data.iter_mut())
            {
                let mut grad = *gv;
                if cfg.coupled_wd {
                    grad += wd * *pv;
                }
                *mv = b1 * *mv + (one - b1) * grad;
                *vv = b2 * *vv + (one - b2) * grad * grad;
                let mut upd = (*mv * c1) / ((*vv * c2).sqrt() + eps);
                if !cfg.coupled_wd {
                    upd += wd * *pv;
                }
                *pv -= lr * upd;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::real::Mat;
    use alloc::vec;

    fn cfg(lr: f64, wd: f64) -> AdamConfig {
        AdamConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: wd,
            coupled_wd: false,
        }
    }

    #[test]
    fn zero_lr_leaves_params() {
        let mut p = Params {
            tensors: vec![Mat::from_vec(1, 3, vec![1.0f64, -2.0, 3.0])],
        };
        let g = Params {
            tensors: vec![Mat::from_vec(1, 3, vec![0.5, 0.5, -0.5])],
        };
        let before = p.clone();
        let mut adam = Adam::new(&p);
        for _ in 0..5 {
            adam.update(&mut p, &g, &cfg(0.0, 1e-3));
        }
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = Params {
            tensors: vec![Mat::from_vec(1, 2, vec![0.0f64, 0.0])],
        };
        let g = Params {
            tensors: vec![Mat::from_vec(1, 2, vec![3.0, -0.1])],
        };
        let mut adam = Adam::new(&p);
        adam.update(&mut p, &g, &cfg(0.01, 0.0));
        assert!((p.tensors[0].data[0] + 0.01).abs() < 1e-9);
        assert!((p.tensors[0].data[1] - 0.01).abs() < 1e-9);
    }

    #[test]
    fn decoupled_decay_shrinks_with_zero_grad() {
        let mut p = Params {
            tensors: vec![Mat::from_vec(1, 1, vec![2.0f64])],
        };
        let g = Params {
            tensors: vec![Mat::from_vec(1, 1, vec![0.0])],
        };
        let mut adam = Adam::new(&p);
        adam.update(&mut p, &g, &cfg(0.1, 0.5));
        assert!((p.tensors[0].data[0] - 1.9).abs() < 1e-12);
    }
}
