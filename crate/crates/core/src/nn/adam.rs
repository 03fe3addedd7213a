//! Adam optimizer with a piecewise-constant learning-rate schedule.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::network::{Network, ParamGrads};
use super::{c, Elem};

/// Piecewise-constant learning rate: `(from_epoch, lr)` breakpoints. The rate
/// in effect at epoch `e` is the entry with the largest `from_epoch <= e`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule(pub Vec<(usize, f64)>);

impl LrSchedule {
    pub fn constant(lr: f64) -> Self {
        LrSchedule(vec![(0, lr)])
    }

    pub fn at(&self, epoch: usize) -> f64 {
        let mut lr = self.0.first().map(|&(_, l)| l).unwrap_or(1e-3);
        for &(from, l) in &self.0 {
            if epoch >= from {
                lr = l;
            }
        }
        lr
    }
}

/// Adam (Kingma & Ba) over a network's parametric layers.
pub struct Adam<F> {
    beta1: F,
    beta2: F,
    eps: F,
    t: i32,
    m: Vec<Option<(Array2<F>, Array1<F>)>>,
    v: Vec<Option<(Array2<F>, Array1<F>)>>,
}

impl<F: Elem> Adam<F> {
    pub fn new(net: &Network<F>) -> Self {
        let zeros = || ParamGrads::zeros_like(net).items;
        Adam {
            beta1: c(0.9),
            beta2: c(0.999),
            eps: c(1e-8),
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// Apply one update with mean-gradient `grads` at learning rate `lr`.
    pub fn step(&mut self, net: &mut Network<F>, grads: &ParamGrads<F>, lr: f64) {
        self.t += 1;
        let lr: F = c(lr);
        let one = F::one();
        let bc1 = one - self.beta1.powi(self.t);
        let bc2 = one - self.beta2.powi(self.t);
        for (idx, layer) in net.layers.iter_mut().enumerate() {
            let Some((w, b)) = layer.params_mut() else {
                continue;
            };
            let (gw, gb) = grads.items[idx].as_ref().expect("gradient slot");
            let (mw, mb) = self.m[idx].as_mut().expect("adam m slot");
            let (vw, vb) = self.v[idx].as_mut().expect("adam v slot");
            Self::update(w, gw.iter(), mw, vw, lr, self.beta1, self.beta2, self.eps, bc1, bc2);
            Self::update(b, gb.iter(), mb, vb, lr, self.beta1, self.beta2, self.eps, bc1, bc2);
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn update<'a, D: ndarray::Dimension>(
        p: &mut ndarray::Array<F, D>,
        g: impl Iterator<Item = &'a F>,
        m: &mut ndarray::Array<F, D>,
        v: &mut ndarray::Array<F, D>,
        lr: F,
        beta1: F,
        beta2: F,
        eps: F,
        bc1: F,
        bc2: F,
    ) where
        F: 'a,
    {
        let one = F::one();
        for (((pv, gv), mv), vv) in p.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mv = beta1 * *mv + (one - beta1) * *gv;
            *vv = beta2 * *vv + (one - beta2) * *gv * *gv;
            let m_hat = *mv / bc1;
            let v_hat = *vv / bc2;
            *pv = *pv - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}
