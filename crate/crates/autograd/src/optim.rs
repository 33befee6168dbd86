//! Adam optimizer over a [`ParamStore`].

use crate::nn::ParamStore;
use crate::scalar::Scalar;
use crate::Data;
use std::rc::Rc;

/// Adam with bias correction. One instance owns the moments for one
/// parameter store; parameters whose gradient is absent in a step are left
/// untouched (moments included).
pub struct Adam<T: Scalar> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    t: u64,
    m: Vec<Data<T>>,
    v: Vec<Data<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(store: &ParamStore<T>, lr: T, beta1: T, beta2: T) -> Self {
        let m = store.iter().map(|(_, p)| Data::zeros(p.raw_dim())).collect();
        let v = store.iter().map(|(_, p)| Data::zeros(p.raw_dim())).collect();
        Adam { lr, beta1, beta2, eps: T::from_f64(1e-8), t: 0, m, v }
    }

    /// Applies one update. `grads` must align with the store's parameter
    /// order; `None` entries are skipped.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Option<Rc<Data<T>>>]) {
        assert_eq!(grads.len(), store.len(), "gradient slice must align with the store");
        self.t += 1;
        let t = self.t as i32;
        let bc1 = T::one() - self.beta1.powi(t);
        let bc2 = T::one() - self.beta2.powi(t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        for (idx, id) in store.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let Some(g) = &grads[idx] else { continue };
            let p = store.get_mut(id);
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            let (ps, ms, vs, gs) = (
                p.as_slice_mut().unwrap(),
                m.as_slice_mut().unwrap(),
                v.as_slice_mut().unwrap(),
                g.as_slice().unwrap(),
            );
            for i in 0..ps.len() {
                let gi = gs[i];
                ms[i] = b1 * ms[i] + (T::one() - b1) * gi;
                vs[i] = b2 * vs[i] + (T::one() - b2) * gi * gi;
                let m_hat = ms[i] / bc1;
                let v_hat = vs[i] / bc2;
                ps[i] = ps[i] - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Raw state access for checkpointing.
    pub fn state(&self) -> (u64, &[Data<T>], &[Data<T>]) {
        (self.t, &self.m, &self.v)
    }

    /// Restores state captured by [`Adam::state`].
    pub fn restore(&mut self, t: u64, m: Vec<Data<T>>, v: Vec<Data<T>>) {
        assert_eq!(m.len(), self.m.len(), "moment count mismatch");
        assert_eq!(v.len(), self.v.len(), "moment count mismatch");
        self.t = t;
        self.m = m;
        self.v = v;
    }
}
