use crate::error::{Result, TensorError};
use crate::params::ParamStore;
use crate::scalar::Scalar;

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    step: u64,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: T) -> Self {
        Self::with_betas(
            lr,
            (T::from_f64_lossy(0.9), T::from_f64_lossy(0.999)),
            T::from_f64_lossy(1e-8),
        )
    }

    pub fn with_betas(lr: T, betas: (T, T), eps: T) -> Self {
        Self {
            lr,
            beta1: betas.0,
            beta2: betas.1,
            eps,
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update to every parameter in the store. Fails without
    /// touching anything if some parameter has no gradient.
    pub fn step(&mut self, store: &mut ParamStore<T>) -> Result<()> {
        if let Some((_, p)) = store.iter().find(|(_, p)| p.grad.is_none()) {
            return Err(TensorError::MissingGradient(p.name.clone()));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = T::one() - self.beta1.powi(t);
        let bc2 = T::one() - self.beta2.powi(t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        for p in store.iter_mut() {
            let g = p.grad.as_ref().expect("checked above");
            let m = p.first_moment.data_mut();
            for (mv, &gv) in m.iter_mut().zip(g.data()) {
                *mv = b1 * *mv + (T::one() - b1) * gv;
            }
            let v = p.second_moment.data_mut();
            for (vv, &gv) in v.iter_mut().zip(g.data()) {
                *vv = b2 * *vv + (T::one() - b2) * gv * gv;
            }
            let (m, v) = (p.first_moment.data(), p.second_moment.data());
            for ((w, &mv), &vv) in p.value.data_mut().iter_mut().zip(m).zip(v) {
                let mhat = mv / bc1;
                let vhat = vv / bc2;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
