use super::param::ParamStore;
use super::Float;
use crate::error::{Error, Result};

/// Adam with bias correction. Moments are stored per parameter; the update
/// itself is evaluated in `f64`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub const DEFAULT_LR: f64 = 5e-4;

    pub fn new(lr: f64) -> Result<Self> {
        if !(lr > 0.0) || !lr.is_finite() {
            return Err(Error::Config(format!("learning rate must be positive, got {lr}")));
        }
        Ok(Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        })
    }

    /// Applies one update to every parameter reached by backward since the
    /// last step, then zeroes all gradients. Parameters outside the current
    /// graph keep their moments and step counter untouched.
    pub fn step<T: Float>(&self, store: &mut ParamStore<T>) {
        for p in store.iter_mut() {
            if !p.touched {
                continue;
            }
            p.adam.step += 1;
            let t = p.adam.step as i32;
            let bc1 = 1.0 - self.beta1.powi(t);
            let bc2 = 1.0 - self.beta2.powi(t);
            let grad = p.grad.data();
            let value = p.value.data_mut();
            for i in 0..value.len() {
                let g = grad[i].widen();
                let m = self.beta1 * p.adam.m[i].widen() + (1.0 - self.beta1) * g;
                let v = self.beta2 * p.adam.v[i].widen() + (1.0 - self.beta2) * g * g;
                p.adam.m[i] = T::narrow(m);
                p.adam.v[i] = T::narrow(v);
                let update = self.lr * (m / bc1) / ((v / bc2).sqrt() + self.eps);
                value[i] = T::narrow(value[i].widen() - update);
            }
        }
        store.zero_grad();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Tape, Tensor};

    fn single(w: f64) -> (ParamStore<f64>, crate::tensor::ParamId) {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::from_f64([1], &[w]).unwrap()).unwrap();
        (store, id)
    }

    #[test]
    fn rejects_non_positive_lr() {
        assert!(Adam::new(0.0).is_err());
        assert!(Adam::new(-1e-3).is_err());
        assert!(Adam::new(f64::NAN).is_err());
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let (mut store, id) = single(0.25);
        store.get_mut(id).accumulate_grad(&[0.0]);
        Adam::new(1e-2).unwrap().step(&mut store);
        assert_eq!(store.value(id).item(), 0.25);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let (mut store, id) = single(1.0);
        store.get_mut(id).accumulate_grad(&[1.0]);
        let lr = 5e-4;
        Adam::new(lr).unwrap().step(&mut store);
        // m̂ = 1, v̂ = 1 after bias correction.
        let expected = 1.0 - lr / (1.0 + 1e-8);
        assert!((store.value(id).item() - expected).abs() < 1e-15);
        assert_eq!(store.grad(id).item(), 0.0);
    }

    #[test]
    fn quadratic_decreases_monotonically() {
        let (mut store, id) = single(1.0);
        let adam = Adam::new(0.05).unwrap();
        let mut tape = Tape::<f64>::new();
        let mut prev = f64::INFINITY;
        for _ in 0..10 {
            let w = tape.param(&store, id);
            let sq = tape.mul(w, w).unwrap();
            let loss = tape.sum(sq);
            let f = tape.value(loss).item();
            assert!(f < prev);
            prev = f;
            tape.backward(loss, &mut store).unwrap();
            adam.step(&mut store);
        }
    }
}
