//! AdamW with decoupled weight decay.

use alloc::format;

use crate::error::{Error, Result};
use crate::math;
use crate::tensor::ParamSet;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self { lr, weight_decay, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    /// One update over every parameter in `set`, then zeroes gradients.
    ///
    /// A non-finite gradient rejects the whole step before anything is
    /// modified; the error names the first offending parameter and entry.
    pub fn step(&self, set: &mut ParamSet) -> Result<()> {
        for p in set.iter() {
            if let Some(pos) = p.grad.iter().position(|g| !g.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "gradient of {} at entry {pos} is {}",
                    p.name, p.grad[pos]
                )));
            }
        }
        set.step += 1;
        let t = set.step as i32;
        let bc1 = 1.0 - libm::pow(self.beta1, t as f64);
        let bc2 = 1.0 - libm::pow(self.beta2, t as f64);
        for p in set.iter_mut() {
            let values = p.value.data_mut();
            for i in 0..values.len() {
                let g = p.grad[i];
                let m = self.beta1 * p.first_moment[i] + (1.0 - self.beta1) * g;
                let v = self.beta2 * p.second_moment[i] + (1.0 - self.beta2) * g * g;
                p.first_moment[i] = m;
                p.second_moment[i] = v;
                let m_hat = m / bc1;
                let v_hat = v / bc2;
                values[i] -= self.lr * (m_hat / (math::sqrt(v_hat) + self.eps) + self.weight_decay * values[i]);
            }
            p.zero_grad();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use alloc::vec;

    fn single(tag: u16, values: &[f64]) -> ParamSet {
        let mut s = ParamSet::new(tag);
        s.add("w", Tensor::new(vec![values.len()], values.to_vec()).unwrap());
        s
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut s = single(0, &[1.5, -2.0]);
        AdamW::new(0.1, 0.0).step(&mut s).unwrap();
        assert_eq!(s.get(0).value.data(), &[1.5, -2.0]);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn one_step_on_square_descends() {
        let mut s = single(0, &[1.0]);
        s.get_mut(0).grad[0] = 2.0; // d/dw w^2 at w = 1
        AdamW::new(0.01, 0.01).step(&mut s).unwrap();
        assert!(s.get(0).value.data()[0].abs() < 1.0);
        assert_eq!(s.get(0).grad[0], 0.0);
    }

    #[test]
    fn quadratic_converges() {
        // f(w) = w0^2 + 3 w1^2, minimum 0 at the origin.
        let mut s = single(0, &[1.0, -1.0]);
        let opt = AdamW::new(0.05, 0.0);
        let loss = |s: &ParamSet| {
            let w = s.get(0).value.data();
            w[0] * w[0] + 3.0 * w[1] * w[1]
        };
        for _ in 0..200 {
            let w = s.get(0).value.data().to_vec();
            s.get_mut(0).grad[0] = 2.0 * w[0];
            s.get_mut(0).grad[1] = 6.0 * w[1];
            opt.step(&mut s).unwrap();
        }
        assert!(loss(&s) < 1e-4, "loss {}", loss(&s));
    }

    #[test]
    fn non_finite_gradient_rejects_step() {
        let mut s = single(0, &[1.0, 2.0]);
        s.get_mut(0).grad[1] = f64::NAN;
        let err = AdamW::new(0.1, 0.0).step(&mut s).unwrap_err();
        assert!(matches!(err, Error::NonFinite(ref m) if m.contains("entry 1")));
        assert_eq!(s.get(0).value.data(), &[1.0, 2.0]);
        assert_eq!(s.step, 0);
    }

    #[test]
    fn deterministic_given_state() {
        let run = || {
            let mut s = single(0, &[0.3, -0.7, 1.1]);
            for k in 0..10 {
                for (i, g) in s.get_mut(0).grad.iter_mut().enumerate() {
                    *g = (k as f64 + 1.0) * (i as f64 - 1.0);
                }
                AdamW::new(0.01, 0.01).step(&mut s).unwrap();
            }
            s
        };
        assert_eq!(run(), run());
    }
}
