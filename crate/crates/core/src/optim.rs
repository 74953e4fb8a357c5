use crate::error::{LsanError, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam with first and second moment buffers per tensor.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    config: AdamConfig,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    t: u64,
}

impl<T: Scalar> Adam<T> {
    pub fn new<'a>(config: AdamConfig, tensors: impl IntoIterator<Item = &'a Tensor<T>>) -> Self {
        let zeros: Vec<Vec<T>> = tensors.into_iter().map(|t| vec![T::zero(); t.len()]).collect();
        Adam {
            config,
            v: zeros.clone(),
            m: zeros,
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update of every tensor. Every tensor needs a gradient of its own size.
    pub fn step(&mut self, tensors: &mut [Tensor<T>], grads: &[Option<&[T]>]) -> Result<()> {
        if tensors.len() != self.m.len() || grads.len() != tensors.len() {
            return Err(LsanError::contract(format!(
                "optimiser tracks {} tensors, got {} tensors and {} gradients",
                self.m.len(),
                tensors.len(),
                grads.len()
            )));
        }
        for (i, (t, g)) in tensors.iter().zip(grads).enumerate() {
            match g {
                None => return Err(LsanError::contract(format!("parameter {i} has no gradient"))),
                Some(g) if g.len() != t.len() => {
                    return Err(LsanError::contract(format!(
                        "parameter {i}: gradient of {} values for {}",
                        g.len(),
                        t.len()
                    )))
                }
                _ => {}
            }
        }
        self.t += 1;
        let c = self.config;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let (one, lr, eps) = (T::one(), T::lit(c.lr), T::lit(c.eps));
        let corr1 = T::lit(1.0 - c.beta1.powf(self.t as f64));
        let corr2 = T::lit(1.0 - c.beta2.powf(self.t as f64));
        for (((t, g), m), v) in tensors.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            let g = g.expect("checked above");
            for (((p, &g), m), v) in t.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                let m_hat = *m / corr1;
                let v_hat = *v / corr2;
                *p = *p - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
