use crate::error::{Result, TartError};
use crate::tensor::Matrix;

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
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam moments, one pair per parameter in model order.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub step: u64,
    pub first: Vec<Matrix>,
    pub second: Vec<Matrix>,
}

impl Adam {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Matrix>) -> Self {
        let first: Vec<Matrix> = params.into_iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect();
        Adam {
            step: 0,
            second: first.clone(),
            first,
        }
    }

    /// One bias-corrected Adam update. `grads` are zeroed afterwards.
    ///
    /// Non-finite gradients abort without touching any parameter.
    pub fn step(
        &mut self,
        params: &mut [(&'static str, &mut Matrix)],
        grads: &mut [Matrix],
        cfg: &AdamConfig,
    ) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.first.len() {
            return Err(TartError::Numerical(format!(
                "{} parameters, {} gradients, {} moment slots",
                params.len(),
                grads.len(),
                self.first.len()
            )));
        }
        for ((name, p), g) in params.iter().zip(grads.iter()) {
            if p.shape() != g.shape() {
                return Err(TartError::shape(
                    "adam_step",
                    format!("{name}: {:?} vs {:?}", p.shape(), g.shape()),
                ));
            }
            if let Some(pos) = g.data().iter().position(|v| !v.is_finite()) {
                return Err(TartError::Numerical(format!(
                    "gradient of {name} is {} at entry {pos} (step {})",
                    g.data()[pos],
                    self.step + 1
                )));
            }
        }
        self.step += 1;
        let t = self.step as f64;
        let c1 = 1.0 - cfg.beta1.powf(t);
        let c2 = 1.0 - cfg.beta2.powf(t);
        for (i, ((_, p), g)) in params.iter_mut().zip(grads.iter_mut()).enumerate() {
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            for (k, (x, gk)) in p.data_mut().iter_mut().zip(g.data_mut()).enumerate() {
                m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * *gk;
                v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * *gk * *gk;
                let m_hat = m[k] / c1;
                let v_hat = v[k] / c2;
                *x -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
                *gk = 0.0;
            }
        }
        Ok(())
    }
}
