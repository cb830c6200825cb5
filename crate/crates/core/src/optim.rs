//! Adam with bias correction.

use crate::error::{dim_err, Error, Result};
use crate::module::Parameterized;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    shapes: Vec<Vec<usize>>,
}

impl AdamState {
    /// Zeroed moment buffers shaped like `params`, in order.
    pub fn new<'a>(config: AdamConfig, params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let shapes: Vec<Vec<usize>> = params.into_iter().map(|t| t.shape().to_vec()).collect();
        let zeros = |s: &Vec<usize>| vec![0.0; s.iter().product()];
        Self {
            config,
            step: 0,
            first: shapes.iter().map(zeros).collect(),
            second: shapes.iter().map(zeros).collect(),
            shapes,
        }
    }

    pub fn for_module(config: AdamConfig, module: &impl Parameterized) -> Self {
        Self::new(config, module.named_params().into_iter().map(|(_, t)| t))
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update of every parameter from the matching entry of `grads`.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[&[f64]]) -> Result<()> {
        if params.len() != self.shapes.len() || grads.len() != params.len() {
            return Err(dim_err(
                "adam_step",
                &[self.shapes.len()],
                &[params.len(), grads.len()],
            ));
        }
        for ((p, g), s) in params.iter().zip(grads).zip(&self.shapes) {
            if p.shape() != s.as_slice() {
                return Err(dim_err("adam_step", s, p.shape()));
            }
            if g.len() != p.numel() {
                return Err(dim_err("adam_step", p.shape(), &[g.len()]));
            }
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let t = i32::try_from(self.step).unwrap_or(i32::MAX);
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (i, p) in params.iter_mut().enumerate() {
            let m = &mut self.first[i];
            let v = &mut self.second[i];
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                let gj = grads[i][j];
                m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
                v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                *w -= lr * m_hat / (v_hat.sqrt() + epsilon);
            }
        }
        Ok(())
    }

    /// Steps every parameter of `module` using its accumulated `grad` buffer.
    pub fn step_module(&mut self, module: &mut impl Parameterized) -> Result<()> {
        let mut params = module.params_mut();
        let grads: Vec<Vec<f64>> = params
            .iter()
            .map(|p| {
                p.grad()
                    .map(<[f64]>::to_vec)
                    .ok_or_else(|| Error::Contract("parameter without grad buffer".into()))
            })
            .collect::<Result<_>>()?;
        let grad_refs: Vec<&[f64]> = grads.iter().map(Vec::as_slice).collect();
        self.step(&mut params, &grad_refs)
    }
}
