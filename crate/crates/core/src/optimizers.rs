//! Adam / AMSGrad over logit matrices with per-row freezing, and the
//! halving step schedule.

use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerVariant {
    Adam,
    Amsgrad,
}

/// Optimizer settings, as they appear in the `[optimizer]` config section.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub variant: OptimizerVariant,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub reset_on_quantize: bool,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self { variant: OptimizerVariant::Adam, lr: 0.3, beta1: 0.9, beta2: 0.999, eps: 1e-8, reset_on_quantize: true }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("optimizer.lr must be positive, got {}", self.lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::Config(format!("optimizer.{name} must lie in (0, 1), got {b}")));
            }
        }
        if !(self.eps.is_finite() && self.eps > 0.0) {
            return Err(Error::Config(format!("optimizer.eps must be positive, got {}", self.eps)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    config: OptimizerConfig,
    first_moment: Array2<f64>,
    second_moment: Array2<f64>,
    second_moment_max: Option<Array2<f64>>,
    step_count: u64,
}

impl OptimizerState {
    pub fn new(config: OptimizerConfig, shape: (usize, usize)) -> Self {
        Self {
            config,
            first_moment: Array2::zeros(shape),
            second_moment: Array2::zeros(shape),
            second_moment_max: (config.variant == OptimizerVariant::Amsgrad).then(|| Array2::zeros(shape)),
            step_count: 0,
        }
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn first_moment(&self) -> &Array2<f64> {
        &self.first_moment
    }

    pub fn second_moment(&self) -> &Array2<f64> {
        &self.second_moment
    }

    pub fn second_moment_max(&self) -> Option<&Array2<f64>> {
        self.second_moment_max.as_ref()
    }

    /// One bias-corrected update of `theta` against `gradient`. Rows flagged
    /// in `frozen` are left untouched and their moments stay zero.
    pub fn step(&mut self, theta: &mut Array2<f64>, gradient: &Array2<f64>, frozen: &[bool]) -> Result<()> {
        let shape = self.first_moment.dim();
        if theta.dim() != shape || gradient.dim() != shape || frozen.len() != shape.0 {
            return Err(Error::shape(shape, (theta.dim(), gradient.dim(), frozen.len())));
        }
        if let Some(((row, col), _)) = gradient.indexed_iter().find(|(_, g)| !g.is_finite()) {
            return Err(Error::NonFiniteGradient { row, col });
        }
        self.step_count += 1;
        let OptimizerConfig { lr, beta1, beta2, eps, .. } = self.config;
        let t = self.step_count as i32;
        let bias1 = 1.0 - beta1.powi(t);
        let bias2 = 1.0 - beta2.powi(t);

        for (i, &is_frozen) in frozen.iter().enumerate() {
            if is_frozen {
                self.first_moment.row_mut(i).fill(0.0);
                self.second_moment.row_mut(i).fill(0.0);
                if let Some(vmax) = self.second_moment_max.as_mut() {
                    vmax.row_mut(i).fill(0.0);
                }
                continue;
            }
            let g = gradient.row(i);
            let mut m = self.first_moment.row_mut(i);
            let mut v = self.second_moment.row_mut(i);
            Zip::from(&mut m).and(&g).for_each(|m, &g| *m = beta1 * *m + (1.0 - beta1) * g);
            Zip::from(&mut v).and(&g).for_each(|v, &g| *v = beta2 * *v + (1.0 - beta2) * g * g);
            let denom_source = match self.second_moment_max.as_mut() {
                Some(vmax) => {
                    let mut vmax = vmax.row_mut(i);
                    Zip::from(&mut vmax).and(&v).for_each(|a, &b| *a = a.max(b));
                    vmax.to_owned()
                }
                None => v.to_owned(),
            };
            Zip::from(theta.row_mut(i)).and(&m).and(&denom_source).for_each(|th, &m, &v| {
                let m_hat = m / bias1;
                let v_hat = v / bias2;
                *th -= lr * m_hat / (v_hat.sqrt() + eps);
            });
        }
        Ok(())
    }

    /// Zeroes both moments and the step counter; hyperparameters are kept.
    pub fn reset(&mut self) {
        *self = Self::new(self.config, self.first_moment.dim());
    }
}

/// Optimization steps per quantization round: `max(1, ⌊S / 2^l⌋)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepSchedule {
    pub initial_steps: usize,
}

impl StepSchedule {
    pub fn new(initial_steps: usize) -> Self {
        Self { initial_steps }
    }

    pub fn steps_for_loop(&self, loop_index: usize) -> usize {
        let halved = u32::try_from(loop_index).ok().and_then(|l| self.initial_steps.checked_shr(l)).unwrap_or(0);
        halved.max(1)
    }
}
