//! Adam and a small driver loop shared by every optimization-based stage.

use std::cell::Cell;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

thread_local! {
    static ADAM_INSTANCES: Cell<usize> = const { Cell::new(0) };
}

/// Number of [`Adam`] states created on the current thread.
pub fn adam_instances() -> usize {
    ADAM_INSTANCES.with(Cell::get)
}

#[derive(Clone, Debug)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(n_params: usize, lr: f64) -> Self {
        ADAM_INSTANCES.with(|c| c.set(c.get() + 1));
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        assert_eq!(params.len(), self.m.len(), "adam: parameter count changed");
        assert_eq!(grads.len(), self.m.len(), "adam: gradient length");
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

/// Learning rate, step budget and seed for one optimization stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub learning_rate: f64,
    pub steps: usize,
    #[serde(default)]
    pub seed: u64,
}

impl OptimConfig {
    pub fn new(learning_rate: f64, steps: usize, seed: u64) -> Self {
        OptimConfig {
            learning_rate,
            steps,
            seed,
        }
    }

    pub fn validate(&self, allow_zero_steps: bool) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::invalid(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.steps == 0 && !allow_zero_steps {
            return Err(Error::invalid(
                "optimization budget must be at least one step",
            ));
        }
        Ok(())
    }
}

/// Receives optimizer progress. Values are reported unsmoothed.
pub trait Progress: Sync {
    fn report(&self, stage: &str, step: usize, loss: f64);

    /// Parameters before each update and at the end. Ignored by default.
    fn params(&self, _stage: &str, _step: usize, _params: &[f64]) {}
}

pub struct NoProgress;

impl Progress for NoProgress {
    fn report(&self, _stage: &str, _step: usize, _loss: f64) {}
}

#[derive(Clone, Debug)]
pub struct OptimOutcome {
    pub params: Vec<f64>,
    /// Loss at the returned parameters.
    pub loss: f64,
    pub initial_loss: f64,
    /// Loss before each update, then the loss at the last iterate.
    pub trajectory: Vec<f64>,
    /// The budget finished without improving on the starting loss.
    pub flagged: bool,
}

/// Runs Adam for `steps` updates. `eval(params, step)` returns the loss and
/// its gradient. A flagged run (no improvement) returns the best iterate
/// seen; otherwise the last one.
pub fn minimize(
    init: Vec<f64>,
    cfg: &OptimConfig,
    stage: &str,
    progress: &dyn Progress,
    mut eval: impl FnMut(&[f64], usize) -> (f64, Vec<f64>),
) -> OptimOutcome {
    let mut params = init;
    let mut adam = Adam::new(params.len(), cfg.learning_rate);
    let mut trajectory = Vec::with_capacity(cfg.steps + 1);
    let mut best = (f64::INFINITY, params.clone());
    for step in 0..cfg.steps {
        let (loss, grad) = eval(&params, step);
        progress.report(stage, step, loss);
        progress.params(stage, step, &params);
        trajectory.push(loss);
        if loss < best.0 {
            best = (loss, params.clone());
        }
        adam.step(&mut params, &grad);
    }
    let (final_loss, _) = eval(&params, cfg.steps);
    progress.report(stage, cfg.steps, final_loss);
    progress.params(stage, cfg.steps, &params);
    trajectory.push(final_loss);
    let initial_loss = trajectory[0];
    // Starting at an exact optimum is convergence, not failure.
    let flagged = cfg.steps > 0 && final_loss >= initial_loss && initial_loss > 1e-12;
    if flagged && best.0 < final_loss {
        OptimOutcome {
            params: best.1,
            loss: best.0,
            initial_loss,
            trajectory,
            flagged,
        }
    } else {
        OptimOutcome {
            params,
            loss: final_loss,
            initial_loss,
            trajectory,
            flagged,
        }
    }
}
