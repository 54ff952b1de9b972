//! Least-squares regression of the feedback law on bridge samples.
//!
//! `N` endpoint pairs are drawn once from the coupling. Every iteration picks
//! a batch of pair indices, draws a fresh `t ~ U[0, 1 - δ]` and fresh bridge
//! noise per row, and takes one ADAM step on the squared error between the
//! network and the bridge control.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::bridge::{sample_training_pair, EndpointPair};
use crate::distributions::Coupling;
use crate::error::{Error, Result};
use crate::mlp::{Architecture, BatchRow, MlpParams};
use crate::rng;
use crate::systems::BridgeKernel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    pub dataset_size: usize,
    pub batch_size: usize,
    pub lr0: f64,
    /// Per-iteration multiplicative learning-rate decay.
    pub decay: f64,
    pub width: usize,
    pub blocks: usize,
    /// Taken from the run seed rather than the config document.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 10_000,
            dataset_size: 2000,
            batch_size: 64,
            lr0: 1e-2,
            decay: 0.999,
            width: Architecture::DEFAULT_WIDTH,
            blocks: Architecture::DEFAULT_BLOCKS,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.dataset_size == 0 || self.batch_size == 0 {
            return Err(Error::invalid("iterations, dataset_size and batch_size must be positive"));
        }
        if !(self.lr0 > 0.0) || !self.lr0.is_finite() {
            return Err(Error::invalid(format!("lr0 must be positive, got {}", self.lr0)));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(Error::invalid(format!("decay must lie in (0, 1], got {}", self.decay)));
        }
        if self.width == 0 {
            return Err(Error::invalid("width must be positive"));
        }
        Ok(())
    }

    pub fn learning_rate(&self, iteration: usize) -> f64 {
        self.lr0 * self.decay.powi(iteration as i32)
    }
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub first: Vec<f64>,
    pub second: Vec<f64>,
    pub steps: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState {
            first: vec![0.0; len],
            second: vec![0.0; len],
            steps: 0,
        }
    }
}

/// One bias-corrected ADAM update in place.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, lr: f64) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.first.len() || params.len() != state.second.len() {
        return Err(Error::dim("ADAM state, parameters and gradients differ in length"));
    }
    state.steps += 1;
    let c1 = 1.0 - ADAM_BETA1.powi(state.steps as i32);
    let c2 = 1.0 - ADAM_BETA2.powi(state.steps as i32);
    for (((p, g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(&mut state.first)
        .zip(&mut state.second)
    {
        *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
        *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
    }
    Ok(())
}

/// The frozen endpoint pairs of a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSet {
    pub pairs: Vec<EndpointPair>,
}

impl TrainingSet {
    /// Draws the pairs from the coupling on the `PAIRS` stream of `seed`.
    pub fn draw(coupling: &Coupling, count: usize, seed: u64) -> Result<Self> {
        let pairs = coupling.draw_pairs(count, &mut rng::stream(seed, rng::PAIRS))?;
        Ok(TrainingSet { pairs })
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: MlpParams,
    pub loss_trace: Vec<f64>,
    pub training_set: TrainingSet,
}

/// Fits the network to bridge controls.
pub fn train(kernel: &BridgeKernel, coupling: &Coupling, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    if coupling.dim() != kernel.n() {
        return Err(Error::dim(format!(
            "coupling has dimension {}, system has n = {}",
            coupling.dim(),
            kernel.n()
        )));
    }
    let training_set = TrainingSet::draw(coupling, config.dataset_size, config.seed)?;
    train_on(kernel, training_set, config)
}

/// Same as [`train`] with pre-drawn pairs.
pub fn train_on(kernel: &BridgeKernel, training_set: TrainingSet, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    if training_set.pairs.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    let arch = Architecture {
        input_dim: kernel.n() + 1,
        output_dim: kernel.m(),
        width: config.width,
        blocks: config.blocks,
    };
    let mut params = MlpParams::init(arch, &mut rng::stream(config.seed, rng::INIT_WEIGHTS))?;
    let mut adam = AdamState::new(params.values().len());
    let mut sampler = rng::stream(config.seed, rng::TRAIN);
    let t_max = 1.0 - kernel.delta();
    let pairs = &training_set.pairs;
    let mut trace = Vec::with_capacity(config.iterations);
    let mut batch = Vec::with_capacity(config.batch_size);

    for it in 0..config.iterations {
        batch.clear();
        for _ in 0..config.batch_size {
            let pair = &pairs[sampler.random_range(0..pairs.len())];
            let t = sampler.random::<f64>() * t_max;
            let s = sample_training_pair(kernel, pair, t, &mut sampler)?;
            batch.push(BatchRow {
                t,
                state: s.state.iter().copied().collect(),
                control: s.control.iter().copied().collect(),
            });
        }
        let (loss, grad) = params.loss_and_grad(&batch)?;
        trace.push(loss);
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Diverged {
                iteration: it,
                trace,
            });
        }
        adam_step(params.values_mut(), &grad, &mut adam, config.learning_rate(it))?;
    }
    Ok(TrainOutcome {
        params,
        loss_trace: trace,
        training_set,
    })
}

/// Trailing moving average of a loss trace.
pub fn moving_average(trace: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    let mut out = Vec::with_capacity(trace.len());
    let mut sum = 0.0;
    for (i, v) in trace.iter().enumerate() {
        sum += v;
        if i >= window {
            sum -= trace[i - window];
        }
        out.push(sum / (i + 1).min(window) as f64);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = vec![1.0, -2.0, 3.0];
        let mut s = AdamState::new(3);
        adam_step(&mut p, &[0.0; 3], &mut s, 0.1).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 3.0]);
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient() {
        let mut p = vec![0.0, 0.0, 0.0];
        let g = [0.5, -3.0, 1e-3];
        let mut s = AdamState::new(3);
        adam_step(&mut p, &g, &mut s, 0.01).unwrap();
        for (pi, gi) in p.iter().zip(&g) {
            let want = -0.01 * gi / (gi.abs() + ADAM_EPS);
            assert!((pi - want).abs() < 1e-15, "{pi} vs {want}");
        }
    }

    #[test]
    fn second_step_hand_computation() {
        let mut p = vec![1.0];
        let mut s = AdamState::new(1);
        adam_step(&mut p, &[2.0], &mut s, 0.1).unwrap();
        adam_step(&mut p, &[-1.0], &mut s, 0.05).unwrap();
        // m = 0.9*0.2 + 0.1*(-1) = 0.08 ; v = 0.999*0.004 + 0.001*1 = 0.004996
        assert!((s.first[0] - 0.08).abs() < 1e-15);
        assert!((s.second[0] - 0.004996).abs() < 1e-15);
        let m_hat = 0.08 / (1.0 - 0.81);
        let v_hat: f64 = 0.004996 / (1.0 - 0.999f64 * 0.999);
        let after_first = 1.0 - 0.1 * 2.0 / (2.0 + ADAM_EPS);
        let want = after_first - 0.05 * m_hat / (v_hat.sqrt() + ADAM_EPS);
        assert!((p[0] - want).abs() < 1e-14);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig { decay: 0.0, ..TrainConfig::default() };
        assert!(bad.validate().is_err());
        let bad = TrainConfig { batch_size: 0, ..TrainConfig::default() };
        assert!(bad.validate().is_err());
        let c = TrainConfig::default();
        assert!((c.learning_rate(1000) - 1e-2 * 0.999f64.powi(1000)).abs() < 1e-18);
    }

    #[test]
    fn moving_average_window() {
        let ma = moving_average(&[1.0, 2.0, 3.0, 4.0], 2);
        assert_eq!(ma, vec![1.0, 1.5, 2.5, 3.5]);
    }
}
