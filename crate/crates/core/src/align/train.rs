//! One optimisation step over the combined objective.

use serde::{Deserialize, Serialize};

use crate::align::objective::{breakdown, AlignModel, Batch, LossBreakdown, LossWeights, ObjectiveMode};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::optim::{cosine_lr, AdamW, AdamWConfig};
use crate::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepConfig {
    pub optimizer: AdamWConfig,
    pub loss: LossWeights,
    pub mode: ObjectiveMode,
    /// Length of the cosine schedule in steps.
    pub total_steps: u64,
}

/// Model plus optimizer moments.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState<T> {
    pub model: AlignModel<T>,
    pub optimizer: AdamW<T>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub lr: f64,
    pub loss: LossBreakdown,
}

impl<T: Scalar> TrainState<T> {
    pub fn new(model: AlignModel<T>, optimizer: AdamWConfig) -> Self {
        Self { model, optimizer: AdamW::new(optimizer) }
    }

    pub fn step_count(&self) -> u64 {
        self.optimizer.step_count()
    }
}

/// Evaluate, backpropagate and apply one AdamW update.
///
/// A non-finite objective aborts before any parameter changes.
pub fn train_step<T: Scalar>(state: &mut TrainState<T>, batch: &Batch<T>, cfg: &StepConfig) -> Result<StepMetrics> {
    let g = Graph::new();
    let b = state.model.bind(&g);
    let vars = state.model.forward(&g, &b, batch, &cfg.loss, cfg.mode)?;
    let loss = breakdown(&g, &vars);
    let step = state.optimizer.step_count();
    if !loss.total.is_finite() {
        return Err(Error::NonFiniteLoss { step, detail: format!("{loss:?}") });
    }
    let grads = g.backward(vars.total);
    let lr = cosine_lr(cfg.optimizer.lr, step, cfg.total_steps);
    state.optimizer.config = cfg.optimizer;
    state.optimizer.begin_step();
    let model = &mut state.model;
    for params in [&mut model.encoder.params, &mut model.fusion.params, &mut model.head.params] {
        let gp = b.grads(&grads, params);
        state.optimizer.update(params, &gp, lr);
    }
    Ok(StepMetrics { step, lr, loss })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::align::objective::tests::{tiny_batch, tiny_config};

    fn cfg(lr: f64) -> StepConfig {
        StepConfig {
            optimizer: AdamWConfig { lr, ..AdamWConfig::default() },
            loss: LossWeights { temperature: 0.2, ..LossWeights::default() },
            mode: ObjectiveMode::Joint,
            total_steps: 20,
        }
    }

    #[test]
    fn zero_learning_rate_is_bitwise_noop() {
        let model = AlignModel::<f32>::new(&tiny_config(), 1).unwrap();
        let mut state = TrainState::new(model.clone(), AdamWConfig::default());
        let batch = tiny_batch(1).cast::<f32>();
        train_step(&mut state, &batch, &cfg(0.0)).unwrap();
        assert_eq!(state.model.params().checksum(), model.params().checksum());
    }

    #[test]
    fn repeated_runs_match_and_loss_drops() {
        let run = || {
            let mut state = TrainState::new(AlignModel::<f64>::new(&tiny_config(), 2).unwrap(), AdamWConfig::default());
            let batch = tiny_batch(5);
            (0..10).map(|_| train_step(&mut state, &batch, &cfg(1e-2)).unwrap().loss.total).collect::<Vec<_>>()
        };
        let (a, b) = (run(), run());
        assert_eq!(a, b);
        assert!(a[9] < a[0], "{a:?}");
    }

    #[test]
    fn non_finite_loss_aborts_without_update() {
        let model = AlignModel::<f64>::new(&tiny_config(), 3).unwrap();
        let mut state = TrainState::new(model.clone(), AdamWConfig::default());
        let mut batch = tiny_batch(6);
        batch.views[[0, 0]] = f64::NAN;
        assert!(matches!(train_step(&mut state, &batch, &cfg(1e-2)), Err(Error::NonFiniteLoss { .. })));
        assert_eq!(state.model, model);
        assert_eq!(state.step_count(), 0);
    }
}
