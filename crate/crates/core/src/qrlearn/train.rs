use serde::{Deserialize, Serialize};

use crate::dataio::BatchIndices;
use crate::error::{Error, Result};
use crate::qrlearn::adam::Adam;
use crate::qrlearn::loss::{bce_with_logits, quantile_huber_loss_grad, sigmoid, squared_loss_grad};
use crate::qrlearn::model::{EngagementModel, Gradients, Init, ModelSpec};
use crate::qrlearn::{Objective, TargetDiscount, TrainingConfig, ValueLoss};
use crate::simenv::{mix64, FeatureMap, Transition};

/// One row of the training trace; losses are batch means.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub quantile_loss: f64,
    pub bce_loss: f64,
    pub total: f64,
}

/// Input layout and objective for [`train`].
#[derive(Debug, Clone, PartialEq)]
pub struct LearnerSetup {
    pub features: FeatureMap,
    pub n_actions: usize,
    pub objective: Objective,
}

impl LearnerSetup {
    pub fn tabular(n_states: usize, n_actions: usize) -> Self {
        LearnerSetup {
            features: FeatureMap::Tabular { n_states },
            n_actions,
            objective: Objective::default(),
        }
    }

    pub fn model_spec(&self, config: &TrainingConfig) -> ModelSpec {
        ModelSpec {
            features: self.features,
            n_actions: self.n_actions,
            embed_dim: config.embed_dim,
            hidden: config.hidden.clone(),
            n_quantiles: match self.objective.value_loss {
                ValueLoss::QuantileHuber => config.quantiles,
                ValueLoss::Squared => 1,
            },
            termination_head: self.objective.termination_head,
            cross_features: config.cross_features,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub model: EngagementModel,
    pub trace: Vec<TraceRow>,
}

/// Bootstrapped target vector for each transition.
///
/// Terminal transitions get `r` repeated; the rest get
/// `r + gamma' * beta'(s', a')` where `beta'` is the target model's value head
/// and `gamma'` is `eta` or `min(1 - ell(s', a'), eta)` with `ell` read from
/// the live model. Targets are plain numbers, so nothing flows back through them.
pub fn compute_targets(
    batch: &[&Transition],
    target_model: &EngagementModel,
    live_model: &EngagementModel,
    eta: f64,
    discount: TargetDiscount,
) -> Result<Vec<Vec<f64>>> {
    let width = target_model.spec().n_quantiles;
    batch
        .iter()
        .map(|t| {
            let r = f64::from(t.reward);
            let Some((s2, a2)) = t.successor()? else {
                return Ok(vec![r; width]);
            };
            let (next, _) = target_model.forward(s2, a2)?;
            let gamma = match discount {
                TargetDiscount::Constant => eta,
                TargetDiscount::TerminationAware => {
                    let logit = live_model.forward_cached(s2, a2)?.logit.ok_or_else(|| {
                        Error::validation("termination-aware targets need a termination head")
                    })?;
                    (1.0 - sigmoid(logit)).min(eta)
                }
            };
            Ok(next.iter().map(|q| r + gamma * q).collect())
        })
        .collect()
}

/// Batch-mean losses and parameter gradients for fixed targets.
#[derive(Debug, Clone)]
pub struct BatchObjective {
    pub value_loss: f64,
    pub bce_loss: f64,
    pub grads: Gradients,
    /// Smallest distance of any residual to the Huber kink `|u| = kappa`.
    pub huber_margin: f64,
    /// Smallest `|z|` over ReLU pre-activations.
    pub relu_margin: f64,
}

impl BatchObjective {
    pub fn total(&self) -> f64 {
        self.value_loss + self.bce_loss
    }
}

pub fn batch_objective(
    model: &EngagementModel,
    batch: &[&Transition],
    targets: &[Vec<f64>],
    kappa: f64,
    value_loss: ValueLoss,
) -> Result<BatchObjective> {
    let n = batch.len() as f64;
    let mut grads = model.zero_gradients();
    let (mut vloss, mut bloss) = (0.0, 0.0);
    let (mut huber_margin, mut relu_margin) = (f64::INFINITY, f64::INFINITY);
    for (t, target) in batch.iter().zip(targets) {
        let act = model.forward_cached(t.state, t.action)?;
        relu_margin = relu_margin.min(act.relu_margin());
        let (l, dq) = match value_loss {
            ValueLoss::QuantileHuber => {
                for theta in &act.quantiles {
                    for y in target {
                        huber_margin = huber_margin.min(((y - theta).abs() - kappa).abs());
                    }
                }
                quantile_huber_loss_grad(&act.quantiles, target, kappa)?
            }
            ValueLoss::Squared => {
                let (l, g) = squared_loss_grad(act.quantiles[0], target);
                (l, vec![g])
            }
        };
        let (b, dlogit) = match act.logit {
            Some(z) => bce_with_logits(z, t.terminal),
            None => (0.0, 0.0),
        };
        vloss += l;
        bloss += b;
        model.backward(&act, &dq, dlogit, &mut grads);
    }
    grads.scale(1.0 / n);
    Ok(BatchObjective { value_loss: vloss / n, bce_loss: bloss / n, grads, huber_margin, relu_margin })
}

fn check_logs(logs: &[Transition], model: &EngagementModel) -> Result<()> {
    if logs.is_empty() {
        return Err(Error::validation("training logs are empty"));
    }
    for t in logs {
        model.input_ids(t.state, t.action)?;
        if let Some((s2, a2)) = t.successor()? {
            model.input_ids(s2, a2)?;
        }
    }
    Ok(())
}

/// Minibatch training with a periodically refreshed target copy.
///
/// Parameters come from `config.seed`; the batch order from a stream mixed
/// out of the same seed. After step `i` (1-based) the target copy is
/// refreshed whenever `i % T_c == 0`.
pub fn train(logs: &[Transition], config: &TrainingConfig, setup: &LearnerSetup) -> Result<TrainOutput> {
    train_observed(logs, config, setup, |_, _, _| {})
}

/// [`train`], calling `observe(step, live, target)` after every step once
/// the target refresh for that step has happened.
pub fn train_observed(
    logs: &[Transition],
    config: &TrainingConfig,
    setup: &LearnerSetup,
    mut observe: impl FnMut(usize, &EngagementModel, &EngagementModel),
) -> Result<TrainOutput> {
    config.validate()?;
    setup.objective.validate()?;
    let mut live = EngagementModel::new(setup.model_spec(config), Init::Standard, config.seed)?;
    check_logs(logs, &live)?;
    let mut target = live.clone();
    let mut adam = Adam::new(
        &live,
        config.learning_rate,
        config.adam_beta1,
        config.adam_beta2,
        config.adam_eps,
    );
    let batches = BatchIndices::new(logs.len(), config.batch_size, mix64(config.seed), config.epochs)?;
    let total_steps = batches.total_batches();
    let mut trace = Vec::with_capacity(total_steps);
    for (i, idx) in batches.enumerate() {
        let step = i + 1;
        let batch: Vec<&Transition> = idx.iter().map(|&j| &logs[j]).collect();
        let targets = compute_targets(&batch, &target, &live, config.eta, setup.objective.discount)?;
        let mut obj = batch_objective(&live, &batch, &targets, config.kappa, setup.objective.value_loss)?;
        let total = obj.total();
        if !total.is_finite() {
            return Err(Error::Divergence { step, loss: total });
        }
        if let Some(clip) = config.w_clip {
            let norm = obj.grads.norm();
            if norm > clip {
                obj.grads.scale(clip / norm);
            }
        }
        adam.set_learning_rate(config.lr_schedule.rate(config.learning_rate, step, total_steps));
        adam.step(&mut live, &obj.grads);
        trace.push(TraceRow { step, quantile_loss: obj.value_loss, bce_loss: obj.bce_loss, total });
        if step % config.target_copy == 0 {
            target.copy_from(&live);
        }
        observe(step, &live, &target);
    }
    Ok(TrainOutput { model: live, trace })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qrlearn::model::Init;

    fn spec(m: usize) -> ModelSpec {
        ModelSpec {
            features: FeatureMap::Tabular { n_states: 3 },
            n_actions: 2,
            embed_dim: 4,
            hidden: vec![8],
            n_quantiles: m,
            termination_head: true,
            cross_features: false,
        }
    }

    fn terminal(state: usize, action: usize, reward: u8) -> Transition {
        Transition { session_id: 0, step: 0, state, action, reward, terminal: true, next_state: None, next_action: None }
    }

    fn cont(state: usize, action: usize, reward: u8, s2: usize, a2: usize) -> Transition {
        Transition {
            session_id: 0,
            step: 0,
            state,
            action,
            reward,
            terminal: false,
            next_state: Some(s2),
            next_action: Some(a2),
        }
    }

    /// Sets the termination head so that `ell(s, a) = p` everywhere.
    fn with_constant_ell(mut model: EngagementModel, p: f64) -> EngagementModel {
        let n = model.tensors().len();
        let tensors = model.tensors_mut();
        tensors[n - 2].data.iter_mut().for_each(|w| *w = 0.0);
        tensors[n - 1].data[0] = (p.ln() - (1.0 - p).ln()) as f32;
        model
    }

    /// Sets the value head so that `beta(s, a) = values` everywhere.
    fn with_constant_quantiles(mut model: EngagementModel, values: &[f64]) -> EngagementModel {
        let n = model.tensors().len();
        let tensors = model.tensors_mut();
        tensors[n - 4].data.iter_mut().for_each(|w| *w = 0.0);
        for (b, v) in tensors[n - 3].data.iter_mut().zip(values) {
            *b = *v as f32;
        }
        model
    }

    #[test]
    fn terminal_target_repeats_reward() {
        let model = EngagementModel::new(spec(3), Init::FullyRandom, 1).unwrap();
        let t = terminal(0, 1, 1);
        let out = compute_targets(&[&t], &model, &model, 0.95, TargetDiscount::TerminationAware).unwrap();
        assert_eq!(out, vec![vec![1.0, 1.0, 1.0]]);
    }

    #[test]
    fn certain_termination_zeroes_bootstrap() {
        let target = with_constant_quantiles(EngagementModel::new(spec(2), Init::Standard, 0).unwrap(), &[3.0, 4.0]);
        let live = with_constant_ell(EngagementModel::new(spec(2), Init::Standard, 0).unwrap(), 1.0);
        let t = cont(0, 0, 0, 1, 1);
        let out = compute_targets(&[&t], &target, &live, 0.95, TargetDiscount::TerminationAware).unwrap();
        assert_eq!(out, vec![vec![0.0, 0.0]]);
    }

    #[test]
    fn gamma_prime_from_live_termination() {
        let target = with_constant_quantiles(EngagementModel::new(spec(2), Init::Standard, 0).unwrap(), &[1.0, 2.0]);
        let live = with_constant_ell(EngagementModel::new(spec(2), Init::Standard, 0).unwrap(), 0.3);
        let t = cont(2, 0, 1, 1, 1);
        let out = compute_targets(&[&t], &target, &live, 0.95, TargetDiscount::TerminationAware).unwrap();
        // gamma' = min(1 - 0.3, 0.95) = 0.7; the logit is stored in f32
        assert!((out[0][0] - 1.7).abs() < 1e-7 && (out[0][1] - 2.4).abs() < 1e-7, "{out:?}");
        let constant = compute_targets(&[&t], &target, &live, 0.95, TargetDiscount::Constant).unwrap();
        assert_eq!(constant, vec![vec![1.0 + 0.95, 1.0 + 0.95 * 2.0]]);
    }

    #[test]
    fn missing_successor_is_a_data_error() {
        let model = EngagementModel::new(spec(2), Init::Standard, 0).unwrap();
        let mut t = cont(0, 0, 1, 1, 1);
        t.next_action = None;
        assert!(matches!(
            compute_targets(&[&t], &model, &model, 0.9, TargetDiscount::Constant),
            Err(Error::Data(_))
        ));
    }

    fn small_config() -> TrainingConfig {
        TrainingConfig {
            quantiles: 4,
            embed_dim: 4,
            hidden: vec![8],
            batch_size: 4,
            learning_rate: 0.01,
            epochs: 3,
            target_copy: 3,
            seed: 42,
            ..Default::default()
        }
    }

    #[test]
    fn seeded_training_is_reproducible() {
        let logs = vec![cont(0, 0, 1, 1, 1), cont(1, 1, 0, 2, 0), terminal(2, 0, 1), terminal(0, 1, 0), cont(2, 1, 1, 0, 0)];
        let setup = LearnerSetup::tabular(3, 2);
        let a = train(&logs, &small_config(), &setup).unwrap();
        let b = train(&logs, &small_config(), &setup).unwrap();
        assert_eq!(a.trace, b.trace);
        assert_eq!(a.model, b.model);
        assert_eq!(a.trace.len(), 3 * 2);
        for row in &a.trace {
            assert!(row.quantile_loss >= 0.0 && row.bce_loss >= 0.0);
            assert_eq!(row.total, row.quantile_loss + row.bce_loss);
        }
    }

    #[test]
    fn rejects_out_of_range_logs() {
        let setup = LearnerSetup::tabular(3, 2);
        assert!(train(&[terminal(3, 0, 1)], &small_config(), &setup).is_err());
        assert!(train(&[cont(0, 0, 1, 0, 5)], &small_config(), &setup).is_err());
        assert!(train(&[], &small_config(), &setup).is_err());
    }

    #[test]
    fn divergence_reports_step() {
        let logs = vec![terminal(0, 0, 1); 4];
        let config = TrainingConfig { learning_rate: 1e300, ..small_config() };
        match train(&logs, &config, &LearnerSetup::tabular(3, 2)) {
            Err(Error::Divergence { step, .. }) => assert!(step >= 1),
            other => panic!("expected divergence, got {:?}", other.map(|o| o.trace.len())),
        }
    }
}
