//! Trains every learner variant on the same logs and compares the sessions
//! their rankings produce.

use engage_core::qrlearn::{train, LearnerSetup, TrainingConfig};
use engage_core::simenv::{generate_logs, mix64, simulate_policy, FeatureMap, SyntheticMDP};
use engage_core::Result;
use serde::{Deserialize, Serialize};

use crate::eval::{ctr_greedy_policy, greedy_policy, oracle_means, BaseScore, EngagementMetrics, FnScorer, MeanScorer};
use crate::variant::Variant;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationConfig {
    /// Logged sessions per seed used for training.
    pub train_sessions: usize,
    /// Simulated sessions per seed and policy.
    pub eval_sessions: usize,
    pub seeds: Vec<u64>,
    pub training: TrainingConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyResult {
    pub name: String,
    pub per_seed: Vec<EngagementMetrics>,
    pub mean: EngagementMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub config: AblationConfig,
    /// `ctr_greedy`, the three variants, then `oracle` (greedy on the true
    /// expected returns).
    pub policies: Vec<PolicyResult>,
}

impl AblationReport {
    pub fn policy(&self, name: &str) -> Option<&PolicyResult> {
        self.policies.iter().find(|p| p.name == name)
    }
}

/// Seed used for evaluation sessions; kept apart from the log streams.
pub fn eval_seed(seed: u64) -> u64 {
    mix64(seed ^ 0x5EED_E7A1)
}

fn average(rows: &[EngagementMetrics]) -> EngagementMetrics {
    let n = rows.len() as f64;
    EngagementMetrics {
        vv: rows.iter().map(|r| r.vv).sum::<f64>() / n,
        imp: rows.iter().map(|r| r.imp).sum::<f64>() / n,
        ctr: rows.iter().map(|r| r.ctr).sum::<f64>() / n,
    }
}

pub fn run_ablation(mdp: &SyntheticMDP, config: &AblationConfig) -> Result<AblationReport> {
    if config.seeds.is_empty() {
        return Err(engage_core::Error::Validation("ablation needs at least one seed".into()));
    }
    let names: Vec<String> = std::iter::once("ctr_greedy".to_string())
        .chain(Variant::ALL.iter().map(|v| v.name().to_string()))
        .chain(std::iter::once("oracle".to_string()))
        .collect();
    let mut rows: Vec<Vec<EngagementMetrics>> = vec![Vec::new(); names.len()];
    let oracle = oracle_means(mdp, config.training.eta)?;
    let na = mdp.n_actions;
    let oracle_policy = greedy_policy(mdp, &FnScorer(|s, a| oracle[s * na + a]), BaseScore::Zero, 1.0)?;
    let ctr_policy = ctr_greedy_policy(mdp)?;
    for &seed in &config.seeds {
        let logs = generate_logs(mdp, config.train_sessions, seed)?;
        let training = TrainingConfig { seed, ..config.training.clone() };
        let mut policies = vec![ctr_policy.clone()];
        for variant in Variant::ALL {
            let setup = LearnerSetup {
                features: FeatureMap::Tabular { n_states: mdp.n_states },
                n_actions: mdp.n_actions,
                objective: variant.objective(),
            };
            let model = train(&logs, &training, &setup)?.model;
            policies.push(greedy_policy(mdp, &MeanScorer(&model), BaseScore::Zero, 1.0)?);
        }
        policies.push(oracle_policy.clone());
        for (row, policy) in rows.iter_mut().zip(&policies) {
            row.push(simulate_policy(mdp, policy, config.eval_sessions, eval_seed(seed))?.into());
        }
    }
    Ok(AblationReport {
        config: config.clone(),
        policies: names
            .into_iter()
            .zip(rows)
            .map(|(name, per_seed)| PolicyResult { name, mean: average(&per_seed), per_seed })
            .collect(),
    })
}
