//! Simulator-based evaluation of a value model.

use clap::ValueEnum;
use engage_core::distdp::{
    expected_returns, wasserstein, DiscountMode, DiscountSpec, QuantileDistribution, ValueTable,
    WassersteinOrder,
};
use engage_core::qrlearn::EngagementModel;
use engage_core::ranker::{mean_of, rank, Candidate, EngagementScorer};
use engage_core::simenv::{
    empirical_termination_rate, mc_return_samples, mix64, simulate_policy, visit_counts, SessionStats,
    SyntheticMDP, Transition,
};
use engage_core::{Error, Result};
use serde::{Deserialize, Serialize};

/// Per-pair value distribution and termination estimate.
pub trait PairModel {
    fn quantiles(&self, state: usize, action: usize) -> Result<Vec<f64>>;
    /// `None` when the model has no termination head.
    fn termination(&self, state: usize, action: usize) -> Result<Option<f64>>;
}

impl PairModel for EngagementModel {
    fn quantiles(&self, state: usize, action: usize) -> Result<Vec<f64>> {
        Ok(self.forward(state, action)?.0)
    }

    fn termination(&self, state: usize, action: usize) -> Result<Option<f64>> {
        Ok(self.forward(state, action)?.1)
    }
}

impl PairModel for ValueTable {
    fn quantiles(&self, state: usize, action: usize) -> Result<Vec<f64>> {
        if state >= self.n_states() || action >= self.n_actions() {
            return Err(Error::Validation(format!("pair ({state}, {action}) outside the table")));
        }
        Ok(self.get(state, action).atoms().to_vec())
    }

    fn termination(&self, _: usize, _: usize) -> Result<Option<f64>> {
        Ok(None)
    }
}

/// Scores pairs by the mean of a [`PairModel`]'s quantiles.
pub struct MeanScorer<'a, M: ?Sized>(pub &'a M);

impl<M: PairModel + ?Sized> EngagementScorer for MeanScorer<'_, M> {
    fn engagement(&self, state: usize, action: usize) -> Result<f64> {
        Ok(mean_of(&self.0.quantiles(state, action)?))
    }
}

/// Base score `g_b` the engagement term is blended into.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum BaseScore {
    Zero,
    /// True click probability.
    Ctr,
    /// Behavior-policy probability.
    Behavior,
}

impl BaseScore {
    pub fn value(self, mdp: &SyntheticMDP, state: usize, action: usize) -> f64 {
        match self {
            BaseScore::Zero => 0.0,
            BaseScore::Ctr => mdp.click_prob[state][action],
            BaseScore::Behavior => mdp.behavior_policy[state][action],
        }
    }
}

/// Top-1 action per state when every action is a candidate.
pub fn greedy_policy<S: EngagementScorer + ?Sized>(
    mdp: &SyntheticMDP,
    scorer: &S,
    base: BaseScore,
    w: f64,
) -> Result<Vec<usize>> {
    (0..mdp.n_states)
        .map(|s| {
            let candidates: Vec<Candidate> = (0..mdp.n_actions)
                .map(|action| Candidate { action, base: base.value(mdp, s, action) })
                .collect();
            Ok(rank(s, &candidates, scorer, w)?[0].action)
        })
        .collect()
}

/// Clicking-greedy policy: rank by true click probability alone.
pub fn ctr_greedy_policy(mdp: &SyntheticMDP) -> Result<Vec<usize>> {
    let zero = |_: usize, _: usize| 0.0;
    greedy_policy(mdp, &FnScorer(zero), BaseScore::Ctr, 0.0)
}

/// Scorer backed by a closure.
pub struct FnScorer<F>(pub F);

impl<F: Fn(usize, usize) -> f64> EngagementScorer for FnScorer<F> {
    fn engagement(&self, state: usize, action: usize) -> Result<f64> {
        Ok((self.0)(state, action))
    }
}

/// Kendall's tau-a: `(concordant - discordant) / (n (n - 1) / 2)`; tied pairs
/// count as neither.
pub fn kendall_tau(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len(), "kendall_tau needs equal lengths");
    let n = x.len();
    if n < 2 {
        return 0.0;
    }
    let mut score = 0i64;
    for i in 0..n {
        for j in i + 1..n {
            let product = (x[i] - x[j]) * (y[i] - y[j]);
            if product > 0.0 {
                score += 1;
            } else if product < 0.0 {
                score -= 1;
            }
        }
    }
    score as f64 / (n * (n - 1) / 2) as f64
}

/// Empirical quantiles at the midpoints `(2i - 1) / 2m`: the smallest sample
/// whose empirical CDF reaches each level.
pub fn empirical_quantiles(samples: &[f64], m: usize) -> Vec<f64> {
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    (0..m)
        .map(|i| {
            let tau = (2 * i + 1) as f64 / (2 * m) as f64;
            let k = ((tau * n as f64).ceil() as usize).clamp(1, n);
            sorted[k - 1]
        })
        .collect()
}

/// Views, impressions and click-through per session.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EngagementMetrics {
    /// Clicks per session.
    pub vv: f64,
    /// Impressions per session.
    pub imp: f64,
    pub ctr: f64,
}

impl From<SessionStats> for EngagementMetrics {
    fn from(s: SessionStats) -> Self {
        EngagementMetrics { vv: s.clicks_per_session(), imp: s.impressions_per_session(), ctr: s.ctr() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorSummary {
    pub max: f64,
    pub mean: f64,
    pub pairs: usize,
}

impl ErrorSummary {
    fn from_errors(errors: &[f64]) -> Option<Self> {
        (!errors.is_empty()).then(|| ErrorSummary {
            max: errors.iter().copied().fold(0.0, f64::max),
            mean: errors.iter().sum::<f64>() / errors.len() as f64,
            pairs: errors.len(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub sessions: usize,
    pub seed: u64,
    pub eta: f64,
    pub base: BaseScore,
    pub w: f64,
    /// Monte Carlo rollouts per pair for the distribution check; 0 skips it.
    pub mc_rollouts: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions { sessions: 10_000, seed: 0, eta: 0.95, base: BaseScore::Zero, w: 1.0, mc_rollouts: 2000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub options: EvalOptions,
    /// Sessions re-ranked by `base + w * g`.
    pub ranked: EngagementMetrics,
    pub ctr_greedy: EngagementMetrics,
    /// `|g(s, a) - E[Z(s, a)]|` against the exact expected return.
    pub mean_value_error: ErrorSummary,
    /// W1 between model quantiles and Monte Carlo quantiles at the same levels.
    pub w1_to_monte_carlo: Option<ErrorSummary>,
    /// `|ell(s, a) - term_prob(s, a)|`.
    pub ell_calibration_error: Option<ErrorSummary>,
    /// Mean over states of Kendall's tau between model and oracle action order.
    pub kendall_tau: f64,
}

/// Expected returns of the environment's own fixed point (data-terminal
/// semantics, true termination probabilities), row-major.
pub fn oracle_means(mdp: &SyntheticMDP, eta: f64) -> Result<Vec<f64>> {
    expected_returns(mdp, &DiscountSpec::from_mdp(mdp, eta, DiscountMode::DataTerminal))
}

pub fn evaluate<M: PairModel + ?Sized>(model: &M, mdp: &SyntheticMDP, options: &EvalOptions) -> Result<EvalReport> {
    let (ns, na) = (mdp.n_states, mdp.n_actions);
    let scorer = MeanScorer(model);
    let policy = greedy_policy(mdp, &scorer, options.base, options.w)?;
    let ranked = simulate_policy(mdp, &policy, options.sessions, options.seed)?;
    let ctr_greedy = simulate_policy(mdp, &ctr_greedy_policy(mdp)?, options.sessions, options.seed)?;

    let oracle = oracle_means(mdp, options.eta)?;
    let mut quantiles = Vec::with_capacity(ns * na);
    let mut mean_errors = Vec::with_capacity(ns * na);
    let mut ell_errors = Vec::new();
    for s in 0..ns {
        for a in 0..na {
            let q = model.quantiles(s, a)?;
            mean_errors.push((mean_of(&q) - oracle[s * na + a]).abs());
            if let Some(ell) = model.termination(s, a)? {
                ell_errors.push((ell - mdp.term_prob[s][a]).abs());
            }
            quantiles.push(q);
        }
    }

    let mut w1 = Vec::new();
    if options.mc_rollouts > 0 {
        for (idx, q) in quantiles.iter().enumerate() {
            let samples =
                mc_return_samples(mdp, idx / na, idx % na, options.eta, options.mc_rollouts, mix64(options.seed ^ idx as u64))?;
            let mc = QuantileDistribution::new(empirical_quantiles(&samples, q.len()))?;
            w1.push(wasserstein(&QuantileDistribution::new(q.clone())?, &mc, WassersteinOrder::Finite(1.0))?);
        }
    }

    let tau = (0..ns)
        .map(|s| {
            let model_row: Vec<f64> = quantiles[s * na..(s + 1) * na].iter().map(|q| mean_of(q)).collect();
            kendall_tau(&model_row, &oracle[s * na..(s + 1) * na])
        })
        .sum::<f64>()
        / ns as f64;

    Ok(EvalReport {
        options: options.clone(),
        ranked: ranked.into(),
        ctr_greedy: ctr_greedy.into(),
        mean_value_error: ErrorSummary::from_errors(&mean_errors).expect("mdp has at least one pair"),
        w1_to_monte_carlo: ErrorSummary::from_errors(&w1),
        ell_calibration_error: ErrorSummary::from_errors(&ell_errors),
        kendall_tau: tau,
    })
}

/// `|ell(s, a) - empirical termination rate|` over pairs with at least
/// `min_visits` logged visits; `None` without a termination head or without
/// any such pair.
pub fn calibration_against_logs<M: PairModel + ?Sized>(
    model: &M,
    logs: &[Transition],
    min_visits: usize,
) -> Result<Option<ErrorSummary>> {
    let rates = empirical_termination_rate(logs)?;
    let mut errors = Vec::new();
    for ((s, a), visits) in visit_counts(logs) {
        if visits < min_visits {
            continue;
        }
        match model.termination(s, a)? {
            Some(ell) => errors.push((ell - rates[&(s, a)]).abs()),
            None => return Ok(None),
        }
    }
    Ok(ErrorSummary::from_errors(&errors))
}

#[cfg(test)]
mod tests {
    use super::*;
    use engage_core::simenv::{myopic_trap, random_mdp, RandomMdpConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn tau_extremes() {
        let x = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(kendall_tau(&x, &x), 1.0);
        assert_eq!(kendall_tau(&x, &[4.0, 3.0, 2.0, 1.0]), -1.0);
        assert_eq!(kendall_tau(&x, &[1.0, 1.0, 1.0, 1.0]), 0.0);
    }

    #[test]
    fn random_scores_have_null_tau() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let oracle: Vec<f64> = (0..10).map(f64::from).collect();
        let n = 20_000;
        let mean = (0..n)
            .map(|_| {
                let x: Vec<f64> = (0..10).map(|_| rng.random()).collect();
                kendall_tau(&x, &oracle)
            })
            .sum::<f64>()
            / n as f64;
        // null sd of tau for n = 10 is sqrt(2 (2n + 5) / (9 n (n - 1))) ~ 0.26
        assert!(mean.abs() < 4.0 * 0.26 / (n as f64).sqrt(), "{mean}");
    }

    #[test]
    fn empirical_quantiles_pick_order_statistics() {
        let samples = [3.0, 1.0, 2.0, 4.0];
        assert_eq!(empirical_quantiles(&samples, 4), vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(empirical_quantiles(&samples, 2), vec![1.0, 3.0]);
        assert_eq!(empirical_quantiles(&samples, 1), vec![2.0]);
    }

    fn oracle_table(mdp: &SyntheticMDP, eta: f64, m: usize) -> ValueTable {
        let means = oracle_means(mdp, eta).unwrap();
        let dists = means.iter().map(|&v| QuantileDistribution::constant(v, m)).collect();
        ValueTable::from_dists(mdp.n_states, mdp.n_actions, dists).unwrap()
    }

    #[test]
    fn oracle_values_have_zero_mean_error_and_full_tau() {
        let mdp = random_mdp(&RandomMdpConfig::new(4, 3), 1);
        let table = oracle_table(&mdp, 0.9, 4);
        let options = EvalOptions { sessions: 200, eta: 0.9, mc_rollouts: 0, ..Default::default() };
        let report = evaluate(&table, &mdp, &options).unwrap();
        assert!(report.mean_value_error.max < 1e-12);
        assert!((report.kendall_tau - 1.0).abs() < 1e-12);
        assert!(report.ell_calibration_error.is_none());
        assert!(report.w1_to_monte_carlo.is_none());
    }

    #[test]
    fn oracle_ranking_beats_ctr_greedy_in_trap() {
        let mdp = myopic_trap(4, 4);
        let table = oracle_table(&mdp, 0.95, 1);
        let options = EvalOptions { sessions: 10_000, mc_rollouts: 0, ..Default::default() };
        let report = evaluate(&table, &mdp, &options).unwrap();
        assert!(report.ranked.vv > report.ctr_greedy.vv, "{report:?}");
        assert!(report.ranked.ctr < report.ctr_greedy.ctr);
    }

    #[test]
    fn w_zero_follows_base_order() {
        let mdp = myopic_trap(2, 4);
        let by_id = FnScorer(|_, a| a as f64);
        // clickbait actions 0 and 2 tie on ctr; the smaller id wins
        assert_eq!(greedy_policy(&mdp, &by_id, BaseScore::Ctr, 0.0).unwrap(), vec![0, 0]);
        assert_eq!(greedy_policy(&mdp, &by_id, BaseScore::Zero, 1.0).unwrap(), vec![3, 3]);
        assert_eq!(ctr_greedy_policy(&mdp).unwrap(), vec![0, 0]);
    }
}
