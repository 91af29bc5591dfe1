//! Synthetic session simulator.
//!
//! A [`SyntheticMDP`] is a small tabular environment with Bernoulli clicks and
//! Bernoulli session termination, logged under a fixed behavior policy. It is
//! the data source for training and, through [`mc_return_samples`], the
//! Monte Carlo ground truth the learners and the DP solver are checked against.
//!
//! Every random draw goes through [`stream_rng`]: session (or rollout) `i`
//! uses ChaCha8 seeded with the master seed and switched to stream `i`, so
//! output does not depend on how work is split across threads.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row sums must match 1 within this tolerance.
pub const ROW_SUM_TOL: f64 = 1e-9;

/// Rollouts stop once the running discount product drops below this.
pub const DISCOUNT_TRUNCATION: f64 = 1e-9;

pub const DEFAULT_TERM_FLOOR: f64 = 1e-6;

fn default_term_floor() -> f64 {
    DEFAULT_TERM_FLOOR
}

/// Tabular environment with stochastic clicks and stochastic termination.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticMDP {
    pub n_states: usize,
    pub n_actions: usize,
    /// `transition[s][a][s']`
    pub transition: Vec<Vec<Vec<f64>>>,
    /// Reward at `(s, a)` is Bernoulli(`click_prob[s][a]`).
    pub click_prob: Vec<Vec<f64>>,
    /// Probability that the session ends right after `(s, a)`.
    pub term_prob: Vec<Vec<f64>>,
    /// `behavior_policy[s][a]`
    pub behavior_policy: Vec<Vec<f64>>,
    pub initial_state_dist: Vec<f64>,
    /// Lower bound on `term_prob` required for session generation.
    #[serde(default = "default_term_floor")]
    pub term_floor: f64,
}

fn check_prob(name: &str, where_: &str, p: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::validation(format!(
            "{name} {where_} has entry {p} outside [0, 1]"
        )));
    }
    Ok(())
}

fn check_row(name: &str, where_: &str, row: &[f64], len: usize) -> Result<()> {
    if row.len() != len {
        return Err(Error::validation(format!(
            "{name} {where_} has length {}, expected {len}",
            row.len()
        )));
    }
    for &p in row {
        check_prob(name, where_, p)?;
    }
    let sum: f64 = row.iter().sum();
    if (sum - 1.0).abs() > ROW_SUM_TOL {
        return Err(Error::validation(format!(
            "{name} {where_} sums to {sum}, expected 1"
        )));
    }
    Ok(())
}

impl SyntheticMDP {
    /// Checks shapes, ranges and row sums.
    pub fn validate(&self) -> Result<()> {
        let (ns, na) = (self.n_states, self.n_actions);
        if ns == 0 || na == 0 {
            return Err(Error::validation("mdp needs at least one state and one action"));
        }
        let tables = [
            ("transition", self.transition.len()),
            ("click_prob", self.click_prob.len()),
            ("term_prob", self.term_prob.len()),
            ("behavior_policy", self.behavior_policy.len()),
        ];
        for (name, len) in tables {
            if len != ns {
                return Err(Error::validation(format!(
                    "{name} has {len} state rows, expected {ns}"
                )));
            }
        }
        check_row("initial_state_dist", "row", &self.initial_state_dist, ns)?;
        for s in 0..ns {
            check_row("behavior_policy", &format!("row (state {s})"), &self.behavior_policy[s], na)?;
            for (name, table) in [("click_prob", &self.click_prob), ("term_prob", &self.term_prob)] {
                if table[s].len() != na {
                    return Err(Error::validation(format!(
                        "{name} row (state {s}) has length {}, expected {na}",
                        table[s].len()
                    )));
                }
                for (a, &p) in table[s].iter().enumerate() {
                    check_prob(name, &format!("entry (state {s}, action {a})"), p)?;
                }
            }
            if self.transition[s].len() != na {
                return Err(Error::validation(format!(
                    "transition row (state {s}) has {} actions, expected {na}",
                    self.transition[s].len()
                )));
            }
            for a in 0..na {
                check_row(
                    "transition",
                    &format!("row (state {s}, action {a})"),
                    &self.transition[s][a],
                    ns,
                )?;
            }
        }
        Ok(())
    }

    /// [`validate`](Self::validate) plus the termination floor, which makes
    /// sessions finite almost surely.
    pub fn validate_for_sessions(&self) -> Result<()> {
        self.validate()?;
        if !(self.term_floor > 0.0) {
            return Err(Error::validation(format!(
                "term_floor must be > 0, got {}",
                self.term_floor
            )));
        }
        for s in 0..self.n_states {
            for a in 0..self.n_actions {
                let p = self.term_prob[s][a];
                if p < self.term_floor {
                    return Err(Error::validation(format!(
                        "term_prob entry (state {s}, action {a}) = {p} is below term_floor {}",
                        self.term_floor
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn n_pairs(&self) -> usize {
        self.n_states * self.n_actions
    }

    /// Effective discount `min(1 - term_prob(s, a), eta)`.
    pub fn gamma_prime(&self, s: usize, a: usize, eta: f64) -> f64 {
        (1.0 - self.term_prob[s][a]).min(eta)
    }

    /// Single state, single action; used all over the tests.
    pub fn single(click: f64, term: f64) -> Self {
        SyntheticMDP {
            n_states: 1,
            n_actions: 1,
            transition: vec![vec![vec![1.0]]],
            click_prob: vec![vec![click]],
            term_prob: vec![vec![term]],
            behavior_policy: vec![vec![1.0]],
            initial_state_dist: vec![1.0],
            term_floor: DEFAULT_TERM_FLOOR,
        }
    }
}

/// One logged decision step.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transition {
    pub session_id: u64,
    pub step: usize,
    pub state: usize,
    pub action: usize,
    pub reward: u8,
    /// `e = 1` when the session ended after this decision.
    #[serde(with = "flag")]
    pub terminal: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub next_state: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub next_action: Option<usize>,
}

impl Transition {
    /// Successor pair, or a data error if a non-terminal transition lacks one.
    pub fn successor(&self) -> Result<Option<(usize, usize)>> {
        match (self.terminal, self.next_state, self.next_action) {
            (true, None, None) => Ok(None),
            (false, Some(s), Some(a)) => Ok(Some((s, a))),
            (true, _, _) => Err(Error::data(format!(
                "session {} step {}: terminal transition carries a successor",
                self.session_id, self.step
            ))),
            (false, _, _) => Err(Error::data(format!(
                "session {} step {}: non-terminal transition is missing next_state/next_action",
                self.session_id, self.step
            ))),
        }
    }
}

/// Serializes a bool as the integer 0/1.
mod flag {
    use serde::{de::Error as _, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &bool, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u8(u8::from(*v))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<bool, D::Error> {
        match u8::deserialize(d)? {
            0 => Ok(false),
            1 => Ok(true),
            other => Err(D::Error::custom(format!("flag must be 0 or 1, got {other}"))),
        }
    }
}

/// RNG for work item `index` under `seed`: ChaCha8 on stream `index`.
pub fn stream_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Inverse-CDF draw from a probability row. Falls back to the last index with
/// positive mass when rounding leaves `u` above the cumulative total.
pub fn sample_index<R: Rng + ?Sized>(rng: &mut R, probs: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
}

fn bernoulli<R: Rng + ?Sized>(rng: &mut R, p: f64) -> bool {
    rng.random::<f64>() < p
}

fn simulate_session(mdp: &SyntheticMDP, session_id: u64, seed: u64) -> Vec<Transition> {
    let mut rng = stream_rng(seed, session_id);
    let mut state = sample_index(&mut rng, &mdp.initial_state_dist);
    let mut action = sample_index(&mut rng, &mdp.behavior_policy[state]);
    let mut out = Vec::new();
    for step in 0.. {
        let reward = u8::from(bernoulli(&mut rng, mdp.click_prob[state][action]));
        let terminal = bernoulli(&mut rng, mdp.term_prob[state][action]);
        if terminal {
            out.push(Transition {
                session_id,
                step,
                state,
                action,
                reward,
                terminal,
                next_state: None,
                next_action: None,
            });
            break;
        }
        let next_state = sample_index(&mut rng, &mdp.transition[state][action]);
        let next_action = sample_index(&mut rng, &mdp.behavior_policy[next_state]);
        out.push(Transition {
            session_id,
            step,
            state,
            action,
            reward,
            terminal,
            next_state: Some(next_state),
            next_action: Some(next_action),
        });
        state = next_state;
        action = next_action;
    }
    out
}

/// Samples `n_sessions` sessions under the behavior policy.
///
/// Session `i` has id `i` and its own RNG stream, so the result is identical
/// however rayon schedules the work.
pub fn generate_logs(mdp: &SyntheticMDP, n_sessions: usize, seed: u64) -> Result<Vec<Transition>> {
    if n_sessions == 0 {
        return Err(Error::validation("n_sessions must be >= 1"));
    }
    mdp.validate_for_sessions()?;
    let sessions: Vec<Vec<Transition>> = (0..n_sessions as u64)
        .into_par_iter()
        .map(|id| simulate_session(mdp, id, seed))
        .collect();
    Ok(sessions.into_iter().flatten().collect())
}

/// Totals over sessions run under a fixed action per state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionStats {
    pub sessions: usize,
    pub impressions: u64,
    pub clicks: u64,
}

impl SessionStats {
    pub fn clicks_per_session(&self) -> f64 {
        self.clicks as f64 / self.sessions as f64
    }

    pub fn impressions_per_session(&self) -> f64 {
        self.impressions as f64 / self.sessions as f64
    }

    pub fn ctr(&self) -> f64 {
        self.clicks as f64 / self.impressions as f64
    }
}

/// Runs `n_sessions` sessions where state `s` always shows `policy[s]`.
///
/// Every step consumes the same three uniforms (click, termination, next
/// state) whatever the action, so two policies evaluated with one seed see
/// common random numbers.
pub fn simulate_policy(mdp: &SyntheticMDP, policy: &[usize], n_sessions: usize, seed: u64) -> Result<SessionStats> {
    if n_sessions == 0 {
        return Err(Error::validation("n_sessions must be >= 1"));
    }
    mdp.validate_for_sessions()?;
    if policy.len() != mdp.n_states {
        return Err(Error::validation(format!(
            "policy covers {} states, mdp has {}",
            policy.len(),
            mdp.n_states
        )));
    }
    if let Some(s) = policy.iter().position(|&a| a >= mdp.n_actions) {
        return Err(Error::validation(format!("policy action {} at state {s} out of range", policy[s])));
    }
    let per_session: Vec<(u64, u64)> = (0..n_sessions as u64)
        .into_par_iter()
        .map(|id| {
            let mut rng = stream_rng(seed, id);
            let mut state = sample_index(&mut rng, &mdp.initial_state_dist);
            let (mut shown, mut clicks) = (0, 0);
            loop {
                let action = policy[state];
                shown += 1;
                clicks += u64::from(bernoulli(&mut rng, mdp.click_prob[state][action]));
                let ends = bernoulli(&mut rng, mdp.term_prob[state][action]);
                let next = sample_index(&mut rng, &mdp.transition[state][action]);
                if ends {
                    return (shown, clicks);
                }
                state = next;
            }
        })
        .collect();
    Ok(SessionStats {
        sessions: n_sessions,
        impressions: per_session.iter().map(|p| p.0).sum(),
        clicks: per_session.iter().map(|p| p.1).sum(),
    })
}

fn rollout_return(mdp: &SyntheticMDP, s: usize, a: usize, eta: f64, rng: &mut ChaCha8Rng) -> f64 {
    let (mut state, mut action) = (s, a);
    let mut discount = 1.0;
    let mut ret = 0.0;
    loop {
        if bernoulli(rng, mdp.click_prob[state][action]) {
            ret += discount;
        }
        if bernoulli(rng, mdp.term_prob[state][action]) {
            break;
        }
        let next_state = sample_index(rng, &mdp.transition[state][action]);
        let next_action = sample_index(rng, &mdp.behavior_policy[next_state]);
        discount *= mdp.gamma_prime(next_state, next_action, eta);
        if discount < DISCOUNT_TRUNCATION {
            break;
        }
        state = next_state;
        action = next_action;
    }
    ret
}

/// Monte Carlo samples of the return from the forced first pair `(s, a)`.
///
/// Each sample is `r_0 + sum_t [survived to t] * prod_{k=1..t} gamma'(s_k, a_k) * r_t`
/// with `gamma'(s, a) = min(1 - term_prob(s, a), eta)`. Termination is sampled
/// from `term_prob` and also enters multiplicatively through `gamma'`; this is
/// the fixed point the logged-data learner targets.
pub fn mc_return_samples(
    mdp: &SyntheticMDP,
    s: usize,
    a: usize,
    eta: f64,
    n_rollouts: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    mdp.validate()?;
    if !(eta > 0.0 && eta < 1.0) {
        return Err(Error::validation(format!("eta must be in (0, 1), got {eta}")));
    }
    if n_rollouts == 0 {
        return Err(Error::validation("n_rollouts must be >= 1"));
    }
    if s >= mdp.n_states || a >= mdp.n_actions {
        return Err(Error::validation(format!("pair ({s}, {a}) is out of range")));
    }
    Ok((0..n_rollouts as u64)
        .into_par_iter()
        .map(|i| rollout_return(mdp, s, a, eta, &mut stream_rng(seed, i)))
        .collect())
}

/// Fraction of visits to each `(s, a)` that ended the session. Unvisited
/// pairs are absent.
pub fn empirical_termination_rate(logs: &[Transition]) -> Result<BTreeMap<(usize, usize), f64>> {
    if logs.is_empty() {
        return Err(Error::validation("logs must be non-empty"));
    }
    let mut counts: BTreeMap<(usize, usize), (usize, usize)> = BTreeMap::new();
    for t in logs {
        let c = counts.entry((t.state, t.action)).or_default();
        c.0 += usize::from(t.terminal);
        c.1 += 1;
    }
    Ok(counts
        .into_iter()
        .map(|(k, (ends, visits))| (k, ends as f64 / visits as f64))
        .collect())
}

pub fn visit_counts(logs: &[Transition]) -> BTreeMap<(usize, usize), usize> {
    let mut counts = BTreeMap::new();
    for t in logs {
        *counts.entry((t.state, t.action)).or_insert(0) += 1;
    }
    counts
}

/// Ranges for [`random_mdp`].
#[derive(Debug, Clone, PartialEq)]
pub struct RandomMdpConfig {
    pub n_states: usize,
    pub n_actions: usize,
    pub click_range: (f64, f64),
    pub term_range: (f64, f64),
}

impl RandomMdpConfig {
    pub fn new(n_states: usize, n_actions: usize) -> Self {
        RandomMdpConfig {
            n_states,
            n_actions,
            click_range: (0.0, 1.0),
            term_range: (0.1, 0.5),
        }
    }
}

fn random_row(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    // -ln(u) gives a flat Dirichlet after normalizing
    let raw: Vec<f64> = (0..len)
        .map(|_| -(1.0 - rng.random::<f64>()).ln() + 1e-12)
        .collect();
    let total: f64 = raw.iter().sum();
    let mut row: Vec<f64> = raw.iter().map(|x| x / total).collect();
    // push the rounding residue into the largest entry
    let residue = 1.0 - row.iter().sum::<f64>();
    let imax = (0..len).max_by(|&i, &j| row[i].total_cmp(&row[j])).unwrap_or(0);
    row[imax] += residue;
    row
}

/// Random tabular MDP with flat-Dirichlet rows and uniform click/termination
/// probabilities inside the configured ranges.
pub fn random_mdp(config: &RandomMdpConfig, seed: u64) -> SyntheticMDP {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (ns, na) = (config.n_states, config.n_actions);
    let uniform_in = |rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)| lo + (hi - lo) * rng.random::<f64>();
    let transition = (0..ns)
        .map(|_| (0..na).map(|_| random_row(&mut rng, ns)).collect())
        .collect();
    let click_prob = (0..ns)
        .map(|_| (0..na).map(|_| uniform_in(&mut rng, config.click_range)).collect())
        .collect();
    let term_prob = (0..ns)
        .map(|_| (0..na).map(|_| uniform_in(&mut rng, config.term_range)).collect())
        .collect();
    let behavior_policy = (0..ns).map(|_| random_row(&mut rng, na)).collect();
    let initial_state_dist = random_row(&mut rng, ns);
    SyntheticMDP {
        n_states: ns,
        n_actions: na,
        transition,
        click_prob,
        term_prob,
        behavior_policy,
        initial_state_dist,
        term_floor: DEFAULT_TERM_FLOOR,
    }
}

/// An environment where clicking is bad for the session.
///
/// States `0..half` are "engaged" (termination 0.1) and the rest are "bored"
/// (termination 0.6). Even actions are clickbait (click 0.7) that moves the
/// user to a uniformly random bored state; odd actions are quality items
/// (click 0.4) that lead to an engaged state. The behavior policy is uniform.
/// Greedy-by-click picks clickbait and ends sessions early.
pub fn myopic_trap(n_states: usize, n_actions: usize) -> SyntheticMDP {
    assert!(n_states >= 2 && n_states % 2 == 0, "n_states must be even and >= 2");
    assert!(n_actions >= 2 && n_actions % 2 == 0, "n_actions must be even and >= 2");
    let half = n_states / 2;
    let engaged = |s: usize| s < half;
    let towards = |to_engaged: bool| -> Vec<f64> {
        (0..n_states)
            .map(|s| if engaged(s) == to_engaged { 1.0 / half as f64 } else { 0.0 })
            .collect()
    };
    let clickbait = |a: usize| a % 2 == 0;
    SyntheticMDP {
        n_states,
        n_actions,
        transition: (0..n_states)
            .map(|_| (0..n_actions).map(|a| towards(!clickbait(a))).collect())
            .collect(),
        click_prob: (0..n_states)
            .map(|_| (0..n_actions).map(|a| if clickbait(a) { 0.7 } else { 0.4 }).collect())
            .collect(),
        term_prob: (0..n_states)
            .map(|s| vec![if engaged(s) { 0.1 } else { 0.6 }; n_actions])
            .collect(),
        behavior_policy: vec![vec![1.0 / n_actions as f64; n_actions]; n_states],
        initial_state_dist: vec![1.0 / n_states as f64; n_states],
        term_floor: DEFAULT_TERM_FLOOR,
    }
}

/// Maps a state id to categorical feature ids.
///
/// `Tabular` uses the state id itself as a single feature. `Hashed` stands in
/// for a production feature set: `fields` ids in `0..vocab`, each a seeded
/// hash of `(state, field)`; distinct states may collide.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeatureMap {
    Tabular { n_states: usize },
    Hashed { fields: usize, vocab: usize, seed: u64 },
}

/// splitmix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl FeatureMap {
    /// Vocabulary size of each state feature field.
    pub fn field_vocabs(&self) -> Vec<usize> {
        match *self {
            FeatureMap::Tabular { n_states } => vec![n_states],
            FeatureMap::Hashed { fields, vocab, .. } => vec![vocab; fields],
        }
    }

    pub fn state_features(&self, state: usize) -> Vec<usize> {
        match *self {
            FeatureMap::Tabular { .. } => vec![state],
            FeatureMap::Hashed { fields, vocab, seed } => (0..fields)
                .map(|f| {
                    let key = mix64(seed) ^ ((state as u64) << 16) ^ f as u64;
                    (mix64(key) % vocab as u64) as usize
                })
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn certain_termination_gives_single_step_sessions() {
        let mdp = SyntheticMDP::single(0.3, 1.0);
        let logs = generate_logs(&mdp, 500, 7).unwrap();
        assert_eq!(logs.len(), 500);
        assert!(logs.iter().all(|t| t.terminal && t.step == 0 && t.next_state.is_none()));
    }

    #[test]
    fn certain_click_gives_unit_rewards() {
        let mdp = random_mdp(
            &RandomMdpConfig { click_range: (1.0, 1.0), ..RandomMdpConfig::new(4, 3) },
            3,
        );
        let logs = generate_logs(&mdp, 200, 11).unwrap();
        assert!(logs.iter().all(|t| t.reward == 1));
    }

    #[test]
    fn sessions_are_well_formed() {
        let mdp = random_mdp(&RandomMdpConfig::new(5, 3), 1);
        let logs = generate_logs(&mdp, 300, 2).unwrap();
        let mut by_session: BTreeMap<u64, Vec<&Transition>> = BTreeMap::new();
        for t in &logs {
            by_session.entry(t.session_id).or_default().push(t);
        }
        assert_eq!(by_session.len(), 300);
        for steps in by_session.values() {
            for (i, t) in steps.iter().enumerate() {
                assert_eq!(t.step, i);
                assert_eq!(t.terminal, i + 1 == steps.len());
                t.successor().unwrap();
                if let Some(next) = steps.get(i + 1) {
                    assert_eq!(t.next_state, Some(next.state));
                    assert_eq!(t.next_action, Some(next.action));
                }
            }
        }
    }

    #[test]
    fn row_violation_names_the_row() {
        let mut mdp = random_mdp(&RandomMdpConfig::new(3, 2), 5);
        mdp.transition[2][1][0] += 0.05;
        let err = generate_logs(&mdp, 1, 0).unwrap_err().to_string();
        assert!(err.contains("transition row (state 2, action 1)"), "{err}");
    }

    #[test]
    fn term_floor_is_enforced_for_sessions() {
        let mdp = SyntheticMDP::single(0.5, 0.0);
        assert!(mdp.validate().is_ok());
        assert!(matches!(generate_logs(&mdp, 1, 0), Err(Error::Validation(_))));
    }

    #[test]
    fn immediate_termination_returns_reward_only() {
        let samples = mc_return_samples(&SyntheticMDP::single(1.0, 1.0), 0, 0, 0.9, 1000, 3).unwrap();
        assert!(samples.iter().all(|&g| g == 1.0));
        let zeros = mc_return_samples(&SyntheticMDP::single(0.0, 0.2), 0, 0, 0.9, 1000, 3).unwrap();
        assert!(zeros.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn no_termination_concentrates_at_geometric_sum() {
        let eta = 0.9;
        let samples = mc_return_samples(&SyntheticMDP::single(1.0, 0.0), 0, 0, eta, 10, 1).unwrap();
        for g in samples {
            // truncation leaves at most DISCOUNT_TRUNCATION / (1 - eta) behind
            assert!((g - 1.0 / (1.0 - eta)).abs() <= DISCOUNT_TRUNCATION / (1.0 - eta) + 1e-12);
        }
    }

    #[test]
    fn termination_rate_of_single_transition() {
        let t = Transition {
            session_id: 0,
            step: 0,
            state: 2,
            action: 1,
            reward: 0,
            terminal: false,
            next_state: Some(0),
            next_action: Some(0),
        };
        let rates = empirical_termination_rate(&[t]).unwrap();
        assert_eq!(rates.len(), 1);
        assert_eq!(rates[&(2, 1)], 0.0);
        assert!(empirical_termination_rate(&[]).is_err());
    }

    #[test]
    fn generation_does_not_depend_on_thread_count() {
        let mdp = random_mdp(&RandomMdpConfig::new(6, 4), 9);
        let parallel = generate_logs(&mdp, 400, 123).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let serial = pool.install(|| generate_logs(&mdp, 400, 123).unwrap());
        assert_eq!(parallel, serial);
        assert_ne!(parallel, generate_logs(&mdp, 400, 124).unwrap());
    }

    #[test]
    fn hashed_features_are_stable_and_in_range() {
        let fm = FeatureMap::Hashed { fields: 4, vocab: 13, seed: 77 };
        for s in 0..50 {
            let f = fm.state_features(s);
            assert_eq!(f.len(), 4);
            assert!(f.iter().all(|&id| id < 13));
            assert_eq!(f, fm.state_features(s));
        }
        assert_eq!(FeatureMap::Tabular { n_states: 5 }.state_features(3), vec![3]);
    }

    #[test]
    fn myopic_trap_is_valid() {
        let mdp = myopic_trap(4, 4);
        mdp.validate_for_sessions().unwrap();
    }

    #[test]
    fn policy_sessions_follow_termination() {
        let mdp = SyntheticMDP::single(0.25, 0.5);
        let stats = simulate_policy(&mdp, &[0], 200_000, 1).unwrap();
        assert!((stats.impressions_per_session() - 2.0).abs() < 0.02);
        assert!((stats.ctr() - 0.25).abs() < 0.01);
        assert_eq!(stats, simulate_policy(&mdp, &[0], 200_000, 1).unwrap());
    }

    #[test]
    fn quality_beats_clickbait_in_trap() {
        let mdp = myopic_trap(4, 4);
        let bait = simulate_policy(&mdp, &[0; 4], 20_000, 3).unwrap();
        let quality = simulate_policy(&mdp, &[1; 4], 20_000, 3).unwrap();
        assert!(bait.ctr() > quality.ctr());
        assert!(quality.clicks_per_session() > 2.0 * bait.clicks_per_session());
    }

    #[test]
    fn policy_shape_is_checked() {
        let mdp = myopic_trap(4, 2);
        assert!(simulate_policy(&mdp, &[0; 3], 10, 0).is_err());
        assert!(simulate_policy(&mdp, &[0, 0, 2, 0], 10, 0).is_err());
    }
}
