//! Exact tabular distributional dynamic programming on quantile representations.
//!
//! The operator forms, for every `(s, a)`, the finite mixture of
//! `r + gamma'(s', a') * theta_j` over reward outcomes, successor states,
//! behavior-policy next actions and atoms, then projects it back onto `M`
//! atoms by evaluating the mixture's inverse CDF at the quantile midpoints
//! `(2i - 1) / 2M`.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::simenv::SyntheticMDP;

/// Quantile midpoints `tau_hat_i = (tau_{i-1} + tau_i) / 2` with `tau_i = i / m`.
pub fn quantile_midpoints(m: usize) -> Vec<f64> {
    (0..m).map(|i| (2 * i + 1) as f64 / (2 * m) as f64).collect()
}

/// `M` equally weighted atoms, kept sorted ascending.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantileDistribution {
    atoms: Vec<f64>,
}

impl QuantileDistribution {
    pub fn new(mut atoms: Vec<f64>) -> Result<Self> {
        if atoms.is_empty() {
            return Err(Error::validation("a quantile distribution needs at least one atom"));
        }
        if let Some(bad) = atoms.iter().find(|x| !x.is_finite()) {
            return Err(Error::validation(format!("non-finite atom {bad}")));
        }
        atoms.sort_by(f64::total_cmp);
        Ok(QuantileDistribution { atoms })
    }

    pub fn constant(value: f64, m: usize) -> Self {
        QuantileDistribution { atoms: vec![value; m] }
    }

    pub fn atoms(&self) -> &[f64] {
        &self.atoms
    }

    pub fn m(&self) -> usize {
        self.atoms.len()
    }

    pub fn mean(&self) -> f64 {
        self.atoms.iter().sum::<f64>() / self.atoms.len() as f64
    }

    /// Distribution of `scale * X + shift`.
    pub fn affine(&self, scale: f64, shift: f64) -> Result<Self> {
        Self::new(self.atoms.iter().map(|x| scale * x + shift).collect())
    }
}

/// Order `p` of a Wasserstein metric.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum WassersteinOrder {
    Finite(f64),
    Infinity,
}

impl fmt::Display for WassersteinOrder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            WassersteinOrder::Finite(p) => write!(f, "{p}"),
            WassersteinOrder::Infinity => write!(f, "inf"),
        }
    }
}

impl FromStr for WassersteinOrder {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "inf" | "infinity" | "Inf" => Ok(WassersteinOrder::Infinity),
            _ => {
                let p: f64 = s
                    .parse()
                    .map_err(|_| Error::validation(format!("invalid wasserstein order '{s}'")))?;
                if p >= 1.0 && p.is_finite() {
                    Ok(WassersteinOrder::Finite(p))
                } else {
                    Err(Error::validation(format!("wasserstein order must be >= 1, got {p}")))
                }
            }
        }
    }
}

/// `d_p` between two quantile distributions with the same `M`.
pub fn wasserstein(
    d1: &QuantileDistribution,
    d2: &QuantileDistribution,
    p: WassersteinOrder,
) -> Result<f64> {
    if d1.m() != d2.m() {
        return Err(Error::validation(format!(
            "wasserstein needs equal atom counts, got {} and {}",
            d1.m(),
            d2.m()
        )));
    }
    let diffs = d1.atoms.iter().zip(&d2.atoms).map(|(x, y)| (x - y).abs());
    Ok(match p {
        WassersteinOrder::Infinity => diffs.fold(0.0, f64::max),
        WassersteinOrder::Finite(p) if p == 1.0 => diffs.sum::<f64>() / d1.m() as f64,
        WassersteinOrder::Finite(p) => {
            (diffs.map(|d| d.powf(p)).sum::<f64>() / d1.m() as f64).powf(1.0 / p)
        }
    })
}

/// One quantile distribution per `(state, action)`, all with the same `M`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "ValueTableDoc", try_from = "ValueTableDoc")]
pub struct ValueTable {
    n_states: usize,
    n_actions: usize,
    m: usize,
    dists: Vec<QuantileDistribution>,
}

/// JSON layout of a [`ValueTable`]: `{M, states, actions, atoms[s][a][i]}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ValueTableDoc {
    #[serde(rename = "M")]
    pub m: usize,
    pub states: usize,
    pub actions: usize,
    pub atoms: Vec<Vec<Vec<f64>>>,
}

impl From<ValueTable> for ValueTableDoc {
    fn from(t: ValueTable) -> Self {
        let atoms = (0..t.n_states)
            .map(|s| (0..t.n_actions).map(|a| t.get(s, a).atoms.clone()).collect())
            .collect();
        ValueTableDoc { m: t.m, states: t.n_states, actions: t.n_actions, atoms }
    }
}

impl TryFrom<ValueTableDoc> for ValueTable {
    type Error = Error;

    fn try_from(doc: ValueTableDoc) -> Result<Self> {
        if doc.atoms.len() != doc.states {
            return Err(Error::validation(format!(
                "value table lists {} states, header says {}",
                doc.atoms.len(),
                doc.states
            )));
        }
        let mut dists = Vec::with_capacity(doc.states * doc.actions);
        for (s, row) in doc.atoms.into_iter().enumerate() {
            if row.len() != doc.actions {
                return Err(Error::validation(format!(
                    "value table state {s} lists {} actions, header says {}",
                    row.len(),
                    doc.actions
                )));
            }
            for (a, atoms) in row.into_iter().enumerate() {
                if atoms.len() != doc.m {
                    return Err(Error::validation(format!(
                        "value table pair ({s}, {a}) has {} atoms, header says {}",
                        atoms.len(),
                        doc.m
                    )));
                }
                dists.push(QuantileDistribution::new(atoms)?);
            }
        }
        ValueTable::from_dists(doc.states, doc.actions, dists)
    }
}

impl ValueTable {
    pub fn zeros(n_states: usize, n_actions: usize, m: usize) -> Self {
        ValueTable {
            n_states,
            n_actions,
            m,
            dists: vec![QuantileDistribution::constant(0.0, m); n_states * n_actions],
        }
    }

    /// Builds a table from distributions in row-major `(s, a)` order.
    pub fn from_dists(
        n_states: usize,
        n_actions: usize,
        dists: Vec<QuantileDistribution>,
    ) -> Result<Self> {
        if n_states == 0 || n_actions == 0 || dists.len() != n_states * n_actions {
            return Err(Error::validation(format!(
                "value table needs {}x{} distributions, got {}",
                n_states,
                n_actions,
                dists.len()
            )));
        }
        let m = dists[0].m();
        if dists.iter().any(|d| d.m() != m) {
            return Err(Error::validation("value table atoms counts are not uniform"));
        }
        Ok(ValueTable { n_states, n_actions, m, dists })
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn get(&self, s: usize, a: usize) -> &QuantileDistribution {
        &self.dists[s * self.n_actions + a]
    }

    pub fn dists(&self) -> &[QuantileDistribution] {
        &self.dists
    }

    /// Means per pair, row-major.
    pub fn means(&self) -> Vec<f64> {
        self.dists.iter().map(QuantileDistribution::mean).collect()
    }

    fn same_shape(&self, other: &ValueTable) -> bool {
        self.n_states == other.n_states && self.n_actions == other.n_actions && self.m == other.m
    }
}

/// `sup_{s,a} d_p(Z1(s,a), Z2(s,a))`.
pub fn sup_wasserstein(z1: &ValueTable, z2: &ValueTable, p: WassersteinOrder) -> Result<f64> {
    if !z1.same_shape(z2) {
        return Err(Error::validation(format!(
            "value table shapes differ: {}x{}x{} vs {}x{}x{}",
            z1.n_states, z1.n_actions, z1.m, z2.n_states, z2.n_actions, z2.m
        )));
    }
    z1.dists
        .iter()
        .zip(&z2.dists)
        .try_fold(0.0, |acc, (d1, d2)| Ok(f64::max(acc, wasserstein(d1, d2, p)?)))
}

/// How the successor's value is discounted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DiscountMode {
    /// `gamma' = eta` everywhere; the plain distributional Bellman operator.
    ConstantGamma,
    /// `gamma'(s', a') = min(1 - ell(s', a'), eta)`.
    TerminationAware,
    /// Termination-aware, plus a terminal branch: with probability
    /// `ell(s, a)` the value is just `r`. This is what a learner on logged
    /// sessions converges to, and what `mc_return_samples` samples.
    DataTerminal,
}

impl FromStr for DiscountMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant-gamma" => Ok(DiscountMode::ConstantGamma),
            "termination-aware" => Ok(DiscountMode::TerminationAware),
            "data-terminal" => Ok(DiscountMode::DataTerminal),
            _ => Err(Error::validation(format!(
                "unknown discount mode '{s}' (expected constant-gamma, termination-aware or data-terminal)"
            ))),
        }
    }
}

impl fmt::Display for DiscountMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DiscountMode::ConstantGamma => "constant-gamma",
            DiscountMode::TerminationAware => "termination-aware",
            DiscountMode::DataTerminal => "data-terminal",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiscountSpec {
    pub eta: f64,
    /// `ell[s][a]`; ignored in constant-gamma mode.
    pub ell: Vec<Vec<f64>>,
    pub mode: DiscountMode,
}

impl DiscountSpec {
    /// Uses the MDP's own termination probabilities as `ell`.
    pub fn from_mdp(mdp: &SyntheticMDP, eta: f64, mode: DiscountMode) -> Self {
        DiscountSpec { eta, ell: mdp.term_prob.clone(), mode }
    }

    pub fn gamma_prime(&self, s: usize, a: usize) -> f64 {
        match self.mode {
            DiscountMode::ConstantGamma => self.eta,
            _ => (1.0 - self.ell[s][a]).min(self.eta),
        }
    }

    /// Probability mass of the continuation branch at `(s, a)`.
    fn continuation(&self, s: usize, a: usize) -> f64 {
        match self.mode {
            DiscountMode::DataTerminal => 1.0 - self.ell[s][a],
            _ => 1.0,
        }
    }

    pub fn validate(&self, mdp: &SyntheticMDP) -> Result<()> {
        if !(self.eta > 0.0 && self.eta < 1.0) {
            return Err(Error::validation(format!("eta must be in (0, 1), got {}", self.eta)));
        }
        if self.mode == DiscountMode::ConstantGamma {
            return Ok(());
        }
        if self.ell.len() != mdp.n_states || self.ell.iter().any(|r| r.len() != mdp.n_actions) {
            return Err(Error::validation(format!(
                "ell table must be {}x{}",
                mdp.n_states, mdp.n_actions
            )));
        }
        for (s, row) in self.ell.iter().enumerate() {
            for (a, &l) in row.iter().enumerate() {
                if !(0.0..=1.0).contains(&l) {
                    return Err(Error::validation(format!(
                        "ell entry (state {s}, action {a}) = {l} outside [0, 1]"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Left-continuous inverse CDF of a weighted point mixture at the `m`
/// quantile midpoints. Sorts `items` in place; zero-weight items must already
/// be filtered out.
pub fn project_mixture(items: &mut [(f64, f64)], m: usize) -> Vec<f64> {
    items.sort_by(|x, y| x.0.total_cmp(&y.0));
    let mut atoms = Vec::with_capacity(m);
    let mut cum = 0.0;
    let mut next = 0;
    for tau in quantile_midpoints(m) {
        while next < items.len() && cum < tau {
            cum += items[next].1;
            next += 1;
        }
        // rounding can leave the total a hair below tau near the top
        atoms.push(items[next.max(1) - 1].0);
    }
    atoms
}

/// The weighted mixture that one operator application projects, for one pair.
pub fn mixture_at(
    z: &ValueTable,
    mdp: &SyntheticMDP,
    disc: &DiscountSpec,
    s: usize,
    a: usize,
) -> Vec<(f64, f64)> {
    let m = z.m();
    let click = mdp.click_prob[s][a];
    let cont = disc.continuation(s, a);
    let mut items = Vec::new();
    for (reward, w_r) in [(0.0, 1.0 - click), (1.0, click)] {
        if w_r <= 0.0 {
            continue;
        }
        if cont < 1.0 {
            items.push((reward, w_r * (1.0 - cont)));
        }
        if cont <= 0.0 {
            continue;
        }
        for (s2, &p_next) in mdp.transition[s][a].iter().enumerate() {
            if p_next <= 0.0 {
                continue;
            }
            for (a2, &p_act) in mdp.behavior_policy[s2].iter().enumerate() {
                if p_act <= 0.0 {
                    continue;
                }
                let gamma = disc.gamma_prime(s2, a2);
                let w = w_r * cont * p_next * p_act / m as f64;
                items.extend(z.get(s2, a2).atoms().iter().map(|theta| (reward + gamma * theta, w)));
            }
        }
    }
    items
}

fn check_shapes(z: &ValueTable, mdp: &SyntheticMDP, disc: &DiscountSpec) -> Result<()> {
    mdp.validate()?;
    disc.validate(mdp)?;
    if z.n_states != mdp.n_states || z.n_actions != mdp.n_actions {
        return Err(Error::validation(format!(
            "value table is {}x{}, mdp is {}x{}",
            z.n_states, z.n_actions, mdp.n_states, mdp.n_actions
        )));
    }
    Ok(())
}

fn apply_unchecked(z: &ValueTable, mdp: &SyntheticMDP, disc: &DiscountSpec) -> ValueTable {
    let dists = (0..z.n_states * z.n_actions)
        .into_par_iter()
        .map(|idx| {
            let (s, a) = (idx / z.n_actions, idx % z.n_actions);
            let mut items = mixture_at(z, mdp, disc, s, a);
            QuantileDistribution { atoms: project_mixture(&mut items, z.m) }
        })
        .collect();
    ValueTable { n_states: z.n_states, n_actions: z.n_actions, m: z.m, dists }
}

/// One application of the (termination-aware) distributional Bellman
/// operator followed by quantile projection.
pub fn apply_operator(z: &ValueTable, mdp: &SyntheticMDP, disc: &DiscountSpec) -> Result<ValueTable> {
    check_shapes(z, mdp, disc)?;
    Ok(apply_unchecked(z, mdp, disc))
}

#[derive(Debug, Clone)]
pub struct FixedPoint {
    pub table: ValueTable,
    /// `d_inf(Z_k, Z_{k+1})` for every application, in order.
    pub trace: Vec<f64>,
}

/// Iterates the operator from the all-zeros table until successive tables
/// are closer than `tol` in sup-`d_inf`.
pub fn solve_fixed_point(
    mdp: &SyntheticMDP,
    disc: &DiscountSpec,
    m: usize,
    tol: f64,
    max_iter: usize,
) -> Result<FixedPoint> {
    if !(tol > 0.0) {
        return Err(Error::validation(format!("tol must be > 0, got {tol}")));
    }
    if m == 0 {
        return Err(Error::validation("M must be >= 1"));
    }
    let mut z = ValueTable::zeros(mdp.n_states, mdp.n_actions, m);
    check_shapes(&z, mdp, disc)?;
    let mut trace = Vec::new();
    for _ in 0..max_iter {
        let next = apply_unchecked(&z, mdp, disc);
        let dist = sup_wasserstein(&z, &next, WassersteinOrder::Infinity)?;
        trace.push(dist);
        z = next;
        if dist < tol {
            return Ok(FixedPoint { table: z, trace });
        }
    }
    Err(Error::NonConvergence { trace })
}

/// Expected return per pair (row-major) from the linear Bellman equation
/// with the same discounting and branch structure as the operator.
pub fn expected_returns(mdp: &SyntheticMDP, disc: &DiscountSpec) -> Result<Vec<f64>> {
    mdp.validate()?;
    disc.validate(mdp)?;
    let (ns, na) = (mdp.n_states, mdp.n_actions);
    let n = ns * na;
    let mut system = DMatrix::<f64>::identity(n, n);
    let mut rhs = DVector::<f64>::zeros(n);
    for s in 0..ns {
        for a in 0..na {
            let row = s * na + a;
            rhs[row] = mdp.click_prob[s][a];
            let cont = disc.continuation(s, a);
            for s2 in 0..ns {
                for a2 in 0..na {
                    let w = cont
                        * mdp.transition[s][a][s2]
                        * mdp.behavior_policy[s2][a2]
                        * disc.gamma_prime(s2, a2);
                    system[(row, s2 * na + a2)] -= w;
                }
            }
        }
    }
    let solution = system
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::validation("expected-return system is singular"))?;
    Ok(solution.iter().copied().collect())
}

/// Draws a table with atoms uniform in `range`, sorted per pair.
pub fn random_table(
    n_states: usize,
    n_actions: usize,
    m: usize,
    range: (f64, f64),
    rng: &mut impl Rng,
) -> ValueTable {
    let dists = (0..n_states * n_actions)
        .map(|_| {
            let mut atoms: Vec<f64> =
                (0..m).map(|_| range.0 + (range.1 - range.0) * rng.random::<f64>()).collect();
            atoms.sort_by(f64::total_cmp);
            QuantileDistribution { atoms }
        })
        .collect();
    ValueTable { n_states, n_actions, m, dists }
}

#[derive(Debug, Clone)]
pub struct ContractionReport {
    /// `(d_before, d_after)` per trial.
    pub pairs: Vec<(f64, f64)>,
    /// Largest `after / before` over trials with `before > 0`.
    pub max_ratio: f64,
}

/// Distances between two tables before and after one operator application.
pub fn contraction_pair(
    z1: &ValueTable,
    z2: &ValueTable,
    mdp: &SyntheticMDP,
    disc: &DiscountSpec,
    p: WassersteinOrder,
) -> Result<(f64, f64)> {
    let before = sup_wasserstein(z1, z2, p)?;
    let after = sup_wasserstein(&apply_operator(z1, mdp, disc)?, &apply_operator(z2, mdp, disc)?, p)?;
    Ok((before, after))
}

/// Settings for [`check_contraction`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContractionConfig {
    pub trials: usize,
    pub m: usize,
    pub p: WassersteinOrder,
    /// Range of the random atoms; `None` means `[0, 1 / (1 - eta)]`.
    pub atom_range: Option<(f64, f64)>,
}

impl Default for ContractionConfig {
    fn default() -> Self {
        ContractionConfig { trials: 100, m: 32, p: WassersteinOrder::Infinity, atom_range: None }
    }
}

/// Empirical contraction check on random table pairs.
pub fn check_contraction(
    mdp: &SyntheticMDP,
    disc: &DiscountSpec,
    config: &ContractionConfig,
    seed: u64,
) -> Result<ContractionReport> {
    if config.trials == 0 {
        return Err(Error::validation("trials must be >= 1"));
    }
    let range = config.atom_range.unwrap_or((0.0, 1.0 / (1.0 - disc.eta)));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = Vec::with_capacity(config.trials);
    let mut max_ratio: f64 = 0.0;
    for _ in 0..config.trials {
        let z1 = random_table(mdp.n_states, mdp.n_actions, config.m, range, &mut rng);
        let z2 = random_table(mdp.n_states, mdp.n_actions, config.m, range, &mut rng);
        let (before, after) = contraction_pair(&z1, &z2, mdp, disc, config.p)?;
        if before > 0.0 {
            max_ratio = max_ratio.max(after / before);
        }
        pairs.push((before, after));
    }
    Ok(ContractionReport { pairs, max_ratio })
}
