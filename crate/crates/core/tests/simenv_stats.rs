//! Statistical checks of the session simulator against closed forms.

use std::collections::BTreeMap;

use engage_core::simenv::{
    empirical_termination_rate, generate_logs, mc_return_samples, random_mdp, RandomMdpConfig,
    SyntheticMDP, Transition,
};
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn session_lengths(logs: &[Transition]) -> Vec<usize> {
    let mut lengths: BTreeMap<u64, usize> = BTreeMap::new();
    for t in logs {
        *lengths.entry(t.session_id).or_default() += 1;
    }
    lengths.into_values().collect()
}

#[test]
fn mean_session_length_is_inverse_termination() {
    let mdp = SyntheticMDP::single(0.5, 0.5);
    let logs = generate_logs(&mdp, 1_000_000, 3).unwrap();
    let lengths = session_lengths(&logs);
    assert_eq!(lengths.len(), 1_000_000);
    let mean = lengths.iter().sum::<usize>() as f64 / lengths.len() as f64;
    assert!((mean - 2.0).abs() <= 0.01, "mean length {mean}");
}

#[test]
fn session_length_passes_geometric_goodness_of_fit() {
    for (seed, ell) in [(11u64, 0.5), (12, 0.2), (13, 0.35)] {
        let mdp = SyntheticMDP::single(0.3, ell);
        let n = 100_000;
        let lengths = session_lengths(&generate_logs(&mdp, n, seed).unwrap());
        // bins 1..k plus a tail bin, each with expected count >= 5
        let pmf = |k: usize| (1.0 - ell).powi(k as i32 - 1) * ell;
        let mut k_max = 1;
        while n as f64 * (1.0 - ell).powi(k_max as i32) >= 5.0 && n as f64 * pmf(k_max + 1) >= 5.0 {
            k_max += 1;
        }
        let mut observed = vec![0usize; k_max + 1];
        for &len in &lengths {
            observed[len.min(k_max + 1) - 1] += 1;
        }
        let mut expected: Vec<f64> = (1..=k_max).map(|k| n as f64 * pmf(k)).collect();
        expected.push(n as f64 * (1.0 - ell).powi(k_max as i32));
        let stat: f64 = observed
            .iter()
            .zip(&expected)
            .map(|(&o, &e)| (o as f64 - e).powi(2) / e)
            .sum();
        let dof = (expected.len() - 1) as f64;
        let p_value = 1.0 - ChiSquared::new(dof).unwrap().cdf(stat);
        assert!(p_value > 0.001, "ell {ell}: chi2 {stat} on {dof} dof, p = {p_value}");
    }
}

#[test]
fn monte_carlo_return_mean_matches_closed_form() {
    let mdp = SyntheticMDP::single(1.0, 0.5);
    let samples = mc_return_samples(&mdp, 0, 0, 0.95, 1_000_000, 5).unwrap();
    let mean = samples.iter().sum::<f64>() / samples.len() as f64;
    assert!((mean - 4.0 / 3.0).abs() <= 0.01, "mean {mean}");
}

#[test]
fn deterministic_single_state_return_is_one() {
    let mdp = SyntheticMDP::single(1.0, 1.0);
    let samples = mc_return_samples(&mdp, 0, 0, 0.9, 1000, 0).unwrap();
    assert!(samples.iter().all(|&g| g == 1.0));
}

#[test]
fn termination_rates_converge_to_configured_table() {
    let mut mdp = random_mdp(&RandomMdpConfig::new(3, 2), 8);
    mdp.term_prob = vec![vec![0.3; 2]; 3];
    let logs = generate_logs(&mdp, 1_000_000, 21).unwrap();
    let rates = empirical_termination_rate(&logs).unwrap();
    assert_eq!(rates.len(), 6);
    for ((s, a), rate) in rates {
        assert!((rate - 0.3).abs() <= 0.01, "({s},{a}): {rate}");
    }
}

#[test]
fn click_rates_follow_click_table() {
    let mdp = random_mdp(&RandomMdpConfig::new(2, 2), 4);
    let logs = generate_logs(&mdp, 200_000, 2).unwrap();
    let mut clicks: BTreeMap<(usize, usize), (usize, usize)> = BTreeMap::new();
    for t in &logs {
        let e = clicks.entry((t.state, t.action)).or_default();
        e.0 += usize::from(t.reward);
        e.1 += 1;
    }
    for ((s, a), (c, n)) in clicks {
        let p = mdp.click_prob[s][a];
        let se = (p * (1.0 - p) / n as f64).sqrt();
        assert!((c as f64 / n as f64 - p).abs() <= 5.0 * se, "({s},{a})");
    }
}

#[test]
fn same_seed_gives_identical_logs() {
    let mdp = random_mdp(&RandomMdpConfig::new(4, 3), 1);
    let a = serde_json::to_string(&generate_logs(&mdp, 2000, 9).unwrap()).unwrap();
    let b = serde_json::to_string(&generate_logs(&mdp, 2000, 9).unwrap()).unwrap();
    let c = serde_json::to_string(&generate_logs(&mdp, 2000, 10).unwrap()).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}
