//! Engagement scores and blended rankings `g_b + w * g`.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::qrlearn::EngagementModel;

/// Mean of the value-head outputs.
pub fn mean_of(quantiles: &[f64]) -> f64 {
    quantiles.iter().sum::<f64>() / quantiles.len() as f64
}

/// Anything that can score a `(state, action)` pair.
pub trait EngagementScorer {
    fn engagement(&self, state: usize, action: usize) -> Result<f64>;
}

impl EngagementScorer for EngagementModel {
    fn engagement(&self, state: usize, action: usize) -> Result<f64> {
        engagement_score(self, state, action)
    }
}

/// `g(s, a)`: the expectation of the learned value distribution.
pub fn engagement_score(model: &EngagementModel, state: usize, action: usize) -> Result<f64> {
    Ok(mean_of(&model.forward(state, action)?.0))
}

/// Scores held in a row-major `states x actions` table.
#[derive(Debug, Clone, PartialEq)]
pub struct TableScorer {
    pub n_actions: usize,
    pub scores: Vec<f64>,
}

impl EngagementScorer for TableScorer {
    fn engagement(&self, state: usize, action: usize) -> Result<f64> {
        if action >= self.n_actions {
            return Err(Error::validation(format!("action {action} out of range")));
        }
        self.scores
            .get(state * self.n_actions + action)
            .copied()
            .ok_or_else(|| Error::validation(format!("state {state} out of range")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub action: usize,
    pub base: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredItem {
    pub action: usize,
    pub base: f64,
    pub engagement: f64,
    pub combined: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankRequest {
    pub state: usize,
    pub candidates: Vec<Candidate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankResponse {
    pub items: Vec<ScoredItem>,
}

/// Orders candidates by `base + w * engagement`, descending; ties go to the
/// smaller action id.
pub fn rank<S: EngagementScorer + ?Sized>(
    state: usize,
    candidates: &[Candidate],
    scorer: &S,
    w: f64,
) -> Result<Vec<ScoredItem>> {
    if candidates.is_empty() {
        return Err(Error::validation("rank needs at least one candidate"));
    }
    if !w.is_finite() {
        return Err(Error::validation(format!("w must be finite, got {w}")));
    }
    let mut seen = BTreeSet::new();
    for c in candidates {
        if !seen.insert(c.action) {
            return Err(Error::validation(format!("duplicate candidate action {}", c.action)));
        }
    }
    let mut items = candidates
        .iter()
        .map(|c| {
            let engagement = scorer.engagement(state, c.action)?;
            Ok(ScoredItem { action: c.action, base: c.base, engagement, combined: c.base + w * engagement })
        })
        .collect::<Result<Vec<_>>>()?;
    items.sort_by(|x, y| y.combined.total_cmp(&x.combined).then(x.action.cmp(&y.action)));
    Ok(items)
}

pub fn rank_request<S: EngagementScorer + ?Sized>(req: &RankRequest, scorer: &S, w: f64) -> Result<RankResponse> {
    Ok(RankResponse { items: rank(req.state, &req.candidates, scorer, w)? })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn table(scores: Vec<f64>) -> TableScorer {
        TableScorer { n_actions: scores.len(), scores }
    }

    fn cands(bases: &[f64]) -> Vec<Candidate> {
        bases.iter().enumerate().map(|(action, &base)| Candidate { action, base }).collect()
    }

    #[test]
    fn mean_of_quantiles() {
        assert!((mean_of(&[0.2, 0.4, 0.6]) - 0.4).abs() < 1e-15);
        assert_eq!(mean_of(&[0.0; 5]), 0.0);
    }

    #[test]
    fn blend_hand_example() {
        let out = rank(0, &cands(&[1.0, 1.0]), &table(vec![0.4, 0.8]), 0.5).unwrap();
        assert_eq!(out[0].action, 1);
        assert_eq!(out[0].combined, 1.4);
        assert_eq!(out[1].combined, 1.2);
    }

    #[test]
    fn zero_weight_keeps_base_order() {
        let out = rank(0, &cands(&[0.3, 0.9, 0.1]), &table(vec![5.0, -1.0, 9.0]), 0.0).unwrap();
        assert_eq!(out.iter().map(|i| i.action).collect::<Vec<_>>(), vec![1, 0, 2]);
    }

    #[test]
    fn single_candidate() {
        let out = rank(0, &[Candidate { action: 2, base: 0.5 }], &table(vec![0.0, 0.0, 2.0]), 0.25).unwrap();
        assert_eq!(out, vec![ScoredItem { action: 2, base: 0.5, engagement: 2.0, combined: 1.0 }]);
    }

    #[test]
    fn ties_go_to_smaller_action() {
        let out = rank(0, &cands(&[1.0, 1.0, 1.0]), &table(vec![0.0; 3]), 1.0).unwrap();
        assert_eq!(out.iter().map(|i| i.action).collect::<Vec<_>>(), vec![0, 1, 2]);
    }

    #[test]
    fn invalid_requests() {
        let dup = [Candidate { action: 1, base: 0.0 }, Candidate { action: 1, base: 1.0 }];
        assert!(rank(0, &dup, &table(vec![0.0; 2]), 1.0).is_err());
        assert!(rank(0, &[], &table(vec![0.0; 2]), 1.0).is_err());
        assert!(rank(0, &cands(&[1.0]), &table(vec![0.0]), f64::NAN).is_err());
    }

    proptest! {
        #[test]
        fn common_base_shift_keeps_order(
            bases in prop::collection::vec(-10i32..10, 1..8),
            shift in -5i32..5,
            w in 0.0f64..3.0,
        ) {
            // integer-valued bases keep the shifted sums exact
            let n = bases.len();
            let bases: Vec<f64> = bases.into_iter().map(f64::from).collect();
            let scorer = table((0..n).map(|i| (i % 3) as f64).collect());
            let order = |b: &[f64]| rank(0, &cands(b), &scorer, w.round()).unwrap().iter().map(|i| i.action).collect::<Vec<_>>();
            let shifted: Vec<f64> = bases.iter().map(|b| b + f64::from(shift)).collect();
            prop_assert_eq!(order(&bases), order(&shifted));
        }

        #[test]
        fn equal_bases_follow_engagement(scores in prop::collection::vec(-100.0f64..100.0, 1..10), w in 0.01f64..5.0) {
            let out = rank(0, &cands(&vec![0.5; scores.len()]), &table(scores.clone()), w).unwrap();
            for pair in out.windows(2) {
                prop_assert!(pair[0].engagement >= pair[1].engagement);
            }
            prop_assert_eq!(out.clone(), rank(0, &cands(&vec![0.5; scores.len()]), &table(scores), w).unwrap());
        }
    }
}
