//! Pipeline wiring for the `engage` command-line tool: learner variants,
//! simulator-based evaluation, and the variant ablation.

pub mod ablation;
pub mod eval;
pub mod variant;
