//! Teacher training, joint pseudo-labeling, bootstrapped student training and
//! the training-strategy variants.

mod bootstrap;
mod run;
mod sink;
mod train;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::SoftLabel;
use crate::error::{Error, Result};

pub use bootstrap::{train_student_bootstrap, BootstrapReport, IterationRecord, StudentData};
pub use run::{build_vocabulary, encode_instance, encode_instances, Context, GoldFeatures, StrategyOutcome};
pub use sink::{NullSink, RunDir, RunSink};
pub use train::{
    batch_loss_and_grad, best_epoch, head_loss_and_grad, train_head, train_teacher, EpochRecord, LabeledSeqs,
    SelectionMetric, TrainingConfig,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoringConfig {
    pub gamma: f64,
    pub alpha: f64,
    pub iterations: usize,
}

impl Default for ScoringConfig {
    fn default() -> Self {
        Self {
            gamma: 0.5,
            alpha: 0.5,
            iterations: 5,
        }
    }
}

impl ScoringConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Config("gamma must lie in [0,1]".into()));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config("alpha must be positive".into()));
        }
        if self.iterations < 1 {
            return Err(Error::Config("iterations must be at least 1".into()));
        }
        Ok(())
    }

    /// λ for refinement index `i` (1 ≤ i ≤ N−1).
    pub fn lambda(&self, i: usize) -> f64 {
        i as f64 / self.iterations as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    Ours,
    GoldOnly,
    MaskedOnly,
    Combined,
    EqualW,
    RefGold,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 6] = [
        StrategyKind::Ours,
        StrategyKind::GoldOnly,
        StrategyKind::MaskedOnly,
        StrategyKind::Combined,
        StrategyKind::EqualW,
        StrategyKind::RefGold,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            StrategyKind::Ours => "ours",
            StrategyKind::GoldOnly => "gold_only",
            StrategyKind::MaskedOnly => "masked_only",
            StrategyKind::Combined => "combined",
            StrategyKind::EqualW => "equal_w",
            StrategyKind::RefGold => "ref_gold",
        }
    }

    pub fn needs_gold(self) -> bool {
        self != StrategyKind::Combined
    }

    pub fn needs_masked(self) -> bool {
        matches!(
            self,
            StrategyKind::Ours | StrategyKind::MaskedOnly | StrategyKind::EqualW | StrategyKind::RefGold
        )
    }

    pub fn trains_student(self) -> bool {
        matches!(self, StrategyKind::Ours | StrategyKind::EqualW | StrategyKind::RefGold)
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StrategyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        StrategyKind::ALL.into_iter().find(|k| k.as_str() == s).ok_or_else(|| {
            Error::Config(format!(
                "unknown strategy `{s}`; expected one of ours, gold_only, masked_only, combined, equal_w, ref_gold"
            ))
        })
    }
}

fn check_pair(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "score vectors of length {} and {}",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

/// ŷ = γ·ŷ_GT + (1−γ)·ŷ_MT.
pub fn joint_score(gold: &[f64], masked: &[f64], gamma: f64) -> Result<SoftLabel> {
    check_pair(gold, masked)?;
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::Config("gamma must lie in [0,1]".into()));
    }
    let probs = gold
        .iter()
        .zip(masked)
        .map(|(g, m)| gamma * g + (1.0 - gamma) * m)
        .collect();
    Ok(SoftLabel::from_distribution(probs))
}

/// ŷ = α[(1+λ)·ŷ_S + (1−λ)·ŷ_ref] with λ = i/N, for 1 ≤ i ≤ N−1.
pub fn refine_scores(student: &[f64], reference: &[f64], i: usize, n: usize, alpha: f64) -> Result<Vec<f64>> {
    check_pair(student, reference)?;
    if i < 1 || i >= n {
        return Err(Error::Config(format!(
            "refinement index {i} outside 1..={} for N = {n}",
            n.saturating_sub(1)
        )));
    }
    let lambda = i as f64 / n as f64;
    Ok(student
        .iter()
        .zip(reference)
        .map(|(s, r)| alpha * ((1.0 + lambda) * s + (1.0 - lambda) * r))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[f64], b: &[f64]) -> bool {
        a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-12)
    }

    #[test]
    fn joint_score_values() {
        let y = joint_score(&[0.8, 0.1, 0.1], &[0.4, 0.4, 0.2], 0.5).unwrap();
        assert!(close(y.probs(), &[0.6, 0.25, 0.15]));
        let g = [0.7, 0.2, 0.1];
        assert_eq!(joint_score(&g, &[0.1, 0.1, 0.8], 1.0).unwrap().probs(), &g);
        assert!(joint_score(&g, &g, 1.5).is_err());
        assert!(joint_score(&g, &[0.5, 0.5], 0.5).is_err());
    }

    #[test]
    fn refine_values() {
        let r = refine_scores(&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0], 1, 5, 0.5).unwrap();
        assert!(close(&r, &[0.6, 0.4, 0.0]));
        let r = refine_scores(&[0.5, 0.5, 0.0], &[0.0, 0.0, 1.0], 4, 5, 0.5).unwrap();
        assert!(close(&r, &[0.45, 0.45, 0.1]));
        assert!(refine_scores(&[1.0], &[1.0], 0, 5, 0.5).is_err());
        assert!(refine_scores(&[1.0], &[1.0], 5, 5, 0.5).is_err());
        assert!(refine_scores(&[1.0], &[1.0], 1, 1, 0.5).is_err());
    }

    #[test]
    fn strategy_names_round_trip() {
        for k in StrategyKind::ALL {
            assert_eq!(k.as_str().parse::<StrategyKind>().unwrap(), k);
        }
        assert!("full".parse::<StrategyKind>().is_err());
        assert!(!StrategyKind::GoldOnly.needs_masked());
        assert!(!StrategyKind::Combined.needs_gold());
    }

    #[test]
    fn scoring_validation() {
        let mut s = ScoringConfig::default();
        assert!(s.validate().is_ok());
        s.gamma = 1.5;
        assert_eq!(
            s.validate().unwrap_err().to_string(),
            "invalid configuration: gamma must lie in [0,1]"
        );
        s = ScoringConfig {
            iterations: 0,
            ..ScoringConfig::default()
        };
        assert!(s.validate().is_err());
        assert_eq!(ScoringConfig::default().lambda(2), 0.4);
    }
}
