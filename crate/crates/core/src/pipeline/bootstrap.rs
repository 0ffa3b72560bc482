//! Student training on a frozen encoder with iterative label refinement.

use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::train::{best_epoch, train_head, EpochRecord, TrainingConfig};
use super::{refine_scores, RunSink, ScoringConfig};
use crate::classifier::{predict_features, ModelParams, Role};
use crate::corpus::SoftLabel;
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::seed;

/// Student inputs on the frozen encoder: `[CLS]` features of X_L followed by
/// those of A_U, with their current labels.
#[derive(Debug, Clone)]
pub struct StudentData {
    pub features: Array2<f64>,
    /// X_L labels followed by the G_L labels.
    pub labels: Vec<SoftLabel>,
    /// Rows `num_gold..` are the pseudo-labeled A_U instances.
    pub num_gold: usize,
    /// ŷ_ref on A_U used by the refinement (Masked or Gold Teacher).
    pub reference: Vec<SoftLabel>,
    pub dev_features: Array2<f64>,
    pub dev_labels: Vec<SoftLabel>,
}

impl StudentData {
    fn validate(&self) -> Result<()> {
        let n = self.features.nrows();
        if n == 0 {
            return Err(Error::Empty("student training set".into()));
        }
        if self.labels.len() != n || self.num_gold > n || self.reference.len() != n - self.num_gold {
            return Err(Error::Shape(format!(
                "student set: {n} feature rows, {} labels, {} gold, {} reference scores",
                self.labels.len(),
                self.num_gold,
                self.reference.len()
            )));
        }
        if self.dev_features.nrows() != self.dev_labels.len() {
            return Err(Error::Shape("dev features and labels are not aligned".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    /// λ of the refinement applied after this iteration, if any.
    pub lambda: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapReport {
    pub iterations: Vec<IterationRecord>,
}

impl BootstrapReport {
    pub fn lambdas(&self) -> Vec<f64> {
        self.iterations.iter().filter_map(|r| r.lambda).collect()
    }

    pub fn refinements(&self) -> usize {
        self.lambdas().len()
    }
}

/// Runs `scoring.iterations` rounds of `training.epochs` epochs. After every
/// round but the last the student rescores A_U and every G_L label becomes
/// α[(1+λ)ŷ_S + (1−λ)ŷ_ref]. Each round starts from the dev-best head of the
/// previous one with fresh optimizer state. The encoder is never modified.
#[allow(clippy::too_many_arguments)]
pub fn train_student_bootstrap(
    mut data: StudentData,
    student: ModelParams,
    scoring: &ScoringConfig,
    training: &TrainingConfig,
    weights: &LossWeights,
    shuffle_seed: u64,
    name: &str,
    sink: &mut dyn RunSink,
) -> Result<(ModelParams, BootstrapReport)> {
    if student.role() != Role::Student || !student.encoder_frozen() {
        return Err(Error::Config(
            "bootstrap requires a student with a frozen encoder".into(),
        ));
    }
    scoring.validate()?;
    data.validate()?;
    let n = scoring.iterations;
    let mut student = student;
    let mut report = BootstrapReport {
        iterations: Vec::with_capacity(n),
    };
    let mut lines = Vec::new();
    for i in 0..n {
        let iter_seed = seed::derive_seed(shuffle_seed, &format!("iteration-{i}"));
        let (head, epochs) = train_head(
            &data.features,
            &data.labels,
            student.head.clone(),
            training,
            weights,
            &data.dev_features,
            &data.dev_labels,
            iter_seed,
        )?;
        student.head = head;
        sink.checkpoint(&format!("{name}-iter{i}"), &student)?;
        let mut record = IterationRecord {
            iteration: i,
            best_epoch: best_epoch(&epochs, training.selection),
            epochs,
            lambda: None,
        };
        if i + 1 < n {
            let pseudo = data.features.slice(s![data.num_gold.., ..]).to_owned();
            let scores = predict_features(&student.head, &pseudo)?;
            for (j, (pred, reference)) in scores.iter().zip(&data.reference).enumerate() {
                let refined = refine_scores(pred.probs.probs(), reference.probs(), i + 1, n, scoring.alpha)?;
                data.labels[data.num_gold + j] = normalized(refined);
            }
            record.lambda = Some(scoring.lambda(i + 1));
            log::info!(
                "{name}: refined {} pseudo-labels with lambda {}",
                scores.len(),
                scoring.lambda(i + 1)
            );
        }
        for e in &record.epochs {
            lines.push(json!({
                "iteration": i,
                "epoch": e.epoch,
                "train_loss": e.train_loss,
                "dev_accuracy": e.dev_accuracy,
                "dev_macro_f1": e.dev_macro_f1,
            }));
        }
        lines.push(json!({
            "iteration": i,
            "best_epoch": record.best_epoch,
            "lambda": record.lambda,
        }));
        report.iterations.push(record);
    }
    sink.metrics(name, &lines)?;
    Ok((student, report))
}

/// Refined scores sum to 2α; with α = 0.5 this is already a distribution and
/// is left untouched.
fn normalized(scores: Vec<f64>) -> SoftLabel {
    let sum: f64 = scores.iter().sum();
    if (sum - 1.0).abs() <= 1e-9 {
        SoftLabel::from_distribution(scores)
    } else {
        SoftLabel::from_distribution(scores.into_iter().map(|v| v / sum).collect())
    }
}
