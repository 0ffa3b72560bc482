//! Dialogue instances, soft labels and dataset segments.

mod jsonl;
mod synthetic;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use jsonl::{load_jsonl_dataset, parse_jsonl, read_manifest, write_jsonl, write_manifest, Manifest};
pub use synthetic::{generate_synthetic_corpus, SyntheticSpec};

/// Tolerance on `|sum - 1|` for a label distribution to be accepted.
pub const LABEL_SUM_TOLERANCE: f64 = 1e-6;

/// Below this deviation a label is taken as already normalized and left
/// bit-for-bit untouched, which keeps JSONL round trips exact.
const RENORMALIZE_THRESHOLD: f64 = 1e-12;

/// Ordered class names. Shared by every label of a dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassSet(Arc<[String]>);

impl ClassSet {
    pub fn new<S: Into<String>>(names: impl IntoIterator<Item = S>) -> Result<Self> {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        if names.is_empty() {
            return Err(Error::Config("class set must not be empty".into()));
        }
        for (i, name) in names.iter().enumerate() {
            if name.is_empty() {
                return Err(Error::Config(format!("class {i} has an empty name")));
            }
            if names[..i].contains(name) {
                return Err(Error::Config(format!("duplicate class name `{name}`")));
            }
        }
        Ok(Self(names.into()))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.0
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.0.iter().position(|c| c == name)
    }
}

/// A probability vector over a [`ClassSet`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SoftLabel(Vec<f64>);

impl SoftLabel {
    /// Validates `probs` for a class set of size `num_classes`.
    ///
    /// Entries must lie in `[0, 1]` and sum to one within
    /// [`LABEL_SUM_TOLERANCE`]; small deviations are renormalized away.
    pub fn new(probs: Vec<f64>, num_classes: usize) -> Result<Self> {
        if probs.len() != num_classes {
            return Err(Error::Label(format!(
                "label has {} entries but the class set has {num_classes}",
                probs.len()
            )));
        }
        if let Some(p) = probs.iter().find(|p| !p.is_finite() || **p < 0.0 || **p > 1.0) {
            return Err(Error::Label(format!("entry {p} outside [0, 1]")));
        }
        let sum: f64 = probs.iter().sum();
        let deviation = (sum - 1.0).abs();
        if deviation > LABEL_SUM_TOLERANCE {
            return Err(Error::Label(format!(
                "label sum {} exceeds tolerance",
                (sum * 1e6).round() / 1e6
            )));
        }
        if deviation > RENORMALIZE_THRESHOLD {
            return Ok(Self(probs.into_iter().map(|p| p / sum).collect()));
        }
        Ok(Self(probs))
    }

    /// Wraps a vector that is a distribution by construction (softmax output,
    /// convex combination of distributions).
    pub(crate) fn from_distribution(probs: Vec<f64>) -> Self {
        debug_assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        Self(probs)
    }

    pub fn one_hot(index: usize, num_classes: usize) -> Self {
        let mut probs = vec![0.0; num_classes];
        probs[index] = 1.0;
        Self(probs)
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Index of the largest entry; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        crate::metrics::hard_label(&self.0)
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl AsRef<[f64]> for SoftLabel {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// Empirical vote distribution: `probs[c] = count(votes == c) / |votes|`.
pub fn soft_label_from_annotations<S: AsRef<str>>(votes: &[S], classes: &ClassSet) -> Result<SoftLabel> {
    if votes.is_empty() {
        return Err(Error::Label("annotation list is empty".into()));
    }
    let mut counts = vec![0usize; classes.len()];
    for vote in votes {
        let vote = vote.as_ref();
        let index = classes
            .index_of(vote)
            .ok_or_else(|| Error::Label(format!("unknown class `{vote}`")))?;
        counts[index] += 1;
    }
    let total = votes.len() as f64;
    Ok(SoftLabel(counts.into_iter().map(|c| c as f64 / total).collect()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Utterance {
    pub speaker: String,
    pub text: String,
}

impl Utterance {
    pub fn new(speaker: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            speaker: speaker.into(),
            text: text.into(),
        }
    }
}

/// A dialogue history and the target system utterance that follows it.
#[derive(Debug, Clone, PartialEq)]
pub struct DialogueInstance {
    pub id: String,
    /// Id of the original instance when this one is an augmentation.
    pub source_id: Option<String>,
    pub history: Vec<Utterance>,
    pub target: String,
    pub label: Option<SoftLabel>,
}

impl DialogueInstance {
    pub fn new(
        id: impl Into<String>,
        history: Vec<Utterance>,
        target: impl Into<String>,
        label: Option<SoftLabel>,
    ) -> Result<Self> {
        let instance = Self {
            id: id.into(),
            source_id: None,
            history,
            target: target.into(),
            label,
        };
        instance.validate()?;
        Ok(instance)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |message: &str| {
            Err(Error::Instance {
                id: self.id.clone(),
                message: message.into(),
            })
        };
        if self.history.is_empty() {
            return fail("history is empty");
        }
        if self.target.trim().is_empty() {
            return fail("target is empty");
        }
        Ok(())
    }

    pub fn label(&self) -> Result<&SoftLabel> {
        self.label.as_ref().ok_or_else(|| Error::Instance {
            id: self.id.clone(),
            message: "instance carries no label".into(),
        })
    }
}

/// The named data segments of one experiment.
#[derive(Debug, Clone)]
pub struct DatasetBundle {
    pub classes: ClassSet,
    /// X_L
    pub labeled: Vec<DialogueInstance>,
    /// X_U
    pub unlabeled: Vec<DialogueInstance>,
    /// A_U
    pub augmented_unlabeled: Vec<DialogueInstance>,
    /// B_L
    pub augmented_labeled: Vec<DialogueInstance>,
    /// G_L
    pub pseudo_labeled: Vec<DialogueInstance>,
    /// X_L ∪ G_L
    pub student_set: Vec<DialogueInstance>,
    pub dev: Vec<DialogueInstance>,
    pub test: Vec<DialogueInstance>,
}

impl DatasetBundle {
    pub fn new(classes: ClassSet) -> Self {
        Self {
            classes,
            labeled: Vec::new(),
            unlabeled: Vec::new(),
            augmented_unlabeled: Vec::new(),
            augmented_labeled: Vec::new(),
            pseudo_labeled: Vec::new(),
            student_set: Vec::new(),
            dev: Vec::new(),
            test: Vec::new(),
        }
    }

    /// Builds `X_L^(S) = X_L ∪ G_L` from the current segments.
    pub fn build_student_set(&mut self) {
        self.student_set = self.labeled.iter().chain(self.pseudo_labeled.iter()).cloned().collect();
    }

    /// Checks the labeling invariants of every segment.
    pub fn validate(&self) -> Result<()> {
        let labeled = [
            ("labeled", &self.labeled),
            ("augmented_labeled", &self.augmented_labeled),
            ("pseudo_labeled", &self.pseudo_labeled),
            ("student_set", &self.student_set),
            ("dev", &self.dev),
            ("test", &self.test),
        ];
        for (segment, instances) in labeled {
            for instance in instances.iter() {
                instance.validate()?;
                let label = instance.label().map_err(|e| Error::in_stage(segment, e))?;
                if label.len() != self.classes.len() {
                    return Err(Error::in_stage(
                        segment,
                        Error::Label(format!(
                            "instance `{}` has {} label entries, expected {}",
                            instance.id,
                            label.len(),
                            self.classes.len()
                        )),
                    ));
                }
            }
        }
        for (segment, instances) in [
            ("unlabeled", &self.unlabeled),
            ("augmented_unlabeled", &self.augmented_unlabeled),
        ] {
            for instance in instances.iter() {
                instance.validate()?;
                if instance.label.is_some() {
                    return Err(Error::in_stage(
                        segment,
                        Error::Instance {
                            id: instance.id.clone(),
                            message: "unlabeled segment carries a label".into(),
                        },
                    ));
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dbdc() -> ClassSet {
        ClassSet::new(["B", "PB", "NB"]).unwrap()
    }

    #[test]
    fn votes_become_frequencies() {
        let label = soft_label_from_annotations(&["B", "B", "NB", "PB"], &dbdc()).unwrap();
        assert_eq!(label.probs(), &[0.5, 0.25, 0.25]);
        let label = soft_label_from_annotations(&["B", "B", "B"], &dbdc()).unwrap();
        assert_eq!(label.probs(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn bad_votes_rejected() {
        let empty: [&str; 0] = [];
        assert!(soft_label_from_annotations(&empty, &dbdc()).is_err());
        assert!(soft_label_from_annotations(&["X"], &dbdc()).is_err());
    }

    #[test]
    fn soft_label_validation() {
        let ok = SoftLabel::new(vec![0.6, 0.3, 0.1], 3).unwrap();
        assert_eq!(ok.probs(), &[0.6, 0.3, 0.1]);
        let err = SoftLabel::new(vec![0.6, 0.3, 0.3], 3).unwrap_err();
        assert!(err.to_string().contains("label sum 1.2 exceeds tolerance"), "{err}");
        assert!(SoftLabel::new(vec![0.5, 0.5], 3).is_err());
        assert!(SoftLabel::new(vec![1.5, -0.5, 0.0], 3).is_err());

        let near = SoftLabel::new(vec![0.5 + 4e-7, 0.5], 2).unwrap();
        assert!((near.probs().iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn instance_invariants() {
        let h = vec![Utterance::new("U", "hi")];
        assert!(DialogueInstance::new("a", h.clone(), "ok", None).is_ok());
        assert!(DialogueInstance::new("a", vec![], "ok", None).is_err());
        assert!(DialogueInstance::new("a", h, "  ", None).is_err());
    }

    #[test]
    fn class_set_rejects_duplicates() {
        assert!(ClassSet::new(["a", "a"]).is_err());
        assert!(ClassSet::new(Vec::<String>::new()).is_err());
    }
}
