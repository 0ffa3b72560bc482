//! `[MASK]`-token augmentation.
//!
//! Every non-special token is replaced by `[MASK]` independently with
//! probability ρ. Each augmented copy draws from a stream keyed by
//! (seed, source id, copy index), so the output does not depend on the order
//! or parallelism in which instances are processed.

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{DialogueInstance, Utterance};
use crate::encoder::{split_words, TokenSequence, MASK_TOKEN};
use crate::error::{Error, Result};
use crate::seed::{self, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentationSpec {
    pub replacement_prob: f64,
    pub copies_per_instance: usize,
    pub seed: u64,
}

impl AugmentationSpec {
    pub fn new(replacement_prob: f64, copies_per_instance: usize, seed: u64) -> Result<Self> {
        let spec = Self {
            replacement_prob,
            copies_per_instance,
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.replacement_prob) {
            return Err(Error::Config("replacement probability must lie in [0,1]".into()));
        }
        if self.copies_per_instance < 1 {
            return Err(Error::Config("copies per instance must be at least 1".into()));
        }
        Ok(())
    }
}

/// Independent Bernoulli(ρ) draw per non-special position.
pub fn draw_mask(special: &[bool], rho: f64, rng: &mut Rng) -> Vec<bool> {
    special
        .iter()
        .map(|&s| {
            // Draw for specials too so positions stay aligned with the stream.
            let hit = rng.random::<f64>() < rho;
            hit && !s
        })
        .collect()
}

/// Replaces each non-special token of `tokens` with `[MASK]` with probability ρ.
pub fn mask_augment_instance(tokens: &TokenSequence, rho: f64, rng: &mut Rng) -> TokenSequence {
    let positions = draw_mask(tokens.special_mask(), rho, rng);
    tokens.with_masked(&positions)
}

fn mask_text(text: &str, rho: f64, rng: &mut Rng) -> String {
    let words = split_words(text);
    let special: Vec<bool> = words.iter().map(|w| w == MASK_TOKEN).collect();
    let positions = draw_mask(&special, rho, rng);
    words
        .iter()
        .zip(positions)
        .map(|(w, m)| if m { MASK_TOKEN } else { w.as_str() })
        .collect::<Vec<_>>()
        .join(" ")
}

/// One masked copy of a dialogue instance, masking at word-token level.
pub fn augment_dialogue(instance: &DialogueInstance, rho: f64, seed: u64, copy: usize) -> DialogueInstance {
    let mut rng = seed::rng_for(seed, &format!("{}#{copy}", instance.id));
    let history = instance
        .history
        .iter()
        .map(|u| Utterance::new(u.speaker.clone(), mask_text(&u.text, rho, &mut rng)))
        .collect();
    let target = mask_text(&instance.target, rho, &mut rng);
    DialogueInstance {
        id: format!("{}~{copy}", instance.id),
        source_id: Some(instance.id.clone()),
        history,
        target,
        label: instance.label.clone(),
    }
}

fn augment_all(instances: &[DialogueInstance], spec: &AugmentationSpec) -> Vec<DialogueInstance> {
    instances
        .par_iter()
        .flat_map_iter(|instance| {
            (0..spec.copies_per_instance)
                .map(move |copy| augment_dialogue(instance, spec.replacement_prob, spec.seed, copy))
        })
        .collect()
}

/// Builds A_U: `k` unlabeled masked copies of every instance of X_U.
pub fn build_augmented_unlabeled(
    unlabeled: &[DialogueInstance],
    spec: &AugmentationSpec,
) -> Result<Vec<DialogueInstance>> {
    spec.validate()?;
    if unlabeled.is_empty() {
        return Err(Error::Empty("unlabeled set X_U".into()));
    }
    let mut out = augment_all(unlabeled, spec);
    for instance in &mut out {
        instance.label = None;
    }
    Ok(out)
}

/// Builds B_L: `k` masked copies of every instance of X_L, each keeping its
/// source label.
pub fn build_augmented_labeled(labeled: &[DialogueInstance], spec: &AugmentationSpec) -> Result<Vec<DialogueInstance>> {
    spec.validate()?;
    if labeled.is_empty() {
        return Err(Error::Empty("labeled set X_L".into()));
    }
    for instance in labeled {
        instance.label()?;
    }
    Ok(augment_all(labeled, spec))
}

/// The Masked Teacher should see heavier masking than the unlabeled data.
/// Returns a warning message when that ordering does not hold.
pub fn check_masking_order(rho_labeled: f64, rho_unlabeled: f64) -> Option<String> {
    (rho_labeled <= rho_unlabeled).then(|| {
        format!(
            "rho_l = {rho_labeled} is not larger than rho_u = {rho_unlabeled}; \
             the masked teacher is expected to train on more heavily masked data"
        )
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::SoftLabel;
    use crate::encoder::{pack_sequence, MASK};

    fn instance(id: &str, label: Option<SoftLabel>) -> DialogueInstance {
        DialogueInstance::new(
            id,
            vec![
                Utterance::new("user", "the cat sat on the mat ."),
                Utterance::new("system", "why ?"),
            ],
            "because it was warm and soft",
            label,
        )
        .unwrap()
    }

    #[test]
    fn zero_and_one_probability() {
        let seq = pack_sequence(&[10, 11, 12], &[13, 14], 16).unwrap();
        let mut rng = seed::rng_for(1, "m");
        assert_eq!(mask_augment_instance(&seq, 0.0, &mut rng), seq);
        let all = mask_augment_instance(&seq, 1.0, &mut rng);
        for (i, (&id, &s)) in all.ids().iter().zip(all.special_mask()).enumerate() {
            if s {
                assert_eq!(id, seq.ids()[i]);
            } else {
                assert_eq!(id, MASK);
            }
        }
    }

    #[test]
    fn augmented_unlabeled_counts_and_lineage() {
        let xu: Vec<_> = (0..10).map(|i| instance(&format!("u{i}"), None)).collect();
        let spec = AugmentationSpec::new(0.15, 6, 3).unwrap();
        let au = build_augmented_unlabeled(&xu, &spec).unwrap();
        assert_eq!(au.len(), 60);
        assert!(au.iter().all(|a| a.label.is_none()));
        assert_eq!(au[7].source_id.as_deref(), Some("u1"));
        assert_eq!(build_augmented_unlabeled(&xu, &spec).unwrap(), au);
        assert!(build_augmented_unlabeled(&[], &spec).is_err());
    }

    #[test]
    fn single_copy_without_masking_preserves_tokens() {
        let xu = vec![instance("u0", None)];
        let spec = AugmentationSpec::new(0.0, 1, 3).unwrap();
        let au = build_augmented_unlabeled(&xu, &spec).unwrap();
        assert_eq!(au.len(), 1);
        assert_eq!(split_words(&au[0].target), split_words(&xu[0].target));
        assert_eq!(split_words(&au[0].history[0].text), split_words(&xu[0].history[0].text));
    }

    #[test]
    fn augmented_labeled_carries_labels() {
        let label = SoftLabel::new(vec![0.7, 0.2, 0.1], 3).unwrap();
        let xl = vec![instance("l0", Some(label.clone()))];
        let spec = AugmentationSpec::new(0.25, 6, 9).unwrap();
        let bl = build_augmented_labeled(&xl, &spec).unwrap();
        assert_eq!(bl.len(), 6);
        assert!(bl.iter().all(|b| b.label.as_ref() == Some(&label)));
        assert!(build_augmented_labeled(&[instance("x", None)], &spec).is_err());
    }

    #[test]
    fn masking_order_warning() {
        assert!(check_masking_order(0.10, 0.15).is_some());
        assert!(check_masking_order(0.25, 0.15).is_none());
    }

    #[test]
    fn text_masking_preserves_length() {
        let mut rng = seed::rng_for(5, "len");
        for _ in 0..50 {
            let out = mask_text("a b , c d e ?", 0.5, &mut rng);
            assert_eq!(split_words(&out).len(), 7);
        }
    }
}
