//! Seeded synthetic soft-labeled dialogue corpus.
//!
//! Each instance has a hidden true class. Target utterances mix tokens from a
//! Zipfian background stream with keywords of the true class (and, less often,
//! of a confusing class). Soft labels come from `m` simulated annotators who
//! each report the true class, or with probability `annotator_noise` a
//! uniformly drawn other class.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{soft_label_from_annotations, ClassSet, DatasetBundle, DialogueInstance, Utterance};
use crate::error::{Error, Result};
use crate::seed::{self, Rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    /// Size of the labeled segment X_L.
    pub n_instances: usize,
    pub n_unlabeled: usize,
    pub n_dev: usize,
    pub n_test: usize,
    pub n_classes: usize,
    pub vocab_size: usize,
    pub annotators_per_instance: usize,
    pub annotator_noise: f64,
    /// Probability that a target token is a keyword of the true class.
    pub keyword_rate: f64,
    /// Probability that a target token is a keyword of some other class.
    pub confusion_rate: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn new(n_instances: usize, n_classes: usize, annotators: usize, noise: f64, seed: u64) -> Self {
        Self {
            n_instances,
            n_unlabeled: 0,
            n_dev: 0,
            n_test: 0,
            n_classes,
            vocab_size: (n_classes * 100).max(300),
            annotators_per_instance: annotators,
            annotator_noise: noise,
            keyword_rate: 0.2,
            confusion_rate: 0.1,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.n_classes < 2 {
            return fail("synthetic n_classes must be at least 2".into());
        }
        if self.annotators_per_instance < 1 {
            return fail("synthetic annotators_per_instance must be at least 1".into());
        }
        if self.vocab_size < self.n_classes * 10 {
            return fail(format!(
                "synthetic vocab_size must be at least n_classes x 10 = {}",
                self.n_classes * 10
            ));
        }
        for (name, p) in [
            ("annotator_noise", self.annotator_noise),
            ("keyword_rate", self.keyword_rate),
            ("confusion_rate", self.confusion_rate),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return fail(format!("synthetic {name} must lie in [0,1]"));
            }
        }
        if self.keyword_rate + self.confusion_rate > 1.0 {
            return fail("synthetic keyword_rate + confusion_rate must not exceed 1".into());
        }
        Ok(())
    }

    pub fn class_set(&self) -> ClassSet {
        let names: Vec<String> = match self.n_classes {
            2 => vec!["Valid".into(), "Invalid".into()],
            3 => vec!["B".into(), "PB".into(), "NB".into()],
            n => (0..n).map(|c| format!("C{c}")).collect(),
        };
        ClassSet::new(names).expect("generated class names are distinct")
    }

    fn keywords_per_class(&self) -> usize {
        (self.vocab_size / (4 * self.n_classes)).max(2)
    }
}

struct Generator<'a> {
    spec: &'a SyntheticSpec,
    classes: ClassSet,
    background: Vec<usize>,
    background_dist: WeightedIndex<f64>,
    keywords: usize,
}

impl<'a> Generator<'a> {
    fn new(spec: &'a SyntheticSpec) -> Self {
        let keywords = spec.keywords_per_class();
        let background: Vec<usize> = (keywords * spec.n_classes..spec.vocab_size).collect();
        let weights: Vec<f64> = (0..background.len()).map(|r| 1.0 / (r as f64 + 1.0)).collect();
        Self {
            spec,
            classes: spec.class_set(),
            background,
            background_dist: WeightedIndex::new(weights).expect("non-empty background"),
            keywords,
        }
    }

    fn word(id: usize) -> String {
        format!("w{id}")
    }

    fn background_word(&self, rng: &mut Rng) -> String {
        Self::word(self.background[self.background_dist.sample(rng)])
    }

    fn keyword(&self, class: usize, rng: &mut Rng) -> String {
        Self::word(class * self.keywords + rng.random_range(0..self.keywords))
    }

    fn other_class(&self, class: usize, rng: &mut Rng) -> usize {
        let k = rng.random_range(0..self.spec.n_classes - 1);
        if k >= class {
            k + 1
        } else {
            k
        }
    }

    fn utterance(&self, rng: &mut Rng) -> String {
        let len = rng.random_range(4..=8);
        let mut words: Vec<String> = (0..len).map(|_| self.background_word(rng)).collect();
        words.push(".".into());
        words.join(" ")
    }

    fn target(&self, class: usize, rng: &mut Rng) -> String {
        let len = rng.random_range(5..=9);
        let mut words = Vec::with_capacity(len + 1);
        for _ in 0..len {
            let u: f64 = rng.random();
            let word = if u < self.spec.keyword_rate {
                self.keyword(class, rng)
            } else if u < self.spec.keyword_rate + self.spec.confusion_rate {
                let other = self.other_class(class, rng);
                self.keyword(other, rng)
            } else {
                self.background_word(rng)
            };
            words.push(word);
        }
        words.push("?".into());
        words.join(" ")
    }

    fn instance(&self, id: String, labeled: bool, rng: &mut Rng) -> DialogueInstance {
        let class = rng.random_range(0..self.spec.n_classes);
        let turns = rng.random_range(2..=3);
        let history = (0..turns)
            .map(|t| {
                let speaker = if (turns - t) % 2 == 1 { "user" } else { "system" };
                Utterance::new(speaker, self.utterance(rng))
            })
            .collect();
        let target = self.target(class, rng);
        // Votes are drawn for unlabeled instances too so that the stream does
        // not depend on which segment an instance lands in.
        let votes: Vec<&str> = (0..self.spec.annotators_per_instance)
            .map(|_| {
                let vote = if rng.random::<f64>() < self.spec.annotator_noise {
                    self.other_class(class, rng)
                } else {
                    class
                };
                self.classes.names()[vote].as_str()
            })
            .collect();
        let label =
            labeled.then(|| soft_label_from_annotations(&votes, &self.classes).expect("votes are in the class set"));
        DialogueInstance {
            id,
            source_id: None,
            history,
            target,
            label,
        }
    }

    fn segment(&self, prefix: &str, count: usize, labeled: bool) -> Vec<DialogueInstance> {
        let mut rng = seed::rng_for(self.spec.seed, &format!("synthetic-{prefix}"));
        (0..count)
            .map(|i| self.instance(format!("{prefix}{i:06}"), labeled, &mut rng))
            .collect()
    }
}

/// Generates labeled, unlabeled, dev and test segments. Deterministic given
/// the spec; each segment has its own random stream.
pub fn generate_synthetic_corpus(spec: &SyntheticSpec) -> Result<DatasetBundle> {
    spec.validate()?;
    let generator = Generator::new(spec);
    let mut bundle = DatasetBundle::new(generator.classes.clone());
    bundle.labeled = generator.segment("L", spec.n_instances, true);
    bundle.unlabeled = generator.segment("U", spec.n_unlabeled, false);
    bundle.dev = generator.segment("D", spec.n_dev, true);
    bundle.test = generator.segment("T", spec.n_test, true);
    Ok(bundle)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hundred_instances_all_valid() {
        let bundle = generate_synthetic_corpus(&SyntheticSpec::new(100, 3, 15, 0.2, 7)).unwrap();
        assert_eq!(bundle.labeled.len(), 100);
        for instance in &bundle.labeled {
            let label = instance.label.as_ref().unwrap();
            assert!((label.probs().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        bundle.validate().unwrap();
    }

    #[test]
    fn zero_noise_gives_one_hot() {
        let bundle = generate_synthetic_corpus(&SyntheticSpec::new(50, 3, 15, 0.0, 1)).unwrap();
        for instance in &bundle.labeled {
            let probs = instance.label.as_ref().unwrap().probs();
            assert_eq!(probs.iter().filter(|p| **p == 1.0).count(), 1);
            assert_eq!(probs.iter().filter(|p| **p == 0.0).count(), 2);
        }
    }

    #[test]
    fn deterministic() {
        let mut spec = SyntheticSpec::new(20, 3, 5, 0.3, 11);
        spec.n_unlabeled = 10;
        let a = generate_synthetic_corpus(&spec).unwrap();
        let b = generate_synthetic_corpus(&spec).unwrap();
        assert_eq!(a.labeled, b.labeled);
        assert_eq!(a.unlabeled, b.unlabeled);
    }

    #[test]
    fn segments_use_independent_streams() {
        let mut spec = SyntheticSpec::new(20, 3, 5, 0.3, 11);
        let a = generate_synthetic_corpus(&spec).unwrap();
        spec.n_unlabeled = 50;
        let b = generate_synthetic_corpus(&spec).unwrap();
        assert_eq!(a.labeled, b.labeled);
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(generate_synthetic_corpus(&SyntheticSpec::new(10, 1, 5, 0.1, 0)).is_err());
        assert!(generate_synthetic_corpus(&SyntheticSpec::new(10, 3, 0, 0.1, 0)).is_err());
        assert!(generate_synthetic_corpus(&SyntheticSpec::new(10, 3, 5, 1.5, 0)).is_err());
        let mut spec = SyntheticSpec::new(10, 3, 5, 0.1, 0);
        spec.vocab_size = 29;
        assert!(generate_synthetic_corpus(&spec).is_err());
    }

    #[test]
    fn labels_converge_to_perturbation_distribution() {
        let noise = 0.25;
        let mut spec = SyntheticSpec::new(60, 3, 1000, noise, 3);
        spec.n_dev = 0;
        let bundle = generate_synthetic_corpus(&spec).unwrap();
        let expected_true = 1.0 - noise;
        let expected_other = noise / 2.0;
        for instance in &bundle.labeled {
            let probs = instance.label.as_ref().unwrap().probs();
            let top = crate::metrics::hard_label(probs);
            for (c, p) in probs.iter().enumerate() {
                let expected = if c == top { expected_true } else { expected_other };
                // 4 sigma of a binomial proportion with m = 1000.
                assert!((p - expected).abs() < 0.055, "{probs:?}");
            }
        }
        // Averaged over instances the agreement is tight.
        let mut mean = [0.0f64; 2];
        for instance in &bundle.labeled {
            let probs = instance.label.as_ref().unwrap().probs();
            let top = crate::metrics::hard_label(probs);
            mean[0] += probs[top];
            mean[1] += probs
                .iter()
                .enumerate()
                .filter(|(c, _)| *c != top)
                .map(|(_, p)| p)
                .sum::<f64>()
                / 2.0;
        }
        let n = bundle.labeled.len() as f64;
        assert!((mean[0] / n - expected_true).abs() < 0.02);
        assert!((mean[1] / n - expected_other).abs() < 0.02);
    }
}
