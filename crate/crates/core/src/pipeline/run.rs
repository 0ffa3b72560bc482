//! Strategy orchestration over one prepared dataset.

use ndarray::{concatenate, Array2, Axis};
use serde_json::json;

use super::bootstrap::{train_student_bootstrap, BootstrapReport, StudentData};
use super::train::{train_teacher, EpochRecord, LabeledSeqs};
use super::{joint_score, RunSink, StrategyKind};
use crate::classifier::{inherit_encoder, init_head, predict_batch, predict_features, ModelParams, Role};
use crate::config::PipelineConfig;
use crate::corpus::{ClassSet, DatasetBundle, DialogueInstance, SoftLabel};
use crate::encoder::{
    encode_cls_batch, pack_sequence, tokenize, EncoderConfig, EncoderParams, TokenSequence, Vocabulary,
};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, EvaluationReport};
use crate::seed::{derive_seed, rng_for, tags};

/// Vocabulary over the text of X_L and X_U.
pub fn build_vocabulary(bundle: &DatasetBundle, min_count: usize) -> Vocabulary {
    let texts = bundle
        .labeled
        .iter()
        .chain(&bundle.unlabeled)
        .flat_map(|i| i.history.iter().map(|u| u.text.as_str()).chain([i.target.as_str()]));
    Vocabulary::build(texts, min_count)
}

/// `[CLS] history [SEP] target` with all history utterances concatenated.
pub fn encode_instance(instance: &DialogueInstance, vocab: &Vocabulary, max_len: usize) -> Result<TokenSequence> {
    let history: Vec<u32> = instance.history.iter().flat_map(|u| tokenize(&u.text, vocab)).collect();
    let target = tokenize(&instance.target, vocab);
    pack_sequence(&history, &target, max_len).map_err(|e| Error::Instance {
        id: instance.id.clone(),
        message: e.to_string(),
    })
}

pub fn encode_instances(
    instances: &[DialogueInstance],
    vocab: &Vocabulary,
    max_len: usize,
) -> Result<Vec<TokenSequence>> {
    instances.iter().map(|i| encode_instance(i, vocab, max_len)).collect()
}

fn labels_of(instances: &[DialogueInstance]) -> Result<Vec<SoftLabel>> {
    instances.iter().map(|i| i.label().cloned()).collect()
}

#[derive(Debug, Clone, Default)]
struct Segment {
    seqs: Vec<TokenSequence>,
    labels: Vec<SoftLabel>,
}

impl Segment {
    fn labeled(instances: &[DialogueInstance], vocab: &Vocabulary, max_len: usize) -> Result<Self> {
        Ok(Self {
            seqs: encode_instances(instances, vocab, max_len)?,
            labels: labels_of(instances)?,
        })
    }

    fn view(&self) -> LabeledSeqs<'_> {
        LabeledSeqs {
            seqs: &self.seqs,
            labels: &self.labels,
        }
    }
}

/// `[CLS]` features under the Gold Teacher's encoder, which the student
/// inherits frozen.
#[derive(Debug, Clone)]
pub struct GoldFeatures {
    pub labeled: Array2<f64>,
    pub augmented_unlabeled: Array2<f64>,
    pub dev: Array2<f64>,
    pub test: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct StrategyOutcome {
    pub kind: StrategyKind,
    pub model: ModelParams,
    pub dev_predictions: Vec<SoftLabel>,
    pub test_predictions: Vec<SoftLabel>,
    pub dev_report: EvaluationReport,
    pub test_report: Option<EvaluationReport>,
    pub bootstrap: Option<BootstrapReport>,
    pub teacher_epochs: Option<Vec<EpochRecord>>,
}

impl StrategyOutcome {
    /// The test report when a test set exists, otherwise the dev report.
    pub fn report(&self) -> &EvaluationReport {
        self.test_report.as_ref().unwrap_or(&self.dev_report)
    }
}

/// A dataset bundle tokenized for one configuration.
#[derive(Debug, Clone)]
pub struct Context {
    pub config: PipelineConfig,
    pub bundle: DatasetBundle,
    pub vocab: Vocabulary,
    pub encoder_config: EncoderConfig,
    labeled: Segment,
    augmented_labeled: Segment,
    augmented_unlabeled: Vec<TokenSequence>,
    dev: Segment,
    test: Segment,
}

fn missing(segment: &str, hint: &str) -> Error {
    Error::Empty(format!("{segment} is missing; {hint}"))
}

impl Context {
    /// Tokenizes every present segment. A_U and B_L may be empty until
    /// augmentation has run.
    pub fn new(config: PipelineConfig, bundle: DatasetBundle) -> Result<Self> {
        config.validate()?;
        bundle.validate()?;
        if bundle.labeled.is_empty() {
            return Err(missing("labeled set X_L", "check the dataset"));
        }
        let vocab = build_vocabulary(&bundle, config.vocab_min_count);
        let max_len = config.max_len;
        let encoder_config = config.encoder_config(vocab.len());
        Ok(Self {
            labeled: Segment::labeled(&bundle.labeled, &vocab, max_len)?,
            augmented_labeled: Segment::labeled(&bundle.augmented_labeled, &vocab, max_len)?,
            augmented_unlabeled: encode_instances(&bundle.augmented_unlabeled, &vocab, max_len)?,
            dev: Segment::labeled(&bundle.dev, &vocab, max_len)?,
            test: Segment::labeled(&bundle.test, &vocab, max_len)?,
            config,
            bundle,
            vocab,
            encoder_config,
        })
    }

    pub fn classes(&self) -> &ClassSet {
        &self.bundle.classes
    }

    /// Token sequences of X_L and X_U, the masked-token pretraining corpus.
    pub fn pretraining_corpus(&self) -> Result<Vec<TokenSequence>> {
        let mut corpus = self.labeled.seqs.clone();
        corpus.extend(encode_instances(
            &self.bundle.unlabeled,
            &self.vocab,
            self.config.max_len,
        )?);
        Ok(corpus)
    }

    fn fresh_model(&self, role: Role, tag: &str, pretrained: Option<&EncoderParams>) -> Result<ModelParams> {
        let mut rng = rng_for(self.config.seed, tag);
        let encoder = match pretrained {
            Some(p) if p.config != self.encoder_config => {
                return Err(Error::Config(format!(
                    "pretrained encoder {:?} does not match {:?}",
                    p.config, self.encoder_config
                )))
            }
            Some(p) => p.clone(),
            None => EncoderParams::init(self.encoder_config, &mut rng)?,
        };
        let head = init_head(self.encoder_config.hidden, self.classes().len(), &mut rng)?;
        ModelParams::teacher(role, encoder, head)
    }

    fn record_teacher(sink: &mut dyn RunSink, name: &str, model: &ModelParams, records: &[EpochRecord]) -> Result<()> {
        let lines: Vec<_> = records.iter().map(|r| json!(r)).collect();
        sink.metrics(name, &lines)?;
        sink.checkpoint(name, model)
    }

    #[allow(clippy::too_many_arguments)]
    fn teacher(
        &self,
        name: &str,
        role: Role,
        init_tag: &str,
        shuffle_tag: &str,
        epochs: usize,
        data: LabeledSeqs<'_>,
        pretrained: Option<&EncoderParams>,
        sink: &mut dyn RunSink,
    ) -> Result<(ModelParams, Vec<EpochRecord>)> {
        let model = self.fresh_model(role, init_tag, pretrained)?;
        let (model, records) = train_teacher(
            data,
            model,
            &self.config.teacher_training(epochs),
            &self.config.loss_weights(),
            self.dev.view(),
            derive_seed(self.config.seed, shuffle_tag),
        )?;
        Self::record_teacher(sink, name, &model, &records)?;
        Ok((model, records))
    }

    /// Gold Teacher on X_L.
    pub fn train_gold(
        &self,
        pretrained: Option<&EncoderParams>,
        sink: &mut dyn RunSink,
    ) -> Result<(ModelParams, Vec<EpochRecord>)> {
        self.teacher(
            "gold_teacher",
            Role::GoldTeacher,
            tags::INIT_GOLD,
            tags::SHUFFLE_GOLD,
            self.config.teacher_epochs,
            self.labeled.view(),
            pretrained,
            sink,
        )
    }

    /// Masked Teacher on B_L.
    pub fn train_masked(
        &self,
        pretrained: Option<&EncoderParams>,
        sink: &mut dyn RunSink,
    ) -> Result<(ModelParams, Vec<EpochRecord>)> {
        if self.augmented_labeled.seqs.is_empty() {
            return Err(missing("augmented labeled set B_L", "run `augment` first"));
        }
        self.teacher(
            "masked_teacher",
            Role::MaskedTeacher,
            tags::INIT_MASKED,
            tags::SHUFFLE_MASKED,
            self.config.masked_epochs,
            self.augmented_labeled.view(),
            pretrained,
            sink,
        )
    }

    /// A fresh model on X_L ∪ B_L.
    pub fn train_combined(
        &self,
        pretrained: Option<&EncoderParams>,
        sink: &mut dyn RunSink,
    ) -> Result<(ModelParams, Vec<EpochRecord>)> {
        if self.augmented_labeled.seqs.is_empty() {
            return Err(missing("augmented labeled set B_L", "run `augment` first"));
        }
        let mut union = self.labeled.clone();
        union.seqs.extend(self.augmented_labeled.seqs.iter().cloned());
        union.labels.extend(self.augmented_labeled.labels.iter().cloned());
        self.teacher(
            "combined",
            Role::GoldTeacher,
            tags::INIT_COMBINED,
            tags::SHUFFLE_COMBINED,
            self.config.masked_epochs,
            union.view(),
            pretrained,
            sink,
        )
    }

    fn require_augmented_unlabeled(&self) -> Result<()> {
        if self.augmented_unlabeled.is_empty() {
            return Err(missing("augmented unlabeled set A_U", "run `augment` first"));
        }
        Ok(())
    }

    pub fn gold_features(&self, gold: &ModelParams) -> Result<GoldFeatures> {
        let cls = |seqs: &[TokenSequence]| -> Result<Array2<f64>> {
            let refs: Vec<&TokenSequence> = seqs.iter().collect();
            encode_cls_batch(&gold.encoder, &refs)
        };
        Ok(GoldFeatures {
            labeled: cls(&self.labeled.seqs)?,
            augmented_unlabeled: cls(&self.augmented_unlabeled)?,
            dev: cls(&self.dev.seqs)?,
            test: cls(&self.test.seqs)?,
        })
    }

    /// Masked Teacher scores on A_U.
    pub fn masked_scores(&self, masked: &ModelParams) -> Result<Vec<SoftLabel>> {
        self.require_augmented_unlabeled()?;
        Ok(predict_batch(&self.augmented_unlabeled, masked)?
            .into_iter()
            .map(|p| p.probs)
            .collect())
    }

    /// Gold Teacher scores on A_U from cached features.
    pub fn gold_scores(&self, gold: &ModelParams, features: &GoldFeatures) -> Result<Vec<SoftLabel>> {
        self.require_augmented_unlabeled()?;
        Ok(predict_features(&gold.head, &features.augmented_unlabeled)?
            .into_iter()
            .map(|p| p.probs)
            .collect())
    }

    /// G_L: every A_U instance labeled with γ·ŷ_GT + (1−γ)·ŷ_MT.
    pub fn assign_pseudo_labels(
        &self,
        gold_scores: &[SoftLabel],
        masked_scores: &[SoftLabel],
        gamma: f64,
    ) -> Result<Vec<DialogueInstance>> {
        self.require_augmented_unlabeled()?;
        if gold_scores.len() != self.augmented_unlabeled.len() || masked_scores.len() != gold_scores.len() {
            return Err(Error::Shape("teacher scores do not cover A_U".into()));
        }
        self.bundle
            .augmented_unlabeled
            .iter()
            .zip(gold_scores.iter().zip(masked_scores))
            .map(|(instance, (g, m))| {
                let mut labeled = instance.clone();
                labeled.label = Some(joint_score(g.probs(), m.probs(), gamma)?);
                Ok(labeled)
            })
            .collect()
    }

    fn evaluate_predictions(
        &self,
        dev: &[SoftLabel],
        test: &[SoftLabel],
    ) -> Result<(EvaluationReport, Option<EvaluationReport>)> {
        let divisor = self.config.mse_divisor;
        let dev_report = evaluate(dev, &self.dev.labels, self.classes(), divisor)?;
        let test_report = if self.test.labels.is_empty() {
            None
        } else {
            Some(evaluate(test, &self.test.labels, self.classes(), divisor)?)
        };
        Ok((dev_report, test_report))
    }

    pub fn outcome_for_model(
        &self,
        kind: StrategyKind,
        model: ModelParams,
        records: Option<Vec<EpochRecord>>,
    ) -> Result<StrategyOutcome> {
        let probs = |seqs: &[TokenSequence]| -> Result<Vec<SoftLabel>> {
            Ok(predict_batch(seqs, &model)?.into_iter().map(|p| p.probs).collect())
        };
        let dev_predictions = probs(&self.dev.seqs)?;
        let test_predictions = probs(&self.test.seqs)?;
        let (dev_report, test_report) = self.evaluate_predictions(&dev_predictions, &test_predictions)?;
        Ok(StrategyOutcome {
            kind,
            model,
            dev_predictions,
            test_predictions,
            dev_report,
            test_report,
            bootstrap: None,
            teacher_epochs: records,
        })
    }

    /// Student training for `ours`, `ref_gold` and `equal_w`. `pseudo_labels`
    /// are the G_L labels for the configured γ; `equal_w` recomputes them with
    /// γ = 0.5.
    #[allow(clippy::too_many_arguments)]
    pub fn train_student(
        &self,
        kind: StrategyKind,
        gold: &ModelParams,
        features: &GoldFeatures,
        gold_scores: &[SoftLabel],
        masked_scores: &[SoftLabel],
        pseudo_labels: &[SoftLabel],
        sink: &mut dyn RunSink,
    ) -> Result<StrategyOutcome> {
        if !kind.trains_student() {
            return Err(Error::Config(format!("strategy {kind} does not train a student")));
        }
        self.require_augmented_unlabeled()?;
        let mut scoring = self.config.scoring();
        let g_l: Vec<SoftLabel> = match kind {
            StrategyKind::EqualW => {
                scoring.gamma = 0.5;
                scoring.iterations = 1;
                gold_scores
                    .iter()
                    .zip(masked_scores)
                    .map(|(g, m)| joint_score(g.probs(), m.probs(), 0.5))
                    .collect::<Result<_>>()?
            }
            _ => pseudo_labels.to_vec(),
        };
        if g_l.len() != self.augmented_unlabeled.len() {
            return Err(Error::Shape(format!(
                "{} pseudo-labels for {} A_U instances",
                g_l.len(),
                self.augmented_unlabeled.len()
            )));
        }
        let reference = match kind {
            StrategyKind::RefGold => gold_scores.to_vec(),
            _ => masked_scores.to_vec(),
        };
        let mut labels = self.labeled.labels.clone();
        labels.extend(g_l);
        let data = StudentData {
            features: concatenate(Axis(0), &[features.labeled.view(), features.augmented_unlabeled.view()])
                .map_err(|e| Error::Shape(e.to_string()))?,
            labels,
            num_gold: self.labeled.labels.len(),
            reference,
            dev_features: features.dev.clone(),
            dev_labels: self.dev.labels.clone(),
        };
        let head = if self.config.student_head_from_gold {
            gold.head.clone()
        } else {
            init_head(
                self.encoder_config.hidden,
                self.classes().len(),
                &mut rng_for(self.config.seed, tags::INIT_STUDENT),
            )?
        };
        let student = inherit_encoder(head, gold)?;
        let name = format!("student-{kind}");
        let (student, report) = train_student_bootstrap(
            data,
            student,
            &scoring,
            &self.config.student_training(),
            &self.config.loss_weights(),
            derive_seed(self.config.seed, tags::SHUFFLE_STUDENT),
            &name,
            sink,
        )?;
        sink.checkpoint(&name, &student)?;
        let probs = |f: &Array2<f64>| -> Result<Vec<SoftLabel>> {
            Ok(predict_features(&student.head, f)?
                .into_iter()
                .map(|p| p.probs)
                .collect())
        };
        let dev_predictions = probs(&features.dev)?;
        let test_predictions = probs(&features.test)?;
        let (dev_report, test_report) = self.evaluate_predictions(&dev_predictions, &test_predictions)?;
        Ok(StrategyOutcome {
            kind,
            model: student,
            dev_predictions,
            test_predictions,
            dev_report,
            test_report,
            bootstrap: Some(report),
            teacher_epochs: None,
        })
    }

    /// Runs several strategies, training each teacher at most once.
    pub fn run_strategies(
        &self,
        kinds: &[StrategyKind],
        pretrained: Option<&EncoderParams>,
        sink: &mut dyn RunSink,
    ) -> Result<Vec<StrategyOutcome>> {
        let stage = |name: &'static str| move |e: Error| Error::in_stage(name, e);
        let needs_gold = kinds.iter().any(|k| k.needs_gold());
        let needs_masked = kinds.iter().any(|k| k.needs_masked());
        let needs_student = kinds.iter().any(|k| k.trains_student());
        let gold = if needs_gold {
            Some(self.train_gold(pretrained, sink).map_err(stage("train-teacher gold"))?)
        } else {
            None
        };
        let masked = if needs_masked {
            Some(
                self.train_masked(pretrained, sink)
                    .map_err(stage("train-teacher masked"))?,
            )
        } else {
            None
        };
        let mut student_inputs = None;
        if needs_student {
            let (gt, _) = gold.as_ref().expect("students need the gold teacher");
            let (mt, _) = masked.as_ref().expect("students need the masked teacher");
            let prepared = (|| -> Result<_> {
                let features = self.gold_features(gt)?;
                let gold_scores = self.gold_scores(gt, &features)?;
                let masked_scores = self.masked_scores(mt)?;
                let g_l = self.assign_pseudo_labels(&gold_scores, &masked_scores, self.config.gamma)?;
                let labels = labels_of(&g_l)?;
                Ok((features, gold_scores, masked_scores, labels))
            })()
            .map_err(stage("pseudo-label"))?;
            student_inputs = Some(prepared);
        }
        let mut outcomes = Vec::with_capacity(kinds.len());
        for &kind in kinds {
            let outcome = match kind {
                StrategyKind::GoldOnly => {
                    let (gt, records) = gold.clone().expect("trained above");
                    self.outcome_for_model(kind, gt, Some(records))
                }
                StrategyKind::MaskedOnly => {
                    let (mt, records) = masked.clone().expect("trained above");
                    self.outcome_for_model(kind, mt, Some(records))
                }
                StrategyKind::Combined => self
                    .train_combined(pretrained, sink)
                    .and_then(|(m, r)| self.outcome_for_model(kind, m, Some(r))),
                _ => {
                    let (gt, _) = gold.as_ref().expect("trained above");
                    let (features, gold_scores, masked_scores, labels) =
                        student_inputs.as_ref().expect("prepared above");
                    self.train_student(kind, gt, features, gold_scores, masked_scores, labels, sink)
                }
            }
            .map_err(|e| Error::in_stage(format!("strategy {kind}"), e))?;
            outcomes.push(outcome);
        }
        Ok(outcomes)
    }

    pub fn run_strategy(
        &self,
        kind: StrategyKind,
        pretrained: Option<&EncoderParams>,
        sink: &mut dyn RunSink,
    ) -> Result<StrategyOutcome> {
        Ok(self.run_strategies(&[kind], pretrained, sink)?.remove(0))
    }

    pub fn dev_labels(&self) -> &[SoftLabel] {
        &self.dev.labels
    }

    pub fn test_labels(&self) -> &[SoftLabel] {
        &self.test.labels
    }

    pub fn augmented_unlabeled_seqs(&self) -> &[TokenSequence] {
        &self.augmented_unlabeled
    }

    pub fn labeled_seqs(&self) -> &[TokenSequence] {
        &self.labeled.seqs
    }
}
