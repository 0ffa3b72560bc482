//! Classification head g = W₂ tanh(W₁h + b₁) + b₂ on the `[CLS]` vector and
//! full-model parameter containers.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::corpus::SoftLabel;
use crate::encoder::{check_ids, encode_cls_batch, EncoderParams, TokenSequence};
use crate::error::{Error, Result};
use crate::losses::softmax;
use crate::seed::Rng;

/// Head parameters. Weights are stored `out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

impl HeadParams {
    pub fn zeros(hidden: usize, num_classes: usize) -> Self {
        Self {
            w1: Array2::zeros((hidden, hidden)),
            b1: Array1::zeros(hidden),
            w2: Array2::zeros((num_classes, hidden)),
            b2: Array1::zeros(num_classes),
        }
    }

    pub fn hidden(&self) -> usize {
        self.w1.ncols()
    }

    pub fn num_classes(&self) -> usize {
        self.w2.nrows()
    }

    pub fn tensors(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        [
            ("head.w1", self.w1.as_slice(), self.w1.shape()),
            ("head.w2", self.w2.as_slice(), self.w2.shape()),
        ]
        .into_iter()
        .chain([
            ("head.b1", self.b1.as_slice(), self.b1.shape()),
            ("head.b2", self.b2.as_slice(), self.b2.shape()),
        ])
        .map(|(n, d, s)| (n.to_string(), s.to_vec(), d.expect("standard layout")))
        .collect()
    }

    /// Mutable views in the same order as [`HeadParams::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            self.w1.as_slice_mut().expect("standard layout"),
            self.w2.as_slice_mut().expect("standard layout"),
            self.b1.as_slice_mut().expect("standard layout"),
            self.b2.as_slice_mut().expect("standard layout"),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.hidden();
        let c = self.num_classes();
        if self.w1.nrows() != d || self.b1.len() != d || self.w2.ncols() != d || self.b2.len() != c {
            return Err(Error::Shape(format!(
                "head shapes w1 {:?}, b1 {}, w2 {:?}, b2 {}",
                self.w1.dim(),
                self.b1.len(),
                self.w2.dim(),
                self.b2.len()
            )));
        }
        if self.tensors().iter().any(|(_, _, t)| t.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFinite("classification head".into()));
        }
        Ok(())
    }
}

/// W₁, W₂ uniform in ±1/√fan_in, biases zero.
pub fn init_head(hidden: usize, num_classes: usize, rng: &mut Rng) -> Result<HeadParams> {
    if hidden == 0 || num_classes == 0 {
        return Err(Error::Config(format!(
            "head dimensions must be positive, got d={hidden}, classes={num_classes}"
        )));
    }
    let mut head = HeadParams::zeros(hidden, num_classes);
    let bound = 1.0 / (hidden as f64).sqrt();
    head.w1.mapv_inplace(|_| rng.random_range(-bound..=bound));
    head.w2.mapv_inplace(|_| rng.random_range(-bound..=bound));
    Ok(head)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    GoldTeacher,
    MaskedTeacher,
    Student,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::GoldTeacher => "gold_teacher",
            Role::MaskedTeacher => "masked_teacher",
            Role::Student => "student",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Role {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gold_teacher" => Ok(Role::GoldTeacher),
            "masked_teacher" => Ok(Role::MaskedTeacher),
            "student" => Ok(Role::Student),
            other => Err(Error::Config(format!("unknown role `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub encoder: EncoderParams,
    pub head: HeadParams,
    role: Role,
    encoder_frozen: bool,
}

impl ModelParams {
    /// A teacher model with a trainable encoder.
    pub fn teacher(role: Role, encoder: EncoderParams, head: HeadParams) -> Result<Self> {
        if role == Role::Student {
            return Err(Error::Config("use inherit_encoder to build a student".into()));
        }
        let model = Self {
            encoder,
            head,
            role,
            encoder_frozen: false,
        };
        model.validate()?;
        Ok(model)
    }

    pub(crate) fn from_parts(
        encoder: EncoderParams,
        head: HeadParams,
        role: Role,
        encoder_frozen: bool,
    ) -> Result<Self> {
        let model = Self {
            encoder,
            head,
            role,
            encoder_frozen,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn encoder_frozen(&self) -> bool {
        self.encoder_frozen
    }

    pub fn num_classes(&self) -> usize {
        self.head.num_classes()
    }

    pub fn validate(&self) -> Result<()> {
        if self.role == Role::Student && !self.encoder_frozen {
            return Err(Error::Config("a student model must have a frozen encoder".into()));
        }
        self.encoder.validate()?;
        self.head.validate()?;
        if self.head.hidden() != self.encoder.config.hidden {
            return Err(Error::Shape(format!(
                "head expects d={}, encoder has d={}",
                self.head.hidden(),
                self.encoder.config.hidden
            )));
        }
        Ok(())
    }
}

/// Builds a student whose encoder is a deep copy of the teacher's, frozen.
/// The head is taken from `student_head` unchanged.
pub fn inherit_encoder(student_head: HeadParams, gold_teacher: &ModelParams) -> Result<ModelParams> {
    if student_head.hidden() != gold_teacher.encoder.config.hidden {
        return Err(Error::Config(format!(
            "student head expects d={}, gold teacher encoder has d={}",
            student_head.hidden(),
            gold_teacher.encoder.config.hidden
        )));
    }
    ModelParams::from_parts(gold_teacher.encoder.clone(), student_head, Role::Student, true)
}

/// Replaces a student's encoder with the teacher's, keeping its head.
pub fn reinherit(student: &ModelParams, gold_teacher: &ModelParams) -> Result<ModelParams> {
    let (a, b) = (&student.encoder.config, &gold_teacher.encoder.config);
    if (a.vocab_size, a.hidden, a.layers) != (b.vocab_size, b.hidden, b.layers) {
        return Err(Error::Config(format!(
            "encoder configuration mismatch: student {a:?}, gold teacher {b:?}"
        )));
    }
    inherit_encoder(student.head.clone(), gold_teacher)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub logits: Array1<f64>,
    pub probs: SoftLabel,
    pub cls: Array1<f64>,
}

/// Intermediate values of a batched head forward pass.
#[derive(Debug, Clone)]
pub struct HeadCache {
    pub activation: Array2<f64>,
    pub logits: Array2<f64>,
}

/// Head forward over a `batch x d` matrix of `[CLS]` vectors.
pub fn head_forward(head: &HeadParams, cls: ArrayView2<'_, f64>) -> HeadCache {
    let mut z = cls.dot(&head.w1.t());
    z += &head.b1;
    let activation = z.mapv(f64::tanh);
    let mut logits = activation.dot(&head.w2.t());
    logits += &head.b2;
    HeadCache { activation, logits }
}

/// Accumulates head gradients and returns dL/dh.
pub fn head_backward(
    head: &HeadParams,
    cls: ArrayView2<'_, f64>,
    cache: &HeadCache,
    d_logits: &Array2<f64>,
    grads: &mut HeadParams,
) -> Array2<f64> {
    grads.w2 += &d_logits.t().dot(&cache.activation);
    grads.b2 += &d_logits.sum_axis(Axis(0));
    let mut dz = d_logits.dot(&head.w2);
    dz.zip_mut_with(&cache.activation, |g, &a| *g *= 1.0 - a * a);
    grads.w1 += &dz.t().dot(&cls);
    grads.b1 += &dz.sum_axis(Axis(0));
    dz.dot(&head.w1)
}

fn predictions_from(head: &HeadParams, cls: &Array2<f64>) -> Result<Vec<Prediction>> {
    let cache = head_forward(head, cls.view());
    cache
        .logits
        .rows()
        .into_iter()
        .zip(cls.rows())
        .enumerate()
        .map(|(i, (logits, h))| {
            if logits.iter().any(|v| !v.is_finite()) {
                return Err(Error::at_index(i, Error::NonFinite("classifier logits".into())));
            }
            let probs = SoftLabel::from_distribution(softmax(logits).to_vec());
            Ok(Prediction {
                logits: logits.to_owned(),
                probs,
                cls: h.to_owned(),
            })
        })
        .collect()
}

/// Predictions from precomputed `[CLS]` features.
pub fn predict_features(head: &HeadParams, cls: &Array2<f64>) -> Result<Vec<Prediction>> {
    if cls.ncols() != head.hidden() {
        return Err(Error::Shape(format!(
            "features of width {} for a head with d={}",
            cls.ncols(),
            head.hidden()
        )));
    }
    predictions_from(head, cls)
}

pub fn classify(x: &TokenSequence, params: &ModelParams) -> Result<Prediction> {
    check_ids(&params.encoder.config, x.ids())?;
    let cls = encode_cls_batch(&params.encoder, &[x])?;
    Ok(predictions_from(&params.head, &cls)?.remove(0))
}

/// Predictions for many inputs, in input order. Errors carry the index of the
/// offending instance.
pub fn predict_batch(instances: &[TokenSequence], params: &ModelParams) -> Result<Vec<Prediction>> {
    if instances.is_empty() {
        return Ok(Vec::new());
    }
    let refs: Vec<&TokenSequence> = instances.iter().collect();
    let cls = encode_cls_batch(&params.encoder, &refs)?;
    predictions_from(&params.head, &cls)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{pack_sequence, EncoderConfig};
    use crate::seed::rng_for;

    fn encoder(d: usize) -> EncoderParams {
        let config = EncoderConfig {
            vocab_size: 20,
            max_len: 12,
            hidden: d,
            layers: 1,
            heads: 2,
            ffn: 2 * d,
        };
        EncoderParams::init(config, &mut rng_for(5, "enc")).unwrap()
    }

    fn model(d: usize, c: usize) -> ModelParams {
        let head = init_head(d, c, &mut rng_for(5, "head")).unwrap();
        ModelParams::teacher(Role::GoldTeacher, encoder(d), head).unwrap()
    }

    fn inputs() -> Vec<TokenSequence> {
        vec![
            pack_sequence(&[5, 6, 7], &[8, 9], 12).unwrap(),
            pack_sequence(&[10], &[11, 12, 13, 14], 12).unwrap(),
            pack_sequence(&[15, 16], &[17], 12).unwrap(),
        ]
    }

    #[test]
    fn head_shapes_and_seeding() {
        let head = init_head(4, 3, &mut rng_for(1, "h")).unwrap();
        assert_eq!(head.w1.dim(), (4, 4));
        assert_eq!(head.b1.len(), 4);
        assert_eq!(head.w2.dim(), (3, 4));
        assert_eq!(head.b2.len(), 3);
        assert_eq!(head, init_head(4, 3, &mut rng_for(1, "h")).unwrap());
        assert!(init_head(4, 0, &mut rng_for(1, "h")).is_err());
    }

    #[test]
    fn zero_head_is_uniform() {
        let mut m = model(8, 3);
        m.head = HeadParams::zeros(8, 3);
        let p = classify(&inputs()[0], &m).unwrap();
        for v in p.probs.probs() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn bias_only_head_matches_softmax() {
        let mut m = model(8, 3);
        m.head = HeadParams::zeros(8, 3);
        m.head.b2 = ndarray::array![10.0, 0.0, 0.0];
        let p = classify(&inputs()[1], &m).unwrap();
        let e10 = 10f64.exp();
        let z = e10 + 2.0;
        assert!((p.probs.probs()[0] - e10 / z).abs() < 1e-12);
        assert!((p.probs.probs()[1] - 1.0 / z).abs() < 1e-12);
        assert!((p.probs.probs()[0] - 0.99991).abs() < 1e-5);
    }

    #[test]
    fn batch_equals_single_calls() {
        let m = model(8, 3);
        let batch = predict_batch(&inputs(), &m).unwrap();
        for (x, p) in inputs().iter().zip(&batch) {
            assert_eq!(&classify(x, &m).unwrap(), p);
            assert!((p.probs.probs().iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert_eq!(
                p.probs.argmax(),
                crate::metrics::hard_label(p.logits.as_slice().unwrap())
            );
        }
        assert!(predict_batch(&[], &m).unwrap().is_empty());
    }

    #[test]
    fn batch_errors_carry_index() {
        let m = model(8, 3);
        let mut xs = inputs();
        xs.push(pack_sequence(&[99], &[5], 12).unwrap());
        match predict_batch(&xs, &m).unwrap_err() {
            Error::AtIndex { index, .. } => assert_eq!(index, 3),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn inheritance_deep_copies() {
        let mut teacher = model(8, 3);
        let head = init_head(8, 3, &mut rng_for(9, "s")).unwrap();
        let student = inherit_encoder(head.clone(), &teacher).unwrap();
        assert_eq!(student.encoder, teacher.encoder);
        assert!(student.encoder_frozen());
        assert_eq!(student.role(), Role::Student);
        assert_eq!(student.head, head);
        teacher.encoder.final_bias[0] += 1.0;
        assert_ne!(student.encoder, teacher.encoder);
        assert!(inherit_encoder(HeadParams::zeros(4, 3), &teacher).is_err());
        let other = model(16, 3);
        assert!(reinherit(&student, &other).is_err());
    }

    #[test]
    fn role_round_trip() {
        for r in [Role::GoldTeacher, Role::MaskedTeacher, Role::Student] {
            assert_eq!(r.as_str().parse::<Role>().unwrap(), r);
        }
        assert!("teacher".parse::<Role>().is_err());
    }
}
