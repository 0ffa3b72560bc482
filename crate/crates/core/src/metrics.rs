//! Classification and distribution metrics over soft labels.

use serde::ser::{Serialize, SerializeMap, Serializer};
use serde::Deserialize;

use crate::corpus::ClassSet;
use crate::error::{Error, Result};

/// Index of the largest probability; ties go to the lowest index.
pub fn hard_label(probs: &[f64]) -> usize {
    let mut best = 0;
    for (c, &p) in probs.iter().enumerate() {
        if p > probs[best] {
            best = c;
        }
    }
    best
}

fn check_aligned<P: AsRef<[f64]>, G: AsRef<[f64]>>(preds: &[P], golds: &[G]) -> Result<()> {
    if preds.len() != golds.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} gold labels",
            preds.len(),
            golds.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::Empty("evaluation set".into()));
    }
    for (i, (p, g)) in preds.iter().zip(golds).enumerate() {
        check_lengths(p.as_ref(), g.as_ref()).map_err(|e| Error::at_index(i, e))?;
    }
    Ok(())
}

fn check_lengths(p: &[f64], q: &[f64]) -> Result<()> {
    if p.len() != q.len() {
        return Err(Error::Shape(format!(
            "distributions of length {} and {}",
            p.len(),
            q.len()
        )));
    }
    Ok(())
}

pub fn accuracy<P: AsRef<[f64]>, G: AsRef<[f64]>>(preds: &[P], golds: &[G]) -> Result<f64> {
    check_aligned(preds, golds)?;
    let hits = preds
        .iter()
        .zip(golds)
        .filter(|(p, g)| hard_label(p.as_ref()) == hard_label(g.as_ref()))
        .count();
    Ok(hits as f64 / preds.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, Deserialize)]
pub struct ClassScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Precision, recall and F1 of one class on hard labels. A ratio with a zero
/// denominator is 0.
pub fn class_f1<P: AsRef<[f64]>, G: AsRef<[f64]>>(preds: &[P], golds: &[G], class: usize) -> Result<ClassScores> {
    check_aligned(preds, golds)?;
    let num_classes = golds[0].as_ref().len();
    if class >= num_classes {
        return Err(Error::Label(format!(
            "unknown class index {class} for {num_classes} classes"
        )));
    }
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (p, g) in preds.iter().zip(golds) {
        let (p, g) = (hard_label(p.as_ref()), hard_label(g.as_ref()));
        match (p == class, g == class) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(ClassScores { precision, recall, f1 })
}

pub fn macro_f1<P: AsRef<[f64]>, G: AsRef<[f64]>>(preds: &[P], golds: &[G]) -> Result<f64> {
    check_aligned(preds, golds)?;
    let num_classes = golds[0].as_ref().len();
    let mut total = 0.0;
    for c in 0..num_classes {
        total += class_f1(preds, golds, c)?.f1;
    }
    Ok(total / num_classes as f64)
}

/// Jensen-Shannon divergence with base-2 logarithms, in [0, 1].
pub fn jsd(p: &[f64], q: &[f64]) -> Result<f64> {
    check_lengths(p, q)?;
    let kl_to_mid = |a: &[f64], b: &[f64]| -> f64 {
        a.iter()
            .zip(b)
            .filter(|(&x, _)| x > 0.0)
            .map(|(&x, &y)| x * (2.0 * x / (x + y)).log2())
            .sum()
    };
    let value = 0.5 * kl_to_mid(p, q) + 0.5 * kl_to_mid(q, p);
    // Rounding can push identical inputs a hair below zero.
    Ok(value.clamp(0.0, 1.0))
}

/// What the squared error sum is divided by.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MseDivisor {
    /// (1/|C|) sum over classes.
    #[default]
    Classes,
    /// Plain sum over classes.
    One,
}

pub fn distributional_mse(p: &[f64], q: &[f64], divisor: MseDivisor) -> Result<f64> {
    check_lengths(p, q)?;
    let sum: f64 = p.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(match divisor {
        MseDivisor::Classes => sum / p.len() as f64,
        MseDivisor::One => sum,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvaluationReport {
    pub classes: Vec<String>,
    pub instances: usize,
    pub accuracy: f64,
    pub per_class: Vec<ClassScores>,
    pub macro_f1: f64,
    pub jsd: f64,
    pub mse: f64,
}

impl EvaluationReport {
    pub fn class_scores(&self, name: &str) -> Option<&ClassScores> {
        let i = self.classes.iter().position(|c| c == name)?;
        self.per_class.get(i)
    }

    pub fn to_json_pretty(&self) -> String {
        let mut text = serde_json::to_string_pretty(self).expect("report serializes");
        text.push('\n');
        text
    }
}

/// Flat JSON: fixed scalar keys first, then `<class>_precision`,
/// `<class>_recall` and `<class>_f1` for each class in class-set order.
impl Serialize for EvaluationReport {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let mut map = serializer.serialize_map(Some(6 + 3 * self.classes.len()))?;
        map.serialize_entry("classes", &self.classes)?;
        map.serialize_entry("instances", &self.instances)?;
        map.serialize_entry("accuracy", &self.accuracy)?;
        map.serialize_entry("macro_f1", &self.macro_f1)?;
        map.serialize_entry("jsd", &self.jsd)?;
        map.serialize_entry("mse", &self.mse)?;
        for (name, scores) in self.classes.iter().zip(&self.per_class) {
            map.serialize_entry(&format!("{name}_precision"), &scores.precision)?;
            map.serialize_entry(&format!("{name}_recall"), &scores.recall)?;
            map.serialize_entry(&format!("{name}_f1"), &scores.f1)?;
        }
        map.end()
    }
}

pub fn evaluate<P: AsRef<[f64]>, G: AsRef<[f64]>>(
    preds: &[P],
    golds: &[G],
    classes: &ClassSet,
    divisor: MseDivisor,
) -> Result<EvaluationReport> {
    check_aligned(preds, golds)?;
    if golds[0].as_ref().len() != classes.len() {
        return Err(Error::Shape(format!(
            "labels have {} entries for {} classes",
            golds[0].as_ref().len(),
            classes.len()
        )));
    }
    let per_class = (0..classes.len())
        .map(|c| class_f1(preds, golds, c))
        .collect::<Result<Vec<_>>>()?;
    let n = preds.len() as f64;
    let mut jsd_sum = 0.0;
    let mut mse_sum = 0.0;
    for (p, g) in preds.iter().zip(golds) {
        jsd_sum += jsd(p.as_ref(), g.as_ref())?;
        mse_sum += distributional_mse(p.as_ref(), g.as_ref(), divisor)?;
    }
    Ok(EvaluationReport {
        classes: classes.names().to_vec(),
        instances: preds.len(),
        accuracy: accuracy(preds, golds)?,
        macro_f1: per_class.iter().map(|s| s.f1).sum::<f64>() / classes.len() as f64,
        per_class,
        jsd: jsd_sum / n,
        mse: mse_sum / n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_hot(c: usize, n: usize) -> Vec<f64> {
        let mut v = vec![0.0; n];
        v[c] = 1.0;
        v
    }

    #[test]
    fn hard_label_ties_go_low() {
        assert_eq!(hard_label(&[0.2, 0.5, 0.3]), 1);
        assert_eq!(hard_label(&[0.5, 0.5, 0.0]), 0);
        assert_eq!(hard_label(&[0.0, 0.0, 1.0]), 2);
    }

    #[test]
    fn accuracy_counts() {
        let golds: Vec<_> = [0, 1, 2, 0].iter().map(|&c| one_hot(c, 3)).collect();
        let preds: Vec<_> = [0, 1, 2, 1].iter().map(|&c| one_hot(c, 3)).collect();
        assert_eq!(accuracy(&preds, &golds).unwrap(), 0.75);
        assert_eq!(accuracy(&golds, &golds).unwrap(), 1.0);
        let wrong: Vec<_> = [1, 2, 0, 1].iter().map(|&c| one_hot(c, 3)).collect();
        assert_eq!(accuracy(&wrong, &golds).unwrap(), 0.0);
        assert!(accuracy::<Vec<f64>, Vec<f64>>(&[], &[]).is_err());
        assert!(accuracy(&preds[..2], &golds).is_err());
    }

    #[test]
    fn class_f1_hand_counted() {
        // Classes (B, PB, NB).
        let preds: Vec<_> = [0, 0, 2, 1, 0].iter().map(|&c| one_hot(c, 3)).collect();
        let golds: Vec<_> = [0, 2, 2, 1, 1].iter().map(|&c| one_hot(c, 3)).collect();
        let b = class_f1(&preds, &golds, 0).unwrap();
        assert!((b.precision - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(b.recall, 1.0);
        assert!((b.f1 - 0.5).abs() < 1e-12);
        assert!(class_f1(&preds, &golds, 3).is_err());
    }

    #[test]
    fn absent_class_scores_zero() {
        let preds = vec![one_hot(0, 3), one_hot(1, 3)];
        let s = class_f1(&preds, &preds, 2).unwrap();
        assert_eq!((s.precision, s.recall, s.f1), (0.0, 0.0, 0.0));
    }

    #[test]
    fn macro_f1_mean_of_classes() {
        let golds = vec![one_hot(0, 2), one_hot(1, 2), one_hot(1, 2)];
        assert_eq!(macro_f1(&golds, &golds).unwrap(), 1.0);
        // Class 0: P=1/2, R=1, F1=2/3. Class 1: P=1, R=1/2, F1=2/3.
        let preds = vec![one_hot(0, 2), one_hot(0, 2), one_hot(1, 2)];
        assert!((macro_f1(&preds, &golds).unwrap() - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn jsd_spot_values() {
        assert_eq!(jsd(&[0.3, 0.7], &[0.3, 0.7]).unwrap(), 0.0);
        assert!((jsd(&[1.0, 0.0], &[0.0, 1.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((jsd(&[0.5, 0.5], &[0.25, 0.75]).unwrap() - 0.048795).abs() < 1e-6);
        assert!(jsd(&[1.0], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn mse_values_and_divisor() {
        let c = MseDivisor::Classes;
        assert_eq!(distributional_mse(&[1.0, 0.0], &[0.0, 1.0], c).unwrap(), 1.0);
        assert_eq!(distributional_mse(&[0.7, 0.2, 0.1], &[0.7, 0.2, 0.1], c).unwrap(), 0.0);
        assert_eq!(
            distributional_mse(&[1.0, 0.0], &[0.0, 1.0], MseDivisor::One).unwrap(),
            2.0
        );
    }

    #[test]
    fn perfect_report_and_flat_json() {
        let classes = ClassSet::new(["B", "PB", "NB"]).unwrap();
        let golds = vec![vec![0.6, 0.3, 0.1], vec![0.1, 0.1, 0.8]];
        let report = evaluate(&golds, &golds, &classes, MseDivisor::Classes).unwrap();
        assert_eq!(report.accuracy, 1.0);
        assert_eq!(report.jsd, 0.0);
        assert_eq!(report.mse, 0.0);
        assert_eq!(report.class_scores("NB").unwrap().f1, 1.0);
        let json: serde_json::Value = serde_json::from_str(&report.to_json_pretty()).unwrap();
        assert_eq!(json["accuracy"], 1.0);
        assert_eq!(json["PB_recall"], 0.0);
        assert!(evaluate::<Vec<f64>, Vec<f64>>(&[], &[], &classes, MseDivisor::Classes).is_err());
    }
}
