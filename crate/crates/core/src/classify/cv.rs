//! Stratified k-fold cross-validation.
//!
//! Each class is shuffled with the configured seed and dealt round-robin
//! into `k` folds. A fresh vocabulary and model are trained on the other
//! `k - 1` folds. Metrics are percentages computed per fold and then
//! averaged (F1 is the mean of per-fold F1, not F1 of the mean precision and
//! recall). Precision is 0 for a fold with no predicted positives, recall is
//! 0 for a fold with no actual positives.

use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{train, ClassifyError, LabeledMessage, Result, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metric {
    pub mean: f64,
    pub std_err: f64,
}

impl Metric {
    fn from_samples(v: &[f64]) -> Self {
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let std_err = if v.len() > 1 {
            let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
            (var / n).sqrt()
        } else {
            0.0
        };
        Metric { mean, std_err }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldMetrics {
    pub fold: usize,
    pub n_test: usize,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub k: usize,
    pub seed: u64,
    pub accuracy: Metric,
    pub precision: Metric,
    pub recall: Metric,
    pub f1: Metric,
    pub folds: Vec<FoldMetrics>,
}

impl fmt::Display for CvReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{}-fold cross validation (seed {})", self.k, self.seed)?;
        writeln!(
            f,
            "{:>16} {:>16} {:>16} {:>16}",
            "Accuracy", "F1", "Precision", "Recall"
        )?;
        let cell = |m: &Metric| format!("{:.2} ({:.2})", m.mean, m.std_err);
        writeln!(
            f,
            "{:>16} {:>16} {:>16} {:>16}",
            cell(&self.accuracy),
            cell(&self.f1),
            cell(&self.precision),
            cell(&self.recall)
        )
    }
}

/// Returns the fold index of every example.
pub fn stratified_folds(labels: &[u8], k: usize, seed: u64) -> Result<Vec<usize>> {
    if k < 2 {
        return Err(ClassifyError::Stratification(format!(
            "need k >= 2, got {k}"
        )));
    }
    if labels.len() < k {
        return Err(ClassifyError::Stratification(format!(
            "{} examples cannot fill {k} folds",
            labels.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assignment = vec![0; labels.len()];
    for class in [0u8, 1] {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        if members.len() < k {
            return Err(ClassifyError::Stratification(format!(
                "class {class} has {} examples, fewer than k = {k}",
                members.len()
            )));
        }
        members.shuffle(&mut rng);
        for (j, i) in members.into_iter().enumerate() {
            assignment[i] = j % k;
        }
    }
    Ok(assignment)
}

pub fn cross_validate(data: &[LabeledMessage], k: usize, config: &TrainConfig) -> Result<CvReport> {
    let labels: Vec<u8> = data.iter().map(|d| d.label).collect();
    let folds = stratified_folds(&labels, k, config.seed)?;
    let mut per_fold = Vec::with_capacity(k);
    for fold in 0..k {
        let (test, train_set): (Vec<_>, Vec<_>) =
            data.iter().zip(&folds).partition(|(_, f)| **f == fold);
        let train_set: Vec<LabeledMessage> =
            train_set.into_iter().map(|(d, _)| d.clone()).collect();
        let model = train(&train_set, config)?;
        let (mut tp, mut fp, mut tn, mut fn_) = (0usize, 0usize, 0usize, 0usize);
        for (d, _) in &test {
            let predicted = model.predict_proba(&d.message) > 0.5;
            match (predicted, d.label == 1) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, false) => tn += 1,
                (false, true) => fn_ += 1,
            }
        }
        let pct = |num: usize, den: usize| {
            if den == 0 {
                0.0
            } else {
                100.0 * num as f64 / den as f64
            }
        };
        let precision = pct(tp, tp + fp);
        let recall = pct(tp, tp + fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        per_fold.push(FoldMetrics {
            fold,
            n_test: test.len(),
            accuracy: pct(tp + tn, test.len()),
            precision,
            recall,
            f1,
        });
    }
    let col = |f: fn(&FoldMetrics) -> f64| {
        Metric::from_samples(&per_fold.iter().map(f).collect::<Vec<_>>())
    };
    Ok(CvReport {
        k,
        seed: config.seed,
        accuracy: col(|m| m.accuracy),
        precision: col(|m| m.precision),
        recall: col(|m| m.recall),
        f1: col(|m| m.f1),
        folds: per_fold,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{parse_timestamp, Message, TokenizedMessage};
    use crate::query::Query;
    use rand::Rng;

    fn example(i: usize, text: String, label: u8) -> LabeledMessage {
        let m = Message::new(
            format!("e{i}"),
            parse_timestamp("2010-06-01T00:00:00Z").unwrap(),
            "",
            text,
        );
        LabeledMessage::new(TokenizedMessage::new(m), label, &Query::gate()).unwrap()
    }

    #[test]
    fn folds_are_stratified() {
        let labels: Vec<u8> = (0..206).map(|i| u8::from(i < 160)).collect();
        let folds = stratified_folds(&labels, 10, 4).unwrap();
        for f in 0..10 {
            let pos = (0..206)
                .filter(|&i| folds[i] == f && labels[i] == 1)
                .count();
            let neg = (0..206)
                .filter(|&i| folds[i] == f && labels[i] == 0)
                .count();
            assert_eq!(pos, 16);
            assert!(neg == 4 || neg == 5);
        }
        assert_eq!(folds, stratified_folds(&labels, 10, 4).unwrap());
    }

    #[test]
    fn fold_feasibility() {
        let labels = [1, 1, 1, 1, 0, 0];
        assert!(matches!(
            stratified_folds(&labels, 3, 0),
            Err(ClassifyError::Stratification(_))
        ));
        assert!(stratified_folds(&labels, 2, 0).is_ok());
        assert!(stratified_folds(&labels, 1, 0).is_err());
        assert!(stratified_folds(&labels[..1], 2, 0).is_err());
    }

    #[test]
    fn separable_cue_gives_perfect_cv() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let filler = [
            "today", "really", "so", "the", "again", "now", "news", "update",
        ];
        let data: Vec<_> = (0..60)
            .map(|i| {
                let label = u8::from(i % 3 != 0);
                let mut words = vec!["flu".to_string()];
                for _ in 0..3 {
                    words.push(filler[rng.random_range(0..filler.len())].to_string());
                }
                if label == 1 {
                    words.push("poscue".into());
                }
                example(i, words.join(" "), label)
            })
            .collect();
        let report = cross_validate(&data, 10, &TrainConfig::default()).unwrap();
        assert_eq!(report.accuracy.mean, 100.0);
        assert_eq!(report.f1.mean, 100.0);
        assert_eq!(report.accuracy.std_err, 0.0);
    }

    #[test]
    fn coin_flip_labels_are_near_chance() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let vocab: Vec<String> = (0..40).map(|i| format!("w{i}")).collect();
        let data: Vec<_> = (0..200)
            .map(|i| {
                let label = u8::from(i % 2 == 0);
                let mut words = vec!["cough".to_string()];
                for _ in 0..5 {
                    words.push(vocab[rng.random_range(0..vocab.len())].clone());
                }
                example(i, words.join(" "), label)
            })
            .collect();
        let report = cross_validate(&data, 10, &TrainConfig::default()).unwrap();
        assert!(
            (report.accuracy.mean - 50.0).abs() <= 15.0,
            "{}",
            report.accuracy.mean
        );
        for m in [
            &report.accuracy,
            &report.precision,
            &report.recall,
            &report.f1,
        ] {
            assert!((0.0..=100.0).contains(&m.mean));
        }
    }

    #[test]
    fn report_table_layout() {
        let report = CvReport {
            k: 10,
            seed: 1,
            accuracy: Metric {
                mean: 71.25,
                std_err: 1.9,
            },
            precision: Metric {
                mean: 80.5,
                std_err: 1.8,
            },
            recall: Metric {
                mean: 75.0,
                std_err: 2.0,
            },
            f1: Metric {
                mean: 77.4,
                std_err: 1.5,
            },
            folds: vec![],
        };
        let text = report.to_string();
        assert!(text.contains("71.25 (1.90)"));
        assert!(text.lines().nth(1).unwrap().contains("Accuracy"));
    }
}
