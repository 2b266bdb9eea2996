//! Classifiers standing in for the model trainer's model and the data
//! owners' proxies, and the metrics used to score them.

mod linear;
mod tree;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::Result;

pub use linear::{
    finetune, finetune_mixed, loss, mean_gradient, per_sample_gradient, retrain_mixed, stable_learning_rate,
    train_proxy, train_proxy_traced, Mixing, ProxyModel, TrainConfig,
};
pub use tree::{train_tree, TreeModel, TreeNode};

pub trait Classifier {
    /// Label space, ascending.
    fn classes(&self) -> &[usize];
    /// Predicted label; ties go to the lowest class index.
    fn predict(&self, x: &[f64]) -> usize;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub accuracy: f64,
    /// Positive-class F1 for two-class label spaces, macro F1 otherwise.
    pub f1: f64,
    pub classes: Vec<usize>,
    /// `confusion[truth][predicted]`, indexed like `classes`.
    pub confusion: Vec<Vec<usize>>,
}

impl EvalMetrics {
    pub fn total(&self) -> usize {
        self.confusion.iter().flatten().sum()
    }

    fn from_confusion(classes: Vec<usize>, confusion: Vec<Vec<usize>>) -> Self {
        let total: usize = confusion.iter().flatten().sum();
        let correct: usize = (0..classes.len()).map(|i| confusion[i][i]).sum();
        let accuracy = if total == 0 { 0.0 } else { correct as f64 / total as f64 };
        let f1_of = |c: usize| -> Option<f64> {
            let tp = confusion[c][c];
            let fp: usize = (0..classes.len()).filter(|&t| t != c).map(|t| confusion[t][c]).sum();
            let fn_: usize = (0..classes.len()).filter(|&p| p != c).map(|p| confusion[c][p]).sum();
            let denom = 2 * tp + fp + fn_;
            (denom > 0).then(|| 2.0 * tp as f64 / denom as f64)
        };
        let f1 = if classes.len() == 2 {
            // nothing predicted or present as positive: no positive errors either
            f1_of(1).unwrap_or(1.0)
        } else {
            let scores: Vec<f64> = (0..classes.len()).filter_map(f1_of).collect();
            if scores.is_empty() {
                0.0
            } else {
                scores.iter().sum::<f64>() / scores.len() as f64
            }
        };
        Self {
            accuracy,
            f1,
            classes,
            confusion,
        }
    }

    /// Metrics from parallel truth/prediction label lists over `classes`.
    pub fn from_predictions(classes: &[usize], truth: &[usize], predicted: &[usize]) -> Self {
        let space: BTreeSet<usize> = classes.iter().chain(truth).chain(predicted).copied().collect();
        let space: Vec<usize> = space.into_iter().collect();
        let pos = |c: usize| space.binary_search(&c).expect("in label space");
        let mut confusion = vec![vec![0; space.len()]; space.len()];
        for (&t, &p) in truth.iter().zip(predicted) {
            confusion[pos(t)][pos(p)] += 1;
        }
        Self::from_confusion(space, confusion)
    }
}

/// Argmax predictions scored against the labels of `d`.
pub fn evaluate<C: Classifier + ?Sized>(m: &C, d: &Dataset) -> Result<EvalMetrics> {
    d.require_labeled()?;
    let truth: Vec<usize> = d.iter().map(|s| s.label.expect("labeled")).collect();
    let predicted: Vec<usize> = d.iter().map(|s| m.predict(&s.features)).collect();
    let mut classes = m.classes().to_vec();
    classes.extend_from_slice(d.classes());
    Ok(EvalMetrics::from_predictions(&classes, &truth, &predicted))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Sample, SeededRng};
    use rand::Rng;

    struct Fixed(Vec<usize>, std::collections::HashMap<u64, usize>);

    impl Classifier for Fixed {
        fn classes(&self) -> &[usize] {
            &self.0
        }
        fn predict(&self, x: &[f64]) -> usize {
            self.1[&x[0].to_bits()]
        }
    }

    fn labeled(labels: &[usize]) -> Dataset {
        let s = labels
            .iter()
            .enumerate()
            .map(|(i, &y)| Sample::new(i, vec![i as f64], Some(y)))
            .collect();
        Dataset::new("l", 1, s).unwrap()
    }

    fn fixed(classes: &[usize], preds: &[usize]) -> Fixed {
        Fixed(
            classes.to_vec(),
            preds
                .iter()
                .enumerate()
                .map(|(i, &p)| ((i as f64).to_bits(), p))
                .collect(),
        )
    }

    #[test]
    fn perfect_predictions() {
        let d = labeled(&[0, 1, 1, 0, 2]);
        let m = evaluate(&fixed(&[0, 1, 2], &[0, 1, 1, 0, 2]), &d).unwrap();
        assert_eq!(m.accuracy, 1.0);
        assert_eq!(m.f1, 1.0);
    }

    #[test]
    fn binary_f1_arithmetic() {
        // TP=2, FP=1, FN=1, TN=1
        let truth = [1, 1, 0, 1, 0];
        let preds = [1, 1, 1, 0, 0];
        let m = evaluate(&fixed(&[0, 1], &preds), &labeled(&truth)).unwrap();
        assert!((m.f1 - 2.0 / 3.0).abs() < 1e-15);
        assert!((m.accuracy - 0.6).abs() < 1e-15);
    }

    #[test]
    fn matches_confusion_oracle() {
        let mut rng = SeededRng::new(12).rng();
        for _ in 0..20 {
            let n = 30;
            let truth: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
            let preds: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
            let m = evaluate(&fixed(&[0, 1, 2], &preds), &labeled(&truth)).unwrap();
            let mut conf = [[0usize; 3]; 3];
            for i in 0..n {
                conf[truth[i]][preds[i]] += 1;
            }
            for t in 0..3 {
                assert_eq!(m.confusion[t], conf[t].to_vec());
            }
            let acc = (0..3).map(|i| conf[i][i]).sum::<usize>() as f64 / n as f64;
            assert_eq!(m.accuracy, acc);
            let mut f1s = Vec::new();
            for c in 0..3 {
                let tp = conf[c][c] as f64;
                let fp = (0..3).filter(|&t| t != c).map(|t| conf[t][c]).sum::<usize>() as f64;
                let fne = (0..3).filter(|&p| p != c).map(|p| conf[c][p]).sum::<usize>() as f64;
                if tp + fp + fne > 0.0 {
                    f1s.push(2.0 * tp / (2.0 * tp + fp + fne));
                }
            }
            assert!((m.f1 - f1s.iter().sum::<f64>() / f1s.len() as f64).abs() < 1e-15);
            assert_eq!(m.total(), n);
        }
    }

    #[test]
    fn order_invariant() {
        let truth = [0, 1, 1, 0, 1, 0];
        let preds = [0, 0, 1, 1, 1, 0];
        let a = EvalMetrics::from_predictions(&[0, 1], &truth, &preds);
        let mut t2 = truth;
        let mut p2 = preds;
        t2.reverse();
        p2.reverse();
        assert_eq!(a, EvalMetrics::from_predictions(&[0, 1], &t2, &p2));
    }
}
