//! Greedy CART classification tree with Gini impurity.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::Result;
use crate::model::linear::argmax;
use crate::model::Classifier;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum TreeNode {
    /// Samples with `x[feature] <= threshold` go left.
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf {
        distribution: Vec<f64>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TreeModel {
    pub nodes: Vec<TreeNode>,
    pub max_depth: usize,
    pub classes: Vec<usize>,
}

impl TreeModel {
    pub fn depth(&self) -> usize {
        fn walk(nodes: &[TreeNode], i: usize) -> usize {
            match &nodes[i] {
                TreeNode::Leaf { .. } => 0,
                TreeNode::Split { left, right, .. } => 1 + walk(nodes, *left).max(walk(nodes, *right)),
            }
        }
        walk(&self.nodes, 0)
    }

    pub fn leaf_count(&self) -> usize {
        self.nodes.iter().filter(|n| matches!(n, TreeNode::Leaf { .. })).count()
    }

    /// Index of the leaf `x` lands in.
    pub fn leaf_of(&self, x: &[f64]) -> usize {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                TreeNode::Leaf { .. } => return i,
                TreeNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => i = if x[*feature] <= *threshold { *left } else { *right },
            }
        }
    }

    pub fn distribution(&self, x: &[f64]) -> &[f64] {
        match &self.nodes[self.leaf_of(x)] {
            TreeNode::Leaf { distribution } => distribution,
            TreeNode::Split { .. } => unreachable!("leaf_of returns leaves"),
        }
    }
}

impl Classifier for TreeModel {
    fn classes(&self) -> &[usize] {
        &self.classes
    }

    fn predict(&self, x: &[f64]) -> usize {
        self.classes[argmax(self.distribution(x))]
    }
}

fn gini(counts: &[usize], total: usize) -> f64 {
    if total == 0 {
        return 0.0;
    }
    let t = total as f64;
    1.0 - counts.iter().map(|&c| (c as f64 / t).powi(2)).sum::<f64>()
}

struct Builder<'a> {
    x: Vec<&'a [f64]>,
    y: Vec<usize>,
    n_classes: usize,
    max_depth: usize,
    nodes: Vec<TreeNode>,
}

impl Builder<'_> {
    fn counts(&self, idx: &[usize]) -> Vec<usize> {
        let mut c = vec![0; self.n_classes];
        for &i in idx {
            c[self.y[i]] += 1;
        }
        c
    }

    /// Best (feature, threshold) by weighted child Gini; ties keep the lowest
    /// feature, then the lowest threshold.
    fn best_split(&self, idx: &[usize]) -> Option<(usize, f64)> {
        let dim = self.x.first().map_or(0, |r| r.len());
        let n = idx.len();
        let mut best: Option<(f64, usize, f64)> = None;
        for f in 0..dim {
            let mut order: Vec<usize> = idx.to_vec();
            order.sort_by(|&a, &b| self.x[a][f].total_cmp(&self.x[b][f]));
            let mut left = vec![0usize; self.n_classes];
            let mut right = self.counts(idx);
            for pos in 0..n - 1 {
                let i = order[pos];
                left[self.y[i]] += 1;
                right[self.y[i]] -= 1;
                let (lo, hi) = (self.x[i][f], self.x[order[pos + 1]][f]);
                if lo == hi {
                    continue;
                }
                let nl = pos + 1;
                let nr = n - nl;
                let score = (nl as f64 * gini(&left, nl) + nr as f64 * gini(&right, nr)) / n as f64;
                let threshold = lo + (hi - lo) / 2.0;
                if best.is_none_or(|(s, _, _)| score < s) {
                    best = Some((score, f, threshold));
                }
            }
        }
        best.map(|(_, f, t)| (f, t))
    }

    fn leaf(&mut self, idx: &[usize]) -> usize {
        let counts = self.counts(idx);
        let n = idx.len().max(1) as f64;
        self.nodes.push(TreeNode::Leaf {
            distribution: counts.iter().map(|&c| c as f64 / n).collect(),
        });
        self.nodes.len() - 1
    }

    fn grow(&mut self, idx: Vec<usize>, depth: usize) -> usize {
        let counts = self.counts(&idx);
        let pure = counts.iter().filter(|&&c| c > 0).count() <= 1;
        if pure || depth >= self.max_depth {
            return self.leaf(&idx);
        }
        let Some((feature, threshold)) = self.best_split(&idx) else {
            return self.leaf(&idx);
        };
        let slot = self.nodes.len();
        self.nodes.push(TreeNode::Leaf {
            distribution: Vec::new(),
        });
        let (l, r): (Vec<usize>, Vec<usize>) = idx.iter().partition(|&&i| self.x[i][feature] <= threshold);
        let left = self.grow(l, depth + 1);
        let right = self.grow(r, depth + 1);
        self.nodes[slot] = TreeNode::Split {
            feature,
            threshold,
            left,
            right,
        };
        slot
    }
}

/// Fits a CART tree: exhaustive midpoint thresholds, growth stops at
/// `max_depth` or at a pure node.
pub fn train_tree(d: &Dataset, max_depth: usize) -> Result<TreeModel> {
    d.require_labeled()?;
    let classes = d.classes().to_vec();
    let y: Vec<usize> = d
        .iter()
        .map(|s| {
            classes
                .binary_search(&s.label.expect("labeled"))
                .expect("label in class list")
        })
        .collect();
    let mut b = Builder {
        x: d.iter().map(|s| s.features.as_slice()).collect(),
        y,
        n_classes: classes.len(),
        max_depth,
        nodes: Vec::new(),
    };
    b.grow((0..d.len()).collect(), 0);
    Ok(TreeModel {
        nodes: b.nodes,
        max_depth,
        classes,
    })
}
