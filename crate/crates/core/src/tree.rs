//! CART regression tree (variance criterion) and impurity-decrease feature
//! importances. The server runs this on the centralized training split to
//! rank features before handing them to clients.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::matrix::Matrix;

#[derive(Debug, Error, PartialEq)]
pub enum TreeError {
    #[error("need at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("{rows} feature rows but {labels} labels")]
    LengthMismatch { rows: usize, labels: usize },
    #[error("target is constant, nothing to split on")]
    ConstantTarget,
    #[error("expected {expected} features, got {found}")]
    FeatureCount { expected: usize, found: usize },
    #[error("tree has no splits, importances are undefined")]
    NoSplits,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TreeParams {
    pub max_depth: usize,
    pub min_samples_split: usize,
    /// Minimum `impurity decrease / total samples` required to split.
    pub min_impurity_decrease: f64,
}

impl Default for TreeParams {
    fn default() -> Self {
        Self {
            max_depth: 8,
            min_samples_split: 5,
            min_impurity_decrease: 0.0,
        }
    }
}

impl TreeParams {
    /// No depth limit, split down to pairs.
    pub fn fully_grown() -> Self {
        Self {
            max_depth: usize::MAX,
            min_samples_split: 2,
            min_impurity_decrease: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub feature: usize,
    pub threshold: f64,
    pub left: usize,
    pub right: usize,
    /// Parent SSE minus the children's SSE.
    pub impurity_decrease: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub prediction: f64,
    pub n_samples: usize,
    /// Sum of squared deviations from the node mean (variance × weight).
    pub impurity: f64,
    pub split: Option<Split>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionTree {
    nodes: Vec<Node>,
    n_features: usize,
}

/// Per-feature share of total impurity decrease; sums to 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceVector(pub Vec<f64>);

impl ImportanceVector {
    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Feature indices ordered by descending importance, ties by index.
    pub fn ranking(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.0.len()).collect();
        idx.sort_by(|&a, &b| self.0[b].total_cmp(&self.0[a]).then(a.cmp(&b)));
        idx
    }

    /// Two-column `feature_name,importance` CSV.
    pub fn to_csv(&self, names: &[String]) -> String {
        let mut s = String::from("feature_name,importance\n");
        for (name, v) in names.iter().zip(&self.0) {
            s.push_str(&format!("{name},{v:?}\n"));
        }
        s
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BestSplit {
    pub feature: usize,
    pub threshold: f64,
    pub gain: f64,
}

/// Exhaustive scan for the split with the largest SSE reduction over the
/// given samples. Ties keep the lowest feature index, then the lowest threshold.
pub fn best_split(x: &Matrix, y: &[f64], samples: &[usize]) -> Option<BestSplit> {
    let n = samples.len();
    if n < 2 {
        return None;
    }
    let total: f64 = samples.iter().map(|&i| y[i]).sum();
    let mut best: Option<BestSplit> = None;
    let mut order = samples.to_vec();
    for f in 0..x.cols() {
        order.sort_by(|&a, &b| x[(a, f)].total_cmp(&x[(b, f)]));
        let mut left_sum = 0.0;
        for pos in 0..n - 1 {
            left_sum += y[order[pos]];
            let lo = x[(order[pos], f)];
            let hi = x[(order[pos + 1], f)];
            if lo == hi {
                continue;
            }
            let nl = (pos + 1) as f64;
            let nr = (n - pos - 1) as f64;
            let diff = left_sum / nl - (total - left_sum) / nr;
            let gain = nl * nr / n as f64 * diff * diff;
            if best.is_none_or(|b| gain > b.gain + tie_tolerance(b.gain)) {
                let mut threshold = lo + (hi - lo) / 2.0;
                if threshold >= hi {
                    threshold = lo;
                }
                best = Some(BestSplit {
                    feature: f,
                    threshold,
                    gain,
                });
            }
        }
    }
    best
}

/// Gains closer than this are treated as ties, so the scan order decides.
pub fn tie_tolerance(gain: f64) -> f64 {
    1e-10 * gain.abs().max(1.0)
}

fn node_stats(y: &[f64], samples: &[usize]) -> (f64, f64) {
    let n = samples.len() as f64;
    let mean = samples.iter().map(|&i| y[i]).sum::<f64>() / n;
    let sse = samples.iter().map(|&i| (y[i] - mean).powi(2)).sum();
    (mean, sse)
}

pub fn fit_tree(x: &Matrix, y: &[f64], params: &TreeParams) -> Result<RegressionTree, TreeError> {
    if x.rows() != y.len() {
        return Err(TreeError::LengthMismatch {
            rows: x.rows(),
            labels: y.len(),
        });
    }
    if y.len() < 2 {
        return Err(TreeError::TooFewSamples(y.len()));
    }
    if y.iter().all(|&v| v == y[0]) {
        return Err(TreeError::ConstantTarget);
    }
    let n_total = y.len() as f64;
    let mut nodes: Vec<Node> = Vec::new();
    // (node slot, samples, depth)
    let mut stack: Vec<(usize, Vec<usize>, usize)> = Vec::new();

    let root: Vec<usize> = (0..y.len()).collect();
    let (mean, sse) = node_stats(y, &root);
    nodes.push(Node {
        prediction: mean,
        n_samples: root.len(),
        impurity: sse,
        split: None,
    });
    stack.push((0, root, 0));

    while let Some((slot, samples, depth)) = stack.pop() {
        if depth >= params.max_depth
            || samples.len() < params.min_samples_split.max(2)
            || samples.iter().all(|&i| y[i] == y[samples[0]])
        {
            continue;
        }
        let Some(best) = best_split(x, y, &samples) else {
            continue;
        };
        if !(best.gain > 0.0) || best.gain / n_total < params.min_impurity_decrease {
            continue;
        }
        let (left, right): (Vec<usize>, Vec<usize>) = samples
            .iter()
            .partition(|&&i| x[(i, best.feature)] <= best.threshold);
        debug_assert!(!left.is_empty() && !right.is_empty());

        let (lm, lsse) = node_stats(y, &left);
        let (rm, rsse) = node_stats(y, &right);
        let li = nodes.len();
        nodes.push(Node {
            prediction: lm,
            n_samples: left.len(),
            impurity: lsse,
            split: None,
        });
        let ri = nodes.len();
        nodes.push(Node {
            prediction: rm,
            n_samples: right.len(),
            impurity: rsse,
            split: None,
        });
        nodes[slot].split = Some(Split {
            feature: best.feature,
            threshold: best.threshold,
            left: li,
            right: ri,
            impurity_decrease: best.gain,
        });
        // right first so the left subtree is expanded first
        stack.push((ri, right, depth + 1));
        stack.push((li, left, depth + 1));
    }
    Ok(RegressionTree {
        nodes,
        n_features: x.cols(),
    })
}

impl RegressionTree {
    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn root(&self) -> &Node {
        &self.nodes[0]
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn n_splits(&self) -> usize {
        self.nodes.iter().filter(|n| n.split.is_some()).count()
    }

    pub fn depth(&self) -> usize {
        fn walk(nodes: &[Node], i: usize) -> usize {
            match nodes[i].split {
                Some(s) => 1 + walk(nodes, s.left).max(walk(nodes, s.right)),
                None => 0,
            }
        }
        walk(&self.nodes, 0)
    }

    /// Routes left when `x[feature] <= threshold`.
    pub fn predict(&self, x: &[f64]) -> Result<f64, TreeError> {
        if x.len() != self.n_features {
            return Err(TreeError::FeatureCount {
                expected: self.n_features,
                found: x.len(),
            });
        }
        let mut i = 0;
        while let Some(s) = self.nodes[i].split {
            i = if x[s.feature] <= s.threshold {
                s.left
            } else {
                s.right
            };
        }
        Ok(self.nodes[i].prediction)
    }

    pub fn importance(&self) -> Result<ImportanceVector, TreeError> {
        let mut raw = vec![0.0; self.n_features];
        for s in self.nodes.iter().filter_map(|n| n.split) {
            raw[s.feature] += s.impurity_decrease;
        }
        let total: f64 = raw.iter().sum();
        if self.n_splits() == 0 || !(total > 0.0) {
            return Err(TreeError::NoSplits);
        }
        Ok(ImportanceVector(raw.into_iter().map(|v| v / total).collect()))
    }
}

pub fn predict_tree(tree: &RegressionTree, x: &[f64]) -> Result<f64, TreeError> {
    tree.predict(x)
}

pub fn compute_importance(tree: &RegressionTree) -> Result<ImportanceVector, TreeError> {
    tree.importance()
}
