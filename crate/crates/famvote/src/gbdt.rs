//! Gradient-boosted decision trees for binary classification.
//!
//! Logistic loss, exact greedy splits over raw feature values, no
//! subsampling: training is fully deterministic. Each round fits a
//! depth-bounded regression tree to the loss residuals with Newton leaf
//! values, so a model is `sigmoid(base + lr * sum of leaf values)`.

use serde::{Deserialize, Serialize};

use crate::error::{FamvoteError, Result};

/// Gain below this never splits a node.
const MIN_GAIN: f64 = 1e-12;

/// Probabilities are clamped here so losses stay finite when the logit
/// saturates sigmoid to exactly 0 or 1.
const PROB_CLAMP: f64 = 1e-15;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GbdtConfig {
    pub n_estimators: usize,
    pub learning_rate: f64,
    /// Number of split levels; 1 grows decision stumps.
    pub max_depth: usize,
}

impl Default for GbdtConfig {
    fn default() -> Self {
        GbdtConfig {
            n_estimators: 200,
            learning_rate: 0.1,
            max_depth: 5,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum Node {
    Split {
        feature: usize,
        /// Midpoint between adjacent distinct values; `<=` goes left.
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf {
        value: f64,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    pub fn predict(&self, features: &[f64]) -> f64 {
        let mut at = 0;
        loop {
            match self.nodes[at] {
                Node::Leaf { value } => return value,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    at = if features[feature] <= threshold {
                        left
                    } else {
                        right
                    };
                }
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GbdtModel {
    pub trees: Vec<Tree>,
    pub learning_rate: f64,
    pub max_depth: usize,
    /// Log-odds of the training label prevalence.
    pub base_score: f64,
    /// Normalized total split gain per feature; sums to 1 when any split
    /// exists, all zeros otherwise.
    pub feature_importance: Vec<f64>,
    pub n_features: usize,
    /// Mean training logistic loss after each round; never increases.
    pub training_loss: Vec<f64>,
}

impl GbdtModel {
    /// Predicted P(label = 1), in (0, 1).
    pub fn predict_proba(&self, features: &[f64]) -> f64 {
        sigmoid(self.logit(features)).clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
    }

    pub fn logit(&self, features: &[f64]) -> f64 {
        self.base_score
            + self.learning_rate
                * self
                    .trees
                    .iter()
                    .map(|t| t.predict(features))
                    .sum::<f64>()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn logistic_loss(p: f64, y: f64) -> f64 {
    let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

/// Per-node view: for every feature, the node's sample indices in
/// ascending feature-value order (global presort filtered on the way down).
struct NodeSamples {
    by_feature: Vec<Vec<usize>>,
}

impl NodeSamples {
    fn len(&self) -> usize {
        self.by_feature[0].len()
    }
}

struct TreeFitter<'a> {
    features: &'a [Vec<f64>],
    residuals: &'a [f64],
    hessians: &'a [f64],
    nodes: Vec<Node>,
    gains: Vec<f64>,
}

struct BestSplit {
    feature: usize,
    threshold: f64,
    gain: f64,
}

impl<'a> TreeFitter<'a> {
    fn leaf_value(&self, samples: &NodeSamples) -> f64 {
        let idx = &samples.by_feature[0];
        let sum_r: f64 = idx.iter().map(|&i| self.residuals[i]).sum();
        let sum_h: f64 = idx.iter().map(|&i| self.hessians[i]).sum();
        // A saturated node (all probabilities at 0 or 1) has nothing left
        // to move.
        if sum_h < 1e-12 {
            0.0
        } else {
            sum_r / sum_h
        }
    }

    /// Variance-reduction gain S_L^2/n_L + S_R^2/n_R - S^2/n over residuals,
    /// maximized over every feature and adjacent-distinct-value boundary.
    /// Ties keep the first candidate (lowest feature, then lowest threshold).
    fn best_split(&self, samples: &NodeSamples) -> Option<BestSplit> {
        let n = samples.len();
        if n < 2 {
            return None;
        }
        let total: f64 = samples.by_feature[0]
            .iter()
            .map(|&i| self.residuals[i])
            .sum();
        let parent = total * total / n as f64;
        let mut best: Option<BestSplit> = None;
        for (f, order) in samples.by_feature.iter().enumerate() {
            let mut left_sum = 0.0;
            for (pos, &i) in order.iter().enumerate().take(n - 1) {
                left_sum += self.residuals[i];
                let here = self.features[i][f];
                let next = self.features[order[pos + 1]][f];
                if next <= here {
                    continue;
                }
                let n_l = (pos + 1) as f64;
                let n_r = (n - pos - 1) as f64;
                let right_sum = total - left_sum;
                let gain =
                    left_sum * left_sum / n_l + right_sum * right_sum / n_r - parent;
                if best.as_ref().is_none_or(|b| gain > b.gain) {
                    best = Some(BestSplit {
                        feature: f,
                        threshold: (here + next) / 2.0,
                        gain,
                    });
                }
            }
        }
        best.filter(|b| b.gain > MIN_GAIN)
    }

    fn build(&mut self, samples: NodeSamples, depth_left: usize) -> usize {
        let split = if depth_left == 0 {
            None
        } else {
            self.best_split(&samples)
        };
        let Some(split) = split else {
            let value = self.leaf_value(&samples);
            self.nodes.push(Node::Leaf { value });
            return self.nodes.len() - 1;
        };
        self.gains[split.feature] += split.gain;
        let goes_left =
            |i: usize| self.features[i][split.feature] <= split.threshold;
        let mut left = NodeSamples {
            by_feature: Vec::with_capacity(samples.by_feature.len()),
        };
        let mut right = NodeSamples {
            by_feature: Vec::with_capacity(samples.by_feature.len()),
        };
        for order in &samples.by_feature {
            let (l, r): (Vec<usize>, Vec<usize>) =
                order.iter().partition(|&&i| goes_left(i));
            left.by_feature.push(l);
            right.by_feature.push(r);
        }
        let at = self.nodes.len();
        self.nodes.push(Node::Leaf { value: 0.0 });
        let left_id = self.build(left, depth_left - 1);
        let right_id = self.build(right, depth_left - 1);
        self.nodes[at] = Node::Split {
            feature: split.feature,
            threshold: split.threshold,
            left: left_id,
            right: right_id,
        };
        at
    }
}

/// Trains a boosted classifier on dense feature rows and binary labels.
///
/// Exact greedy split finding with no subsampling makes the result a pure
/// function of the inputs. Both classes must be present.
pub fn train_gbdt(
    features: &[Vec<f64>],
    labels: &[bool],
    config: &GbdtConfig,
) -> Result<GbdtModel> {
    let n = features.len();
    if n == 0 {
        return Err(FamvoteError::validation("no training rows"));
    }
    if labels.len() != n {
        return Err(FamvoteError::contract(format!(
            "{n} feature rows but {} labels",
            labels.len()
        )));
    }
    let n_features = features[0].len();
    if n_features == 0 {
        return Err(FamvoteError::validation("feature rows are empty"));
    }
    for (i, row) in features.iter().enumerate() {
        if row.len() != n_features {
            return Err(FamvoteError::contract(format!(
                "feature row {i} has {} values, expected {n_features}",
                row.len()
            )));
        }
        if let Some(bad) = row.iter().find(|v| !v.is_finite()) {
            return Err(FamvoteError::validation(format!(
                "feature row {i} contains non-finite value {bad}"
            )));
        }
    }
    let positives = labels.iter().filter(|&&y| y).count();
    if positives == 0 || positives == n {
        return Err(FamvoteError::validation(
            "training labels are single-class; nothing to learn",
        ));
    }
    if config.n_estimators == 0 || config.max_depth == 0 || config.learning_rate <= 0.0 {
        return Err(FamvoteError::usage(format!(
            "gbdt config needs n_estimators >= 1, max_depth >= 1, learning_rate > 0 \
             (got {}, {}, {})",
            config.n_estimators, config.max_depth, config.learning_rate
        )));
    }
    let y: Vec<f64> = labels.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    // Both classes present, so prevalence is strictly inside (0, 1).
    let prevalence = positives as f64 / n as f64;
    let base_score = (prevalence / (1.0 - prevalence)).ln();

    let presorted: Vec<Vec<usize>> = (0..n_features)
        .map(|f| {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.sort_by(|&a, &b| {
                features[a][f]
                    .partial_cmp(&features[b][f])
                    .expect("finite features")
                    .then(a.cmp(&b))
            });
            idx
        })
        .collect();

    let mut logits = vec![base_score; n];
    let mut trees = Vec::with_capacity(config.n_estimators);
    let mut gains = vec![0.0; n_features];
    let mut training_loss = Vec::with_capacity(config.n_estimators);
    for _ in 0..config.n_estimators {
        let probs: Vec<f64> = logits.iter().map(|&f| sigmoid(f)).collect();
        let residuals: Vec<f64> = (0..n).map(|i| y[i] - probs[i]).collect();
        let hessians: Vec<f64> = probs.iter().map(|&p| p * (1.0 - p)).collect();
        let mut fitter = TreeFitter {
            features,
            residuals: &residuals,
            hessians: &hessians,
            nodes: Vec::new(),
            gains: vec![0.0; n_features],
        };
        let root_samples = NodeSamples {
            by_feature: presorted.clone(),
        };
        fitter.build(root_samples, config.max_depth);
        let tree = Tree {
            nodes: fitter.nodes,
        };
        for (g, tg) in gains.iter_mut().zip(&fitter.gains) {
            *g += tg;
        }
        for (i, logit) in logits.iter_mut().enumerate() {
            *logit += config.learning_rate * tree.predict(&features[i]);
        }
        trees.push(tree);
        let loss = (0..n)
            .map(|i| logistic_loss(sigmoid(logits[i]), y[i]))
            .sum::<f64>()
            / n as f64;
        training_loss.push(loss);
    }
    let total_gain: f64 = gains.iter().sum();
    let feature_importance = if total_gain > 0.0 {
        gains.iter().map(|g| g / total_gain).collect()
    } else {
        gains
    };
    Ok(GbdtModel {
        trees,
        learning_rate: config.learning_rate,
        max_depth: config.max_depth,
        base_score,
        feature_importance,
        n_features,
        training_loss,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn step_data() -> (Vec<Vec<f64>>, Vec<bool>) {
        let features = vec![vec![0.0], vec![1.0], vec![2.0], vec![3.0]];
        let labels = vec![false, false, true, true];
        (features, labels)
    }

    #[test]
    fn single_stump_matches_hand_computation() {
        let (features, labels) = step_data();
        let config = GbdtConfig {
            n_estimators: 1,
            learning_rate: 0.1,
            max_depth: 1,
        };
        let model = train_gbdt(&features, &labels, &config).unwrap();
        // base = ln(0.5/0.5) = 0; residuals +-0.5, hessians 0.25.
        // Best boundary 1.5 has gain 1.0; Newton leaves -+1/0.5 = -+2.
        assert_eq!(model.base_score, 0.0);
        assert_eq!(model.trees.len(), 1);
        assert_eq!(model.feature_importance, vec![1.0]);
        let expected_low = sigmoid(-0.2);
        let expected_high = sigmoid(0.2);
        assert!((model.predict_proba(&[0.0]) - expected_low).abs() < 1e-12);
        assert!((model.predict_proba(&[1.0]) - expected_low).abs() < 1e-12);
        assert!((model.predict_proba(&[2.0]) - expected_high).abs() < 1e-12);
        assert!((model.predict_proba(&[3.0]) - expected_high).abs() < 1e-12);
        match model.trees[0].nodes[0] {
            Node::Split {
                feature, threshold, ..
            } => {
                assert_eq!(feature, 0);
                assert!((threshold - 1.5).abs() < 1e-12);
            }
            Node::Leaf { .. } => panic!("expected a split at the root"),
        }
    }

    fn separable_data(n: usize) -> (Vec<Vec<f64>>, Vec<bool>) {
        // Deterministic grid, separable by x0 - x1 with a clear margin.
        let mut features = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let a = (i % 17) as f64 / 17.0;
            let b = ((i * 7) % 13) as f64 / 13.0;
            let label = a - b > 0.05;
            if (a - b).abs() < 0.02 {
                continue;
            }
            features.push(vec![a, b]);
            labels.push(label);
        }
        (features, labels)
    }

    #[test]
    fn separable_data_is_fit_almost_perfectly() {
        let (features, labels) = separable_data(400);
        let model = train_gbdt(&features, &labels, &GbdtConfig::default()).unwrap();
        let correct = features
            .iter()
            .zip(&labels)
            .filter(|(x, &y)| (model.predict_proba(x) >= 0.5) == y)
            .count();
        let accuracy = correct as f64 / labels.len() as f64;
        assert!(accuracy >= 0.99, "training accuracy {accuracy}");
    }

    #[test]
    fn label_flip_mirrors_probabilities() {
        let (features, labels) = separable_data(300);
        let flipped: Vec<bool> = labels.iter().map(|&y| !y).collect();
        let model = train_gbdt(&features, &labels, &GbdtConfig::default()).unwrap();
        let mirror = train_gbdt(&features, &flipped, &GbdtConfig::default()).unwrap();
        for x in &features {
            let p = model.predict_proba(x);
            let q = mirror.predict_proba(x);
            assert!((q - (1.0 - p)).abs() < 1e-6, "p {p}, mirrored {q}");
        }
    }

    #[test]
    fn training_loss_never_increases() {
        let (features, labels) = separable_data(300);
        let model = train_gbdt(&features, &labels, &GbdtConfig::default()).unwrap();
        assert_eq!(model.training_loss.len(), 200);
        for w in model.training_loss.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "loss rose: {} -> {}", w[0], w[1]);
        }
        // It actually learns, not just avoids regressing.
        assert!(model.training_loss.last().unwrap() < &0.1);
    }

    #[test]
    fn single_class_labels_are_rejected() {
        let features = vec![vec![0.0], vec![1.0]];
        let err = train_gbdt(&features, &[true, true], &GbdtConfig::default());
        assert!(err.is_err());
    }

    #[test]
    fn training_is_deterministic() {
        let (features, labels) = separable_data(200);
        let a = train_gbdt(&features, &labels, &GbdtConfig::default()).unwrap();
        let b = train_gbdt(&features, &labels, &GbdtConfig::default()).unwrap();
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
    }

    #[test]
    fn importances_sum_to_one() {
        let (features, labels) = separable_data(250);
        let model = train_gbdt(&features, &labels, &GbdtConfig::default()).unwrap();
        let total: f64 = model.feature_importance.iter().sum();
        assert!((total - 1.0).abs() < 1e-9);
        assert!(model.feature_importance.iter().all(|&g| g >= 0.0));
    }

    proptest! {
        #[test]
        fn predictions_stay_in_open_unit_interval(
            rows in prop::collection::vec(
                prop::collection::vec(-10.0f64..10.0, 3),
                4..40,
            ),
            flip in prop::collection::vec(any::<bool>(), 4..40),
        ) {
            let n = rows.len().min(flip.len());
            let features = rows[..n].to_vec();
            let mut labels: Vec<bool> = flip[..n].to_vec();
            // Force both classes.
            labels[0] = true;
            labels[n - 1] = false;
            let config = GbdtConfig { n_estimators: 20, ..GbdtConfig::default() };
            let model = train_gbdt(&features, &labels, &config).unwrap();
            for x in &features {
                let p = model.predict_proba(x);
                prop_assert!(p > 0.0 && p < 1.0 && p.is_finite());
            }
        }
    }
}
