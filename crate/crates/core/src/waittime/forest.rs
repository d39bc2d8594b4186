use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::jsonio::{read_json, write_json};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForestHyperparams {
    pub n_trees: usize,
    /// `None` grows until leaves are pure or too small to split.
    pub max_depth: Option<usize>,
    pub min_split: usize,
    pub min_leaf: usize,
    pub bootstrap: bool,
}

impl Default for ForestHyperparams {
    fn default() -> Self {
        ForestHyperparams {
            n_trees: 150,
            max_depth: None,
            min_split: 2,
            min_leaf: 1,
            bootstrap: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TreeNode {
    Leaf {
        value: f64,
    },
    Split {
        feature: usize,
        threshold: f64,
        /// Index of the subtree for `x[feature] <= threshold`.
        left: usize,
        right: usize,
    },
}

/// A regression tree stored as a flat node list rooted at index 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<TreeNode>,
}

impl Tree {
    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            match self.nodes[i] {
                TreeNode::Leaf { value } => return value,
                TreeNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => i = if x[feature] <= threshold { left } else { right },
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn go(t: &Tree, i: usize) -> usize {
            match t.nodes[i] {
                TreeNode::Leaf { .. } => 0,
                TreeNode::Split { left, right, .. } => 1 + go(t, left).max(go(t, right)),
            }
        }
        go(self, 0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestModel {
    pub trees: Vec<Tree>,
    pub hyperparams: ForestHyperparams,
    pub seed: u64,
}

impl ForestModel {
    /// Mean of the tree outputs.
    pub fn predict(&self, x: &[f64]) -> f64 {
        self.trees.iter().map(|t| t.predict(x)).sum::<f64>() / self.trees.len() as f64
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn read(path: &Path) -> Result<ForestModel> {
        read_json(path)
    }
}

/// Fits CART regression trees on bootstrap resamples, choosing among
/// `max(1, floor(sqrt(n_features)))` random features at each split.
/// Tree `i` draws from stream `i` of `seed`, so the result does not depend
/// on how trees are spread across threads.
pub fn train_forest(
    x: &[Vec<f64>],
    y: &[f64],
    hp: ForestHyperparams,
    seed: u64,
) -> Result<ForestModel> {
    if x.len() < 2 || y.len() != x.len() {
        return Err(Error::TooFewSamples {
            needed: 2,
            got: x.len().min(y.len()),
        });
    }
    let n_features = x[0].len();
    if n_features == 0 || x.iter().any(|r| r.len() != n_features) {
        return Err(Error::Config(
            "feature rows must share a positive length".into(),
        ));
    }
    if hp.n_trees == 0 || hp.min_leaf == 0 || hp.min_split < 2 {
        return Err(Error::Config(format!(
            "invalid forest hyperparameters {hp:?}"
        )));
    }
    let mtry = ((n_features as f64).sqrt().floor() as usize).max(1);
    let trees = (0..hp.n_trees)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let rows: Vec<usize> = if hp.bootstrap {
                (0..x.len()).map(|_| rng.gen_range(0..x.len())).collect()
            } else {
                (0..x.len()).collect()
            };
            let mut b = Builder {
                x,
                y,
                hp,
                mtry,
                rng,
                nodes: Vec::new(),
            };
            b.grow(rows, 0);
            Tree { nodes: b.nodes }
        })
        .collect();
    Ok(ForestModel {
        trees,
        hyperparams: hp,
        seed,
    })
}

struct Builder<'a> {
    x: &'a [Vec<f64>],
    y: &'a [f64],
    hp: ForestHyperparams,
    mtry: usize,
    rng: ChaCha8Rng,
    nodes: Vec<TreeNode>,
}

struct Split {
    feature: usize,
    threshold: f64,
    gain: f64,
}

impl Builder<'_> {
    fn grow(&mut self, rows: Vec<usize>, depth: usize) -> usize {
        let id = self.nodes.len();
        let mean = rows.iter().map(|&r| self.y[r]).sum::<f64>() / rows.len() as f64;
        self.nodes.push(TreeNode::Leaf { value: mean });
        let pure = rows.iter().all(|&r| self.y[r] == self.y[rows[0]]);
        if pure || rows.len() < self.hp.min_split || self.hp.max_depth.is_some_and(|d| depth >= d) {
            return id;
        }
        let Some(split) = self.best_split(&rows) else {
            return id;
        };
        let (l, r): (Vec<usize>, Vec<usize>) = rows
            .iter()
            .partition(|&&i| self.x[i][split.feature] <= split.threshold);
        let left = self.grow(l, depth + 1);
        let right = self.grow(r, depth + 1);
        self.nodes[id] = TreeNode::Split {
            feature: split.feature,
            threshold: split.threshold,
            left,
            right,
        };
        id
    }

    /// Best variance-reducing split over `mtry` random features; when none
    /// of those can split, the remaining features are tried in random order.
    fn best_split(&mut self, rows: &[usize]) -> Option<Split> {
        let mut features: Vec<usize> = (0..self.x[0].len()).collect();
        features.shuffle(&mut self.rng);
        let mut best: Option<Split> = None;
        for (n, &f) in features.iter().enumerate() {
            if n >= self.mtry && best.is_some() {
                break;
            }
            if let Some(s) = self.split_on(rows, f) {
                if best.as_ref().is_none_or(|b| s.gain > b.gain) {
                    best = Some(s);
                }
            }
        }
        best
    }

    fn split_on(&self, rows: &[usize], f: usize) -> Option<Split> {
        let mut sorted: Vec<(f64, f64)> = rows.iter().map(|&r| (self.x[r][f], self.y[r])).collect();
        sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
        let n = sorted.len();
        let total: f64 = sorted.iter().map(|p| p.1).sum();
        let mut left = 0.0;
        let mut best: Option<Split> = None;
        let min_leaf = self.hp.min_leaf;
        for i in 0..n - 1 {
            left += sorted[i].1;
            let nl = i + 1;
            if sorted[i].0 == sorted[i + 1].0 || nl < min_leaf || n - nl < min_leaf {
                continue;
            }
            let right = total - left;
            // SSE reduction up to a constant: sum_l^2/n_l + sum_r^2/n_r
            let gain = left * left / nl as f64 + right * right / (n - nl) as f64;
            if best.as_ref().is_none_or(|b| gain > b.gain) {
                best = Some(Split {
                    feature: f,
                    threshold: 0.5 * (sorted[i].0 + sorted[i + 1].0),
                    gain,
                });
            }
        }
        best
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn exact() -> ForestHyperparams {
        ForestHyperparams {
            n_trees: 1,
            bootstrap: false,
            ..Default::default()
        }
    }

    #[test]
    fn single_unbootstrapped_tree_memorizes() {
        let x: Vec<Vec<f64>> = (0..30)
            .map(|i| vec![(i % 5) as f64, (i / 5) as f64 * 0.01])
            .collect();
        let y: Vec<f64> = (0..30).map(|i| ((i * 37) % 11) as f64 * 10.0).collect();
        let m = train_forest(&x, &y, exact(), 3).unwrap();
        for (xi, yi) in x.iter().zip(&y) {
            assert_eq!(m.predict(xi), *yi);
        }
    }

    #[test]
    fn constant_labels_give_constant_predictions() {
        let x: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64, 1.0]).collect();
        let m = train_forest(&x, &[7.5; 10], ForestHyperparams::default(), 1).unwrap();
        assert_eq!(m.predict(&[100.0, -3.0]), 7.5);
    }

    #[test]
    fn rejects_tiny_inputs() {
        assert!(matches!(
            train_forest(&[vec![1.0]], &[1.0], exact(), 0),
            Err(Error::TooFewSamples { .. })
        ));
    }

    #[test]
    fn depth_limit_is_respected() {
        let x: Vec<Vec<f64>> = (0..64).map(|i| vec![i as f64]).collect();
        let y: Vec<f64> = (0..64).map(|i| i as f64).collect();
        let hp = ForestHyperparams {
            max_depth: Some(3),
            ..exact()
        };
        let m = train_forest(&x, &y, hp, 0).unwrap();
        assert_eq!(m.trees[0].depth(), 3);
    }

    #[test]
    fn round_trips_through_json() {
        let x: Vec<Vec<f64>> = (0..20).map(|i| vec![i as f64, (i * i) as f64]).collect();
        let y: Vec<f64> = x.iter().map(|r| r[0] * 2.0).collect();
        let hp = ForestHyperparams {
            n_trees: 5,
            ..Default::default()
        };
        let m = train_forest(&x, &y, hp, 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.json");
        m.write(&p).unwrap();
        let v: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(&p).unwrap()).unwrap();
        assert!(
            v.get("trees").is_some() && v.get("hyperparams").is_some() && v.get("seed").is_some()
        );
        assert_eq!(ForestModel::read(&p).unwrap(), m);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn predictions_stay_within_label_range(
            data in prop::collection::vec((0.0f64..10.0, 0.0f64..1.0, -50.0f64..50.0), 2..40),
            q in (-5.0f64..15.0, -1.0f64..2.0),
            seed in any::<u64>(),
        ) {
            let x: Vec<Vec<f64>> = data.iter().map(|d| vec![d.0, d.1]).collect();
            let y: Vec<f64> = data.iter().map(|d| d.2).collect();
            let hp = ForestHyperparams { n_trees: 8, ..Default::default() };
            let m = train_forest(&x, &y, hp, seed).unwrap();
            let lo = y.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = y.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let p = m.predict(&[q.0, q.1]);
            prop_assert!(p >= lo - 1e-9 && p <= hi + 1e-9);
            prop_assert_eq!(train_forest(&x, &y, hp, seed).unwrap(), m);
        }
    }
}
