//! Random forest of Gini-split CART trees on bootstrap resamples.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::rng;

const LEAF: i64 = -1;

/// One tree, flattened. Node 0 is the root; leaves have `feature == -1`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tree {
    pub feature: Vec<i64>,
    pub threshold: Vec<f64>,
    pub left: Vec<i64>,
    pub right: Vec<i64>,
    /// `[genuine, fake]` bootstrap counts reaching each node.
    pub counts: Vec<[f64; 2]>,
}

impl Tree {
    fn leaf_of(&self, x: &[f64]) -> usize {
        let mut n = 0usize;
        while self.feature[n] != LEAF {
            let f = self.feature[n] as usize;
            n = if x[f] <= self.threshold[n] {
                self.left[n]
            } else {
                self.right[n]
            } as usize;
        }
        n
    }

    /// Fraction of fake samples in the leaf reached by `x`.
    pub fn leaf_probability(&self, x: &[f64]) -> f64 {
        let [g, f] = self.counts[self.leaf_of(x)];
        f / (g + f)
    }

    pub fn depth(&self) -> usize {
        fn walk(t: &Tree, n: usize) -> usize {
            if t.feature[n] == LEAF {
                0
            } else {
                1 + walk(t, t.left[n] as usize).max(walk(t, t.right[n] as usize))
            }
        }
        walk(self, 0)
    }

    pub fn len(&self) -> usize {
        self.feature.len()
    }

    pub fn is_empty(&self) -> bool {
        self.feature.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RandomForestModel {
    pub trees: Vec<Tree>,
    pub input_dim: usize,
}

impl RandomForestModel {
    pub fn n_estimators(&self) -> usize {
        self.trees.len()
    }

    /// Mean leaf probability of the fake class over trees.
    pub fn score(&self, x: &[f64]) -> f64 {
        self.trees.iter().map(|t| t.leaf_probability(x)).sum::<f64>() / self.trees.len() as f64
    }
}

fn gini(g: f64, f: f64) -> f64 {
    let n = g + f;
    if n == 0.0 {
        0.0
    } else {
        1.0 - (g / n).powi(2) - (f / n).powi(2)
    }
}

struct Split {
    feature: usize,
    threshold: f64,
    // weighted child impurity; lower is better
    cost: f64,
}

fn best_split_on(x: &[Vec<f64>], y: &[bool], idx: &[usize], feature: usize, total: [f64; 2]) -> Option<Split> {
    let mut order: Vec<(f64, bool)> = idx.iter().map(|&i| (x[i][feature], y[i])).collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0));
    if order[0].0 == order[order.len() - 1].0 {
        return None;
    }
    let n = order.len() as f64;
    let mut left = [0.0, 0.0];
    let mut best: Option<Split> = None;
    for k in 0..order.len() - 1 {
        left[usize::from(order[k].1)] += 1.0;
        if order[k].0 == order[k + 1].0 {
            continue;
        }
        let right = [total[0] - left[0], total[1] - left[1]];
        let nl = left[0] + left[1];
        let cost = (nl * gini(left[0], left[1]) + (n - nl) * gini(right[0], right[1])) / n;
        if best.as_ref().is_none_or(|b| cost < b.cost) {
            let mid = 0.5 * (order[k].0 + order[k + 1].0);
            // guard against the midpoint rounding onto the upper value
            let threshold = if mid < order[k + 1].0 { mid } else { order[k].0 };
            best = Some(Split {
                feature,
                threshold,
                cost,
            });
        }
    }
    best
}

/// Grows one tree on `idx` (a bootstrap multiset of row indices).
pub fn grow_tree(x: &[Vec<f64>], y: &[bool], idx: Vec<usize>, max_features: usize, r: &mut ChaCha8Rng) -> Tree {
    let d = x[0].len();
    let mut tree = Tree {
        feature: Vec::new(),
        threshold: Vec::new(),
        left: Vec::new(),
        right: Vec::new(),
        counts: Vec::new(),
    };
    let mut features: Vec<usize> = (0..d).collect();
    // (node id, rows)
    let mut stack = vec![(0usize, idx)];
    tree.feature.push(LEAF);
    tree.threshold.push(0.0);
    tree.left.push(LEAF);
    tree.right.push(LEAF);
    tree.counts.push([0.0; 2]);
    while let Some((node, rows)) = stack.pop() {
        let mut counts = [0.0, 0.0];
        for &i in &rows {
            counts[usize::from(y[i])] += 1.0;
        }
        tree.counts[node] = counts;
        if rows.len() < 2 || counts[0] == 0.0 || counts[1] == 0.0 {
            continue;
        }
        features.shuffle(r);
        let mut best: Option<Split> = None;
        for (tried, &f) in features.iter().enumerate() {
            // keep drawing past max_features only while no valid split exists
            if tried >= max_features && best.is_some() {
                break;
            }
            if let Some(s) = best_split_on(x, y, &rows, f, counts) {
                if best.as_ref().is_none_or(|b| s.cost < b.cost) {
                    best = Some(s);
                }
            }
        }
        let Some(split) = best else { continue };
        let (l_rows, r_rows): (Vec<usize>, Vec<usize>) =
            rows.into_iter().partition(|&i| x[i][split.feature] <= split.threshold);
        let l_id = tree.feature.len();
        for _ in 0..2 {
            tree.feature.push(LEAF);
            tree.threshold.push(0.0);
            tree.left.push(LEAF);
            tree.right.push(LEAF);
            tree.counts.push([0.0; 2]);
        }
        tree.feature[node] = split.feature as i64;
        tree.threshold[node] = split.threshold;
        tree.left[node] = l_id as i64;
        tree.right[node] = l_id as i64 + 1;
        stack.push((l_id + 1, r_rows));
        stack.push((l_id, l_rows));
    }
    tree
}

/// Fits `n_estimators` trees in parallel; tree `t` draws from its own stream
/// derived from `(seed, t)`, so the result does not depend on scheduling.
pub fn fit_forest(x: &[Vec<f64>], y: &[bool], n_estimators: usize, seed: u64) -> RandomForestModel {
    let d = x[0].len();
    let max_features = ((d as f64).sqrt().floor() as usize).max(1);
    let n = x.len();
    let trees = (0..n_estimators as u64)
        .into_par_iter()
        .map(|t| {
            let mut r = rng::rng(rng::derive(seed, "forest.tree", t));
            let idx: Vec<usize> = (0..n).map(|_| r.gen_range(0..n)).collect();
            grow_tree(x, y, idx, max_features, &mut r)
        })
        .collect();
    RandomForestModel { trees, input_dim: d }
}
