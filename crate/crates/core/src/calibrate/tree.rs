use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{argmax_lowest, Rows, N_OUT};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
enum Node {
    Split { feature: usize, threshold: f64, left: usize, right: usize },
    Leaf { class: usize },
}

/// CART classification tree with Gini impurity, grown to purity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    nodes: Vec<Node>,
}

fn gini(counts: &[usize; N_OUT], n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let n = n as f64;
    1.0 - counts.iter().map(|&c| (c as f64 / n).powi(2)).sum::<f64>()
}

struct BestSplit {
    feature: usize,
    threshold: f64,
    impurity: f64,
}

fn best_split_on(x: &Rows, y: &[usize], samples: &[usize], feature: usize, best: &mut Option<BestSplit>) -> bool {
    let mut order: Vec<(f32, usize)> = samples.iter().map(|&i| (x.get(i, feature), y[i])).collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0));
    if order.first().map(|o| o.0) == order.last().map(|o| o.0) {
        return false;
    }
    let n = order.len();
    let mut total = [0usize; N_OUT];
    order.iter().for_each(|o| total[o.1] += 1);
    let mut left = [0usize; N_OUT];
    for k in 1..n {
        left[order[k - 1].1] += 1;
        if order[k].0 == order[k - 1].0 {
            continue;
        }
        let mut right = total;
        (0..N_OUT).for_each(|c| right[c] -= left[c]);
        let impurity = (k as f64 * gini(&left, k) + (n - k) as f64 * gini(&right, n - k)) / n as f64;
        if best.as_ref().is_none_or(|b| impurity < b.impurity) {
            let (lo, hi) = (order[k - 1].0 as f64, order[k].0 as f64);
            *best = Some(BestSplit { feature, threshold: lo + (hi - lo) / 2.0, impurity });
        }
    }
    true
}

impl Tree {
    /// Fit on the rows listed in `samples` (repeats allowed). At each node
    /// features are visited in random order until `max_features`
    /// non-constant ones have been scored.
    pub fn fit<R: Rng + ?Sized>(x: &Rows, y: &[usize], samples: Vec<usize>, max_features: usize, rng: &mut R) -> Tree {
        let mut nodes = vec![Node::Leaf { class: 0 }];
        let mut stack = vec![(0usize, samples)];
        let mut features: Vec<usize> = (0..x.dim).collect();
        while let Some((id, node_samples)) = stack.pop() {
            let mut counts = [0usize; N_OUT];
            node_samples.iter().for_each(|&i| counts[y[i]] += 1);
            let class = argmax_lowest(&counts.map(|c| c as f64));
            if counts[class] == node_samples.len() {
                nodes[id] = Node::Leaf { class };
                continue;
            }
            features.shuffle(rng);
            let mut best = None;
            let mut scored = 0;
            for &f in &features {
                if best_split_on(x, y, &node_samples, f, &mut best) {
                    scored += 1;
                    if scored >= max_features {
                        break;
                    }
                }
            }
            let Some(split) = best else {
                nodes[id] = Node::Leaf { class };
                continue;
            };
            let (l, r): (Vec<usize>, Vec<usize>) =
                node_samples.iter().partition(|&&i| (x.get(i, split.feature) as f64) <= split.threshold);
            let (left, right) = (nodes.len(), nodes.len() + 1);
            nodes.push(Node::Leaf { class: 0 });
            nodes.push(Node::Leaf { class: 0 });
            nodes[id] = Node::Split { feature: split.feature, threshold: split.threshold, left, right };
            stack.push((right, r));
            stack.push((left, l));
        }
        Tree { nodes }
    }

    pub fn predict(&self, row: &[f32]) -> usize {
        let mut id = 0;
        loop {
            match &self.nodes[id] {
                Node::Leaf { class } => return *class,
                Node::Split { feature, threshold, left, right } => {
                    id = if row[*feature] as f64 <= *threshold { *left } else { *right };
                }
            }
        }
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }
}

/// Bootstrap-aggregated trees combined by majority vote.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Forest {
    trees: Vec<Tree>,
}

impl Forest {
    /// `tree_rng(t)` supplies the stream for tree `t` (bootstrap draw and
    /// feature subsampling).
    pub fn fit<R: Rng>(x: &Rows, y: &[usize], n_trees: usize, max_features: usize, mut tree_rng: impl FnMut(usize) -> R) -> Forest {
        let trees = (0..n_trees)
            .map(|t| {
                let mut rng = tree_rng(t);
                let boot: Vec<usize> = (0..x.n).map(|_| rng.random_range(0..x.n)).collect();
                Tree::fit(x, y, boot, max_features, &mut rng)
            })
            .collect();
        Forest { trees }
    }

    pub fn predict(&self, row: &[f32]) -> usize {
        let mut votes = [0.0; N_OUT];
        self.trees.iter().for_each(|t| votes[t.predict(row)] += 1.0);
        argmax_lowest(&votes)
    }

    pub fn trees(&self) -> &[Tree] {
        &self.trees
    }
}
