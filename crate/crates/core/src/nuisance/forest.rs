use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::Rng as _;
use rayon::prelude::*;

use crate::rng::{derive_seed, rng_from_seed, Rng};

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ForestParams {
    pub n_trees: usize,
    /// `None` grows trees until `min_leaf` stops them.
    pub max_depth: Option<usize>,
    pub min_leaf: usize,
}

impl Default for ForestParams {
    fn default() -> Self {
        Self {
            n_trees: 100,
            max_depth: None,
            min_leaf: 5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForestTask {
    Regression,
    Classification,
}

impl ForestTask {
    fn features_per_split(self, m: usize) -> usize {
        let k = match self {
            Self::Regression => m / 3,
            Self::Classification => (m as f64).sqrt().floor() as usize,
        };
        k.clamp(1, m.max(1))
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
enum Node {
    Leaf(f64),
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Tree {
    nodes: Vec<Node>,
}

impl Tree {
    pub fn predict_row(&self, x: &[f64]) -> f64 {
        let mut at = 0;
        loop {
            match self.nodes[at] {
                Node::Leaf(v) => return v,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    at = if x[feature] <= threshold { left } else { right };
                }
            }
        }
    }

    pub fn n_leaves(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| matches!(n, Node::Leaf(_)))
            .count()
    }
}

/// Bagged CART ensemble. Splits minimize the within-node sum of squares;
/// for 0/1 targets this is proportional to the weighted Gini impurity, so
/// classification leaves hold class-1 fractions.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Forest {
    trees: Vec<Tree>,
}

impl Forest {
    pub fn predict_row(&self, x: &[f64]) -> f64 {
        self.trees.iter().map(|t| t.predict_row(x)).sum::<f64>() / self.trees.len() as f64
    }

    pub fn predict(&self, x: &DMatrix<f64>) -> DVector<f64> {
        let rows: Vec<Vec<f64>> = (0..x.nrows())
            .map(|i| x.row(i).iter().copied().collect())
            .collect();
        DVector::from_vec(rows.par_iter().map(|r| self.predict_row(r)).collect())
    }

    pub fn trees(&self) -> &[Tree] {
        &self.trees
    }
}

pub fn fit_forest(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    params: &ForestParams,
    task: ForestTask,
    seed: u64,
) -> Forest {
    let n_trees = params.n_trees.max(1);
    // column-major copy so feature scans are contiguous
    let cols: Vec<Vec<f64>> = (0..x.ncols())
        .map(|j| x.column(j).iter().copied().collect())
        .collect();
    let ys: Vec<f64> = y.iter().copied().collect();
    let trees = (0..n_trees)
        .into_par_iter()
        .map(|t| {
            let mut rng = rng_from_seed(derive_seed(seed, t as u64));
            let n = ys.len();
            let rows: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
            let mut builder = Builder {
                cols: &cols,
                y: &ys,
                params,
                mtry: task.features_per_split(cols.len()),
                rng,
                nodes: Vec::new(),
            };
            builder.grow(rows, 0);
            Tree {
                nodes: builder.nodes,
            }
        })
        .collect();
    Forest { trees }
}

struct Builder<'a> {
    cols: &'a [Vec<f64>],
    y: &'a [f64],
    params: &'a ForestParams,
    mtry: usize,
    rng: Rng,
    nodes: Vec<Node>,
}

struct BestSplit {
    feature: usize,
    threshold: f64,
    sse: f64,
}

impl Builder<'_> {
    fn grow(&mut self, rows: Vec<usize>, depth: usize) -> usize {
        let id = self.nodes.len();
        let n = rows.len();
        let sum: f64 = rows.iter().map(|&i| self.y[i]).sum();
        let mean = sum / n as f64;
        self.nodes.push(Node::Leaf(mean));

        let depth_ok = self.params.max_depth.is_none_or(|d| depth < d);
        let min_leaf = self.params.min_leaf.max(1);
        if !depth_ok || n < 2 * min_leaf {
            return id;
        }
        let sse_parent: f64 = rows.iter().map(|&i| (self.y[i] - mean).powi(2)).sum();
        if sse_parent <= 1e-14 * (1.0 + sum.abs()) {
            return id;
        }
        let Some(best) = self.best_split(&rows, min_leaf) else {
            return id;
        };
        if best.sse >= sse_parent {
            return id;
        }
        let col = &self.cols[best.feature];
        let (left_rows, right_rows): (Vec<usize>, Vec<usize>) =
            rows.iter().partition(|&&i| col[i] <= best.threshold);
        let left = self.grow(left_rows, depth + 1);
        let right = self.grow(right_rows, depth + 1);
        self.nodes[id] = Node::Split {
            feature: best.feature,
            threshold: best.threshold,
            left,
            right,
        };
        id
    }

    fn best_split(&mut self, rows: &[usize], min_leaf: usize) -> Option<BestSplit> {
        let m = self.cols.len();
        let n = rows.len();
        let features = sample(&mut self.rng, m, self.mtry.min(m));
        let mut best: Option<BestSplit> = None;
        let mut pairs: Vec<(f64, f64)> = Vec::with_capacity(n);
        for feature in features.iter() {
            let col = &self.cols[feature];
            pairs.clear();
            pairs.extend(rows.iter().map(|&i| (col[i], self.y[i])));
            pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
            let total: f64 = pairs.iter().map(|p| p.1).sum();
            let total_sq: f64 = pairs.iter().map(|p| p.1 * p.1).sum();
            let (mut ls, mut lsq) = (0.0, 0.0);
            for k in 0..n - 1 {
                ls += pairs[k].1;
                lsq += pairs[k].1 * pairs[k].1;
                let nl = k + 1;
                let nr = n - nl;
                if nl < min_leaf {
                    continue;
                }
                if nr < min_leaf {
                    break;
                }
                if pairs[k].0 == pairs[k + 1].0 {
                    continue;
                }
                let rs = total - ls;
                let rsq = total_sq - lsq;
                let sse = (lsq - ls * ls / nl as f64) + (rsq - rs * rs / nr as f64);
                if best.as_ref().is_none_or(|b| sse < b.sse) {
                    let lo = pairs[k].0;
                    let hi = pairs[k + 1].0;
                    let mut threshold = 0.5 * (lo + hi);
                    if threshold >= hi {
                        threshold = lo;
                    }
                    best = Some(BestSplit {
                        feature,
                        threshold,
                        sse,
                    });
                }
            }
        }
        best
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_target_gives_constant_prediction() {
        let x = DMatrix::from_fn(50, 3, |i, j| (i * (j + 1)) as f64);
        let y = DVector::from_element(50, 5.0);
        let f = fit_forest(&x, &y, &ForestParams::default(), ForestTask::Regression, 1);
        assert!(f.predict(&x).iter().all(|v| (v - 5.0).abs() < 1e-12));
    }

    #[test]
    fn step_function_is_learned() {
        let x = DMatrix::from_fn(200, 2, |i, j| {
            if j == 0 {
                i as f64
            } else {
                ((i * 37) % 11) as f64
            }
        });
        let y = DVector::from_fn(200, |i, _| if i < 100 { 0.0 } else { 1.0 });
        let f = fit_forest(
            &x,
            &y,
            &ForestParams {
                n_trees: 20,
                ..Default::default()
            },
            ForestTask::Classification,
            3,
        );
        let p = f.predict(&x);
        assert!(p[10] < 0.1 && p[190] > 0.9);
    }

    #[test]
    fn leaves_respect_min_leaf_and_depth() {
        let x = DMatrix::from_fn(100, 1, |i, _| i as f64);
        let y = DVector::from_fn(100, |i, _| (i as f64).sin());
        let p = ForestParams {
            n_trees: 3,
            max_depth: Some(2),
            min_leaf: 5,
        };
        let f = fit_forest(&x, &y, &p, ForestTask::Regression, 0);
        assert!(f.trees().iter().all(|t| t.n_leaves() <= 4));
    }

    #[test]
    fn deterministic_given_seed() {
        let x = DMatrix::from_fn(60, 4, |i, j| ((i * 7 + j * 13) % 23) as f64);
        let y = DVector::from_fn(60, |i, _| (i % 5) as f64);
        let a = fit_forest(&x, &y, &ForestParams::default(), ForestTask::Regression, 9);
        let b = fit_forest(&x, &y, &ForestParams::default(), ForestTask::Regression, 9);
        assert_eq!(a, b);
    }

    #[test]
    fn features_per_split_defaults() {
        assert_eq!(ForestTask::Classification.features_per_split(10), 3);
        assert_eq!(ForestTask::Regression.features_per_split(10), 3);
        assert_eq!(ForestTask::Regression.features_per_split(2), 1);
        assert_eq!(ForestTask::Classification.features_per_split(25), 5);
    }
}
