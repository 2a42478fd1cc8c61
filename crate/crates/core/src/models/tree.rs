use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::{check_inputs, gains_map, FittedParams, ModelError, ModelSpec, TrainedModel, TreeParams};

/// Splits below this fraction of the node's raw sum of squares are noise.
const MIN_RELATIVE_GAIN: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "node", rename_all = "snake_case")]
pub enum Node {
    Leaf {
        value: f64,
        samples: usize,
    },
    /// Rows with `x[feature] <= threshold` go left.
    Split {
        feature: usize,
        threshold: f64,
        gain: f64,
        samples: usize,
        left: usize,
        right: usize,
    },
}

/// Arena-stored binary regression tree; node 0 is the root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionTree {
    nodes: Vec<Node>,
}

impl RegressionTree {
    pub fn leaf(value: f64, samples: usize) -> Self {
        Self {
            nodes: vec![Node::Leaf { value, samples }],
        }
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn predict_row(&self, row: &[f64]) -> f64 {
        let mut at = 0;
        loop {
            match self.nodes[at] {
                Node::Leaf { value, .. } => return value,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                    ..
                } => at = if row[feature] <= threshold { left } else { right },
            }
        }
    }

    pub fn n_splits(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| matches!(n, Node::Split { .. }))
            .count()
    }

    pub fn depth(&self) -> usize {
        fn go(t: &RegressionTree, at: usize) -> usize {
            match t.nodes[at] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + go(t, left).max(go(t, right)),
            }
        }
        go(self, 0)
    }
}

#[derive(Debug, Clone, Copy)]
pub(super) struct Candidate {
    pub feature: usize,
    pub threshold: f64,
    pub gain: f64,
    /// Histogram bin the left side ends at; unused by the exact finder.
    pub bin: u32,
}

pub(super) trait SplitFinder {
    fn best_split(&self, rows: &[usize], y: &[f64], min_leaf: usize) -> Option<Candidate>;
    fn goes_left(&self, row: usize, c: &Candidate) -> bool;
}

/// Candidate gain given centered left sum `sl` and total centered sum `s`.
#[inline]
pub(super) fn split_gain(sl: f64, nl: usize, s: f64, n: usize) -> f64 {
    let sr = s - sl;
    let nr = n - nl;
    sl * sl / nl as f64 + sr * sr / nr as f64 - s * s / n as f64
}

/// Midpoint guarded so that `lo <= t < hi` for adjacent floats.
pub(super) fn midpoint(lo: f64, hi: f64) -> f64 {
    let m = lo + (hi - lo) / 2.0;
    if m >= hi {
        lo
    } else {
        m
    }
}

pub(super) fn node_mean(rows: &[usize], y: &[f64]) -> f64 {
    rows.iter().map(|&i| y[i]).sum::<f64>() / rows.len() as f64
}

/// Exhaustive threshold search over raw feature values.
pub(super) struct ExactFinder<'a> {
    pub x: &'a DMatrix<f64>,
}

impl SplitFinder for ExactFinder<'_> {
    fn best_split(&self, rows: &[usize], y: &[f64], min_leaf: usize) -> Option<Candidate> {
        let n = rows.len();
        let mean = node_mean(rows, y);
        let s: f64 = rows.iter().map(|&i| y[i] - mean).sum();
        let mut best: Option<Candidate> = None;
        let mut order = rows.to_vec();
        for j in 0..self.x.ncols() {
            let col = self.x.column(j);
            order.sort_by(|&a, &b| col[a].total_cmp(&col[b]).then(a.cmp(&b)));
            let mut sl = 0.0;
            for p in 1..n {
                sl += y[order[p - 1]] - mean;
                let (lo, hi) = (col[order[p - 1]], col[order[p]]);
                if lo == hi || p < min_leaf || n - p < min_leaf {
                    continue;
                }
                let gain = split_gain(sl, p, s, n);
                if best.is_none_or(|b| gain > b.gain) {
                    best = Some(Candidate {
                        feature: j,
                        threshold: midpoint(lo, hi),
                        gain,
                        bin: 0,
                    });
                }
            }
        }
        best
    }

    fn goes_left(&self, row: usize, c: &Candidate) -> bool {
        self.x[(row, c.feature)] <= c.threshold
    }
}

/// Grow a tree depth-first. `gains[f]` accumulates the SSE reduction of
/// every split on feature `f`.
pub(super) fn grow<F: SplitFinder>(
    finder: &F,
    y: &[f64],
    rows: Vec<usize>,
    max_depth: Option<usize>,
    min_leaf: usize,
    gains: &mut [f64],
) -> RegressionTree {
    let mut nodes: Vec<Node> = Vec::new();
    // (slot, rows, depth); slot is the arena index reserved for this node.
    nodes.push(Node::Leaf {
        value: 0.0,
        samples: 0,
    });
    let mut stack = vec![(0usize, rows, 0usize)];
    while let Some((slot, rows, depth)) = stack.pop() {
        let n = rows.len();
        let value = node_mean(&rows, y);
        let can_split = max_depth.is_none_or(|d| depth < d) && n >= 2 * min_leaf && n >= 2;
        let split = can_split
            .then(|| finder.best_split(&rows, y, min_leaf))
            .flatten()
            .filter(|c| {
                let raw_ss: f64 = rows.iter().map(|&i| y[i] * y[i]).sum();
                c.gain > 0.0 && c.gain > MIN_RELATIVE_GAIN * raw_ss
            });
        match split {
            None => nodes[slot] = Node::Leaf { value, samples: n },
            Some(c) => {
                let (l, r): (Vec<usize>, Vec<usize>) =
                    rows.iter().partition(|&&i| finder.goes_left(i, &c));
                gains[c.feature] += c.gain;
                let left = nodes.len();
                let right = left + 1;
                nodes.push(Node::Leaf { value: 0.0, samples: 0 });
                nodes.push(Node::Leaf { value: 0.0, samples: 0 });
                nodes[slot] = Node::Split {
                    feature: c.feature,
                    threshold: c.threshold,
                    gain: c.gain,
                    samples: n,
                    left,
                    right,
                };
                // Right pushed first so the left subtree is expanded first.
                stack.push((right, r, depth + 1));
                stack.push((left, l, depth + 1));
            }
        }
    }
    RegressionTree { nodes }
}

/// CART regression tree with exhaustive split search.
pub fn fit_tree(
    names: &[String],
    x: &DMatrix<f64>,
    y: &[f64],
    params: &TreeParams,
) -> Result<TrainedModel, ModelError> {
    check_inputs(x, y)?;
    let need = 2 * params.min_samples_leaf;
    if x.nrows() < need.max(1) {
        return Err(ModelError::TooFewSamples { n: x.nrows(), need });
    }
    let mut gains = vec![0.0; x.ncols()];
    let tree = grow(
        &ExactFinder { x },
        y,
        (0..x.nrows()).collect(),
        params.max_depth,
        params.min_samples_leaf,
        &mut gains,
    );
    Ok(TrainedModel {
        spec: ModelSpec::Tree(*params),
        feature_names: names.to_vec(),
        params: FittedParams::Tree { tree },
        gain_by_feature: gains_map(names, &gains),
        warnings: vec![],
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stump() -> TreeParams {
        TreeParams {
            max_depth: Some(1),
            min_samples_leaf: 1,
        }
    }

    fn tree_of(m: &TrainedModel) -> &RegressionTree {
        match &m.params {
            FittedParams::Tree { tree } => tree,
            _ => unreachable!(),
        }
    }

    #[test]
    fn two_point_stump() {
        let x = DMatrix::from_column_slice(2, 1, &[0.0, 1.0]);
        let m = fit_tree(&["x".into()], &x, &[0.0, 1.0], &stump()).unwrap();
        match tree_of(&m).nodes()[0] {
            Node::Split { threshold, gain, .. } => {
                assert_eq!(threshold, 0.5);
                assert_eq!(gain, 0.5);
            }
            _ => panic!("expected split"),
        }
        assert_eq!(m.predict_row(&[0.0]), 0.0);
        assert_eq!(m.predict_row(&[1.0]), 1.0);
        assert_eq!(m.gain_by_feature["x"], 0.5);
    }

    #[test]
    fn constant_target_is_single_leaf() {
        let x = DMatrix::from_column_slice(5, 1, &[0.0, 1.0, 2.0, 3.0, 4.0]);
        let m = fit_tree(&["x".into()], &x, &[3.3; 5], &TreeParams::default()).unwrap();
        assert_eq!(tree_of(&m).n_splits(), 0);
        assert!(m.gain_by_feature.is_empty());
    }

    #[test]
    fn min_leaf_respected() {
        let x = DMatrix::from_column_slice(6, 1, &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
        let y = [0.0, 10.0, 10.0, 10.0, 10.0, 10.0];
        let p = TreeParams {
            max_depth: Some(1),
            min_samples_leaf: 2,
        };
        let m = fit_tree(&["x".into()], &x, &y, &p).unwrap();
        match tree_of(&m).nodes()[0] {
            Node::Split { threshold, .. } => assert_eq!(threshold, 1.5),
            _ => panic!(),
        }
    }

    #[test]
    fn too_few_rows_for_leaf_size() {
        let x = DMatrix::from_column_slice(3, 1, &[0.0, 1.0, 2.0]);
        let p = TreeParams {
            max_depth: None,
            min_samples_leaf: 2,
        };
        assert!(fit_tree(&["x".into()], &x, &[0.0, 1.0, 2.0], &p).is_err());
    }

    #[test]
    fn unlimited_depth_interpolates_training_data() {
        let x = DMatrix::from_column_slice(8, 1, &[3.0, 1.0, 4.0, 1.5, 5.0, 9.0, 2.0, 6.0]);
        let y = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0];
        let m = fit_tree(&["x".into()], &x, &y, &TreeParams::default()).unwrap();
        assert_eq!(m.predict(&x).unwrap(), y.to_vec());
    }

    #[test]
    fn midpoint_guard() {
        let a = 1.0f64;
        let b = f64::from_bits(a.to_bits() + 1);
        let t = midpoint(a, b);
        assert!(a <= t && t < b);
    }

    #[test]
    fn equal_gain_prefers_lower_feature() {
        // Both columns induce the same partition.
        let x = DMatrix::from_row_slice(4, 2, &[0.0, 10.0, 1.0, 11.0, 2.0, 12.0, 3.0, 13.0]);
        let m = fit_tree(&["a".into(), "b".into()], &x, &[0.0, 0.0, 1.0, 1.0], &stump()).unwrap();
        match tree_of(&m).nodes()[0] {
            Node::Split { feature, .. } => assert_eq!(feature, 0),
            _ => panic!(),
        }
    }
}
