use nalgebra::DMatrix;

use super::tree::{grow, node_mean, split_gain, midpoint, Candidate, SplitFinder};
use super::{check_inputs, gains_map, FittedParams, GbdtParams, ModelError, ModelSpec, TrainedModel};

/// Equal-frequency cut points for one feature.
///
/// With at most `bins` distinct values every gap between them is a cut, so
/// histogram search degenerates to exact search.
fn bin_thresholds(values: &[f64], bins: usize) -> Vec<f64> {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut distinct = sorted.clone();
    distinct.dedup();
    if distinct.len() <= bins {
        return distinct.windows(2).map(|w| midpoint(w[0], w[1])).collect();
    }
    let n = sorted.len();
    let mut cuts: Vec<f64> = (1..bins)
        .map(|i| i * n / bins)
        .filter(|&pos| pos > 0 && sorted[pos - 1] != sorted[pos])
        .map(|pos| midpoint(sorted[pos - 1], sorted[pos]))
        .collect();
    cuts.dedup();
    cuts
}

struct Binned {
    /// `thresholds[j][b]` separates bin `b` from `b + 1`.
    thresholds: Vec<Vec<f64>>,
    /// `bins[j][i]`: bin of row `i` on feature `j`.
    bins: Vec<Vec<u32>>,
}

impl Binned {
    fn new(x: &DMatrix<f64>, n_bins: usize) -> Self {
        let mut thresholds = Vec::with_capacity(x.ncols());
        let mut bins = Vec::with_capacity(x.ncols());
        for col in x.column_iter() {
            let vals: Vec<f64> = col.iter().copied().collect();
            let t = bin_thresholds(&vals, n_bins);
            bins.push(vals.iter().map(|v| t.partition_point(|c| c < v) as u32).collect());
            thresholds.push(t);
        }
        Self { thresholds, bins }
    }
}

impl SplitFinder for Binned {
    fn best_split(&self, rows: &[usize], y: &[f64], min_leaf: usize) -> Option<Candidate> {
        let n = rows.len();
        let mean = node_mean(rows, y);
        let s: f64 = rows.iter().map(|&i| y[i] - mean).sum();
        let mut best: Option<Candidate> = None;
        for (j, thr) in self.thresholds.iter().enumerate() {
            if thr.is_empty() {
                continue;
            }
            let col = &self.bins[j];
            let mut sum = vec![0.0; thr.len() + 1];
            let mut cnt = vec![0usize; thr.len() + 1];
            for &i in rows {
                let b = col[i] as usize;
                sum[b] += y[i] - mean;
                cnt[b] += 1;
            }
            let (mut sl, mut nl) = (0.0, 0usize);
            for b in 0..thr.len() {
                sl += sum[b];
                nl += cnt[b];
                // An empty bin repeats the previous partition at a higher threshold.
                if cnt[b] == 0 || nl < min_leaf || n - nl < min_leaf {
                    continue;
                }
                let gain = split_gain(sl, nl, s, n);
                if best.is_none_or(|c| gain > c.gain) {
                    best = Some(Candidate {
                        feature: j,
                        threshold: thr[b],
                        gain,
                        bin: b as u32,
                    });
                }
            }
        }
        best
    }

    fn goes_left(&self, row: usize, c: &Candidate) -> bool {
        self.bins[c.feature][row] <= c.bin
    }
}

fn rmse_of(y: &[f64], f: &[f64]) -> f64 {
    (y.iter().zip(f).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / y.len() as f64).sqrt()
}

/// Squared-error gradient boosting over histogram-split regression trees.
pub fn fit_gbdt(
    names: &[String],
    x: &DMatrix<f64>,
    y: &[f64],
    params: &GbdtParams,
) -> Result<TrainedModel, ModelError> {
    check_inputs(x, y)?;
    let n = x.nrows();
    let need = (2 * params.min_samples_leaf).max(1);
    if n < need {
        return Err(ModelError::TooFewSamples { n, need });
    }
    let binned = Binned::new(x, params.histogram_bins);
    let rows: Vec<Vec<f64>> = (0..n).map(|i| x.row(i).iter().copied().collect()).collect();
    let base = y.iter().sum::<f64>() / n as f64;
    let lr = params.learning_rate;
    let mut f = vec![base; n];
    let mut gains = vec![0.0; x.ncols()];
    let mut trees = Vec::with_capacity(params.n_trees);
    let mut train_rmse = Vec::with_capacity(params.n_trees + 1);
    train_rmse.push(rmse_of(y, &f));
    for _ in 0..params.n_trees {
        let resid: Vec<f64> = y.iter().zip(&f).map(|(a, b)| a - b).collect();
        let tree = grow(
            &binned,
            &resid,
            (0..n).collect(),
            Some(params.max_depth),
            params.min_samples_leaf,
            &mut gains,
        );
        for (fi, row) in f.iter_mut().zip(&rows) {
            *fi += lr * tree.predict_row(row);
        }
        train_rmse.push(rmse_of(y, &f));
        trees.push(tree);
    }
    Ok(TrainedModel {
        spec: ModelSpec::Gbdt(*params),
        feature_names: names.to_vec(),
        params: FittedParams::Gbdt {
            base,
            learning_rate: lr,
            trees,
            train_rmse,
        },
        gain_by_feature: gains_map(names, &gains),
        warnings: vec![],
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(n_trees: usize, lr: f64, depth: usize) -> GbdtParams {
        GbdtParams {
            n_trees,
            learning_rate: lr,
            max_depth: depth,
            min_samples_leaf: 1,
            histogram_bins: 255,
        }
    }

    #[test]
    fn thresholds_exact_when_few_values() {
        assert_eq!(bin_thresholds(&[3.0, 1.0, 2.0, 1.0], 255), vec![1.5, 2.5]);
        assert!(bin_thresholds(&[4.0; 5], 255).is_empty());
    }

    #[test]
    fn thresholds_equal_frequency() {
        let v: Vec<f64> = (0..100).map(f64::from).collect();
        let t = bin_thresholds(&v, 4);
        assert_eq!(t, vec![24.5, 49.5, 74.5]);
    }

    #[test]
    fn bin_index_matches_threshold_rule() {
        let x = DMatrix::from_column_slice(6, 1, &[0.0, 1.0, 1.0, 2.0, 5.0, 9.0]);
        let b = Binned::new(&x, 3);
        for (i, &v) in x.column(0).iter().enumerate() {
            for (k, &t) in b.thresholds[0].iter().enumerate() {
                assert_eq!(v <= t, b.bins[0][i] as usize <= k);
            }
        }
    }

    #[test]
    fn zero_learning_rate_predicts_mean() {
        let x = DMatrix::from_column_slice(4, 1, &[0.0, 1.0, 2.0, 3.0]);
        let m = fit_gbdt(&["a".into()], &x, &[1.0, 2.0, 3.0, 6.0], &p(10, 0.0, 3)).unwrap();
        for v in m.predict(&x).unwrap() {
            assert_eq!(v, 3.0);
        }
    }

    #[test]
    fn single_stump_with_unit_rate() {
        let x = DMatrix::from_column_slice(4, 1, &[0.0, 1.0, 2.0, 3.0]);
        let y = [0.0, 0.0, 4.0, 4.0];
        let m = fit_gbdt(&["a".into()], &x, &y, &p(1, 1.0, 1)).unwrap();
        assert_eq!(m.predict(&x).unwrap(), y.to_vec());
        assert_eq!(m.gain_by_feature["a"], 16.0);
    }

    #[test]
    fn training_rmse_non_increasing() {
        let x = DMatrix::from_fn(80, 2, |i, j| ((i * 31 + j * 7) % 23) as f64);
        let y: Vec<f64> = (0..80).map(|i| ((i * 13) % 7) as f64 * 0.5).collect();
        let m = fit_gbdt(&["a".into(), "b".into()], &x, &y, &p(50, 0.3, 3)).unwrap();
        let c = m.training_curve().unwrap();
        assert_eq!(c.len(), 51);
        assert!(c.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-12)));
    }

    #[test]
    fn leaf_size_precondition() {
        let x = DMatrix::from_column_slice(3, 1, &[0.0, 1.0, 2.0]);
        let params = GbdtParams::default();
        assert!(matches!(
            fit_gbdt(&["a".into()], &x, &[0.0, 1.0, 2.0], &params),
            Err(ModelError::TooFewSamples { n: 3, need: 40 })
        ));
    }
}
