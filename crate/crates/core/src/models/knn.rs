use nalgebra::DMatrix;

use super::{check_inputs, FittedParams, KnnParams, ModelError, ModelSpec, TrainedModel};

/// Exact k-nearest-neighbour regression on standardized inputs.
pub fn fit_knn(
    names: &[String],
    x: &DMatrix<f64>,
    y: &[f64],
    k: usize,
) -> Result<TrainedModel, ModelError> {
    check_inputs(x, y)?;
    let n = x.nrows();
    if k > n {
        return Err(ModelError::KTooLarge { k, n });
    }
    let nf = n as f64;
    let mean: Vec<f64> = x.column_iter().map(|c| c.sum() / nf).collect();
    let scale: Vec<f64> = x
        .column_iter()
        .zip(&mean)
        .map(|(c, m)| (c.iter().map(|v| (v - m).powi(2)).sum::<f64>() / nf).sqrt())
        .collect();
    let train_x = (0..n)
        .map(|i| standardize((0..x.ncols()).map(|j| x[(i, j)]), &mean, &scale))
        .collect();
    Ok(TrainedModel {
        spec: ModelSpec::Knn(KnnParams { k }),
        feature_names: names.to_vec(),
        params: FittedParams::Knn {
            k,
            mean,
            scale,
            train_x,
            train_y: y.to_vec(),
        },
        gain_by_feature: Default::default(),
        warnings: vec![],
    })
}

fn standardize(row: impl Iterator<Item = f64>, mean: &[f64], scale: &[f64]) -> Vec<f64> {
    row.zip(mean.iter().zip(scale))
        .map(|(v, (m, s))| if *s > 0.0 { (v - m) / s } else { 0.0 })
        .collect()
}

/// Mean target of the `k` nearest rows; distance ties go to the lower row index.
pub(super) fn predict(
    k: usize,
    mean: &[f64],
    scale: &[f64],
    train_x: &[Vec<f64>],
    train_y: &[f64],
    row: &[f64],
) -> f64 {
    let q = standardize(row.iter().copied(), mean, scale);
    let mut dist: Vec<(f64, usize)> = train_x
        .iter()
        .enumerate()
        .map(|(i, t)| (t.iter().zip(&q).map(|(a, b)| (a - b).powi(2)).sum::<f64>(), i))
        .collect();
    let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    if k < dist.len() {
        dist.select_nth_unstable_by(k - 1, cmp);
        dist.truncate(k);
    }
    dist.iter().map(|&(_, i)| train_y[i]).sum::<f64>() / k as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_points(k: usize) -> TrainedModel {
        let x = DMatrix::from_column_slice(2, 1, &[0.0, 10.0]);
        fit_knn(&["x".to_string()], &x, &[0.0, 10.0], k).unwrap()
    }

    #[test]
    fn nearest_point() {
        assert_eq!(two_points(1).predict_row(&[1.0]), 0.0);
        assert_eq!(two_points(1).predict_row(&[10.0]), 10.0);
    }

    #[test]
    fn k_equals_n_is_mean() {
        for q in [-5.0, 3.0, 100.0] {
            assert_eq!(two_points(2).predict_row(&[q]), 5.0);
        }
    }

    #[test]
    fn equidistant_tie_prefers_lower_index() {
        assert_eq!(two_points(1).predict_row(&[5.0]), 0.0);
    }

    #[test]
    fn k_too_large() {
        let x = DMatrix::from_column_slice(2, 1, &[0.0, 1.0]);
        assert_eq!(
            fit_knn(&["x".to_string()], &x, &[0.0, 1.0], 3).unwrap_err(),
            ModelError::KTooLarge { k: 3, n: 2 }
        );
    }

    #[test]
    fn constant_feature_ignored() {
        let x = DMatrix::from_row_slice(3, 2, &[0.0, 7.0, 1.0, 7.0, 2.0, 7.0]);
        let m = fit_knn(&["a".into(), "b".into()], &x, &[10.0, 20.0, 30.0], 1).unwrap();
        assert_eq!(m.predict_row(&[2.1, -1000.0]), 30.0);
    }
}
