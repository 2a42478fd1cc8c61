use nalgebra::{DMatrix, DVector};

use super::{check_inputs, FittedParams, ModelError, ModelSpec, RidgeParams, TrainedModel};

struct Centered {
    x: DMatrix<f64>,
    y: DVector<f64>,
    x_mean: Vec<f64>,
    y_mean: f64,
}

fn center(x: &DMatrix<f64>, y: &[f64]) -> Centered {
    let n = x.nrows() as f64;
    let x_mean: Vec<f64> = x.column_iter().map(|c| c.sum() / n).collect();
    let y_mean = y.iter().sum::<f64>() / n;
    let xc = DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| x[(i, j)] - x_mean[j]);
    let yc = DVector::from_iterator(y.len(), y.iter().map(|v| v - y_mean));
    Centered {
        x: xc,
        y: yc,
        x_mean,
        y_mean,
    }
}

/// Solve `min ||y - Xw||² + λ||w||²` via SVD filter factors `σ / (σ² + λ)`.
///
/// Singular values below the rank tolerance are treated as zero, which
/// yields the minimum-norm solution when `λ = 0`. Returns the weights and
/// whether the design was rank deficient.
fn svd_solve(x: &DMatrix<f64>, y: &DVector<f64>, lambda: f64) -> (Vec<f64>, bool) {
    let q = x.ncols();
    if q == 0 {
        return (vec![], false);
    }
    let svd = x.clone().svd(true, true);
    let u = svd.u.as_ref().expect("u computed");
    let v_t = svd.v_t.as_ref().expect("v_t computed");
    let s = &svd.singular_values;
    let s_max = s.iter().cloned().fold(0.0, f64::max);
    let tol = s_max * f64::EPSILON * x.nrows().max(q) as f64;
    let mut deficient = s.len() < q;
    let mut w = DVector::zeros(q);
    for (i, &sigma) in s.iter().enumerate() {
        if sigma <= tol {
            deficient = true;
            continue;
        }
        let coef = u.column(i).dot(y) * sigma / (sigma * sigma + lambda);
        w += v_t.row(i).transpose() * coef;
    }
    (w.iter().copied().collect(), deficient)
}

fn linear_model(
    spec: ModelSpec,
    names: &[String],
    intercept: f64,
    coefficients: Vec<f64>,
    warnings: Vec<String>,
) -> TrainedModel {
    TrainedModel {
        spec,
        feature_names: names.to_vec(),
        params: FittedParams::Linear {
            intercept,
            coefficients,
        },
        gain_by_feature: Default::default(),
        warnings,
    }
}

/// Ordinary least squares with intercept.
pub fn fit_linear(
    names: &[String],
    x: &DMatrix<f64>,
    y: &[f64],
) -> Result<TrainedModel, ModelError> {
    check_inputs(x, y)?;
    if x.nrows() <= x.ncols() {
        return Err(ModelError::TooFewSamples {
            n: x.nrows(),
            need: x.ncols() + 1,
        });
    }
    let c = center(x, y);
    let (w, deficient) = svd_solve(&c.x, &c.y, 0.0);
    let mut warnings = Vec::new();
    if deficient {
        let msg = "rank-deficient design; returning minimum-norm least-squares solution".to_string();
        log::debug!("{msg}");
        warnings.push(msg);
    }
    let intercept = c.y_mean - w.iter().zip(&c.x_mean).map(|(a, b)| a * b).sum::<f64>();
    Ok(linear_model(ModelSpec::Linear, names, intercept, w, warnings))
}

/// Ridge regression; the intercept is not penalized.
pub fn fit_ridge(
    names: &[String],
    x: &DMatrix<f64>,
    y: &[f64],
    params: &RidgeParams,
) -> Result<TrainedModel, ModelError> {
    check_inputs(x, y)?;
    if x.nrows() < 2 {
        return Err(ModelError::TooFewSamples { n: x.nrows(), need: 2 });
    }
    let mut c = center(x, y);
    let n = x.nrows() as f64;
    let scale: Vec<f64> = if params.standardize {
        c.x.column_iter()
            .map(|col| (col.iter().map(|v| v * v).sum::<f64>() / n).sqrt())
            .collect()
    } else {
        vec![1.0; x.ncols()]
    };
    for (j, &s) in scale.iter().enumerate() {
        let mut col = c.x.column_mut(j);
        if s > 0.0 {
            col /= s;
        } else {
            col.fill(0.0);
        }
    }
    let (w_std, _) = svd_solve(&c.x, &c.y, params.lambda);
    let w: Vec<f64> = w_std
        .iter()
        .zip(&scale)
        .map(|(w, &s)| if s > 0.0 { w / s } else { 0.0 })
        .collect();
    let intercept = c.y_mean - w.iter().zip(&c.x_mean).map(|(a, b)| a * b).sum::<f64>();
    Ok(linear_model(ModelSpec::Ridge(*params), names, intercept, w, vec![]))
}
