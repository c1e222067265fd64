use nalgebra::{DMatrix, DVector};

use crate::linalg::{column_means, column_stds, lstsq};

const MAX_ITER: usize = 100;
const TOL: f64 = 1e-8;
const MIN_WEIGHT: f64 = 1e-10;

/// Logistic regression on internally standardized features.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LogisticModel {
    pub mean: DVector<f64>,
    pub scale: DVector<f64>,
    /// `[intercept, w_1 .. w_m]` on the standardized scale.
    pub coef: DVector<f64>,
    pub iterations: usize,
    pub converged: bool,
}

fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

fn softplus(t: f64) -> f64 {
    if t > 0.0 {
        t + (-t).exp().ln_1p()
    } else {
        t.exp().ln_1p()
    }
}

impl LogisticModel {
    pub fn linear_predictor_row(&self, x: &[f64]) -> f64 {
        let mut t = self.coef[0];
        for (j, xj) in x.iter().enumerate() {
            t += self.coef[j + 1] * (xj - self.mean[j]) / self.scale[j];
        }
        t
    }

    pub fn predict_row(&self, x: &[f64]) -> f64 {
        sigmoid(self.linear_predictor_row(x))
    }

    pub fn predict(&self, x: &DMatrix<f64>) -> DVector<f64> {
        let design = self.design(x);
        (design * &self.coef).map(sigmoid)
    }

    fn design(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(x.nrows(), x.ncols() + 1, |i, j| {
            if j == 0 {
                1.0
            } else {
                (x[(i, j - 1)] - self.mean[j - 1]) / self.scale[j - 1]
            }
        })
    }
}

fn penalized_loss(
    design: &DMatrix<f64>,
    z: &DVector<f64>,
    coef: &DVector<f64>,
    lambda: f64,
) -> f64 {
    let eta = design * coef;
    let nll: f64 = eta
        .iter()
        .zip(z.iter())
        .map(|(e, zi)| softplus(*e) - zi * e)
        .sum();
    let pen: f64 = coef.iter().skip(1).map(|c| c * c).sum();
    nll + 0.5 * lambda * pen
}

/// Newton/IRLS fit with step halving. With `lambda = 0` each Newton step is
/// the minimum-norm least-squares step, so fitted probabilities do not
/// depend on invertible affine reparameterizations of the features.
pub fn fit_logistic(x: &DMatrix<f64>, z: &DVector<f64>, lambda: f64) -> LogisticModel {
    let (n, m) = x.shape();
    let mean = column_means(x);
    let scale = column_stds(x).map(|s| if s > 0.0 && s.is_finite() { s } else { 1.0 });
    let mut model = LogisticModel {
        mean,
        scale,
        coef: DVector::zeros(m + 1),
        iterations: 0,
        converged: false,
    };
    let design = model.design(x);
    let zbar = z.mean().clamp(1e-6, 1.0 - 1e-6);
    model.coef[0] = (zbar / (1.0 - zbar)).ln();

    let sqrt_lambda = lambda.max(0.0).sqrt();
    let extra = if lambda > 0.0 { m } else { 0 };
    let mut loss = penalized_loss(&design, z, &model.coef, lambda);
    for iter in 0..MAX_ITER {
        model.iterations = iter + 1;
        let eta = &design * &model.coef;
        let p = eta.map(sigmoid);
        let w = p.map(|pi| (pi * (1.0 - pi)).max(MIN_WEIGHT));
        let mut a = DMatrix::zeros(n + extra, m + 1);
        let mut b = DVector::zeros(n + extra);
        for i in 0..n {
            let sw = w[i].sqrt();
            for j in 0..=m {
                a[(i, j)] = sw * design[(i, j)];
            }
            b[i] = (z[i] - p[i]) / sw;
        }
        for j in 0..extra {
            a[(n + j, j + 1)] = sqrt_lambda;
            b[n + j] = -sqrt_lambda * model.coef[j + 1];
        }
        let (step, _) = lstsq(&a, &b);

        let mut t = 1.0;
        let (next, next_loss) = loop {
            let cand = &model.coef + &step * t;
            let cand_loss = penalized_loss(&design, z, &cand, lambda);
            if cand_loss <= loss + 1e-12 * loss.abs().max(1.0) || t < 1e-10 {
                break (cand, cand_loss);
            }
            t *= 0.5;
        };
        let moved = (&design * (&next - &model.coef)).amax();
        let improvement = loss - next_loss;
        model.coef = next;
        loss = next_loss;
        if moved < TOL || improvement.abs() < 1e-12 * (1.0 + loss.abs()) {
            model.converged = true;
            break;
        }
    }
    if !model.converged {
        log::debug!("logistic: no convergence after {MAX_ITER} iterations (possible separation)");
    }
    model
}
