//! One-vs-rest C-SVC on a precomputed kernel, solved by SMO with
//! second-order working-set selection.

use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

const TAU: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverOptions {
    /// Stopping tolerance on the maximal KKT violation.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            tol: 1e-3,
            max_iter: 10_000_000,
        }
    }
}

/// One binary machine: `f(x) = Σ_i coef_i K(x, x_i) + bias` with
/// `coef_i = α_i y_i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinarySvm {
    pub coef: Vec<f64>,
    pub bias: f64,
    pub iterations: usize,
}

impl BinarySvm {
    pub fn decision(&self, kernel_row: impl IntoIterator<Item = f64>) -> f64 {
        self.coef.iter().zip(kernel_row).map(|(c, k)| c * k).sum::<f64>() + self.bias
    }

    /// Maximal KKT violation `max_{I_up} -y G - min_{I_low} -y G` of the
    /// stored solution, recomputed from scratch.
    pub fn kkt_gap(&self, kernel: ArrayView2<f64>, y: &[f64], c: f64) -> f64 {
        let n = y.len();
        let alpha: Vec<f64> = self.coef.iter().zip(y).map(|(a, yi)| a * yi).collect();
        let mut up = f64::NEG_INFINITY;
        let mut low = f64::INFINITY;
        for t in 0..n {
            let g: f64 = (0..n).map(|s| y[t] * y[s] * kernel[[t, s]] * alpha[s]).sum::<f64>() - 1.0;
            let score = -y[t] * g;
            let at_upper = alpha[t] >= c;
            let at_lower = alpha[t] <= 0.0;
            let in_up = if y[t] > 0.0 { !at_upper } else { !at_lower };
            let in_low = if y[t] > 0.0 { !at_lower } else { !at_upper };
            if in_up {
                up = up.max(score);
            }
            if in_low {
                low = low.min(score);
            }
        }
        (up - low).max(0.0)
    }
}

/// Solves `min ½αᵀQα - Σα` s.t. `yᵀα = 0`, `0 ≤ α ≤ C`, `Q_ij = y_i y_j K_ij`.
pub fn train_binary(kernel: ArrayView2<f64>, y: &[f64], c: f64, opts: &SolverOptions) -> BinarySvm {
    let n = y.len();
    let mut alpha = vec![0.0; n];
    let mut grad = vec![-1.0; n];
    let diag: Vec<f64> = (0..n).map(|i| kernel[[i, i]]).collect();
    let upper = |a: f64| a >= c;
    let lower = |a: f64| a <= 0.0;

    let mut iterations = 0;
    while iterations < opts.max_iter {
        // i: maximal violator in I_up, lowest index on ties
        let mut gmax = f64::NEG_INFINITY;
        let mut i_sel = None;
        for t in 0..n {
            let ok = if y[t] > 0.0 { !upper(alpha[t]) } else { !lower(alpha[t]) };
            if ok && -y[t] * grad[t] > gmax {
                gmax = -y[t] * grad[t];
                i_sel = Some(t);
            }
        }
        let Some(i) = i_sel else { break };
        let mut gmax2 = f64::NEG_INFINITY;
        let mut j_sel = None;
        let mut best = f64::INFINITY;
        for t in 0..n {
            let ok = if y[t] > 0.0 { !lower(alpha[t]) } else { !upper(alpha[t]) };
            if !ok {
                continue;
            }
            let score = y[t] * grad[t];
            gmax2 = gmax2.max(score);
            let grad_diff = gmax + score;
            if grad_diff > 0.0 {
                let mut quad = diag[i] + diag[t] - 2.0 * kernel[[i, t]];
                if quad <= 0.0 {
                    quad = TAU;
                }
                let obj = -(grad_diff * grad_diff) / quad;
                if obj < best {
                    best = obj;
                    j_sel = Some(t);
                }
            }
        }
        if gmax + gmax2 < opts.tol {
            break;
        }
        let Some(j) = j_sel else { break };
        iterations += 1;

        let (old_i, old_j) = (alpha[i], alpha[j]);
        let mut quad = diag[i] + diag[j] - 2.0 * kernel[[i, j]];
        if quad <= 0.0 {
            quad = TAU;
        }
        if y[i] != y[j] {
            let delta = (-grad[i] - grad[j]) / quad;
            let diff = alpha[i] - alpha[j];
            alpha[i] += delta;
            alpha[j] += delta;
            if diff > 0.0 {
                if alpha[j] < 0.0 {
                    alpha[j] = 0.0;
                    alpha[i] = diff;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = -diff;
            }
            if diff > 0.0 {
                if alpha[i] > c {
                    alpha[i] = c;
                    alpha[j] = c - diff;
                }
            } else if alpha[j] > c {
                alpha[j] = c;
                alpha[i] = c + diff;
            }
        } else {
            let delta = (grad[i] - grad[j]) / quad;
            let sum = alpha[i] + alpha[j];
            alpha[i] -= delta;
            alpha[j] += delta;
            if sum > c {
                if alpha[i] > c {
                    alpha[i] = c;
                    alpha[j] = sum - c;
                }
            } else if alpha[j] < 0.0 {
                alpha[j] = 0.0;
                alpha[i] = sum;
            }
            if sum > c {
                if alpha[j] > c {
                    alpha[j] = c;
                    alpha[i] = sum - c;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = sum;
            }
        }
        let di = alpha[i] - old_i;
        let dj = alpha[j] - old_j;
        for t in 0..n {
            grad[t] += y[t] * (y[i] * kernel[[t, i]] * di + y[j] * kernel[[t, j]] * dj);
        }
    }

    // bias from free vectors, or the midpoint of the feasible interval
    let mut ub = f64::INFINITY;
    let mut lb = f64::NEG_INFINITY;
    let mut free = 0usize;
    let mut sum_free = 0.0;
    for t in 0..n {
        let yg = y[t] * grad[t];
        if upper(alpha[t]) {
            if y[t] < 0.0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else if lower(alpha[t]) {
            if y[t] > 0.0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else {
            free += 1;
            sum_free += yg;
        }
    }
    let rho = if free > 0 {
        sum_free / free as f64
    } else {
        (ub + lb) / 2.0
    };
    BinarySvm {
        coef: alpha.iter().zip(y).map(|(a, yi)| a * yi).collect(),
        bias: -rho,
        iterations,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvmModel {
    pub n_classes: usize,
    pub c: f64,
    pub machines: Vec<BinarySvm>,
    /// χ² normalizer of the training kernel, if known.
    pub normalizer: Option<f64>,
}

fn check_square_symmetric(k: ArrayView2<f64>) -> Result<()> {
    let n = k.nrows();
    if k.ncols() != n {
        return Err(Error::Input("training kernel must be square".into()));
    }
    for i in 0..n {
        for j in (i + 1)..n {
            let (a, b) = (k[[i, j]], k[[j, i]]);
            if (a - b).abs() > 1e-9 * (1.0 + a.abs().max(b.abs())) {
                return Err(Error::Input(format!("training kernel not symmetric at ({i}, {j})")));
            }
        }
    }
    Ok(())
}

/// Per-class `y = +1` versus the rest; labels index `0..n_classes`.
pub fn train_ovr_svm(
    kernel: ArrayView2<f64>,
    labels: &[usize],
    n_classes: usize,
    c: f64,
    opts: &SolverOptions,
) -> Result<SvmModel> {
    check_square_symmetric(kernel)?;
    if labels.len() != kernel.nrows() {
        return Err(Error::Input(format!(
            "{} labels for a {}-sample kernel",
            labels.len(),
            kernel.nrows()
        )));
    }
    if !(c > 0.0 && c.is_finite()) {
        return Err(Error::Parameter(format!("C must be positive, got {c}")));
    }
    if n_classes < 2 {
        return Err(Error::Class("need at least two classes".into()));
    }
    let mut counts = vec![0usize; n_classes];
    for &l in labels {
        if l >= n_classes {
            return Err(Error::Class(format!("label {l} outside {n_classes} classes")));
        }
        counts[l] += 1;
    }
    if let Some(empty) = counts.iter().position(|c| *c == 0) {
        return Err(Error::Class(format!("class {empty} has no training samples")));
    }
    let machines = (0..n_classes)
        .into_par_iter()
        .map(|class| {
            let y: Vec<f64> = labels.iter().map(|&l| if l == class { 1.0 } else { -1.0 }).collect();
            train_binary(kernel, &y, c, opts)
        })
        .collect();
    Ok(SvmModel {
        n_classes,
        c,
        machines,
        normalizer: None,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub labels: Vec<usize>,
    /// `N_test × n_classes` decision values.
    pub scores: Array2<f64>,
}

/// Highest-scoring class per row of the `N_test × N_train` kernel; ties go
/// to the lowest class index.
pub fn predict(model: &SvmModel, kernel_test_train: ArrayView2<f64>) -> Result<Prediction> {
    let n_train = model.machines.first().map_or(0, |m| m.coef.len());
    if kernel_test_train.ncols() != n_train {
        return Err(Error::Input(format!(
            "test kernel has {} columns, model has {n_train} training samples",
            kernel_test_train.ncols()
        )));
    }
    let n_test = kernel_test_train.nrows();
    let mut scores = Array2::zeros((n_test, model.n_classes));
    for (r, row) in kernel_test_train.rows().into_iter().enumerate() {
        for (c, m) in model.machines.iter().enumerate() {
            scores[[r, c]] = m.decision(row.iter().copied());
        }
    }
    Ok(Prediction {
        labels: argmax_rows(&scores),
        scores,
    })
}

pub fn argmax_rows(scores: &Array2<f64>) -> Vec<usize> {
    scores
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            for (c, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn rbf(points: &[f64]) -> Array2<f64> {
        Array2::from_shape_fn((points.len(), points.len()), |(i, j)| {
            (-(points[i] - points[j]).powi(2)).exp()
        })
    }

    #[test]
    fn separable_binary_problem() {
        let pts = [0.0, 0.2, 0.1, 5.0, 5.3, 5.1];
        let y = [1.0, 1.0, 1.0, -1.0, -1.0, -1.0];
        let k = rbf(&pts);
        let m = train_binary(k.view(), &y, 10.0, &SolverOptions::default());
        for (i, yi) in y.iter().enumerate() {
            assert!(m.decision(k.row(i).iter().copied()) * yi > 0.0);
        }
        assert!(m.coef.iter().sum::<f64>().abs() < 1e-9);
        assert!(m.kkt_gap(k.view(), &y, 10.0) < 1e-3);
    }

    #[test]
    fn class_errors() {
        let k = rbf(&[0.0, 1.0, 2.0]);
        assert!(matches!(
            train_ovr_svm(k.view(), &[0, 0, 0], 2, 1.0, &SolverOptions::default()),
            Err(Error::Class(_))
        ));
        assert!(train_ovr_svm(k.view(), &[0, 1], 2, 1.0, &SolverOptions::default()).is_err());
    }

    #[test]
    fn argmax_prefers_lowest_index_on_ties() {
        let s = array![[1.0, 1.0, 0.5], [0.0, 2.0, 2.0]];
        assert_eq!(argmax_rows(&s), vec![0, 1]);
        let shifted = s.mapv(|v| 3.0 * v + 7.0);
        assert_eq!(argmax_rows(&shifted), argmax_rows(&s));
    }
}
