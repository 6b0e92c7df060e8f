use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// `½ Σ_k (a_k - b_k)² / (a_k + b_k)`, with `0/0` terms taken as 0.
pub fn chi2_distance(a: ArrayView1<f64>, b: ArrayView1<f64>) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Input(format!(
            "vector lengths {} and {} differ",
            a.len(),
            b.len()
        )));
    }
    if a.iter().chain(b.iter()).any(|x| !(*x >= 0.0)) {
        return Err(Error::Domain("χ² distance needs non-negative entries".into()));
    }
    Ok(chi2_unchecked(a, b))
}

fn chi2_unchecked(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b.iter()) {
        let s = x + y;
        if s > 0.0 {
            acc += (x - y) * (x - y) / s;
        }
    }
    0.5 * acc
}

/// Copies the columns of `v` scaled to unit L1 norm; all-zero columns stay
/// zero.
pub fn l1_normalize_columns(v: ArrayView2<f64>) -> Result<Array2<f64>> {
    if v.iter().any(|x| !(*x >= 0.0)) {
        return Err(Error::Domain("χ² inputs must be non-negative".into()));
    }
    let mut out = v.to_owned();
    for mut col in out.axis_iter_mut(Axis(1)) {
        let s = col.sum();
        if s > 0.0 {
            col.mapv_inplace(|x| x / s);
        }
    }
    Ok(out)
}

/// Mean χ² distance over all unordered pairs of distinct columns.
pub fn mean_train_distance(v: ArrayView2<f64>) -> Result<f64> {
    let n = v.ncols();
    if n < 2 {
        return Err(Error::Input("mean distance needs at least two columns".into()));
    }
    let mut sum = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            sum += chi2_distance(v.column(i), v.column(j))?;
        }
    }
    let a = sum / (n * (n - 1) / 2) as f64;
    if a > 0.0 {
        Ok(a)
    } else {
        Err(Error::Bandwidth(
            "all training columns identical; χ² normalizer is zero".into(),
        ))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelProvenance {
    pub representation: String,
    pub l1_normalized: bool,
    pub fused: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KernelMatrix {
    pub values: Array2<f64>,
    /// χ² normalizer `A` the kernel was built with.
    pub normalizer: f64,
    pub provenance: KernelProvenance,
}

/// `K_ij = exp(-D(a_i, b_j) / A)` between the columns of `a` and `b`.
///
/// Columns are re-L1-normalized first. Rows follow `a`'s columns.
pub fn chi2_kernel_matrix(
    a: ArrayView2<f64>,
    b: ArrayView2<f64>,
    normalizer: f64,
    representation: &str,
) -> Result<KernelMatrix> {
    if !(normalizer > 0.0 && normalizer.is_finite()) {
        return Err(Error::Parameter(format!(
            "χ² normalizer must be positive, got {normalizer}"
        )));
    }
    if a.nrows() != b.nrows() {
        return Err(Error::Input(format!(
            "dimensions {} and {} differ",
            a.nrows(),
            b.nrows()
        )));
    }
    let a = l1_normalize_columns(a)?;
    let b = l1_normalize_columns(b)?;
    let rows: Vec<Vec<f64>> = (0..a.ncols())
        .into_par_iter()
        .map(|i| {
            (0..b.ncols())
                .map(|j| (-chi2_unchecked(a.column(i), b.column(j)) / normalizer).exp())
                .collect()
        })
        .collect();
    let values = Array2::from_shape_fn((a.ncols(), b.ncols()), |(i, j)| rows[i][j]);
    Ok(KernelMatrix {
        values,
        normalizer,
        provenance: KernelProvenance {
            representation: representation.to_string(),
            l1_normalized: true,
            fused: Vec::new(),
        },
    })
}

/// χ² kernel fitted on a training set: `A` comes from the (L1-normalized)
/// training columns and is reused for every test kernel.
#[derive(Debug, Clone)]
pub struct Chi2Kernel {
    train: Array2<f64>,
    pub normalizer: f64,
    pub representation: String,
}

impl Chi2Kernel {
    pub fn fit(train: ArrayView2<f64>, representation: &str) -> Result<Chi2Kernel> {
        let train = l1_normalize_columns(train)?;
        let normalizer = mean_train_distance(train.view())?;
        Ok(Chi2Kernel {
            train,
            normalizer,
            representation: representation.to_string(),
        })
    }

    pub fn train_kernel(&self) -> Result<KernelMatrix> {
        chi2_kernel_matrix(
            self.train.view(),
            self.train.view(),
            self.normalizer,
            &self.representation,
        )
    }

    /// `N_test × N_train` kernel.
    pub fn test_kernel(&self, test: ArrayView2<f64>) -> Result<KernelMatrix> {
        chi2_kernel_matrix(test, self.train.view(), self.normalizer, &self.representation)
    }
}

/// Entrywise convex combination; `weights = None` averages uniformly.
pub fn fuse_kernels(kernels: &[KernelMatrix], weights: Option<&[f64]>) -> Result<KernelMatrix> {
    let first = kernels.first().ok_or_else(|| Error::Input("nothing to fuse".into()))?;
    let uniform = vec![1.0 / kernels.len() as f64; kernels.len()];
    let weights = weights.unwrap_or(&uniform);
    if weights.len() != kernels.len() {
        return Err(Error::Input(format!(
            "{} weights for {} kernels",
            weights.len(),
            kernels.len()
        )));
    }
    if weights.iter().any(|w| !(*w >= 0.0)) || (weights.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Parameter(
            "fusion weights must be non-negative and sum to 1".into(),
        ));
    }
    let mut values = Array2::zeros(first.values.dim());
    for (k, w) in kernels.iter().zip(weights) {
        if k.values.dim() != first.values.dim() {
            return Err(Error::Input("fused kernels must share a shape".into()));
        }
        values.scaled_add(*w, &k.values);
    }
    Ok(KernelMatrix {
        values,
        normalizer: f64::NAN,
        provenance: KernelProvenance {
            representation: "fused".into(),
            l1_normalized: kernels.iter().all(|k| k.provenance.l1_normalized),
            fused: kernels.iter().map(|k| k.provenance.representation.clone()).collect(),
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn chi2_hand_cases() {
        let a = array![1.0, 0.0];
        let b = array![0.0, 1.0];
        assert_eq!(chi2_distance(a.view(), b.view()).unwrap(), 1.0);
        assert_eq!(chi2_distance(a.view(), a.view()).unwrap(), 0.0);
        let z = array![0.0, 0.0];
        assert_eq!(chi2_distance(z.view(), z.view()).unwrap(), 0.0);
        let neg = array![-0.1, 1.1];
        assert!(matches!(chi2_distance(neg.view(), a.view()), Err(Error::Domain(_))));
    }

    #[test]
    fn mean_distance_cases() {
        let two = array![[1.0, 0.0], [0.0, 1.0]];
        assert_eq!(mean_train_distance(two.view()).unwrap(), 1.0);
        let same = array![[0.5, 0.5], [0.5, 0.5]];
        assert!(matches!(mean_train_distance(same.view()), Err(Error::Bandwidth(_))));
    }

    #[test]
    fn kernel_at_normalizer_is_inverse_e() {
        let a = array![[1.0], [0.0]];
        let b = array![[0.0], [1.0]];
        let k = chi2_kernel_matrix(a.view(), b.view(), 1.0, "t").unwrap();
        assert!((k.values[[0, 0]] - 0.367879).abs() < 1e-6);
        assert!(chi2_kernel_matrix(a.view(), b.view(), 0.0, "t").is_err());
    }

    #[test]
    fn fusion_identities() {
        let a = array![[1.0, 0.5], [0.5, 1.0]];
        let k = KernelMatrix {
            values: a.clone(),
            normalizer: 1.0,
            provenance: KernelProvenance {
                representation: "x".into(),
                l1_normalized: true,
                fused: vec![],
            },
        };
        assert_eq!(fuse_kernels(std::slice::from_ref(&k), Some(&[1.0])).unwrap().values, a);
        assert_eq!(fuse_kernels(&[k.clone(), k.clone()], None).unwrap().values, a);
        assert!(fuse_kernels(&[k.clone(), k], Some(&[0.7, 0.7])).is_err());
    }
}
