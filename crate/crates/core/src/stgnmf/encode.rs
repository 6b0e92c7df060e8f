//! Out-of-sample encoding with a frozen component dictionary.

use nalgebra::DMatrix;
use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::graph::{blend_graph, heat_kernel_matrix, Bandwidth};
use super::train::{relative_change, uniform_matrix, ComponentModel, MidLevelRep, UPDATE_EPS};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncodeOptions {
    pub seed: u64,
    pub max_iter: usize,
    pub tol: f64,
    /// Couple test codes only through the test-test block of the joint
    /// graph instead of the full joint graph.
    #[serde(default)]
    pub strict_test_block: bool,
}

impl Default for EncodeOptions {
    fn default() -> Self {
        EncodeOptions {
            seed: 0,
            max_iter: 300,
            tol: 1e-6,
            strict_test_block: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncodeReport {
    pub objective_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Test columns whose histogram is all zero.
    pub degenerate: Vec<bool>,
}

/// Test-side blocks of the joint `[train, test]` graph.
struct JointBlocks {
    /// `N × N_t` train-test affinities.
    w_cross: Array2<f64>,
    /// `N_t × N_t` test-test affinities.
    w_test: Array2<f64>,
    /// Degrees of test nodes used in the update denominator.
    degree: Array1<f64>,
    /// `Tr(V L_train Vᵀ)` for the frozen training codes, with joint degrees.
    train_trace: f64,
}

fn joint_blocks(
    model: &ComponentModel,
    y_train: ArrayView2<f64>,
    z_train: ArrayView2<f64>,
    y_test: ArrayView2<f64>,
    z_test: ArrayView2<f64>,
    v_train: ArrayView2<f64>,
    strict: bool,
) -> Result<JointBlocks> {
    let n = y_train.ncols();
    let y_all = concatenate(Axis(1), &[y_train, y_test]).map_err(|e| Error::Input(e.to_string()))?;
    let z_all = concatenate(Axis(1), &[z_train, z_test]).map_err(|e| Error::Input(e.to_string()))?;
    let (wf, _) = heat_kernel_matrix(y_all.view(), Bandwidth::Fixed(model.delta_feature), model.knn)?;
    let (wd, _) = heat_kernel_matrix(z_all.view(), Bandwidth::Fixed(model.delta_distribution), model.knn)?;
    let joint = blend_graph(wf, wd, model.beta)?;
    let w_cross = joint.w.slice(s![..n, n..]).to_owned();
    let w_test = joint.w.slice(s![n.., n..]).to_owned();
    let w_train = joint.w.slice(s![..n, ..n]).to_owned();
    let degree = if strict {
        w_test.sum_axis(Axis(1))
    } else {
        joint.degree.slice(s![n..]).to_owned()
    };
    let mut l_train = -&w_train;
    for i in 0..n {
        l_train[[i, i]] += joint.degree[i];
    }
    let train_trace = v_train
        .dot(&l_train)
        .iter()
        .zip(v_train.iter())
        .map(|(a, b)| a * b)
        .sum();
    Ok(JointBlocks {
        w_cross,
        w_test,
        degree,
        train_trace,
    })
}

/// Test-side objective: test reconstruction error plus `λ` times the joint
/// Laplacian quadratic form (only the test-test block in strict mode).
fn encode_objective(
    u: ArrayView2<f64>,
    y_test: ArrayView2<f64>,
    v_train: ArrayView2<f64>,
    v_test: &Array2<f64>,
    blocks: &JointBlocks,
    lambda: f64,
    strict: bool,
) -> f64 {
    let r = &y_test - &u.dot(v_test);
    let fit: f64 = r.iter().map(|x| x * x).sum();
    if lambda == 0.0 {
        return fit;
    }
    let quad = |a: &Array2<f64>, w: &Array2<f64>, b: &Array2<f64>| -> f64 {
        a.dot(w).iter().zip(b.iter()).map(|(x, y)| x * y).sum()
    };
    let deg_quad: f64 = v_test
        .axis_iter(Axis(1))
        .zip(blocks.degree.iter())
        .map(|(c, d)| d * c.dot(&c))
        .sum();
    let test_part = deg_quad - quad(v_test, &blocks.w_test, v_test);
    if strict {
        return fit + lambda * test_part;
    }
    let cross: f64 = v_train
        .dot(&blocks.w_cross)
        .iter()
        .zip(v_test.iter())
        .map(|(a, b)| a * b)
        .sum();
    fit + lambda * (blocks.train_trace + test_part - 2.0 * cross)
}

/// Encodes test samples with `U` and the training codes frozen.
///
/// The joint graph over `[train, test]` columns is built with the training
/// bandwidths, β and sparsification. Each iteration applies
/// `V_t ← V_t ⊙ (UᵀY_t + λ(V·W_cross + V_t·W_test)) ⊘ (UᵀU V_t + λ V_t D_t + ε)`
/// where `D_t` holds the joint degrees of the test nodes. In strict mode the
/// cross term is dropped and `D_t` is the test-test block's row sums.
pub fn encode_test(
    model: &ComponentModel,
    v_train: &MidLevelRep,
    y_test: ArrayView2<f64>,
    z_test: ArrayView2<f64>,
    y_train: ArrayView2<f64>,
    z_train: ArrayView2<f64>,
    opts: &EncodeOptions,
) -> Result<(MidLevelRep, EncodeReport)> {
    encode_test_observed(model, v_train, y_test, z_test, y_train, z_train, opts, |_| {})
}

#[allow(clippy::too_many_arguments)]
pub fn encode_test_observed(
    model: &ComponentModel,
    v_train: &MidLevelRep,
    y_test: ArrayView2<f64>,
    z_test: ArrayView2<f64>,
    y_train: ArrayView2<f64>,
    z_train: ArrayView2<f64>,
    opts: &EncodeOptions,
    mut observe: impl FnMut(&Array2<f64>),
) -> Result<(MidLevelRep, EncodeReport)> {
    let u = model.u.view();
    let v = v_train.v.view();
    let (m, k) = u.dim();
    let n = y_train.ncols();
    let n_test = y_test.ncols();
    if y_train.nrows() != m || y_test.nrows() != m {
        return Err(Error::Input(format!(
            "histogram dimension mismatch: model {m}, train {}, test {}",
            y_train.nrows(),
            y_test.nrows()
        )));
    }
    if z_train.nrows() != z_test.nrows() {
        return Err(Error::Input(format!(
            "distribution vector dimension mismatch: train {}, test {}",
            z_train.nrows(),
            z_test.nrows()
        )));
    }
    if z_train.ncols() != n || z_test.ncols() != n_test || v.dim() != (k, n) {
        return Err(Error::Input("train/test column counts do not line up".into()));
    }
    if n_test == 0 {
        return Err(Error::Input("no test samples".into()));
    }
    if y_test.iter().any(|x| !(*x >= 0.0)) {
        return Err(Error::Domain("test histograms must be non-negative".into()));
    }
    let strict = opts.strict_test_block;
    let blocks = joint_blocks(model, y_train, z_train, y_test, z_test, v, strict)?;
    let lambda = model.lambda;

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut vt = uniform_matrix(k, n_test, &mut rng);
    let uty = u.t().dot(&y_test);
    let utu = u.t().dot(&u);
    let cross = v.dot(&blocks.w_cross);

    let mut trace = vec![encode_objective(u, y_test, v, &vt, &blocks, lambda, strict)];
    let mut iterations = 0;
    let mut converged = false;
    for _ in 0..opts.max_iter {
        let mut num = uty.clone();
        let mut den = utu.dot(&vt);
        if lambda != 0.0 {
            num.scaled_add(lambda, &vt.dot(&blocks.w_test));
            if !strict {
                num.scaled_add(lambda, &cross);
            }
            let vd = &vt * &blocks.degree.view().insert_axis(Axis(0));
            den.scaled_add(lambda, &vd);
        }
        ndarray::Zip::from(&mut vt)
            .and(&num)
            .and(&den)
            .for_each(|x, &nu, &de| *x *= nu / (de + UPDATE_EPS));
        observe(&vt);
        iterations += 1;
        let cur = encode_objective(u, y_test, v, &vt, &blocks, lambda, strict);
        let prev = *trace.last().unwrap();
        trace.push(cur);
        if opts.tol > 0.0 && relative_change(prev, cur) < opts.tol {
            converged = true;
            break;
        }
    }
    let degenerate = y_test.axis_iter(Axis(1)).map(|c| c.iter().all(|x| *x == 0.0)).collect();
    Ok((
        MidLevelRep { v: vt },
        EncodeReport {
            objective_trace: trace,
            iterations,
            converged,
            degenerate,
        },
    ))
}

/// Unconstrained least-squares codes `U⁺Y_t` (minimum-norm for
/// rank-deficient `U`). Entries may be negative.
pub fn pseudoinverse_encode(u: ArrayView2<f64>, y_test: ArrayView2<f64>) -> Result<Array2<f64>> {
    if u.nrows() != y_test.nrows() {
        return Err(Error::Input(format!(
            "dictionary has {} rows, data has {}",
            u.nrows(),
            y_test.nrows()
        )));
    }
    let um = DMatrix::from_fn(u.nrows(), u.ncols(), |i, j| u[[i, j]]);
    let ym = DMatrix::from_fn(y_test.nrows(), y_test.ncols(), |i, j| y_test[[i, j]]);
    let svd = um.svd(true, true);
    let max_sv = svd.singular_values.iter().copied().fold(0.0, f64::max);
    let eps = max_sv * (u.nrows().max(u.ncols()) as f64) * f64::EPSILON;
    let pinv = svd
        .pseudo_inverse(eps)
        .map_err(|e| Error::Input(format!("pseudoinverse failed: {e}")))?;
    let codes = pinv * ym;
    Ok(Array2::from_shape_fn((codes.nrows(), codes.ncols()), |(i, j)| {
        codes[(i, j)]
    }))
}
