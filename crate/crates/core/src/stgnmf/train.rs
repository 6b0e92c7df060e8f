//! Graph-regularized NMF by multiplicative updates.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::graph::{blend_graph, check_beta, heat_kernel_matrix, AffinityGraph, Bandwidth};
use crate::matfile;
use crate::{Error, Result};

/// Added to every multiplicative-update denominator.
pub const UPDATE_EPS: f64 = 1e-12;

/// `‖Y - UV‖²_F + λ·Tr(V L Vᵀ)`.
pub fn objective(
    y: ArrayView2<f64>,
    u: ArrayView2<f64>,
    v: ArrayView2<f64>,
    laplacian: ArrayView2<f64>,
    lambda: f64,
) -> f64 {
    let residual = &y - &u.dot(&v);
    let fit: f64 = residual.iter().map(|r| r * r).sum();
    if lambda == 0.0 {
        return fit;
    }
    let vl = v.dot(&laplacian);
    let trace: f64 = vl.iter().zip(v.iter()).map(|(a, b)| a * b).sum();
    fit + lambda * trace
}

/// `U ← U ⊙ (YVᵀ) ⊘ (UVVᵀ + ε)`.
pub fn update_u(y: ArrayView2<f64>, u: &mut Array2<f64>, v: ArrayView2<f64>) {
    let num = y.dot(&v.t());
    let den = u.dot(&v.dot(&v.t()));
    ndarray::Zip::from(u)
        .and(&num)
        .and(&den)
        .for_each(|x, &n, &d| *x *= n / (d + UPDATE_EPS));
}

/// `V ← V ⊙ (UᵀY + λVW) ⊘ (UᵀUV + λVD + ε)`.
pub fn update_v(
    y: ArrayView2<f64>,
    u: ArrayView2<f64>,
    v: &mut Array2<f64>,
    w: ArrayView2<f64>,
    degree: &Array1<f64>,
    lambda: f64,
) {
    let mut num = u.t().dot(&y);
    let mut den = u.t().dot(&u).dot(&*v);
    if lambda != 0.0 {
        num.scaled_add(lambda, &v.dot(&w));
        let vd = &*v * &degree.view().insert_axis(Axis(0));
        den.scaled_add(lambda, &vd);
    }
    ndarray::Zip::from(v)
        .and(&num)
        .and(&den)
        .for_each(|x, &n, &d| *x *= n / (d + UPDATE_EPS));
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverOptions {
    pub seed: u64,
    pub max_iter: usize,
    /// Relative objective change below which iteration stops; `0` runs all
    /// `max_iter` sweeps.
    pub tol: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            seed: 0,
            max_iter: 500,
            tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphOptions {
    pub delta_feature: Bandwidth,
    pub delta_distribution: Bandwidth,
    #[serde(default)]
    pub knn: Option<usize>,
}

impl Default for GraphOptions {
    fn default() -> Self {
        GraphOptions {
            delta_feature: Bandwidth::Auto,
            delta_distribution: Bandwidth::Auto,
            knn: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StGnmfConfig {
    pub n_components: usize,
    pub lambda: f64,
    pub beta: f64,
    #[serde(default)]
    pub graph: GraphOptions,
    #[serde(default)]
    pub solver: SolverOptions,
}

impl StGnmfConfig {
    pub fn validate(&self) -> Result<()> {
        check_beta(self.beta)?;
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Parameter(format!(
                "lambda must be non-negative, got {}",
                self.lambda
            )));
        }
        if self.n_components == 0 {
            return Err(Error::Parameter("need at least one component".into()));
        }
        if !(self.solver.tol >= 0.0) {
            return Err(Error::Parameter("tol must be non-negative".into()));
        }
        Ok(())
    }
}

/// Which factor an observed step just updated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Step {
    U,
    V,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Objective at initialization followed by one value per full sweep.
    pub objective_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub final_objective: f64,
    pub n_components: usize,
    pub lambda: f64,
    pub beta: f64,
    pub seed: u64,
    pub tol: f64,
    pub max_iter: usize,
    pub delta_feature: f64,
    pub delta_distribution: f64,
    pub knn: Option<usize>,
}

pub(crate) fn uniform_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    // (0, 1): reject exact zeros so multiplicative updates can move every entry
    Array2::from_shape_simple_fn((rows, cols), || loop {
        let x: f64 = rng.random();
        if x > 0.0 {
            break x;
        }
    })
}

pub(crate) fn relative_change(prev: f64, cur: f64) -> f64 {
    (prev - cur).abs() / prev.abs().max(f64::MIN_POSITIVE)
}

/// Raw factors of one GNMF run.
#[derive(Debug, Clone, PartialEq)]
pub struct Factors {
    pub u: Array2<f64>,
    pub v: Array2<f64>,
    pub objective_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

/// Alternating multiplicative updates from a given starting point.
///
/// `observe` is called after every single U or V update.
#[allow(clippy::too_many_arguments)]
pub fn gnmf_from(
    y: ArrayView2<f64>,
    graph: &AffinityGraph,
    lambda: f64,
    mut u: Array2<f64>,
    mut v: Array2<f64>,
    max_iter: usize,
    tol: f64,
    mut observe: impl FnMut(Step, &Array2<f64>, &Array2<f64>),
) -> Factors {
    let mut trace = vec![objective(y, u.view(), v.view(), graph.laplacian.view(), lambda)];
    let mut converged = false;
    let mut iterations = 0;
    for _ in 0..max_iter {
        update_u(y, &mut u, v.view());
        observe(Step::U, &u, &v);
        update_v(y, u.view(), &mut v, graph.w.view(), &graph.degree, lambda);
        observe(Step::V, &u, &v);
        iterations += 1;
        let cur = objective(y, u.view(), v.view(), graph.laplacian.view(), lambda);
        let prev = *trace.last().unwrap();
        trace.push(cur);
        if tol > 0.0 && relative_change(prev, cur) < tol {
            converged = true;
            break;
        }
    }
    Factors {
        u,
        v,
        objective_trace: trace,
        iterations,
        converged,
    }
}

fn check_nonnegative(y: ArrayView2<f64>) -> Result<()> {
    if y.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
        return Err(Error::Domain(
            "data matrix must be finite and entrywise non-negative".into(),
        ));
    }
    Ok(())
}

/// GNMF on an explicit graph with seeded uniform initialization.
pub fn gnmf(
    y: ArrayView2<f64>,
    graph: &AffinityGraph,
    n_components: usize,
    lambda: f64,
    solver: &SolverOptions,
    observe: impl FnMut(Step, &Array2<f64>, &Array2<f64>),
) -> Result<Factors> {
    check_nonnegative(y)?;
    let (m, n) = y.dim();
    if n_components == 0 || n_components >= m.min(n) {
        return Err(Error::Parameter(format!(
            "component count {n_components} must lie in 1..{}",
            m.min(n)
        )));
    }
    if graph.w.dim() != (n, n) {
        return Err(Error::Input(format!(
            "graph has {} nodes for {n} samples",
            graph.w.nrows()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(solver.seed);
    let u = uniform_matrix(m, n_components, &mut rng);
    let v = uniform_matrix(n_components, n, &mut rng);
    Ok(gnmf_from(y, graph, lambda, u, v, solver.max_iter, solver.tol, observe))
}

/// Builds the blended feature/distribution graph over training samples.
pub fn build_graph(
    y: ArrayView2<f64>,
    z: ArrayView2<f64>,
    beta: f64,
    opts: &GraphOptions,
) -> Result<(AffinityGraph, f64, f64)> {
    if y.ncols() != z.ncols() {
        return Err(Error::Input(format!(
            "{} histograms but {} distribution vectors",
            y.ncols(),
            z.ncols()
        )));
    }
    let (wf, df) = heat_kernel_matrix(y, opts.delta_feature, opts.knn)?;
    let (wd, dd) = heat_kernel_matrix(z, opts.delta_distribution, opts.knn)?;
    Ok((blend_graph(wf, wd, beta)?, df, dd))
}

/// Action-component dictionary with the graph settings needed to encode new
/// samples against the training set.
#[derive(Debug, Clone, PartialEq)]
pub struct ComponentModel {
    /// `M × K_c`, unit-L2 columns.
    pub u: Array2<f64>,
    pub lambda: f64,
    pub beta: f64,
    pub delta_feature: f64,
    pub delta_distribution: f64,
    pub knn: Option<usize>,
}

/// Codes as columns of a `K_c × N` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct MidLevelRep {
    pub v: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trained {
    pub model: ComponentModel,
    pub codes: MidLevelRep,
    pub report: TrainReport,
    pub graph: AffinityGraph,
}

/// Scales U's columns to unit L2 norm and V's rows inversely, leaving `UV`
/// unchanged. Zero columns are left alone.
pub fn normalize_factors(u: &mut Array2<f64>, v: &mut Array2<f64>) {
    for k in 0..u.ncols() {
        let norm = u.column(k).dot(&u.column(k)).sqrt();
        if norm > 0.0 {
            u.column_mut(k).mapv_inplace(|x| x / norm);
            v.row_mut(k).mapv_inplace(|x| x * norm);
        }
    }
}

/// Trains ST-GNMF: heat-kernel graphs over the columns of `y` and `z`,
/// blended by β, then GNMF. The exported model has unit-norm components.
pub fn train(y: ArrayView2<f64>, z: ArrayView2<f64>, config: &StGnmfConfig) -> Result<Trained> {
    train_observed(y, z, config, |_, _, _| {})
}

pub fn train_observed(
    y: ArrayView2<f64>,
    z: ArrayView2<f64>,
    config: &StGnmfConfig,
    observe: impl FnMut(Step, &Array2<f64>, &Array2<f64>),
) -> Result<Trained> {
    config.validate()?;
    check_nonnegative(y)?;
    let (graph, df, dd) = build_graph(y, z, config.beta, &config.graph)?;
    let factors = gnmf(y, &graph, config.n_components, config.lambda, &config.solver, observe)?;
    let Factors {
        mut u,
        mut v,
        objective_trace,
        iterations,
        converged,
    } = factors;
    let final_objective = *objective_trace.last().unwrap();
    normalize_factors(&mut u, &mut v);
    Ok(Trained {
        model: ComponentModel {
            u,
            lambda: config.lambda,
            beta: config.beta,
            delta_feature: df,
            delta_distribution: dd,
            knn: config.graph.knn,
        },
        codes: MidLevelRep { v },
        report: TrainReport {
            objective_trace,
            iterations,
            converged,
            final_objective,
            n_components: config.n_components,
            lambda: config.lambda,
            beta: config.beta,
            seed: config.solver.seed,
            tol: config.solver.tol,
            max_iter: config.solver.max_iter,
            delta_feature: df,
            delta_distribution: dd,
            knn: config.graph.knn,
        },
        graph,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ModelSidecar {
    lambda: f64,
    beta: f64,
    n_components: usize,
    delta_feature: f64,
    delta_distribution: f64,
    knn: Option<usize>,
    report: Option<TrainReport>,
}

impl ComponentModel {
    pub fn n_components(&self) -> usize {
        self.u.ncols()
    }

    /// Writes `U` to `path` and the settings (plus `report`) to the `.json`
    /// sidecar.
    pub fn save(&self, path: impl AsRef<Path>, report: Option<&TrainReport>) -> Result<()> {
        let path = path.as_ref();
        matfile::write_matrix(path, &self.u)?;
        let sc = ModelSidecar {
            lambda: self.lambda,
            beta: self.beta,
            n_components: self.n_components(),
            delta_feature: self.delta_feature,
            delta_distribution: self.delta_distribution,
            knn: self.knn,
            report: report.cloned(),
        };
        let side = path.with_extension("json");
        fs::write(&side, serde_json::to_vec_pretty(&sc).expect("sidecar serializes")).map_err(|e| Error::io(&side, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(ComponentModel, Option<TrainReport>)> {
        let path = path.as_ref();
        let u = matfile::read_matrix(path)?;
        let side = path.with_extension("json");
        let bytes = fs::read(&side).map_err(|e| Error::io(&side, e))?;
        let sc: ModelSidecar =
            serde_json::from_slice(&bytes).map_err(|e| Error::Parse(format!("{}: {e}", side.display())))?;
        if sc.n_components != u.ncols() {
            return Err(Error::Schema("model sidecar does not match U".into()));
        }
        Ok((
            ComponentModel {
                u,
                lambda: sc.lambda,
                beta: sc.beta,
                delta_feature: sc.delta_feature,
                delta_distribution: sc.delta_distribution,
                knn: sc.knn,
            },
            sc.report,
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stgnmf::graph::graph_from_single;
    use ndarray::array;

    #[test]
    fn exact_factors_are_a_fixed_point() {
        let u = array![[1.0, 0.5], [0.2, 2.0], [0.7, 0.1]];
        let v = array![[0.3, 1.0, 0.5, 0.2], [1.2, 0.1, 0.4, 0.9]];
        let y = u.dot(&v);
        let g = graph_from_single(Array2::eye(4)).unwrap();
        let f = gnmf_from(y.view(), &g, 0.0, u.clone(), v.clone(), 5, 0.0, |_, _, _| {});
        for (a, b) in f.u.iter().zip(u.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in f.v.iter().zip(v.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_negative_data_and_bad_rank() {
        let y = array![[1.0, -0.1, 0.2], [0.3, 0.4, 0.5], [0.1, 0.1, 0.1]];
        let z = Array2::eye(3);
        let cfg = StGnmfConfig {
            n_components: 1,
            lambda: 0.1,
            beta: 0.5,
            graph: GraphOptions::default(),
            solver: SolverOptions::default(),
        };
        assert!(matches!(train(y.view(), z.view(), &cfg), Err(Error::Domain(_))));
        let y = y.mapv(f64::abs);
        let bad = StGnmfConfig {
            n_components: 3,
            ..cfg.clone()
        };
        assert!(matches!(train(y.view(), z.view(), &bad), Err(Error::Parameter(_))));
        let bad_beta = StGnmfConfig { beta: 1.3, ..cfg };
        assert!(train(y.view(), z.view(), &bad_beta).is_err());
    }

    #[test]
    fn normalization_preserves_product() {
        let mut u = array![[1.0, 0.0], [2.0, 0.0]];
        let mut v = array![[1.0, 2.0], [3.0, 4.0]];
        let before = u.dot(&v);
        normalize_factors(&mut u, &mut v);
        assert!((u.column(0).dot(&u.column(0)) - 1.0).abs() < 1e-12);
        assert_eq!(u.column(1).sum(), 0.0);
        let after = u.dot(&v);
        for (a, b) in before.iter().zip(after.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
