//! Spatio-temporal distribution vectors.
//!
//! For every visual word the locations of the features it represents are
//! modelled by a diagonal Gaussian mixture over the unit location cube. The
//! STDV of a sample is the concatenation, over words, of the weighted Fisher
//! vector of that word's locations: the normalized gradient of the weighted
//! log-likelihood with respect to the component means and standard
//! deviations.

use std::collections::HashSet;
use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bovw::{kmeans_pp_init, WeightedLocation, WordLocationSet};
use crate::matfile;
use crate::{Error, Result};

/// Length of one Fisher block per component: 3 mean and 3 deviation
/// gradients.
pub const COMPONENT_BLOCK: usize = 6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocationGmm {
    pub priors: Vec<f64>,
    pub means: Vec<[f64; 3]>,
    /// Per-axis standard deviations.
    pub sigmas: Vec<[f64; 3]>,
}

impl LocationGmm {
    pub fn new(priors: Vec<f64>, means: Vec<[f64; 3]>, sigmas: Vec<[f64; 3]>) -> Result<LocationGmm> {
        let g = priors.len();
        if g == 0 || means.len() != g || sigmas.len() != g {
            return Err(Error::Input(
                "GMM parameter lists must be non-empty and equally long".into(),
            ));
        }
        if priors.iter().any(|p| !(*p > 0.0 && *p <= 1.0)) {
            return Err(Error::Input("GMM priors must lie in (0, 1]".into()));
        }
        if (priors.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Input("GMM priors must sum to 1".into()));
        }
        if sigmas.iter().flatten().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(Error::Input("GMM deviations must be positive".into()));
        }
        Ok(LocationGmm { priors, means, sigmas })
    }

    pub fn n_components(&self) -> usize {
        self.priors.len()
    }

    /// `log π_g + log N(l; μ_g, σ_g)` for every component.
    fn log_joint(&self, l: &[f64; 3], out: &mut [f64]) {
        let log_norm = -1.5 * (2.0 * PI).ln();
        for g in 0..self.priors.len() {
            let mut acc = self.priors[g].ln() + log_norm;
            for a in 0..3 {
                let s = self.sigmas[g][a];
                let z = (l[a] - self.means[g][a]) / s;
                acc -= s.ln() + 0.5 * z * z;
            }
            out[g] = acc;
        }
    }

    /// Posterior component probabilities of one location, evaluated in
    /// log-space. Returns the log-likelihood of the location as well.
    fn posterior(&self, l: &[f64; 3], out: &mut [f64]) -> f64 {
        self.log_joint(l, out);
        let max = out.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in out.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in out.iter_mut() {
            *v /= sum;
        }
        max + sum.ln()
    }

    pub fn responsibilities(&self, location: &[f64; 3]) -> Vec<f64> {
        let mut out = vec![0.0; self.n_components()];
        self.posterior(location, &mut out);
        out
    }

    /// Weighted log-likelihood `Σ_i w_i log p(l_i)`.
    pub fn log_likelihood(&self, set: &[WeightedLocation]) -> f64 {
        let mut scratch = vec![0.0; self.n_components()];
        set.iter()
            .map(|e| e.weight * self.posterior(&e.location, &mut scratch))
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GmmConfig {
    pub n_components: usize,
    pub sigma_floor: f64,
    /// Words whose pooled weight falls below this use the shared model.
    pub min_count: f64,
    /// Use the shared model for every word.
    #[serde(default)]
    pub shared: bool,
    #[serde(default = "default_em_tol")]
    pub tol: f64,
    #[serde(default = "default_em_max_iter")]
    pub max_iter: usize,
}

fn default_em_tol() -> f64 {
    1e-8
}

fn default_em_max_iter() -> usize {
    200
}

impl Default for GmmConfig {
    fn default() -> Self {
        GmmConfig {
            n_components: 5,
            sigma_floor: 0.01,
            min_count: 5.0,
            shared: false,
            tol: default_em_tol(),
            max_iter: default_em_max_iter(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmReport {
    pub iterations: usize,
    pub log_likelihood: f64,
    pub converged: bool,
}

fn distinct_locations(points: &[WeightedLocation]) -> usize {
    points
        .iter()
        .filter(|p| p.weight > 0.0)
        .map(|p| p.location.map(f64::to_bits))
        .collect::<HashSet<_>>()
        .len()
}

/// Weighted EM for a diagonal GMM over locations.
///
/// Means are seeded by weighted k-means++, deviations start at the pooled
/// per-axis deviation and priors start uniform. Every M-step floors variances
/// at `sigma_floor²`. Iteration stops once the relative change of the
/// weighted log-likelihood drops below `tol`, or after `max_iter` rounds; the
/// returned parameters are the ones the final log-likelihood was evaluated
/// at.
pub fn fit_weighted_gmm(
    points: &[WeightedLocation],
    n_components: usize,
    seed: u64,
    sigma_floor: f64,
    tol: f64,
    max_iter: usize,
) -> Result<(LocationGmm, EmReport)> {
    if n_components == 0 {
        return Err(Error::Parameter("GMM needs at least one component".into()));
    }
    if !(sigma_floor > 0.0) {
        return Err(Error::Parameter("sigma_floor must be positive".into()));
    }
    if points.iter().any(|p| !(p.weight > 0.0 && p.weight.is_finite())) {
        return Err(Error::Input("location weights must be positive".into()));
    }
    let distinct = distinct_locations(points);
    if distinct < n_components {
        return Err(Error::Capacity(format!(
            "{distinct} distinct locations cannot support {n_components} components"
        )));
    }
    let g_count = n_components;
    let n = points.len();
    let weights: Vec<f64> = points.iter().map(|p| p.weight).collect();
    let total: f64 = weights.iter().sum();
    let var_floor = sigma_floor * sigma_floor;

    let data = Array2::from_shape_fn((n, 3), |(i, a)| points[i].location[a]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let init = kmeans_pp_init(data.view(), &weights, g_count, &mut rng);
    let mut mean_all = [0.0; 3];
    for p in points {
        for a in 0..3 {
            mean_all[a] += p.weight * p.location[a] / total;
        }
    }
    let mut sd_all = [0.0; 3];
    for a in 0..3 {
        let var: f64 = points
            .iter()
            .map(|p| p.weight * (p.location[a] - mean_all[a]).powi(2))
            .sum::<f64>()
            / total;
        sd_all[a] = var.max(var_floor).sqrt();
    }
    let mut gmm = LocationGmm {
        priors: vec![1.0 / g_count as f64; g_count],
        means: (0..g_count)
            .map(|g| [init[[g, 0]], init[[g, 1]], init[[g, 2]]])
            .collect(),
        sigmas: vec![sd_all; g_count],
    };

    let mut resp = vec![0.0; n * g_count];
    let mut prev_ll = f64::NEG_INFINITY;
    let mut iterations = 0;
    let mut converged = false;
    let mut ll = f64::NEG_INFINITY;
    for it in 0..=max_iter {
        // E-step at the current parameters
        ll = 0.0;
        for (i, p) in points.iter().enumerate() {
            ll += p.weight * gmm.posterior(&p.location, &mut resp[i * g_count..(i + 1) * g_count]);
        }
        if it > 0 && (ll - prev_ll).abs() <= tol * prev_ll.abs().max(1.0) {
            converged = true;
            break;
        }
        if it == max_iter {
            break;
        }
        iterations = it + 1;
        prev_ll = ll;

        // M-step
        let min_mass = 1e-10 * total;
        let mut mass = vec![0.0; g_count];
        let mut sum = vec![[0.0; 3]; g_count];
        for (i, p) in points.iter().enumerate() {
            for g in 0..g_count {
                let r = p.weight * resp[i * g_count + g];
                mass[g] += r;
                for a in 0..3 {
                    sum[g][a] += r * p.location[a];
                }
            }
        }
        for g in 0..g_count {
            if mass[g] > min_mass {
                for a in 0..3 {
                    gmm.means[g][a] = sum[g][a] / mass[g];
                }
            }
        }
        let mut sq = vec![[0.0; 3]; g_count];
        for (i, p) in points.iter().enumerate() {
            for g in 0..g_count {
                let r = p.weight * resp[i * g_count + g];
                for a in 0..3 {
                    sq[g][a] += r * (p.location[a] - gmm.means[g][a]).powi(2);
                }
            }
        }
        for g in 0..g_count {
            if mass[g] > min_mass {
                for a in 0..3 {
                    gmm.sigmas[g][a] = (sq[g][a] / mass[g]).max(var_floor).sqrt();
                }
            }
        }
        let clamped: Vec<f64> = mass.iter().map(|m| m.max(min_mass)).collect();
        let mass_total: f64 = clamped.iter().sum();
        gmm.priors = clamped.iter().map(|m| m / mass_total).collect();
    }
    Ok((
        gmm,
        EmReport {
            iterations,
            log_likelihood: ll,
            converged,
        },
    ))
}

/// Concatenates per-sample word location sets word by word.
pub fn pool_word_sets(per_sample: &[Vec<WordLocationSet>], n_words: usize) -> Result<Vec<WordLocationSet>> {
    let mut pooled = vec![WordLocationSet::default(); n_words];
    for sets in per_sample {
        if sets.len() != n_words {
            return Err(Error::Input(format!(
                "sample has {} word sets, expected {n_words}",
                sets.len()
            )));
        }
        for (k, s) in sets.iter().enumerate() {
            pooled[k].entries.extend_from_slice(&s.entries);
        }
    }
    Ok(pooled)
}

/// Per-word location models plus the shared model fit on every location.
#[derive(Debug, Clone, PartialEq)]
pub struct GmmBank {
    pub words: Vec<LocationGmm>,
    pub fallback: LocationGmm,
    pub uses_fallback: Vec<bool>,
    pub config: GmmConfig,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct GmmBankSidecar {
    n_words: usize,
    n_components: usize,
    seed: u64,
    sigma_floor: f64,
    min_count: f64,
    shared: bool,
    tol: f64,
    max_iter: usize,
    fallback_count: usize,
    uses_fallback: Vec<bool>,
    normalization: Option<FvNormalization>,
}

fn word_seed(seed: u64, word: usize) -> u64 {
    seed ^ (word as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Fits one GMM per word on the pooled training location sets.
///
/// Words whose pooled weight is below `min_count`, or that have fewer
/// distinct locations than components, get the shared model. With
/// `config.shared` every word gets the shared model.
pub fn fit_location_gmms(pooled: &[WordLocationSet], config: &GmmConfig, seed: u64) -> Result<GmmBank> {
    if pooled.iter().flat_map(|s| &s.entries).any(|e| !(e.weight > 0.0)) {
        return Err(Error::Input("word location weights must be positive".into()));
    }
    let everything: Vec<WeightedLocation> = pooled.iter().flat_map(|s| s.entries.iter().copied()).collect();
    let (fallback, _) = fit_weighted_gmm(
        &everything,
        config.n_components,
        seed,
        config.sigma_floor,
        config.tol,
        config.max_iter,
    )?;
    let fits: Vec<Result<Option<LocationGmm>>> = pooled
        .par_iter()
        .enumerate()
        .map(|(k, set)| {
            if config.shared
                || set.total_weight() < config.min_count
                || distinct_locations(&set.entries) < config.n_components
            {
                return Ok(None);
            }
            fit_weighted_gmm(
                &set.entries,
                config.n_components,
                word_seed(seed, k),
                config.sigma_floor,
                config.tol,
                config.max_iter,
            )
            .map(|(g, _)| Some(g))
        })
        .collect();
    let mut words = Vec::with_capacity(pooled.len());
    let mut uses_fallback = Vec::with_capacity(pooled.len());
    for fit in fits {
        match fit? {
            Some(g) => {
                words.push(g);
                uses_fallback.push(false);
            }
            None => {
                words.push(fallback.clone());
                uses_fallback.push(true);
            }
        }
    }
    Ok(GmmBank {
        words,
        fallback,
        uses_fallback,
        config: config.clone(),
        seed,
    })
}

impl GmmBank {
    pub fn n_words(&self) -> usize {
        self.words.len()
    }

    pub fn fallback_count(&self) -> usize {
        self.uses_fallback.iter().filter(|f| **f).count()
    }

    pub fn stdv_len(&self) -> usize {
        self.n_words() * self.config.n_components * COMPONENT_BLOCK
    }

    /// Fisher block of every word followed by [`stdv_concat`].
    pub fn encode(&self, sets: &[WordLocationSet], normalization: FvNormalization) -> Result<StdvVector> {
        if sets.len() != self.n_words() {
            return Err(Error::Input(format!(
                "{} word sets for {} word models",
                sets.len(),
                self.n_words()
            )));
        }
        let blocks = self
            .words
            .iter()
            .zip(sets)
            .map(|(g, s)| fisher_vector_weighted(g, s))
            .collect::<Result<Vec<_>>>()?;
        stdv_concat(&blocks, self.n_words(), self.config.n_components, normalization)
    }

    /// Records are `(n_words + 1) × G` rows of `[π, μ(3), σ(3)]`; the last
    /// `G` rows hold the shared model. The JSON sidecar sits next to `path`.
    pub fn save(&self, path: impl AsRef<Path>, normalization: Option<FvNormalization>) -> Result<()> {
        let path = path.as_ref();
        let g = self.config.n_components;
        let models: Vec<&LocationGmm> = self.words.iter().chain(std::iter::once(&self.fallback)).collect();
        let mut table = Array2::zeros((models.len() * g, 7));
        for (m, gmm) in models.iter().enumerate() {
            for c in 0..g {
                let mut row = table.row_mut(m * g + c);
                row[0] = gmm.priors[c];
                for a in 0..3 {
                    row[1 + a] = gmm.means[c][a];
                    row[4 + a] = gmm.sigmas[c][a];
                }
            }
        }
        matfile::write_matrix(path, &table)?;
        let sidecar = GmmBankSidecar {
            n_words: self.n_words(),
            n_components: g,
            seed: self.seed,
            sigma_floor: self.config.sigma_floor,
            min_count: self.config.min_count,
            shared: self.config.shared,
            tol: self.config.tol,
            max_iter: self.config.max_iter,
            fallback_count: self.fallback_count(),
            uses_fallback: self.uses_fallback.clone(),
            normalization,
        };
        let side = path.with_extension("json");
        fs::write(&side, serde_json::to_vec_pretty(&sidecar).expect("sidecar serializes"))
            .map_err(|e| Error::io(&side, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<GmmBank> {
        let path = path.as_ref();
        let table = matfile::read_matrix(path)?;
        let side = path.with_extension("json");
        let bytes = fs::read(&side).map_err(|e| Error::io(&side, e))?;
        let sc: GmmBankSidecar =
            serde_json::from_slice(&bytes).map_err(|e| Error::Parse(format!("{}: {e}", side.display())))?;
        let g = sc.n_components;
        if table.dim() != ((sc.n_words + 1) * g, 7) || sc.uses_fallback.len() != sc.n_words {
            return Err(Error::Schema("GMM bank table does not match its sidecar".into()));
        }
        let read = |m: usize| -> Result<LocationGmm> {
            let rows = (0..g).map(|c| table.row(m * g + c));
            let mut priors = Vec::with_capacity(g);
            let mut means = Vec::with_capacity(g);
            let mut sigmas = Vec::with_capacity(g);
            for r in rows {
                priors.push(r[0]);
                means.push([r[1], r[2], r[3]]);
                sigmas.push([r[4], r[5], r[6]]);
            }
            LocationGmm::new(priors, means, sigmas)
        };
        let words = (0..sc.n_words).map(read).collect::<Result<Vec<_>>>()?;
        let fallback = read(sc.n_words)?;
        Ok(GmmBank {
            words,
            fallback,
            uses_fallback: sc.uses_fallback,
            config: GmmConfig {
                n_components: g,
                sigma_floor: sc.sigma_floor,
                min_count: sc.min_count,
                shared: sc.shared,
                tol: sc.tol,
                max_iter: sc.max_iter,
            },
            seed: sc.seed,
        })
    }
}

/// Weighted Fisher vector of one word's locations: for each component, the
/// 3 normalized mean gradients followed by the 3 deviation gradients.
/// An empty set yields zeros.
pub fn fisher_vector_weighted(gmm: &LocationGmm, set: &WordLocationSet) -> Result<Vec<f64>> {
    let g_count = gmm.n_components();
    let mut out = vec![0.0; g_count * COMPONENT_BLOCK];
    if set.is_empty() {
        return Ok(out);
    }
    let total = set.total_weight();
    if !(total > 0.0 && total.is_finite()) {
        return Err(Error::Input("word location set has non-positive total weight".into()));
    }
    let mut gamma = vec![0.0; g_count];
    for e in &set.entries {
        gmm.posterior(&e.location, &mut gamma);
        for g in 0..g_count {
            let r = e.weight * gamma[g];
            let block = &mut out[g * COMPONENT_BLOCK..(g + 1) * COMPONENT_BLOCK];
            for a in 0..3 {
                let z = (e.location[a] - gmm.means[g][a]) / gmm.sigmas[g][a];
                block[a] += r * z;
                block[3 + a] += r * (z * z - 1.0);
            }
        }
    }
    for g in 0..g_count {
        let mean_scale = total * gmm.priors[g].sqrt();
        let dev_scale = total * (2.0 * gmm.priors[g]).sqrt();
        let block = &mut out[g * COMPONENT_BLOCK..(g + 1) * COMPONENT_BLOCK];
        for a in 0..3 {
            block[a] /= mean_scale;
            block[3 + a] /= dev_scale;
        }
    }
    Ok(out)
}

/// Signed power normalization `sign(z)|z|^power` followed, when `l2` is
/// set, by global L2 normalization. `power = 1, l2 = false` is the raw
/// concatenation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FvNormalization {
    pub power: f64,
    pub l2: bool,
}

impl FvNormalization {
    pub const RAW: FvNormalization = FvNormalization { power: 1.0, l2: false };
}

impl Default for FvNormalization {
    fn default() -> Self {
        FvNormalization { power: 0.5, l2: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StdvVector {
    pub z: Vec<f64>,
    pub normalization: FvNormalization,
}

pub fn stdv_concat(
    blocks: &[Vec<f64>],
    n_words: usize,
    n_components: usize,
    normalization: FvNormalization,
) -> Result<StdvVector> {
    if blocks.len() != n_words {
        return Err(Error::Input(format!("{} blocks for {n_words} words", blocks.len())));
    }
    let block_len = n_components * COMPONENT_BLOCK;
    if let Some(b) = blocks.iter().find(|b| b.len() != block_len) {
        return Err(Error::Input(format!("block of length {} != {block_len}", b.len())));
    }
    if !(normalization.power > 0.0) {
        return Err(Error::Parameter("power normalization exponent must be positive".into()));
    }
    let mut z: Vec<f64> = blocks.concat();
    if normalization.power != 1.0 {
        z.iter_mut()
            .for_each(|v| *v = v.signum() * v.abs().powf(normalization.power));
    }
    if normalization.l2 {
        let norm = z.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            z.iter_mut().for_each(|v| *v /= norm);
        }
    }
    Ok(StdvVector { z, normalization })
}

/// Stacks STDVs as the columns of a `len × n` matrix.
pub fn stdv_matrix(vectors: &[StdvVector]) -> Array2<f64> {
    let d = vectors.first().map_or(0, |v| v.z.len());
    Array2::from_shape_fn((d, vectors.len()), |(r, c)| vectors[c].z[r])
}
