//! Bag-of-visual-words encoding.
//!
//! Descriptors are quantized against a k-means [`Codebook`] by localized soft
//! assignment: only the `k_nn` nearest words receive weight, proportional to
//! `exp(-smoothing * d²)`. From the assignments of one sample we pool the
//! low-level histogram `y`, the per-word weighted location sets consumed by
//! the STDV, and the space-time pyramid baseline.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::featurestore::VideoSample;
use crate::matfile;
use crate::{Error, Result};

/// K-means iteration cap.
pub const KMEANS_MAX_ITER: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    centers: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodebookInfo {
    pub seed: u64,
    pub iterations: usize,
    pub inertia: f64,
}

impl Codebook {
    pub fn new(centers: Array2<f64>) -> Result<Codebook> {
        if centers.nrows() == 0 || centers.ncols() == 0 {
            return Err(Error::Input(
                "codebook needs at least one word and one dimension".into(),
            ));
        }
        if !centers.iter().all(|v| v.is_finite()) {
            return Err(Error::Input("codebook centers must be finite".into()));
        }
        let mut seen = HashSet::new();
        for row in centers.rows() {
            let key: Vec<u64> = row.iter().map(|v| v.to_bits()).collect();
            if !seen.insert(key) {
                return Err(Error::Input("codebook has two identical centers".into()));
            }
        }
        Ok(Codebook { centers })
    }

    pub fn centers(&self) -> &Array2<f64> {
        &self.centers
    }

    pub fn n_words(&self) -> usize {
        self.centers.nrows()
    }

    pub fn descriptor_dim(&self) -> usize {
        self.centers.ncols()
    }

    /// Squared distance to every center.
    fn sq_distances(&self, descriptor: ArrayView1<f64>) -> Vec<f64> {
        self.centers
            .rows()
            .into_iter()
            .map(|c| sq_dist(c, descriptor))
            .collect()
    }

    /// Nearest center with ties going to the lowest index.
    pub fn nearest(&self, descriptor: ArrayView1<f64>) -> (usize, f64) {
        nearest_row(self.centers.view(), descriptor)
    }

    /// Writes the center matrix to `path` and the training info to the
    /// `.json` sidecar next to it.
    pub fn save(&self, info: &CodebookInfo, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        matfile::write_matrix(path, &self.centers)?;
        let sidecar = path.with_extension("json");
        let json = serde_json::to_vec_pretty(info).expect("info serializes");
        fs::write(&sidecar, json).map_err(|e| Error::io(&sidecar, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(Codebook, CodebookInfo)> {
        let path = path.as_ref();
        let centers = matfile::read_matrix(path)?;
        let sidecar = path.with_extension("json");
        let bytes = fs::read(&sidecar).map_err(|e| Error::io(&sidecar, e))?;
        let info = serde_json::from_slice(&bytes).map_err(|e| Error::Parse(format!("{}: {e}", sidecar.display())))?;
        Ok((Codebook::new(centers)?, info))
    }
}

fn sq_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest_row(centers: ArrayView2<f64>, x: ArrayView1<f64>) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (k, c) in centers.rows().into_iter().enumerate() {
        let d = sq_dist(c, x);
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

fn count_distinct_rows(data: ArrayView2<f64>) -> usize {
    data.rows()
        .into_iter()
        .map(|r| r.iter().map(|v| v.to_bits()).collect::<Vec<u64>>())
        .collect::<HashSet<_>>()
        .len()
}

/// K-means with k-means++ seeding over the rows of `descriptors`.
///
/// Empty clusters are re-seeded with the point farthest from its center.
/// Iteration stops when assignments no longer change or after
/// [`KMEANS_MAX_ITER`] sweeps.
pub fn train_codebook(descriptors: ArrayView2<f64>, n_words: usize, seed: u64) -> Result<(Codebook, CodebookInfo)> {
    if n_words == 0 {
        return Err(Error::Parameter("codebook needs at least one word".into()));
    }
    if !descriptors.iter().all(|v| v.is_finite()) {
        return Err(Error::Input("descriptors must be finite".into()));
    }
    let distinct = count_distinct_rows(descriptors);
    if distinct < n_words {
        return Err(Error::Capacity(format!(
            "{distinct} distinct descriptors cannot support {n_words} words"
        )));
    }
    let weights = vec![1.0; descriptors.nrows()];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = kmeans_pp_init(descriptors, &weights, n_words, &mut rng);
    let (iterations, inertia) = lloyd(descriptors, &mut centers, KMEANS_MAX_ITER);
    Ok((
        Codebook::new(centers)?,
        CodebookInfo {
            seed,
            iterations,
            inertia,
        },
    ))
}

/// Weighted k-means++ seeding: each new center is drawn with probability
/// proportional to `weight * D²`.
pub(crate) fn kmeans_pp_init(data: ArrayView2<f64>, weights: &[f64], k: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let n = data.nrows();
    let mut centers = Array2::zeros((k, data.ncols()));
    let first = sample_index(weights, rng);
    centers.row_mut(0).assign(&data.row(first));
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(data.row(i), data.row(first))).collect();
    // greedy variant: several D²-sampled candidates, keep the one with the lowest potential
    let trials = 2 + (k as f64).ln().floor() as usize;
    for c in 1..k {
        let scores: Vec<f64> = d2.iter().zip(weights).map(|(d, w)| d * w).collect();
        let spread = scores.iter().sum::<f64>() > 0.0;
        let mut best: Option<(f64, usize, Vec<f64>)> = None;
        for _ in 0..trials {
            let cand = if spread {
                sample_index(&scores, rng)
            } else {
                sample_index(weights, rng)
            };
            let nd: Vec<f64> = (0..n)
                .map(|i| d2[i].min(sq_dist(data.row(i), data.row(cand))))
                .collect();
            let potential: f64 = nd.iter().zip(weights).map(|(d, w)| d * w).sum();
            if best.as_ref().is_none_or(|(p, _, _)| potential < *p) {
                best = Some((potential, cand, nd));
            }
        }
        let (_, pick, nd) = best.expect("at least one trial");
        centers.row_mut(c).assign(&data.row(pick));
        d2 = nd;
    }
    centers
}

fn sample_index(weights: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let total: f64 = weights.iter().sum();
    let mut target = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if *w > 0.0 {
            if target < *w {
                return i;
            }
            target -= w;
        }
    }
    weights.iter().rposition(|w| *w > 0.0).unwrap_or(0)
}

fn lloyd(data: ArrayView2<f64>, centers: &mut Array2<f64>, max_iter: usize) -> (usize, f64) {
    let n = data.nrows();
    let k = centers.nrows();
    let mut assign = vec![usize::MAX; n];
    let mut dist = vec![0.0; n];
    let mut iterations = 0;
    for it in 0..max_iter {
        iterations = it + 1;
        let mut changed = false;
        for i in 0..n {
            let (c, d) = nearest_row(centers.view(), data.row(i));
            if assign[i] != c {
                assign[i] = c;
                changed = true;
            }
            dist[i] = d;
        }
        if !changed && it > 0 {
            break;
        }
        let mut sums = Array2::<f64>::zeros(centers.dim());
        let mut counts = vec![0usize; k];
        for i in 0..n {
            sums.row_mut(assign[i]).scaled_add(1.0, &data.row(i));
            counts[assign[i]] += 1;
        }
        for c in 0..k {
            if counts[c] > 0 {
                centers.row_mut(c).assign(&(&sums.row(c) / counts[c] as f64));
            } else {
                // re-seed with the worst-served point
                let far = (0..n)
                    .max_by(|&a, &b| dist[a].total_cmp(&dist[b]).then(b.cmp(&a)))
                    .unwrap();
                centers.row_mut(c).assign(&data.row(far));
                dist[far] = 0.0;
            }
        }
    }
    let inertia = (0..n).map(|i| nearest_row(centers.view(), data.row(i)).1).sum();
    (iterations, inertia)
}

/// Localized soft assignment of one descriptor: `(word, weight)` pairs
/// ordered by increasing distance, weights summing to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftAssignment {
    pub entries: Vec<(usize, f64)>,
}

impl SoftAssignment {
    pub fn weight_of(&self, word: usize) -> f64 {
        self.entries.iter().find(|(w, _)| *w == word).map_or(0.0, |(_, v)| *v)
    }
}

pub fn assign_soft(
    codebook: &Codebook,
    descriptor: ArrayView1<f64>,
    k_nn: usize,
    smoothing: f64,
) -> Result<SoftAssignment> {
    if k_nn == 0 || k_nn > codebook.n_words() {
        return Err(Error::Parameter(format!(
            "k_nn must be in 1..={}, got {k_nn}",
            codebook.n_words()
        )));
    }
    if !(smoothing > 0.0 && smoothing.is_finite()) {
        return Err(Error::Parameter(format!("smoothing must be positive, got {smoothing}")));
    }
    if descriptor.len() != codebook.descriptor_dim() {
        return Err(Error::Input(format!(
            "descriptor length {} != codebook dimension {}",
            descriptor.len(),
            codebook.descriptor_dim()
        )));
    }
    if !descriptor.iter().all(|v| v.is_finite()) {
        return Err(Error::Input("non-finite descriptor".into()));
    }
    let d2 = codebook.sq_distances(descriptor);
    let mut order: Vec<usize> = (0..d2.len()).collect();
    order.sort_by(|&a, &b| d2[a].total_cmp(&d2[b]).then(a.cmp(&b)));
    order.truncate(k_nn);
    let nearest = d2[order[0]];
    let raw: Vec<f64> = order.iter().map(|&k| (-smoothing * (d2[k] - nearest)).exp()).collect();
    let total: f64 = raw.iter().sum();
    Ok(SoftAssignment {
        entries: order.into_iter().zip(raw).map(|(k, r)| (k, r / total)).collect(),
    })
}

/// Soft assignment parameters applied to every feature of a sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SoftAssigner {
    pub k_nn: usize,
    pub smoothing: f64,
}

impl SoftAssigner {
    pub fn encode(&self, codebook: &Codebook, sample: &VideoSample) -> Result<Vec<SoftAssignment>> {
        sample
            .features
            .iter()
            .map(|f| assign_soft(codebook, ArrayView1::from(&f.descriptor), self.k_nn, self.smoothing))
            .collect()
    }
}

/// `1 / mean squared nearest-center distance` over an evenly strided
/// subsample of at most `max_samples` rows.
pub fn estimate_smoothing(codebook: &Codebook, descriptors: ArrayView2<f64>, max_samples: usize) -> Result<f64> {
    let n = descriptors.nrows();
    if n == 0 || max_samples == 0 {
        return Err(Error::Input("no descriptors to estimate smoothing from".into()));
    }
    let stride = n.div_ceil(max_samples).max(1);
    let picked: Vec<f64> = descriptors
        .axis_iter(Axis(0))
        .step_by(stride)
        .map(|r| codebook.nearest(r).1)
        .collect();
    let mean = picked.iter().sum::<f64>() / picked.len() as f64;
    if mean > 0.0 {
        Ok(1.0 / mean)
    } else {
        Err(Error::Parameter(
            "descriptors coincide with centers; smoothing undefined".into(),
        ))
    }
}

/// L1-normalized histogram `y`. `degenerate` marks an empty sample, whose
/// histogram stays all-zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LowLevelRep {
    pub y: Vec<f64>,
    pub degenerate: bool,
}

pub fn pool_histogram(assignments: &[SoftAssignment], n_words: usize) -> LowLevelRep {
    let mut y = vec![0.0; n_words];
    for a in assignments {
        for &(k, w) in &a.entries {
            y[k] += w;
        }
    }
    let total: f64 = y.iter().sum();
    let degenerate = !(total > 0.0);
    if !degenerate {
        y.iter_mut().for_each(|v| *v /= total);
    }
    LowLevelRep { y, degenerate }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightedLocation {
    pub location: [f64; 3],
    pub weight: f64,
}

/// Locations of the features represented by one word, with their
/// assignment weights.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct WordLocationSet {
    pub entries: Vec<WeightedLocation>,
}

impl WordLocationSet {
    pub fn total_weight(&self) -> f64 {
        self.entries.iter().map(|e| e.weight).sum()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// One [`WordLocationSet`] per word, indexed by word.
pub fn collect_word_locations(
    sample: &VideoSample,
    assignments: &[SoftAssignment],
    n_words: usize,
) -> Result<Vec<WordLocationSet>> {
    if assignments.len() != sample.features.len() {
        return Err(Error::Input(format!(
            "{} assignments for {} features",
            assignments.len(),
            sample.features.len()
        )));
    }
    let mut sets = vec![WordLocationSet::default(); n_words];
    for (f, a) in sample.features.iter().zip(assignments) {
        for &(k, w) in &a.entries {
            if k >= n_words {
                return Err(Error::Input(format!("word {k} out of range ({n_words} words)")));
            }
            if w > 0.0 {
                sets[k].entries.push(WeightedLocation {
                    location: f.location,
                    weight: w,
                });
            }
        }
    }
    Ok(sets)
}

/// Space-time pyramid layout: every spatial `s×s` grid crossed with every
/// temporal split into `t` segments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StpGrid {
    pub spatial: Vec<usize>,
    pub temporal: Vec<usize>,
}

impl Default for StpGrid {
    /// `{1×1, 2×2}` spatial by `{whole, halves}` temporal: 15 cells.
    fn default() -> Self {
        StpGrid {
            spatial: vec![1, 2],
            temporal: vec![1, 2],
        }
    }
}

impl StpGrid {
    pub fn n_cells(&self) -> usize {
        let s: usize = self.spatial.iter().map(|s| s * s).sum();
        let t: usize = self.temporal.iter().sum();
        s * t
    }
}

fn cell_of(v: f64, splits: usize) -> usize {
    ((v * splits as f64).floor() as usize).min(splits - 1)
}

/// Concatenated per-cell word histograms. Cells are ordered temporal level,
/// temporal segment, spatial level, then row-major spatial cell. Cell
/// histograms are raw sums; one L1 normalization is applied to the whole
/// concatenation.
pub fn stp_pool(
    sample: &VideoSample,
    assignments: &[SoftAssignment],
    n_words: usize,
    grid: &StpGrid,
) -> Result<Vec<f64>> {
    if assignments.len() != sample.features.len() {
        return Err(Error::Input(format!(
            "{} assignments for {} features",
            assignments.len(),
            sample.features.len()
        )));
    }
    if grid.spatial.contains(&0) || grid.temporal.contains(&0) {
        return Err(Error::Parameter("pyramid levels must be positive".into()));
    }
    let mut out = vec![0.0; grid.n_cells() * n_words];
    for (f, a) in sample.features.iter().zip(assignments) {
        let [x, y, t] = f.location;
        let mut base = 0;
        for &tl in &grid.temporal {
            let tc = cell_of(t, tl);
            for seg in 0..tl {
                for &sl in &grid.spatial {
                    if seg == tc {
                        let cell = base + cell_of(y, sl) * sl + cell_of(x, sl);
                        for &(k, w) in &a.entries {
                            out[cell * n_words + k] += w;
                        }
                    }
                    base += sl * sl;
                }
            }
        }
    }
    let total: f64 = out.iter().sum();
    if total > 0.0 {
        out.iter_mut().for_each(|v| *v /= total);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::featurestore::LocalFeature;
    use ndarray::{array, Array1};

    fn hard(word: usize) -> SoftAssignment {
        SoftAssignment {
            entries: vec![(word, 1.0)],
        }
    }

    fn sample_at(locs: &[[f64; 3]]) -> VideoSample {
        VideoSample {
            id: "s".into(),
            label: "c".into(),
            group: 0,
            extent: [1.0; 3],
            features: locs
                .iter()
                .map(|l| LocalFeature {
                    location: *l,
                    descriptor: vec![0.0],
                })
                .collect(),
        }
    }

    #[test]
    fn kmeans_recovers_two_tight_clusters() {
        let mut rows = Vec::new();
        for i in 0..20 {
            let e = (i as f64 - 9.5) * 1e-4;
            rows.push([e, -e, e]);
            rows.push([1.0 + e, 1.0 - e, 1.0 + e]);
        }
        let data = Array2::from_shape_fn((40, 3), |(i, j)| rows[i][j]);
        let (cb, _) = train_codebook(data.view(), 2, 3).unwrap();
        let mut centers: Vec<Array1<f64>> = cb.centers().rows().into_iter().map(|r| r.to_owned()).collect();
        centers.sort_by(|a, b| a[0].total_cmp(&b[0]));
        // cluster means are exactly 0 and 1 by symmetric construction
        for (c, target) in centers.iter().zip([0.0, 1.0]) {
            for v in c.iter() {
                assert!((v - target).abs() < 1e-6, "{c}");
            }
        }
    }

    #[test]
    fn single_word_is_global_mean() {
        let data = array![[0.0, 1.0], [2.0, 3.0], [4.0, -1.0]];
        let (cb, _) = train_codebook(data.view(), 1, 0).unwrap();
        assert!((cb.centers()[[0, 0]] - 2.0).abs() < 1e-12);
        assert!((cb.centers()[[0, 1]] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn too_few_points_is_capacity_error() {
        let data = array![[0.0], [1.0], [2.0]];
        assert!(matches!(train_codebook(data.view(), 5, 0), Err(Error::Capacity(_))));
        let dup = array![[0.0], [0.0], [0.0], [1.0]];
        assert!(matches!(train_codebook(dup.view(), 3, 0), Err(Error::Capacity(_))));
    }

    #[test]
    fn kmeans_is_deterministic() {
        let data = Array2::from_shape_fn((50, 2), |(i, j)| ((i * 7 + j * 3) % 11) as f64);
        let a = train_codebook(data.view(), 4, 42).unwrap();
        let b = train_codebook(data.view(), 4, 42).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn soft_assignment_hand_cases() {
        let cb = Codebook::new(array![[0.0, 0.0], [1.0, 0.0], [5.0, 5.0]]).unwrap();
        let a = assign_soft(&cb, array![0.0, 0.0].view(), 1, 1.0).unwrap();
        assert_eq!(a.entries, vec![(0, 1.0)]);

        let a = assign_soft(&cb, array![0.5, 0.0].view(), 2, 3.0).unwrap();
        assert_eq!(a.entries, vec![(0, 0.5), (1, 0.5)]);

        // d² = (0, 1), smoothing 1
        let a = assign_soft(&cb, array![0.0, 0.0].view(), 2, 1.0).unwrap();
        let e = (-1.0f64).exp();
        assert!((a.weight_of(0) - 1.0 / (1.0 + e)).abs() < 1e-15);
        assert!((a.weight_of(1) - e / (1.0 + e)).abs() < 1e-15);
        assert!((a.weight_of(0) - 0.7311).abs() < 1e-4);
        assert_eq!(a.weight_of(2), 0.0);
    }

    #[test]
    fn soft_assignment_rejects_bad_input() {
        let cb = Codebook::new(array![[0.0], [1.0]]).unwrap();
        assert!(assign_soft(&cb, array![f64::NAN].view(), 1, 1.0).is_err());
        assert!(assign_soft(&cb, array![0.0].view(), 3, 1.0).is_err());
        assert!(assign_soft(&cb, array![0.0].view(), 1, 0.0).is_err());
    }

    #[test]
    fn histogram_cases() {
        let y = pool_histogram(&[hard(3)], 5);
        assert_eq!(y.y, vec![0.0, 0.0, 0.0, 1.0, 0.0]);
        let y = pool_histogram(&[hard(0), hard(1)], 5);
        assert_eq!(y.y, vec![0.5, 0.5, 0.0, 0.0, 0.0]);
        assert_eq!(pool_histogram(&[hard(1), hard(0)], 5), y);
        let empty = pool_histogram(&[], 3);
        assert!(empty.degenerate);
        assert_eq!(empty.y, vec![0.0; 3]);
    }

    #[test]
    fn word_locations_split_weights() {
        let s = sample_at(&[[0.1, 0.2, 0.3]]);
        let a = SoftAssignment {
            entries: vec![(2, 0.7), (5, 0.3)],
        };
        let sets = collect_word_locations(&s, &[a], 6).unwrap();
        assert_eq!(sets[2].entries.len(), 1);
        assert_eq!(sets[2].entries[0].weight, 0.7);
        assert_eq!(sets[5].entries[0].weight, 0.3);
        assert!(sets[0].is_empty());
        assert!(collect_word_locations(&s, &[], 6).is_err());
    }

    #[test]
    fn stp_single_octant() {
        let s = sample_at(&[[0.1, 0.1, 0.1], [0.2, 0.3, 0.4]]);
        let out = stp_pool(&s, &[hard(1), hard(1)], 3, &StpGrid::default()).unwrap();
        assert_eq!(out.len(), 45);
        let nonzero: Vec<usize> = (0..15).filter(|c| out[c * 3 + 1] > 0.0).collect();
        // whole: cell 0 (1x1), cell 1 (2x2 top-left); first half: cell 5, cell 6
        assert_eq!(nonzero, vec![0, 1, 5, 6]);
    }
}
