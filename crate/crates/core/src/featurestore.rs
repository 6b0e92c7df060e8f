//! Datasets of local features.
//!
//! A [`Dataset`] is a list of labeled [`VideoSample`]s, each holding local
//! features made of a descriptor vector and an `(x, y, t)` location. Datasets
//! are persisted as JSON (default) or as a flat little-endian binary file when
//! the path ends in `.bin`.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalFeature {
    #[serde(rename = "loc")]
    pub location: [f64; 3],
    #[serde(rename = "desc")]
    pub descriptor: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoSample {
    pub id: String,
    pub label: String,
    pub group: u32,
    /// `(width px, height px, frame count)`.
    pub extent: [f64; 3],
    pub features: Vec<LocalFeature>,
}

impl VideoSample {
    /// Divides every location componentwise by the sample extent.
    pub fn normalize_locations(&self) -> Result<VideoSample> {
        check_extent(&self.id, &self.extent)?;
        let mut out = self.clone();
        for (i, f) in out.features.iter_mut().enumerate() {
            for axis in 0..3 {
                let v = f.location[axis];
                if !(0.0..=self.extent[axis]).contains(&v) {
                    return Err(Error::Range(format!(
                        "sample {} feature {} axis {}: {} outside [0, {}]",
                        self.id, i, axis, v, self.extent[axis]
                    )));
                }
                f.location[axis] = v / self.extent[axis];
            }
        }
        Ok(out)
    }

    /// Inverse of [`normalize_locations`](Self::normalize_locations): maps
    /// unit-cube locations back to pixel/frame units.
    pub fn denormalize_locations(&self) -> VideoSample {
        let mut out = self.clone();
        for f in &mut out.features {
            for axis in 0..3 {
                f.location[axis] *= self.extent[axis];
            }
        }
        out
    }
}

fn check_extent(id: &str, extent: &[f64; 3]) -> Result<()> {
    if extent.iter().all(|e| e.is_finite() && *e > 0.0) {
        Ok(())
    } else {
        Err(Error::Schema(format!(
            "sample {id}: extent {extent:?} must be strictly positive"
        )))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub name: String,
    pub seed: Option<u64>,
    #[serde(default)]
    pub provenance: String,
    /// True once locations have been divided by their sample extents.
    #[serde(default)]
    pub locations_normalized: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub descriptor_dim: usize,
    pub classes: Vec<String>,
    pub samples: Vec<VideoSample>,
}

impl Dataset {
    /// Checks every type invariant: shared descriptor length, known labels,
    /// positive extents and finite values.
    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for c in &self.classes {
            if !seen.insert(c) {
                return Err(Error::Schema(format!("class {c:?} declared twice")));
            }
        }
        for (si, s) in self.samples.iter().enumerate() {
            check_extent(&s.id, &s.extent)?;
            if !seen.contains(&s.label) {
                return Err(Error::Schema(format!(
                    "record {si} (sample {}): label {:?} not in class set",
                    s.id, s.label
                )));
            }
            for (fi, f) in s.features.iter().enumerate() {
                if f.descriptor.len() != self.descriptor_dim {
                    return Err(Error::Schema(format!(
                        "record {si} (sample {}) feature {fi}: descriptor length {} != descriptor_dim {}",
                        s.id,
                        f.descriptor.len(),
                        self.descriptor_dim
                    )));
                }
                if !f.descriptor.iter().chain(f.location.iter()).all(|v| v.is_finite()) {
                    return Err(Error::Schema(format!(
                        "record {si} (sample {}) feature {fi}: non-finite value",
                        s.id
                    )));
                }
            }
        }
        Ok(())
    }

    /// Normalizes all sample locations once; a no-op for datasets already
    /// flagged as normalized.
    pub fn normalize_locations(&self) -> Result<Dataset> {
        if self.meta.locations_normalized {
            return Ok(self.clone());
        }
        let samples = self
            .samples
            .iter()
            .map(VideoSample::normalize_locations)
            .collect::<Result<Vec<_>>>()?;
        let mut meta = self.meta.clone();
        meta.locations_normalized = true;
        Ok(Dataset {
            meta,
            descriptor_dim: self.descriptor_dim,
            classes: self.classes.clone(),
            samples,
        })
    }

    /// Index of each sample's label in `classes`.
    pub fn label_indices(&self) -> Vec<usize> {
        self.samples
            .iter()
            .map(|s| {
                self.classes
                    .iter()
                    .position(|c| *c == s.label)
                    .expect("validated dataset")
            })
            .collect()
    }

    pub fn groups(&self) -> Vec<u32> {
        self.samples.iter().map(|s| s.group).collect()
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetFile {
    name: String,
    descriptor_dim: usize,
    classes: Vec<String>,
    seed: Option<u64>,
    #[serde(default)]
    provenance: String,
    #[serde(default)]
    locations_normalized: bool,
    samples: Vec<VideoSample>,
}

/// Header of the binary layout; the numeric payload follows as a separate
/// length-prefixed section.
#[derive(Serialize, Deserialize)]
struct BinaryHeader {
    name: String,
    descriptor_dim: usize,
    classes: Vec<String>,
    seed: Option<u64>,
    provenance: String,
    locations_normalized: bool,
    samples: Vec<BinarySampleHeader>,
}

#[derive(Serialize, Deserialize)]
struct BinarySampleHeader {
    id: String,
    label: String,
    group: u32,
    n_features: usize,
}

const BINARY_MAGIC: &[u8; 8] = b"STDSET01";

fn is_binary_path(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "bin")
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let dataset = if is_binary_path(path) {
        decode_binary(&bytes)?
    } else {
        decode_json(&bytes)?
    };
    dataset.validate()?;
    Ok(dataset)
}

pub fn save_dataset(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    dataset.validate()?;
    let bytes = if is_binary_path(path) {
        encode_binary(dataset)
    } else {
        encode_json(dataset)
    };
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn decode_json(bytes: &[u8]) -> Result<Dataset> {
    let file: DatasetFile = serde_json::from_slice(bytes)
        .map_err(|e| Error::Parse(format!("line {} column {}: {}", e.line(), e.column(), e)))?;
    Ok(Dataset {
        meta: DatasetMeta {
            name: file.name,
            seed: file.seed,
            provenance: file.provenance,
            locations_normalized: file.locations_normalized,
        },
        descriptor_dim: file.descriptor_dim,
        classes: file.classes,
        samples: file.samples,
    })
}

fn encode_json(dataset: &Dataset) -> Vec<u8> {
    let file = DatasetFile {
        name: dataset.meta.name.clone(),
        descriptor_dim: dataset.descriptor_dim,
        classes: dataset.classes.clone(),
        seed: dataset.meta.seed,
        provenance: dataset.meta.provenance.clone(),
        locations_normalized: dataset.meta.locations_normalized,
        samples: dataset.samples.clone(),
    };
    serde_json::to_vec(&file).expect("dataset serializes")
}

fn encode_binary(dataset: &Dataset) -> Vec<u8> {
    let header = BinaryHeader {
        name: dataset.meta.name.clone(),
        descriptor_dim: dataset.descriptor_dim,
        classes: dataset.classes.clone(),
        seed: dataset.meta.seed,
        provenance: dataset.meta.provenance.clone(),
        locations_normalized: dataset.meta.locations_normalized,
        samples: dataset
            .samples
            .iter()
            .map(|s| BinarySampleHeader {
                id: s.id.clone(),
                label: s.label.clone(),
                group: s.group,
                n_features: s.features.len(),
            })
            .collect(),
    };
    let header = serde_json::to_vec(&header).expect("header serializes");
    let mut floats = Vec::new();
    for s in &dataset.samples {
        floats.extend_from_slice(&s.extent);
        for f in &s.features {
            floats.extend_from_slice(&f.location);
            floats.extend_from_slice(&f.descriptor);
        }
    }
    let mut out = Vec::with_capacity(24 + header.len() + floats.len() * 8);
    out.extend_from_slice(BINARY_MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&(floats.len() as u64).to_le_bytes());
    for v in floats {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn decode_binary(bytes: &[u8]) -> Result<Dataset> {
    let mut cursor = bytes;
    let mut take = |n: usize, what: &str| -> Result<&[u8]> {
        if cursor.len() < n {
            return Err(Error::Parse(format!("binary dataset truncated in {what}")));
        }
        let (head, rest) = cursor.split_at(n);
        cursor = rest;
        Ok(head)
    };
    if take(8, "magic")? != BINARY_MAGIC {
        return Err(Error::Parse("not a binary dataset file".into()));
    }
    let header_len = u64::from_le_bytes(take(8, "header length")?.try_into().unwrap()) as usize;
    let header: BinaryHeader =
        serde_json::from_slice(take(header_len, "header")?).map_err(|e| Error::Parse(format!("binary header: {e}")))?;
    let n_floats = u64::from_le_bytes(take(8, "payload length")?.try_into().unwrap()) as usize;
    let payload = take(
        n_floats
            .checked_mul(8)
            .ok_or_else(|| Error::Parse("payload length overflows".into()))?,
        "payload",
    )?;
    let floats: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();

    let m = header.descriptor_dim;
    let mut pos = 0usize;
    let mut samples = Vec::with_capacity(header.samples.len());
    for (si, sh) in header.samples.into_iter().enumerate() {
        let needed = 3 + sh.n_features * (3 + m);
        if pos + needed > floats.len() {
            return Err(Error::Parse(format!(
                "record {si} (sample {}): payload too short",
                sh.id
            )));
        }
        let extent = [floats[pos], floats[pos + 1], floats[pos + 2]];
        pos += 3;
        let mut features = Vec::with_capacity(sh.n_features);
        for _ in 0..sh.n_features {
            let location = [floats[pos], floats[pos + 1], floats[pos + 2]];
            let descriptor = floats[pos + 3..pos + 3 + m].to_vec();
            pos += 3 + m;
            features.push(LocalFeature { location, descriptor });
        }
        samples.push(VideoSample {
            id: sh.id,
            label: sh.label,
            group: sh.group,
            extent,
            features,
        });
    }
    if pos != floats.len() {
        return Err(Error::Parse(format!(
            "binary payload has {} trailing values",
            floats.len() - pos
        )));
    }
    Ok(Dataset {
        meta: DatasetMeta {
            name: header.name,
            seed: header.seed,
            provenance: header.provenance,
            locations_normalized: header.locations_normalized,
        },
        descriptor_dim: m,
        classes: header.classes,
        samples,
    })
}

/// A descriptor-space blob: isotropic Gaussian around `mean`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DescriptorCluster {
    pub mean: Vec<f64>,
    pub spread: f64,
}

/// An axis-aligned Gaussian blob in the unit location cube.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LocationCluster {
    pub mean: [f64; 3],
    pub spread: [f64; 3],
}

/// Generative parameters for one class. A feature draws descriptor cluster
/// `j` uniformly, then takes its location from location cluster
/// `j % location_clusters.len()`, so the location layout is tied to the
/// visual pattern.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthClass {
    pub name: String,
    pub descriptor_clusters: Vec<DescriptorCluster>,
    pub location_clusters: Vec<LocationCluster>,
}

fn default_groups() -> usize {
    5
}

fn default_extent() -> [f64; 3] {
    [320.0, 240.0, 100.0]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub descriptor_dim: usize,
    pub samples_per_class: usize,
    pub features_per_sample: usize,
    #[serde(default = "default_groups")]
    pub groups: usize,
    /// Nominal extent recorded on every sample (locations are generated
    /// already normalized).
    #[serde(default = "default_extent")]
    pub extent: [f64; 3],
    pub classes: Vec<SynthClass>,
}

impl SynthSpec {
    /// Classes that share one set of descriptor clusters and differ only in
    /// where each cluster appears in space-time.
    ///
    /// Parameters are drawn from `param_seed`, independently of the sampling
    /// seed passed to [`synth_generate`].
    pub fn location_discriminative(
        n_classes: usize,
        samples_per_class: usize,
        features_per_sample: usize,
        descriptor_dim: usize,
        param_seed: u64,
    ) -> SynthSpec {
        const PATTERNS: usize = 8;
        let mut rng = ChaCha8Rng::seed_from_u64(param_seed);
        let descriptor_clusters: Vec<DescriptorCluster> = (0..PATTERNS)
            .map(|_| DescriptorCluster {
                mean: (0..descriptor_dim).map(|_| rng.random::<f64>()).collect(),
                spread: 0.12,
            })
            .collect();
        let classes = (0..n_classes)
            .map(|c| SynthClass {
                name: format!("class{c}"),
                descriptor_clusters: descriptor_clusters.clone(),
                location_clusters: (0..PATTERNS)
                    .map(|_| LocationCluster {
                        mean: [
                            0.15 + 0.7 * rng.random::<f64>(),
                            0.15 + 0.7 * rng.random::<f64>(),
                            0.15 + 0.7 * rng.random::<f64>(),
                        ],
                        spread: [0.07, 0.07, 0.07],
                    })
                    .collect(),
            })
            .collect();
        SynthSpec {
            descriptor_dim,
            samples_per_class,
            features_per_sample,
            groups: default_groups().min(samples_per_class.max(1)),
            extent: default_extent(),
            classes,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.classes.is_empty()
            || self.samples_per_class == 0
            || self.features_per_sample == 0
            || self.descriptor_dim == 0
            || self.groups == 0
        {
            return Err(Error::Spec(
                "class count, samples, features, descriptor_dim and groups must be positive".into(),
            ));
        }
        if !self.extent.iter().all(|e| *e > 0.0) {
            return Err(Error::Spec("extent must be positive".into()));
        }
        for c in &self.classes {
            if c.descriptor_clusters.is_empty() || c.location_clusters.is_empty() {
                return Err(Error::Spec(format!("class {} has no clusters", c.name)));
            }
            for d in &c.descriptor_clusters {
                if d.mean.len() != self.descriptor_dim || !(d.spread >= 0.0) {
                    return Err(Error::Spec(format!(
                        "class {}: descriptor cluster needs {} means and a non-negative spread",
                        c.name, self.descriptor_dim
                    )));
                }
            }
            for l in &c.location_clusters {
                if !l.spread.iter().all(|s| *s >= 0.0) {
                    return Err(Error::Spec(format!("class {}: negative location spread", c.name)));
                }
            }
        }
        Ok(())
    }
}

/// Draws a dataset from `spec`. Sample `i` gets class `i % n_classes` and
/// group `floor(i * groups / n)`.
pub fn synth_generate(spec: &SynthSpec, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_classes = spec.classes.len();
    let n = n_classes * spec.samples_per_class;
    let groups = spec.groups.min(n);
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let class = &spec.classes[i % n_classes];
        let features = (0..spec.features_per_sample)
            .map(|_| {
                let j = rng.random_range(0..class.descriptor_clusters.len());
                let dc = &class.descriptor_clusters[j];
                let descriptor = dc
                    .mean
                    .iter()
                    .map(|mu| mu + dc.spread * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                let lc = &class.location_clusters[j % class.location_clusters.len()];
                let mut location = [0.0; 3];
                for axis in 0..3 {
                    let v = lc.mean[axis] + lc.spread[axis] * rng.sample::<f64, _>(StandardNormal);
                    location[axis] = v.clamp(0.0, 1.0);
                }
                LocalFeature { location, descriptor }
            })
            .collect();
        samples.push(VideoSample {
            id: format!("s{i:05}"),
            label: class.name.clone(),
            group: (i * groups / n) as u32,
            extent: spec.extent,
            features,
        });
    }
    Ok(Dataset {
        meta: DatasetMeta {
            name: "synthetic".into(),
            seed: Some(seed),
            provenance: "synth_generate".into(),
            locations_normalized: true,
        },
        descriptor_dim: spec.descriptor_dim,
        classes: spec.classes.iter().map(|c| c.name.clone()).collect(),
        samples,
    })
}
