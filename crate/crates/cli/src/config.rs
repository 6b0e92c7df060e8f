//! Declarative experiment configuration.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use stanncr::featurestore::SynthSpec;
use stanncr::stdv::{FvNormalization, GmmConfig};
use stanncr::stgnmf::{Bandwidth, GraphOptions, SolverOptions, StGnmfConfig};

use crate::CliError;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub version: u32,
    /// Master seed. Sections without an explicit seed derive theirs from it.
    pub seed: u64,
    pub dataset: DatasetSource,
    pub codebook: CodebookSection,
    #[serde(default)]
    pub stdv: StdvSection,
    pub stgnmf: StgnmfSection,
    #[serde(default)]
    pub classify: ClassifySection,
    pub protocol: Protocol,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    File {
        path: PathBuf,
    },
    Synth {
        spec: SynthSpec,
        #[serde(default)]
        seed: Option<u64>,
    },
    /// Classes sharing descriptor statistics and differing in layout only.
    LocationDiscriminative {
        classes: usize,
        samples_per_class: usize,
        features_per_sample: usize,
        descriptor_dim: usize,
        #[serde(default)]
        param_seed: Option<u64>,
        #[serde(default)]
        seed: Option<u64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CodebookSection {
    pub n_words: usize,
    #[serde(default = "default_k_nn")]
    pub k_nn: usize,
    /// `None` estimates it from the training descriptors.
    #[serde(default)]
    pub smoothing: Option<f64>,
    /// Cap on training descriptors fed to k-means (evenly strided).
    #[serde(default = "default_max_descriptors")]
    pub max_descriptors: usize,
    #[serde(default)]
    pub seed: Option<u64>,
}

fn default_k_nn() -> usize {
    5
}

fn default_max_descriptors() -> usize {
    50_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StdvSection {
    #[serde(default = "default_g")]
    pub n_components: usize,
    #[serde(default = "default_sigma_floor")]
    pub sigma_floor: f64,
    #[serde(default = "default_min_count")]
    pub min_count: f64,
    #[serde(default)]
    pub shared_gmm: bool,
    #[serde(default)]
    pub normalization: FvNormalization,
    /// `false` keeps raw pixel/frame locations (the STLFV variant).
    #[serde(default = "default_true")]
    pub normalize_locations: bool,
    #[serde(default)]
    pub seed: Option<u64>,
}

fn default_g() -> usize {
    5
}

fn default_sigma_floor() -> f64 {
    0.01
}

fn default_min_count() -> f64 {
    5.0
}

fn default_true() -> bool {
    true
}

impl Default for StdvSection {
    fn default() -> Self {
        StdvSection {
            n_components: default_g(),
            sigma_floor: default_sigma_floor(),
            min_count: default_min_count(),
            shared_gmm: false,
            normalization: FvNormalization::default(),
            normalize_locations: true,
            seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StgnmfSection {
    pub n_components: usize,
    pub lambda: f64,
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default)]
    pub delta_feature: Bandwidth,
    #[serde(default)]
    pub delta_distribution: Bandwidth,
    #[serde(default)]
    pub knn: Option<usize>,
    #[serde(default = "default_train_tol")]
    pub tol: f64,
    #[serde(default = "default_train_iter")]
    pub max_iter: usize,
    #[serde(default = "default_encode_iter")]
    pub encode_max_iter: usize,
    /// Couple test codes only through the test-test graph block.
    #[serde(default)]
    pub strict_test_block: bool,
    #[serde(default)]
    pub seed: Option<u64>,
}

fn default_beta() -> f64 {
    0.6
}

fn default_train_tol() -> f64 {
    1e-6
}

fn default_train_iter() -> usize {
    500
}

fn default_encode_iter() -> usize {
    300
}

/// Representations a kernel can be built from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Feature {
    Stanncr,
    Bovw,
    Stp,
}

impl Feature {
    pub fn name(self) -> &'static str {
        match self {
            Feature::Stanncr => "stanncr",
            Feature::Bovw => "bovw",
            Feature::Stp => "stp",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifySection {
    #[serde(default = "default_c")]
    pub c: f64,
    /// Kernels averaged before the SVM.
    #[serde(default = "default_features")]
    pub features: Vec<Feature>,
    /// Fusion weights aligned with `features`; uniform when absent.
    #[serde(default)]
    pub fusion_weights: Option<Vec<f64>>,
    #[serde(default = "default_svm_tol")]
    pub tol: f64,
}

fn default_c() -> f64 {
    10.0
}

fn default_features() -> Vec<Feature> {
    vec![Feature::Stanncr]
}

fn default_svm_tol() -> f64 {
    1e-3
}

impl Default for ClassifySection {
    fn default() -> Self {
        ClassifySection {
            c: default_c(),
            features: default_features(),
            fusion_weights: None,
            tol: default_svm_tol(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Protocol {
    /// One stratified split.
    Holdout {
        test_fraction: f64,
        #[serde(default)]
        seed: Option<u64>,
    },
    /// Leave-one-group-out over the dataset's groups.
    Logo,
    /// One stratified split per seed; stage seeds are offset by each seed.
    Seeds { seeds: Vec<u64>, test_fraction: f64 },
}

/// Seeds resolved for one fold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSeeds {
    pub dataset: u64,
    pub codebook: u64,
    pub stdv: u64,
    pub stgnmf: u64,
}

fn derive(master: u64, salt: u64) -> u64 {
    master.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(salt)
}

fn err(msg: impl Into<String>) -> CliError {
    CliError::Validation(msg.into())
}

impl PipelineConfig {
    /// Small location-discriminative run used when no config is given.
    pub fn default_synth() -> PipelineConfig {
        PipelineConfig {
            version: CONFIG_VERSION,
            seed: 7,
            dataset: DatasetSource::LocationDiscriminative {
                classes: 3,
                samples_per_class: 20,
                features_per_sample: 60,
                descriptor_dim: 8,
                param_seed: None,
                seed: None,
            },
            codebook: CodebookSection {
                n_words: 32,
                k_nn: default_k_nn(),
                smoothing: None,
                max_descriptors: default_max_descriptors(),
                seed: None,
            },
            stdv: StdvSection {
                n_components: 3,
                ..StdvSection::default()
            },
            stgnmf: StgnmfSection {
                n_components: 8,
                lambda: 1.0,
                beta: default_beta(),
                delta_feature: Bandwidth::Auto,
                delta_distribution: Bandwidth::Auto,
                knn: None,
                tol: default_train_tol(),
                max_iter: default_train_iter(),
                encode_max_iter: default_encode_iter(),
                strict_test_block: false,
                seed: None,
            },
            classify: ClassifySection::default(),
            protocol: Protocol::Holdout {
                test_fraction: 0.3,
                seed: None,
            },
            output_dir: None,
        }
    }

    pub fn from_json(text: &str) -> Result<PipelineConfig, CliError> {
        let cfg: PipelineConfig = serde_json::from_str(text)
            .map_err(|e| err(format!("config line {} column {}: {e}", e.line(), e.column())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<PipelineConfig, CliError> {
        let text = fs::read_to_string(path).map_err(|e| err(format!("{}: {e}", path.display())))?;
        PipelineConfig::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.version != CONFIG_VERSION {
            return Err(err(format!(
                "config version {} is not supported (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        match &self.dataset {
            DatasetSource::File { path } if path.as_os_str().is_empty() => {
                return Err(err("dataset.path is empty"));
            }
            DatasetSource::LocationDiscriminative {
                classes,
                samples_per_class,
                features_per_sample,
                descriptor_dim,
                ..
            } if *classes < 2 || *samples_per_class < 2 || *features_per_sample == 0 || *descriptor_dim == 0 => {
                return Err(err(
                    "location_discriminative needs ≥ 2 classes, ≥ 2 samples per class and positive sizes",
                ));
            }
            _ => {}
        }
        let cb = &self.codebook;
        if cb.n_words == 0 {
            return Err(err("codebook.n_words must be positive"));
        }
        if cb.k_nn == 0 || cb.k_nn > cb.n_words {
            return Err(err(format!("codebook.k_nn must lie in 1..={}", cb.n_words)));
        }
        if let Some(s) = cb.smoothing {
            if !(s > 0.0 && s.is_finite()) {
                return Err(err("codebook.smoothing must be positive"));
            }
        }
        if cb.max_descriptors < cb.n_words {
            return Err(err("codebook.max_descriptors must be at least n_words"));
        }
        let sd = &self.stdv;
        if sd.n_components == 0 {
            return Err(err("stdv.n_components must be positive"));
        }
        if !(sd.sigma_floor > 0.0 && sd.sigma_floor.is_finite()) {
            return Err(err("stdv.sigma_floor must be positive"));
        }
        if !(sd.min_count >= 0.0 && sd.min_count.is_finite()) {
            return Err(err("stdv.min_count must be non-negative"));
        }
        if !(sd.normalization.power > 0.0 && sd.normalization.power <= 1.0) {
            return Err(err("stdv.normalization.power must lie in (0, 1]"));
        }
        self.stgnmf_config(0)
            .validate()
            .map_err(|e| err(format!("stgnmf: {e}")))?;
        if self.stgnmf.encode_max_iter == 0 {
            return Err(err("stgnmf.encode_max_iter must be positive"));
        }
        let cl = &self.classify;
        if !(cl.c > 0.0 && cl.c.is_finite()) {
            return Err(err("classify.c must be positive"));
        }
        if !(cl.tol > 0.0) {
            return Err(err("classify.tol must be positive"));
        }
        if cl.features.is_empty() {
            return Err(err("classify.features must name at least one representation"));
        }
        if let Some(w) = &cl.fusion_weights {
            if w.len() != cl.features.len() {
                return Err(err("classify.fusion_weights must align with classify.features"));
            }
            if w.iter().any(|x| !(*x >= 0.0)) || (w.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return Err(err("classify.fusion_weights must be non-negative and sum to 1"));
            }
        }
        let fraction_ok = |f: f64| f > 0.0 && f < 1.0;
        match &self.protocol {
            Protocol::Holdout { test_fraction, .. } if !fraction_ok(*test_fraction) => {
                return Err(err("protocol.test_fraction must lie in (0, 1)"));
            }
            Protocol::Seeds { seeds, test_fraction } => {
                if seeds.is_empty() {
                    return Err(err("protocol.seeds must not be empty"));
                }
                if !fraction_ok(*test_fraction) {
                    return Err(err("protocol.test_fraction must lie in (0, 1)"));
                }
            }
            _ => {}
        }
        Ok(())
    }

    /// Seeds for the stages of a fold; `offset` comes from the protocol.
    pub fn stage_seeds(&self, offset: u64) -> StageSeeds {
        let dataset = match &self.dataset {
            DatasetSource::Synth { seed, .. } | DatasetSource::LocationDiscriminative { seed, .. } => {
                seed.unwrap_or_else(|| derive(self.seed, 1))
            }
            DatasetSource::File { .. } => 0,
        };
        StageSeeds {
            dataset,
            codebook: self
                .codebook
                .seed
                .unwrap_or_else(|| derive(self.seed, 2))
                .wrapping_add(offset),
            stdv: self
                .stdv
                .seed
                .unwrap_or_else(|| derive(self.seed, 3))
                .wrapping_add(offset),
            stgnmf: self
                .stgnmf
                .seed
                .unwrap_or_else(|| derive(self.seed, 4))
                .wrapping_add(offset),
        }
    }

    pub fn gmm_config(&self) -> GmmConfig {
        GmmConfig {
            n_components: self.stdv.n_components,
            sigma_floor: self.stdv.sigma_floor,
            min_count: self.stdv.min_count,
            shared: self.stdv.shared_gmm,
            ..GmmConfig::default()
        }
    }

    pub fn stgnmf_config(&self, seed: u64) -> StGnmfConfig {
        let s = &self.stgnmf;
        StGnmfConfig {
            n_components: s.n_components,
            lambda: s.lambda,
            beta: s.beta,
            graph: GraphOptions {
                delta_feature: s.delta_feature,
                delta_distribution: s.delta_distribution,
                knn: s.knn,
            },
            solver: SolverOptions {
                seed,
                max_iter: s.max_iter,
                tol: s.tol,
            },
        }
    }

    /// Applies a sweepable parameter by name.
    pub fn set_param(&mut self, param: SweepParam, value: f64) -> Result<(), CliError> {
        let as_count = |v: f64| -> Result<usize, CliError> {
            if v >= 1.0 && v.fract() == 0.0 && v < u32::MAX as f64 {
                Ok(v as usize)
            } else {
                Err(err(format!("{} needs a positive integer, got {v}", param.name())))
            }
        };
        match param {
            SweepParam::Beta => self.stgnmf.beta = value,
            SweepParam::Lambda => self.stgnmf.lambda = value,
            SweepParam::Components => self.stgnmf.n_components = as_count(value)?,
            SweepParam::Gaussians => self.stdv.n_components = as_count(value)?,
            SweepParam::C => self.classify.c = value,
        }
        self.validate()
    }
}

/// Parameters `sweep` accepts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    Beta,
    Lambda,
    Components,
    Gaussians,
    C,
}

impl SweepParam {
    pub fn parse(name: &str) -> Result<SweepParam, CliError> {
        match name {
            "beta" => Ok(SweepParam::Beta),
            "lambda" => Ok(SweepParam::Lambda),
            "k_c" | "components" => Ok(SweepParam::Components),
            "g" | "gaussians" => Ok(SweepParam::Gaussians),
            "c" => Ok(SweepParam::C),
            other => Err(err(format!(
                "unknown sweep parameter `{other}` (expected beta, lambda, k_c, g or c)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SweepParam::Beta => "beta",
            SweepParam::Lambda => "lambda",
            SweepParam::Components => "k_c",
            SweepParam::Gaussians => "g",
            SweepParam::C => "c",
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_roundtrips() {
        let cfg = PipelineConfig::default_synth();
        cfg.validate().unwrap();
        let back = PipelineConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut v: serde_json::Value = serde_json::from_str(&PipelineConfig::default_synth().to_json()).unwrap();
        v["stgnmf"]["lamda"] = serde_json::json!(0.5);
        assert!(matches!(
            PipelineConfig::from_json(&v.to_string()),
            Err(CliError::Validation(_))
        ));
    }

    #[test]
    fn beta_outside_unit_interval_is_rejected() {
        let mut cfg = PipelineConfig::default_synth();
        cfg.stgnmf.beta = 1.3;
        assert!(cfg.validate().is_err());
        assert!(cfg.clone().set_param(SweepParam::Beta, 0.2).is_ok());
        assert!(SweepParam::parse("gamma").is_err());
    }
}
