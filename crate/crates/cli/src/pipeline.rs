//! Staged pipeline: dataset, codebook, encode, train, encode-test, classify.
//!
//! Every stage writes its artifacts to disk and later stages read them back,
//! so a run restarted from cached artifacts computes exactly what a fresh
//! run computes.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{Array2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use stanncr::bovw::{
    collect_word_locations, estimate_smoothing, pool_histogram, stp_pool, train_codebook, Codebook, CodebookInfo,
    SoftAssigner, StpGrid,
};
use stanncr::classify::{
    evaluate, fuse_kernels, logo_splits, predict, stratified_split, train_ovr_svm, Chi2Kernel, Metrics,
    SolverOptions as SvmOptions, Split,
};
use stanncr::featurestore::{load_dataset, save_dataset, synth_generate, Dataset, SynthSpec};
use stanncr::matfile::{read_matrix, write_matrix};
use stanncr::stdv::{fit_location_gmms, pool_word_sets, stdv_matrix};
use stanncr::stgnmf::{encode_test, train, ComponentModel, EncodeOptions, EncodeReport, MidLevelRep, TrainReport};

use crate::cache::{sha256_hex, stage_key, StageCache};
use crate::config::{DatasetSource, Feature, PipelineConfig, Protocol, StageSeeds};
use crate::CliError;

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Pipeline stages in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Dataset,
    Codebook,
    Encode,
    Train,
    EncodeTest,
    Classify,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Dataset => "dataset",
            Stage::Codebook => "codebook",
            Stage::Encode => "encode",
            Stage::Train => "train",
            Stage::EncodeTest => "encode_test",
            Stage::Classify => "classify",
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub out: PathBuf,
    pub cache: Option<PathBuf>,
    /// Last stage to run.
    pub until: Stage,
}

impl RunOptions {
    pub fn new(out: impl Into<PathBuf>) -> RunOptions {
        RunOptions {
            out: out.into(),
            cache: None,
            until: Stage::Classify,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub fold: Option<String>,
    pub stage: Stage,
    pub seconds: f64,
    pub cached: bool,
    pub artifacts: Vec<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldMetrics {
    pub fold: String,
    pub n_train: usize,
    pub n_test: usize,
    #[serde(flatten)]
    pub metrics: Metrics,
}

/// Deterministic summary written to `metrics.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub classes: Vec<String>,
    pub folds: Vec<FoldMetrics>,
    pub mean_accuracy: f64,
    /// Fold average of the average class accuracy.
    pub mean_macro_accuracy: f64,
    /// Confusion counts summed over folds, `[truth][predicted]`.
    pub confusion: Vec<Vec<usize>>,
    pub config: PipelineConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub tool_version: String,
    pub stages: Vec<StageRecord>,
    pub seeds: Vec<(String, StageSeeds)>,
    pub train_reports: Vec<(String, TrainReport)>,
    pub metrics: Option<MetricsReport>,
    pub config: PipelineConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CodebookStageInfo {
    info: CodebookInfo,
    k_nn: usize,
    smoothing: f64,
    n_descriptors: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct EncodeStageInfo {
    n_words: usize,
    stdv_len: usize,
    fallback_count: usize,
    degenerate: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Predictions {
    test: Vec<usize>,
    truth: Vec<usize>,
    predicted: Vec<usize>,
    scores: Vec<Vec<f64>>,
}

/// One protocol fold with the seed offset its stages use.
#[derive(Debug, Clone, PartialEq)]
pub struct Fold {
    pub split: Split,
    pub offset: u64,
}

/// Paths of one fold's artifacts.
#[derive(Debug, Clone)]
pub struct FoldDirs {
    pub root: PathBuf,
}

impl FoldDirs {
    pub fn codebook(&self) -> PathBuf {
        self.root.join("codebook")
    }
    pub fn encode(&self) -> PathBuf {
        self.root.join("encode")
    }
    pub fn train(&self, variant: &str) -> PathBuf {
        self.root.join(format!("train_{variant}"))
    }
    pub fn encode_test(&self, variant: &str) -> PathBuf {
        self.root.join(format!("encode_test_{variant}"))
    }
    pub fn classify(&self, variant: &str) -> PathBuf {
        self.root.join(format!("classify_{variant}"))
    }
}

fn stage_err(stage: Stage, fold: Option<&str>) -> impl Fn(stanncr::Error) -> CliError + '_ {
    move |source| CliError::Stage {
        stage: stage.name().to_string(),
        fold: fold.map(str::to_string),
        source,
    }
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).expect("report serializes");
    text.push('\n');
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| CliError::Artifact(format!("{}: {e}", path.display())))
}

fn json_bytes<T: Serialize>(value: &T) -> Vec<u8> {
    serde_json::to_vec(value).expect("config section serializes")
}

fn idx_bytes(idx: &[usize]) -> Vec<u8> {
    idx.iter().flat_map(|i| (*i as u64).to_le_bytes()).collect()
}

/// Runs stages, consulting the cache and recording timings.
pub struct Runner {
    pub config: PipelineConfig,
    pub out: PathBuf,
    cache: Option<StageCache>,
    pub records: Vec<StageRecord>,
}

impl Runner {
    pub fn new(config: PipelineConfig, out: impl Into<PathBuf>, cache: Option<PathBuf>) -> Result<Runner, CliError> {
        config.validate()?;
        let out = out.into();
        fs::create_dir_all(&out).map_err(|e| CliError::io(&out, e))?;
        Ok(Runner {
            config,
            out,
            cache: cache.map(StageCache::new),
            records: Vec::new(),
        })
    }

    fn run_stage(
        &mut self,
        stage: Stage,
        fold: Option<&str>,
        key: &str,
        dir: &Path,
        files: &[&str],
        compute: impl FnOnce(&Path) -> Result<(), CliError>,
    ) -> Result<(), CliError> {
        let start = Instant::now();
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        let cached = match &self.cache {
            Some(c) => c
                .fetch(stage.name(), key, dir, files)
                .map_err(|e| CliError::io(dir, e))?,
            None => false,
        };
        if !cached {
            compute(dir)?;
            if let Some(c) = &self.cache {
                c.store(stage.name(), key, dir, files)
                    .map_err(|e| CliError::io(dir, e))?;
            }
        }
        self.records.push(StageRecord {
            fold: fold.map(str::to_string),
            stage,
            seconds: start.elapsed().as_secs_f64(),
            cached,
            artifacts: files.iter().map(|f| dir.join(f)).collect(),
        });
        Ok(())
    }

    /// Loads or synthesizes the dataset, normalizes locations and persists
    /// it as `dataset.bin`. Returns the dataset and its stage key.
    pub fn dataset(&mut self) -> Result<(Dataset, String), CliError> {
        let seeds = self.config.stage_seeds(0);
        let source = self.config.dataset.clone();
        let source_bytes = match &source {
            DatasetSource::File { path } => fs::read(path).map_err(|e| CliError::io(path, e))?,
            _ => json_bytes(&source),
        };
        let key = stage_key("dataset", &[&source_bytes, &seeds.dataset.to_le_bytes()]);
        let out = self.out.clone();
        let err = stage_err(Stage::Dataset, None);
        self.run_stage(Stage::Dataset, None, &key, &out, &["dataset.bin"], |dir| {
            let ds = match &source {
                DatasetSource::File { path } => load_dataset(path).map_err(&err)?,
                DatasetSource::Synth { spec, .. } => synth_generate(spec, seeds.dataset).map_err(&err)?,
                DatasetSource::LocationDiscriminative {
                    classes,
                    samples_per_class,
                    features_per_sample,
                    descriptor_dim,
                    param_seed,
                    ..
                } => {
                    let spec = SynthSpec::location_discriminative(
                        *classes,
                        *samples_per_class,
                        *features_per_sample,
                        *descriptor_dim,
                        param_seed.unwrap_or(seeds.dataset),
                    );
                    synth_generate(&spec, seeds.dataset).map_err(&err)?
                }
            };
            let ds = ds.normalize_locations().map_err(&err)?;
            save_dataset(&ds, dir.join("dataset.bin")).map_err(&err)
        })?;
        let ds = load_dataset(self.out.join("dataset.bin")).map_err(stage_err(Stage::Dataset, None))?;
        Ok((ds, key))
    }

    pub fn folds(&self, dataset: &Dataset) -> Result<Vec<Fold>, CliError> {
        let labels = dataset.label_indices();
        let err = stage_err(Stage::Dataset, None);
        Ok(match &self.config.protocol {
            Protocol::Holdout { test_fraction, seed } => {
                let seed = seed.unwrap_or(self.config.seed);
                vec![Fold {
                    split: stratified_split(&labels, *test_fraction, seed).map_err(err)?,
                    offset: 0,
                }]
            }
            Protocol::Logo => logo_splits(&dataset.groups())
                .map_err(err)?
                .into_iter()
                .map(|split| Fold { split, offset: 0 })
                .collect(),
            Protocol::Seeds { seeds, test_fraction } => seeds
                .iter()
                .map(|&s| {
                    Ok(Fold {
                        split: stratified_split(&labels, *test_fraction, s)?,
                        offset: s,
                    })
                })
                .collect::<stanncr::Result<Vec<_>>>()
                .map_err(err)?,
        })
    }

    pub fn fold_dirs(&self, fold: &Fold) -> FoldDirs {
        FoldDirs {
            root: self.out.join("folds").join(&fold.split.name),
        }
    }

    /// k-means codebook on the training fold's descriptors.
    pub fn codebook(&mut self, ds: &Dataset, ds_key: &str, fold: &Fold) -> Result<String, CliError> {
        let cfg = self.config.codebook.clone();
        let seed = self.config.stage_seeds(fold.offset).codebook;
        let key = stage_key(
            "codebook",
            &[
                ds_key.as_bytes(),
                &idx_bytes(&fold.split.train),
                &json_bytes(&cfg),
                &seed.to_le_bytes(),
            ],
        );
        let dir = self.fold_dirs(fold).codebook();
        let name = fold.split.name.clone();
        let err = stage_err(Stage::Codebook, Some(&name));
        self.run_stage(
            Stage::Codebook,
            Some(&name),
            &key,
            &dir,
            &["codebook.mat", "codebook.json", "stage.json"],
            |dir| {
                let features: Vec<&[f64]> = fold
                    .split
                    .train
                    .iter()
                    .flat_map(|&i| ds.samples[i].features.iter().map(|f| f.descriptor.as_slice()))
                    .collect();
                let stride = features.len().div_ceil(cfg.max_descriptors).max(1);
                let picked: Vec<&[f64]> = features.iter().step_by(stride).copied().collect();
                let m = ds.descriptor_dim;
                let desc = Array2::from_shape_fn((picked.len(), m), |(r, c)| picked[r][c]);
                let (codebook, info) = train_codebook(desc.view(), cfg.n_words, seed).map_err(&err)?;
                let smoothing = match cfg.smoothing {
                    Some(s) => s,
                    None => estimate_smoothing(&codebook, desc.view(), 10_000).map_err(&err)?,
                };
                codebook.save(&info, dir.join("codebook.mat")).map_err(&err)?;
                write_json(
                    &dir.join("stage.json"),
                    &CodebookStageInfo {
                        info,
                        k_nn: cfg.k_nn,
                        smoothing,
                        n_descriptors: picked.len(),
                    },
                )
            },
        )?;
        Ok(key)
    }

    /// Soft assignment of every sample, then histograms, STP pyramids and
    /// STDVs (location GMMs fit on the training fold only).
    pub fn encode(&mut self, ds: &Dataset, codebook_key: &str, fold: &Fold) -> Result<String, CliError> {
        let stdv = self.config.stdv.clone();
        let gmm_cfg = self.config.gmm_config();
        let seed = self.config.stage_seeds(fold.offset).stdv;
        let key = stage_key(
            "encode",
            &[codebook_key.as_bytes(), &json_bytes(&stdv), &seed.to_le_bytes()],
        );
        let dirs = self.fold_dirs(fold);
        let (cb_dir, dir) = (dirs.codebook(), dirs.encode());
        let name = fold.split.name.clone();
        let err = stage_err(Stage::Encode, Some(&name));
        self.run_stage(
            Stage::Encode,
            Some(&name),
            &key,
            &dir,
            &["y.mat", "z.mat", "stp.mat", "gmm.mat", "gmm.json", "stage.json"],
            |dir| {
                let (codebook, _) = Codebook::load(cb_dir.join("codebook.mat")).map_err(&err)?;
                let cb_info: CodebookStageInfo = read_json(&cb_dir.join("stage.json"))?;
                let assigner = SoftAssigner {
                    k_nn: cb_info.k_nn,
                    smoothing: cb_info.smoothing,
                };
                let k = codebook.n_words();
                let grid = StpGrid::default();
                let per_sample = ds
                    .samples
                    .par_iter()
                    .map(|s| {
                        let a = assigner.encode(&codebook, s)?;
                        let low = pool_histogram(&a, k);
                        let located = if stdv.normalize_locations {
                            collect_word_locations(s, &a, k)?
                        } else {
                            collect_word_locations(&s.denormalize_locations(), &a, k)?
                        };
                        let stp = stp_pool(s, &a, k, &grid)?;
                        Ok((low, located, stp))
                    })
                    .collect::<stanncr::Result<Vec<_>>>()
                    .map_err(&err)?;
                let n = ds.samples.len();
                let y = Array2::from_shape_fn((k, n), |(r, c)| per_sample[c].0.y[r]);
                let stp_len = grid.n_cells() * k;
                let stp = Array2::from_shape_fn((stp_len, n), |(r, c)| per_sample[c].2[r]);
                let train_sets: Vec<_> = fold.split.train.iter().map(|&i| per_sample[i].1.clone()).collect();
                let pooled = pool_word_sets(&train_sets, k).map_err(&err)?;
                let bank = fit_location_gmms(&pooled, &gmm_cfg, seed).map_err(&err)?;
                let z_vecs = per_sample
                    .par_iter()
                    .map(|p| bank.encode(&p.1, stdv.normalization))
                    .collect::<stanncr::Result<Vec<_>>>()
                    .map_err(&err)?;
                let z = stdv_matrix(&z_vecs);
                write_matrix(dir.join("y.mat"), &y).map_err(&err)?;
                write_matrix(dir.join("z.mat"), &z).map_err(&err)?;
                write_matrix(dir.join("stp.mat"), &stp).map_err(&err)?;
                bank.save(dir.join("gmm.mat"), Some(stdv.normalization)).map_err(&err)?;
                write_json(
                    &dir.join("stage.json"),
                    &EncodeStageInfo {
                        n_words: k,
                        stdv_len: bank.stdv_len(),
                        fallback_count: bank.fallback_count(),
                        degenerate: per_sample.iter().map(|p| p.0.degenerate).collect(),
                    },
                )
            },
        )?;
        Ok(key)
    }

    /// ST-GNMF on the training columns. `variant` names the output
    /// directory; `beta` overrides the configured blend.
    pub fn train(&mut self, encode_key: &str, fold: &Fold, variant: &str, beta: f64) -> Result<String, CliError> {
        let mut section = self.config.stgnmf.clone();
        section.beta = beta;
        let seed = self.config.stage_seeds(fold.offset).stgnmf;
        let mut cfg = self.config.clone();
        cfg.stgnmf = section.clone();
        let st_cfg = cfg.stgnmf_config(seed);
        let key = stage_key(
            "train",
            &[
                encode_key.as_bytes(),
                &idx_bytes(&fold.split.train),
                &json_bytes(&st_cfg),
            ],
        );
        let dirs = self.fold_dirs(fold);
        let (enc_dir, dir) = (dirs.encode(), dirs.train(variant));
        let name = fold.split.name.clone();
        let err = stage_err(Stage::Train, Some(&name));
        self.run_stage(
            Stage::Train,
            Some(&name),
            &key,
            &dir,
            &["model.mat", "model.json", "v_train.mat"],
            |dir| {
                let y = read_matrix(enc_dir.join("y.mat")).map_err(&err)?;
                let z = read_matrix(enc_dir.join("z.mat")).map_err(&err)?;
                let yt = y.select(Axis(1), &fold.split.train);
                let zt = z.select(Axis(1), &fold.split.train);
                let trained = train(yt.view(), zt.view(), &st_cfg).map_err(&err)?;
                trained
                    .model
                    .save(dir.join("model.mat"), Some(&trained.report))
                    .map_err(&err)?;
                write_matrix(dir.join("v_train.mat"), &trained.codes.v).map_err(&err)
            },
        )?;
        Ok(key)
    }

    /// Codes for the test fold against the frozen model of `variant`.
    pub fn encode_test(&mut self, train_key: &str, fold: &Fold, variant: &str) -> Result<String, CliError> {
        let opts = EncodeOptions {
            seed: self.config.stage_seeds(fold.offset).stgnmf,
            max_iter: self.config.stgnmf.encode_max_iter,
            tol: self.config.stgnmf.tol,
            strict_test_block: self.config.stgnmf.strict_test_block,
        };
        let key = stage_key(
            "encode_test",
            &[train_key.as_bytes(), &idx_bytes(&fold.split.test), &json_bytes(&opts)],
        );
        let dirs = self.fold_dirs(fold);
        let (enc_dir, tr_dir, dir) = (dirs.encode(), dirs.train(variant), dirs.encode_test(variant));
        let name = fold.split.name.clone();
        let err = stage_err(Stage::EncodeTest, Some(&name));
        self.run_stage(
            Stage::EncodeTest,
            Some(&name),
            &key,
            &dir,
            &["v_test.mat", "report.json"],
            |dir| {
                let y = read_matrix(enc_dir.join("y.mat")).map_err(&err)?;
                let z = read_matrix(enc_dir.join("z.mat")).map_err(&err)?;
                let (model, _) = ComponentModel::load(tr_dir.join("model.mat")).map_err(&err)?;
                let v_train = MidLevelRep {
                    v: read_matrix(tr_dir.join("v_train.mat")).map_err(&err)?,
                };
                let (tr, te) = (&fold.split.train, &fold.split.test);
                let (codes, report): (MidLevelRep, EncodeReport) = encode_test(
                    &model,
                    &v_train,
                    y.select(Axis(1), te).view(),
                    z.select(Axis(1), te).view(),
                    y.select(Axis(1), tr).view(),
                    z.select(Axis(1), tr).view(),
                    &opts,
                )
                .map_err(&err)?;
                write_matrix(dir.join("v_test.mat"), &codes.v).map_err(&err)?;
                write_json(&dir.join("report.json"), &report)
            },
        )?;
        Ok(key)
    }

    /// χ² kernels on the configured features, fusion, one-vs-rest SVM.
    pub fn classify(&mut self, ds: &Dataset, fold: &Fold, variant: &str) -> Result<FoldMetrics, CliError> {
        let start = Instant::now();
        let dirs = self.fold_dirs(fold);
        let dir = dirs.classify(variant);
        fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
        let name = fold.split.name.clone();
        let err = stage_err(Stage::Classify, Some(&name));
        let (tr, te) = (&fold.split.train, &fold.split.test);
        let mut pairs = Vec::new();
        for f in &self.config.classify.features {
            let pair = match f {
                Feature::Stanncr => (
                    read_matrix(dirs.train(variant).join("v_train.mat")).map_err(&err)?,
                    read_matrix(dirs.encode_test(variant).join("v_test.mat")).map_err(&err)?,
                ),
                Feature::Bovw | Feature::Stp => {
                    let file = if *f == Feature::Bovw { "y.mat" } else { "stp.mat" };
                    let m = read_matrix(dirs.encode().join(file)).map_err(&err)?;
                    (m.select(Axis(1), tr), m.select(Axis(1), te))
                }
            };
            pairs.push((f.name(), pair.0, pair.1));
        }
        let labels = ds.label_indices();
        let fm = classify_features(&self.config, &pairs, &labels, fold, ds.classes.len(), &dir).map_err(&err)?;
        write_json(&dir.join("metrics.json"), &fm)?;
        let csv = fm.metrics.confusion_csv(&ds.classes);
        fs::write(dir.join("confusion.csv"), csv).map_err(|e| CliError::io(&dir, e))?;
        self.records.push(StageRecord {
            fold: Some(fold.split.name.clone()),
            stage: Stage::Classify,
            seconds: start.elapsed().as_secs_f64(),
            cached: false,
            artifacts: ["metrics.json", "confusion.csv", "predictions.json"]
                .iter()
                .map(|f| dir.join(f))
                .collect(),
        });
        Ok(fm)
    }
}

/// Kernel SVM on `(name, train columns, test columns)` representations,
/// fused uniformly or by the configured weights. Writes `predictions.json`
/// into `dir`.
pub fn classify_features(
    config: &PipelineConfig,
    pairs: &[(&str, Array2<f64>, Array2<f64>)],
    labels: &[usize],
    fold: &Fold,
    n_classes: usize,
    dir: &Path,
) -> stanncr::Result<FoldMetrics> {
    let mut train_k = Vec::new();
    let mut test_k = Vec::new();
    for (name, train, test) in pairs {
        let k = Chi2Kernel::fit(train.view(), name)?;
        train_k.push(k.train_kernel()?);
        test_k.push(k.test_kernel(test.view())?);
    }
    let weights = config.classify.fusion_weights.as_deref();
    let (ktr, kte) = if train_k.len() == 1 {
        (train_k.remove(0), test_k.remove(0))
    } else {
        (fuse_kernels(&train_k, weights)?, fuse_kernels(&test_k, weights)?)
    };
    let y_train: Vec<usize> = fold.split.train.iter().map(|&i| labels[i]).collect();
    let y_test: Vec<usize> = fold.split.test.iter().map(|&i| labels[i]).collect();
    let opts = SvmOptions {
        tol: config.classify.tol,
        ..SvmOptions::default()
    };
    let mut model = train_ovr_svm(ktr.values.view(), &y_train, n_classes, config.classify.c, &opts)?;
    model.normalizer = ktr.normalizer.is_finite().then_some(ktr.normalizer);
    let pred = predict(&model, kte.values.view())?;
    let metrics = evaluate(&pred.labels, &y_test, n_classes)?;
    let predictions = Predictions {
        test: fold.split.test.clone(),
        truth: y_test,
        predicted: pred.labels,
        scores: pred.scores.rows().into_iter().map(|r| r.to_vec()).collect(),
    };
    let path = dir.join("predictions.json");
    let text = serde_json::to_string_pretty(&predictions).expect("predictions serialize");
    fs::write(&path, text).map_err(|e| stanncr::Error::Io { path, source: e })?;
    Ok(FoldMetrics {
        fold: fold.split.name.clone(),
        n_train: fold.split.train.len(),
        n_test: fold.split.test.len(),
        metrics,
    })
}

/// Averages fold metrics and sums confusion matrices.
pub fn summarize(classes: &[String], folds: Vec<FoldMetrics>, config: &PipelineConfig) -> MetricsReport {
    let n = folds.len().max(1) as f64;
    let c = classes.len();
    let mut confusion = vec![vec![0usize; c]; c];
    for f in &folds {
        for (r, row) in f.metrics.confusion.iter().enumerate() {
            for (col, v) in row.iter().enumerate() {
                confusion[r][col] += v;
            }
        }
    }
    let mut echo = config.clone();
    echo.output_dir = None;
    MetricsReport {
        classes: classes.to_vec(),
        mean_accuracy: folds.iter().map(|f| f.metrics.accuracy).sum::<f64>() / n,
        mean_macro_accuracy: folds.iter().map(|f| f.metrics.macro_accuracy).sum::<f64>() / n,
        folds,
        confusion,
        config: echo,
    }
}

pub fn confusion_csv(classes: &[String], confusion: &[Vec<usize>]) -> String {
    Metrics {
        accuracy: 0.0,
        macro_accuracy: 0.0,
        per_class: Vec::new(),
        confusion: confusion.to_vec(),
    }
    .confusion_csv(classes)
}

/// Runs the pipeline through `opts.until` and writes `run_report.json`,
/// plus `metrics.json` and `confusion.csv` when classification ran.
pub fn run_pipeline(config: &PipelineConfig, opts: &RunOptions) -> Result<RunReport, CliError> {
    let mut runner = Runner::new(config.clone(), &opts.out, opts.cache.clone())?;
    write_json(&opts.out.join("config.json"), config)?;
    let (ds, ds_key) = runner.dataset()?;
    let mut seeds = Vec::new();
    let mut train_reports = Vec::new();
    let mut fold_metrics = Vec::new();
    if opts.until > Stage::Dataset {
        let variant = "main";
        for fold in runner.folds(&ds)? {
            seeds.push((fold.split.name.clone(), config.stage_seeds(fold.offset)));
            let cb = runner.codebook(&ds, &ds_key, &fold)?;
            if opts.until < Stage::Encode {
                continue;
            }
            let enc = runner.encode(&ds, &cb, &fold)?;
            if opts.until < Stage::Train {
                continue;
            }
            let tr = runner.train(&enc, &fold, variant, config.stgnmf.beta)?;
            let model_json = runner.fold_dirs(&fold).train(variant).join("model.mat");
            if let (_, Some(report)) =
                ComponentModel::load(&model_json).map_err(stage_err(Stage::Train, Some(&fold.split.name)))?
            {
                train_reports.push((fold.split.name.clone(), report));
            }
            if opts.until < Stage::EncodeTest {
                continue;
            }
            runner.encode_test(&tr, &fold, variant)?;
            if opts.until < Stage::Classify {
                continue;
            }
            fold_metrics.push(runner.classify(&ds, &fold, variant)?);
        }
    }
    let metrics = (opts.until == Stage::Classify).then(|| summarize(&ds.classes, fold_metrics, config));
    if let Some(m) = &metrics {
        write_json(&opts.out.join("metrics.json"), m)?;
        let path = opts.out.join("confusion.csv");
        fs::write(&path, confusion_csv(&ds.classes, &m.confusion)).map_err(|e| CliError::io(&path, e))?;
    }
    let report = RunReport {
        tool_version: TOOL_VERSION.to_string(),
        stages: runner.records,
        seeds,
        train_reports,
        metrics,
        config: config.clone(),
    };
    write_json(&opts.out.join("run_report.json"), &report)?;
    Ok(report)
}

/// Digest of a metrics file, handy for determinism checks.
pub fn file_digest(path: &Path) -> Result<String, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(sha256_hex(&bytes))
}
