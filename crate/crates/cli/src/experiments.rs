//! Parameter sweeps and encoder comparisons built on the staged pipeline.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Axis;
use serde::{Deserialize, Serialize};
use stanncr::matfile::read_matrix;
use stanncr::stgnmf::{pseudoinverse_encode, ComponentModel};

use crate::config::{PipelineConfig, SweepParam};
use crate::pipeline::{classify_features, run_pipeline, write_json, RunOptions, Runner};
use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    pub mean_macro_accuracy: f64,
    pub mean_accuracy: f64,
    pub output: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub parameter: SweepParam,
    pub rows: Vec<SweepRow>,
    /// Value with the highest mean macro accuracy (first on ties).
    pub best_value: f64,
}

fn default_cache(out: &Path, cache: Option<PathBuf>) -> PathBuf {
    cache.unwrap_or_else(|| out.join("stage_cache"))
}

/// One pipeline run per value, sharing a stage cache so unaffected stages
/// are computed once. Writes `sweep.csv` and `sweep.json` under `out`.
pub fn sweep(
    config: &PipelineConfig,
    param: SweepParam,
    values: &[f64],
    out: &Path,
    cache: Option<PathBuf>,
) -> Result<SweepReport, CliError> {
    if values.is_empty() {
        return Err(CliError::Validation("sweep needs at least one value".into()));
    }
    let configs = values
        .iter()
        .map(|&v| {
            let mut c = config.clone();
            c.set_param(param, v)?;
            Ok(c)
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    let cache = default_cache(out, cache);
    let mut rows = Vec::with_capacity(values.len());
    for (i, (value, cfg)) in values.iter().zip(&configs).enumerate() {
        let run_out = out.join(format!("{}_{i:02}", param.name()));
        let opts = RunOptions {
            cache: Some(cache.clone()),
            ..RunOptions::new(&run_out)
        };
        let report = run_pipeline(cfg, &opts)?;
        let m = report.metrics.expect("classification ran");
        rows.push(SweepRow {
            value: *value,
            mean_macro_accuracy: m.mean_macro_accuracy,
            mean_accuracy: m.mean_accuracy,
            output: run_out,
        });
    }
    let best = rows.iter().fold(&rows[0], |b, r| {
        if r.mean_macro_accuracy > b.mean_macro_accuracy {
            r
        } else {
            b
        }
    });
    let report = SweepReport {
        parameter: param,
        best_value: best.value,
        rows,
    };
    let mut csv = format!("{},mean_macro_accuracy,mean_accuracy\n", param.name());
    for r in &report.rows {
        csv.push_str(&format!("{},{},{}\n", r.value, r.mean_macro_accuracy, r.mean_accuracy));
    }
    let path = out.join("sweep.csv");
    fs::write(&path, csv).map_err(|e| CliError::io(&path, e))?;
    write_json(&out.join("sweep.json"), &report)?;
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// χ² SVM on the raw histograms.
    Bovw,
    /// ST-GNMF at β = 1, i.e. plain GNMF on the histogram graph.
    Gnmf,
    /// ST-GNMF at the configured β.
    Stanncr,
    /// Pseudoinverse codes from the ST-GNMF dictionary, negatives clamped.
    Pinv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub method: Method,
    pub fold: String,
    pub accuracy: f64,
    pub macro_accuracy: f64,
    /// Negative coefficients set to zero before the χ² stage.
    pub clamped: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub rows: Vec<CompareRow>,
    /// Mean macro accuracy per method, in row order.
    pub summary: Vec<(Method, f64)>,
}

/// Evaluates the four encoders on identical folds and seeds. Writes
/// `compare.csv` and `compare.json` under `out`.
pub fn compare_encoders(
    config: &PipelineConfig,
    out: &Path,
    cache: Option<PathBuf>,
) -> Result<CompareReport, CliError> {
    let mut runner = Runner::new(config.clone(), out, Some(default_cache(out, cache)))?;
    let (ds, ds_key) = runner.dataset()?;
    let labels = ds.label_indices();
    let n_classes = ds.classes.len();
    let methods = [Method::Bovw, Method::Gnmf, Method::Stanncr, Method::Pinv];
    let mut rows = Vec::new();
    for fold in runner.folds(&ds)? {
        let cb = runner.codebook(&ds, &ds_key, &fold)?;
        let enc = runner.encode(&ds, &cb, &fold)?;
        let gnmf_key = runner.train(&enc, &fold, "gnmf", 1.0)?;
        runner.encode_test(&gnmf_key, &fold, "gnmf")?;
        let main_key = runner.train(&enc, &fold, "stanncr", config.stgnmf.beta)?;
        runner.encode_test(&main_key, &fold, "stanncr")?;
        let dirs = runner.fold_dirs(&fold);
        let io = |e| CliError::Stage {
            stage: "compare".into(),
            fold: Some(fold.split.name.clone()),
            source: e,
        };
        let (tr, te) = (&fold.split.train, &fold.split.test);
        let y = read_matrix(dirs.encode().join("y.mat")).map_err(io)?;
        for method in methods {
            let mut clamped = None;
            let (train, test) = match method {
                Method::Bovw => (y.select(Axis(1), tr), y.select(Axis(1), te)),
                Method::Gnmf | Method::Stanncr => {
                    let v = if method == Method::Gnmf { "gnmf" } else { "stanncr" };
                    (
                        read_matrix(dirs.train(v).join("v_train.mat")).map_err(io)?,
                        read_matrix(dirs.encode_test(v).join("v_test.mat")).map_err(io)?,
                    )
                }
                Method::Pinv => {
                    let (model, _) = ComponentModel::load(dirs.train("stanncr").join("model.mat")).map_err(io)?;
                    let mut codes = pseudoinverse_encode(model.u.view(), y.select(Axis(1), te).view()).map_err(io)?;
                    let negatives = codes.iter().filter(|v| **v < 0.0).count();
                    codes.mapv_inplace(|v| v.max(0.0));
                    clamped = Some(negatives);
                    (
                        read_matrix(dirs.train("stanncr").join("v_train.mat")).map_err(io)?,
                        codes,
                    )
                }
            };
            let name = serde_json::to_value(method).expect("method serializes");
            let name = name.as_str().expect("unit variant");
            let dir = dirs.classify(name);
            fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
            let fm = classify_features(config, &[(name, train, test)], &labels, &fold, n_classes, &dir).map_err(io)?;
            write_json(&dir.join("metrics.json"), &fm)?;
            rows.push(CompareRow {
                method,
                fold: fold.split.name.clone(),
                accuracy: fm.metrics.accuracy,
                macro_accuracy: fm.metrics.macro_accuracy,
                clamped,
            });
        }
    }
    let summary = methods
        .iter()
        .map(|m| {
            let sel: Vec<f64> = rows
                .iter()
                .filter(|r| r.method == *m)
                .map(|r| r.macro_accuracy)
                .collect();
            (*m, sel.iter().sum::<f64>() / sel.len() as f64)
        })
        .collect();
    let report = CompareReport { rows, summary };
    let mut csv = String::from("method,fold,accuracy,macro_accuracy,clamped\n");
    for r in &report.rows {
        let name = serde_json::to_value(r.method).expect("method serializes");
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            name.as_str().expect("unit variant"),
            r.fold,
            r.accuracy,
            r.macro_accuracy,
            r.clamped.map_or(String::new(), |c| c.to_string())
        ));
    }
    let path = out.join("compare.csv");
    fs::write(&path, csv).map_err(|e| CliError::io(&path, e))?;
    write_json(&out.join("compare.json"), &report)?;
    Ok(report)
}
