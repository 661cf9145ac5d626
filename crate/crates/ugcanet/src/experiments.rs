//! Experiment protocols at desk scale: fixed split, stratified k-fold,
//! cross-dataset transfer, multi-task runs and the module-ablation grid.
//!
//! Every evaluation dumps its predicted masks as PGM files and derives the
//! reported metrics from those dumps, so a report can be independently
//! recomputed from the artifacts on disk. Reports are emitted as an aligned
//! text table (mean +- std over runs/folds) and a machine-readable CSV.

use crate::data::{netpbm, SampleRecord};
use crate::folds::stratified_kfold;
use crate::metrics::mean_std;
use crate::nn::model::{ModelConfig, UgcaNet};
use crate::opt::LrSchedule;
use crate::train::{predict, score, train, Aggregate, EvalReport, Prediction, TrainConfig};
use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum ExperimentError {
    #[error("unknown experiment kind {0:?}")]
    UnknownKind(String),
    #[error("experiment {kind} needs {what}")]
    MissingData { kind: String, what: String },
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
    #[error(transparent)]
    Folds(#[from] crate::folds::FoldError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("raster error on {path}: {source}")]
    Netpbm {
        path: String,
        source: netpbm::NetpbmError,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExperimentKind {
    /// 90% of the dataset trains, the remainder tests; repeated over runs.
    Split9010,
    /// Stratified k-fold cross-validation.
    Kfold,
    /// Train on one dataset, test on another.
    CrossDataset,
    /// Multi-task k-fold over a mixed-annotation dataset.
    MultitaskGi,
    /// The four-variant module grid (base / +cgnl / +se / full).
    Ablation,
}

impl ExperimentKind {
    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "split-90-10" => Some(Self::Split9010),
            "kfold-5" => Some(Self::Kfold),
            "cross-dataset" => Some(Self::CrossDataset),
            "multitask-gi" => Some(Self::MultitaskGi),
            "ablation" => Some(Self::Ablation),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Split9010 => "split-90-10",
            Self::Kfold => "kfold-5",
            Self::CrossDataset => "cross-dataset",
            Self::MultitaskGi => "multitask-gi",
            Self::Ablation => "ablation",
        }
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentSpec {
    pub kind: ExperimentKind,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Independent repetitions for split-style experiments.
    pub runs: usize,
    pub folds: usize,
    pub aggregate: Aggregate,
    /// Warmup fraction of total steps for the cosine schedule.
    pub warmup_fraction: f32,
}

impl ExperimentSpec {
    pub fn desk(kind: ExperimentKind, seed: u64) -> Self {
        Self {
            kind,
            model: ModelConfig::tiny(),
            train: TrainConfig::desk(seed),
            runs: 1,
            folds: 5,
            aggregate: Aggregate::PerImage,
            warmup_fraction: 0.1,
        }
    }

    fn schedule(&self) -> LrSchedule {
        LrSchedule::WarmupCosine {
            warmup: ((self.train.steps as f32) * self.warmup_fraction) as usize,
            total: self.train.steps,
        }
    }
}

/// One metrics row; `fold` doubles as the run index for split experiments.
#[derive(Debug, Clone)]
pub struct ReportRow {
    pub experiment: String,
    pub variant: String,
    pub fold: usize,
    pub dice: f64,
    pub iou: f64,
    pub recall: f64,
    pub precision: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Default)]
pub struct AccuracyRow {
    pub variant: String,
    pub fold: usize,
    pub pos: Option<f64>,
    pub le: Option<f64>,
    pub hp: Option<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct ExperimentReport {
    pub rows: Vec<ReportRow>,
    pub accuracy_rows: Vec<AccuracyRow>,
}

impl ExperimentReport {
    /// CSV with the pinned column set.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("experiment,variant,fold,mDice,mIoU,recall,precision,seed\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{:.6},{:.6},{:.6},{:.6},{}\n",
                r.experiment, r.variant, r.fold, r.dice, r.iou, r.recall, r.precision, r.seed
            ));
        }
        out
    }

    pub fn accuracy_csv(&self) -> String {
        let mut out = String::from("variant,fold,pos_acc,le_acc,hp_acc\n");
        for r in &self.accuracy_rows {
            let f = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.variant,
                r.fold,
                f(r.pos),
                f(r.le),
                f(r.hp)
            ));
        }
        out
    }

    /// Aligned mean +- std table over folds/runs per variant.
    pub fn to_text(&self) -> String {
        let mut variants: Vec<String> = Vec::new();
        for r in &self.rows {
            if !variants.contains(&r.variant) {
                variants.push(r.variant.clone());
            }
        }
        let mut out = format!(
            "{:<16} {:>6} {:>17} {:>17} {:>17} {:>17}\n",
            "variant", "folds", "mDice", "mIoU", "Recall", "Precision"
        );
        for v in &variants {
            let rows: Vec<&ReportRow> = self.rows.iter().filter(|r| &r.variant == v).collect();
            let col = |f: fn(&ReportRow) -> f64| {
                let vals: Vec<f64> = rows.iter().map(|r| f(r)).collect();
                let (m, s) = mean_std(&vals);
                format!("{m:.3} +- {s:.3}")
            };
            out.push_str(&format!(
                "{:<16} {:>6} {:>17} {:>17} {:>17} {:>17}\n",
                v,
                rows.len(),
                col(|r| r.dice),
                col(|r| r.iou),
                col(|r| r.recall),
                col(|r| r.precision),
            ));
        }
        if !self.accuracy_rows.is_empty() {
            out.push_str(&format!(
                "\n{:<16} {:>6} {:>10} {:>10} {:>10}\n",
                "variant", "fold", "pos_acc", "le_acc", "hp_acc"
            ));
            for r in &self.accuracy_rows {
                let f = |v: Option<f64>| v.map(|x| format!("{x:.3}")).unwrap_or_else(|| "-".into());
                out.push_str(&format!(
                    "{:<16} {:>6} {:>10} {:>10} {:>10}\n",
                    r.variant,
                    r.fold,
                    f(r.pos),
                    f(r.le),
                    f(r.hp)
                ));
            }
        }
        out
    }
}

fn io_err(path: &Path, source: std::io::Error) -> ExperimentError {
    ExperimentError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Predict, dump every predicted mask as a PGM, reload the dumps, and score
/// from the reloaded masks.
pub fn eval_with_dumps(
    model: &UgcaNet,
    samples: &[SampleRecord],
    size: usize,
    dump_dir: &Path,
    aggregate: Aggregate,
) -> Result<EvalReport, ExperimentError> {
    std::fs::create_dir_all(dump_dir).map_err(|e| io_err(dump_dir, e))?;
    let predictions = predict(model, samples, size)?;
    let mut reloaded = Vec::with_capacity(predictions.len());
    for (i, (s, p)) in samples.iter().zip(&predictions).enumerate() {
        let mask = if s.mask.is_some() {
            let path = dump_dir.join(format!("pred_{i:04}.pgm"));
            netpbm::save(&path, &p.mask).map_err(|e| ExperimentError::Netpbm {
                path: path.display().to_string(),
                source: e,
            })?;
            netpbm::load_mask(&path).map_err(|e| ExperimentError::Netpbm {
                path: path.display().to_string(),
                source: e,
            })?
        } else {
            p.mask.clone()
        };
        reloaded.push(Prediction {
            mask,
            ..p.clone()
        });
    }
    Ok(score(samples, &reloaded, aggregate)?)
}

/// Worker cap: `UGCANET_THREADS` when set, otherwise the available
/// parallelism.
pub fn worker_cap() -> usize {
    std::env::var("UGCANET_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&v| v > 0)
        .unwrap_or_else(|| {
            std::thread::available_parallelism()
                .map(|n| n.get())
                .unwrap_or(1)
        })
}

struct FoldJob {
    fold: usize,
    train_idx: Vec<usize>,
    test_idx: Vec<usize>,
    seed: u64,
    variant_model: ModelConfig,
    variant: String,
}

/// Train/eval each job, at most `worker_cap()` in parallel; results are
/// assembled in job order so scheduling cannot affect the report.
fn run_jobs(
    spec: &ExperimentSpec,
    data: &[SampleRecord],
    jobs: Vec<FoldJob>,
    out_dir: &Path,
) -> Result<ExperimentReport, ExperimentError> {
    let cap = worker_cap().max(1);
    let mut results: Vec<Option<Result<(EvalReport, FoldJob), ExperimentError>>> =
        Vec::with_capacity(jobs.len());
    for _ in 0..jobs.len() {
        results.push(None);
    }
    let run_one = |job: FoldJob| -> Result<(EvalReport, FoldJob), ExperimentError> {
        let train_set: Vec<SampleRecord> =
            job.train_idx.iter().map(|&i| data[i].clone()).collect();
        let test_set: Vec<SampleRecord> = job.test_idx.iter().map(|&i| data[i].clone()).collect();
        let mut model = UgcaNet::new(job.variant_model.clone(), job.seed)?;
        let mut cfg = spec.train.clone();
        cfg.seed = job.seed;
        train(&mut model, &train_set, &cfg, spec.schedule())?;
        let dump = out_dir.join(format!("{}/fold{}", job.variant, job.fold));
        let report = eval_with_dumps(&model, &test_set, spec.train.size, &dump, spec.aggregate)?;
        Ok((report, job))
    };

    for chunk_start in (0..jobs.len()).step_by(cap) {
        let chunk_end = (chunk_start + cap).min(jobs.len());
        std::thread::scope(|s| {
            let mut handles = Vec::new();
            for (offset, job) in jobs[chunk_start..chunk_end].iter().enumerate() {
                let job_copy = FoldJob {
                    fold: job.fold,
                    train_idx: job.train_idx.clone(),
                    test_idx: job.test_idx.clone(),
                    seed: job.seed,
                    variant_model: job.variant_model.clone(),
                    variant: job.variant.clone(),
                };
                handles.push((offset, s.spawn(move || run_one(job_copy))));
            }
            for (offset, handle) in handles {
                results[chunk_start + offset] =
                    Some(handle.join().expect("experiment worker panicked"));
            }
        });
    }

    let mut report = ExperimentReport::default();
    for slot in results {
        let (eval, job) = slot.expect("all jobs ran")?;
        let seg = eval.seg.unwrap_or(crate::metrics::SegMetrics {
            dice: 0.0,
            iou: 0.0,
            recall: 0.0,
            precision: 0.0,
        });
        report.rows.push(ReportRow {
            experiment: spec.kind.name().to_string(),
            variant: job.variant.clone(),
            fold: job.fold,
            dice: seg.dice,
            iou: seg.iou,
            recall: seg.recall,
            precision: seg.precision,
            seed: job.seed,
        });
        if eval.pos_accuracy.is_some() || eval.le_accuracy.is_some() || eval.hp_accuracy.is_some()
        {
            report.accuracy_rows.push(AccuracyRow {
                variant: job.variant,
                fold: job.fold,
                pos: eval.pos_accuracy,
                le: eval.le_accuracy,
                hp: eval.hp_accuracy,
            });
        }
    }
    Ok(report)
}

/// Run an experiment over `data` (and `second_data` for cross-dataset
/// transfer), dumping artifacts under `out_dir`.
pub fn run_experiment(
    spec: &ExperimentSpec,
    data: &[SampleRecord],
    second_data: Option<&[SampleRecord]>,
    out_dir: &Path,
) -> Result<ExperimentReport, ExperimentError> {
    if data.is_empty() {
        return Err(ExperimentError::MissingData {
            kind: spec.kind.name().to_string(),
            what: "a non-empty dataset".to_string(),
        });
    }
    let base_seed = spec.train.seed;
    let jobs: Vec<FoldJob> = match spec.kind {
        ExperimentKind::Split9010 => (0..spec.runs.max(1))
            .map(|run| {
                let seed = base_seed + run as u64;
                let (train_idx, test_idx) =
                    crate::train::split_indices(data.len(), 0.9, seed);
                FoldJob {
                    fold: run,
                    train_idx,
                    test_idx,
                    seed,
                    variant_model: spec.model.clone(),
                    variant: "ugcanet".to_string(),
                }
            })
            .collect(),
        ExperimentKind::Kfold | ExperimentKind::MultitaskGi => {
            let keyed: Vec<(String, crate::nn::heads::TaskIndicator)> = data
                .iter()
                .map(|s| (s.stratum_key(), s.mu))
                .collect();
            let plan = stratified_kfold(&keyed, spec.folds, base_seed)?;
            (0..spec.folds)
                .map(|fold| FoldJob {
                    fold,
                    train_idx: plan.train_indices(fold),
                    test_idx: plan.test_indices(fold),
                    seed: base_seed,
                    variant_model: spec.model.clone(),
                    variant: "ugcanet".to_string(),
                })
                .collect()
        }
        ExperimentKind::CrossDataset => {
            let second = second_data.ok_or_else(|| ExperimentError::MissingData {
                kind: spec.kind.name().to_string(),
                what: "a second (test) dataset".to_string(),
            })?;
            // Jobs index into the concatenation of train and test data.
            let mut jobs = Vec::new();
            for run in 0..spec.runs.max(1) {
                jobs.push(FoldJob {
                    fold: run,
                    train_idx: (0..data.len()).collect(),
                    test_idx: (data.len()..data.len() + second.len()).collect(),
                    seed: base_seed + run as u64,
                    variant_model: spec.model.clone(),
                    variant: "ugcanet".to_string(),
                });
            }
            let mut merged: Vec<SampleRecord> = data.to_vec();
            merged.extend(second.iter().cloned());
            return run_jobs(spec, &merged, jobs, out_dir);
        }
        ExperimentKind::Ablation => {
            let (train_idx, test_idx) = crate::train::split_indices(data.len(), 0.9, base_seed);
            let mut jobs = Vec::new();
            for (use_cgnl, use_se) in [(false, false), (true, false), (false, true), (true, true)]
            {
                let mut model = spec.model.clone();
                model.use_cgnl = use_cgnl;
                model.use_se = use_se;
                let variant = model.variant_name().to_string();
                jobs.push(FoldJob {
                    fold: 0,
                    train_idx: train_idx.clone(),
                    test_idx: test_idx.clone(),
                    seed: base_seed,
                    variant_model: model,
                    variant,
                });
            }
            jobs
        }
    };
    run_jobs(spec, data, jobs, out_dir)
}

/// Write the text report, metrics CSV and (when present) accuracy CSV.
pub fn write_report(report: &ExperimentReport, out_dir: &Path) -> Result<(), ExperimentError> {
    std::fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;
    let csv = out_dir.join("metrics.csv");
    std::fs::write(&csv, report.to_csv()).map_err(|e| io_err(&csv, e))?;
    let text = out_dir.join("report.txt");
    std::fs::write(&text, report.to_text()).map_err(|e| io_err(&text, e))?;
    if !report.accuracy_rows.is_empty() {
        let acc = out_dir.join("accuracy.csv");
        std::fs::write(&acc, report.accuracy_csv()).map_err(|e| io_err(&acc, e))?;
    }
    Ok(())
}
