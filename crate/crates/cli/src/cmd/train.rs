use std::path::{Path, PathBuf};

use clap::Args;
use serde::Serialize;
use voxseg::data::{make_split, SplitPlan, LABEL_NAMES};
use voxseg::metrics::ClassMetrics;
use voxseg::nn::{Model, Variant};
use voxseg::train::{
    evaluate, CaseSet, Checkpoint, CvReport, FoldReport, Trainer, CHECKPOINT_FORMAT_VERSION,
    CHECKPOINT_MAGIC,
};

use crate::config::{DataConfig, RunConfig};
use crate::failure::{CmdResult, Context, Failure};
use crate::outdir::{write_atomic, write_json, write_jsonl, OutDir};
use crate::report::write_metrics;

pub const HISTORY: &str = "history.jsonl";
pub const LAST: &str = "checkpoint_last.ckpt";
pub const BEST: &str = "checkpoint_best.ckpt";
pub const RUN_MANIFEST: &str = "run_manifest.json";
pub const VAL_METRICS: &str = "val_metrics.jsonl";
pub const CV_REPORT: &str = "cv_report.json";

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Run configuration (TOML).
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Overrides `train.seed` (initialization, split, shuffling, augmentation).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides `[data]` with a dataset manifest.
    #[arg(long)]
    pub data_manifest: Option<PathBuf>,
    /// Overrides `model.variant`.
    #[arg(long)]
    pub arch: Option<Variant>,
    /// Validation fold (default 0).
    #[arg(long, conflicts_with = "all_folds")]
    pub fold: Option<usize>,
    /// Train every fold, each under `fold_<k>/`, and write a cross-validation report.
    #[arg(long)]
    pub all_folds: bool,
    /// Resume a single-fold run from a checkpoint written by `train`.
    #[arg(long, conflicts_with = "all_folds")]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Serialize)]
struct LabelEntry {
    value: u8,
    name: &'static str,
}

#[derive(Serialize)]
struct Formats {
    checkpoint_magic: String,
    checkpoint_version: u32,
    volume_magic: String,
    history: &'static str,
}

/// Everything needed to repeat the run on the same build.
#[derive(Serialize)]
struct RunManifest<'a> {
    version: &'static str,
    build_id: &'static str,
    rng_algorithm: &'static str,
    formats: Formats,
    seed: u64,
    folds: &'a [usize],
    resumed_at_epoch: Option<usize>,
    labels: Vec<LabelEntry>,
    config: &'a RunConfig,
    split: &'a SplitPlan,
}

pub fn run(args: TrainArgs) -> CmdResult {
    let mut config = RunConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        config.train.seed = seed;
    }
    if let Some(arch) = args.arch {
        config.model.variant = arch;
    }
    if let Some(m) = &args.data_manifest {
        config.data = DataConfig::from_manifest(m.clone());
    }
    config.validate()?;
    let num_folds = config.train.folds;
    let folds: Vec<usize> = if args.all_folds {
        (0..num_folds).collect()
    } else {
        vec![args.fold.unwrap_or(0)]
    };
    if let Some(&bad) = folds.iter().find(|&&f| f >= num_folds) {
        return Err(Failure::config(format!(
            "--fold {bad} out of range, valid folds are 0..={}",
            num_folds - 1
        )));
    }
    let resume = match &args.checkpoint {
        Some(p) => Some(Checkpoint::load(p).context(format!("checkpoint {}", p.display()))?),
        None => None,
    };
    if let Some(ck) = &resume {
        if ck.model.config() != &config.model {
            return Err(Failure::architecture(format!(
                "architecture mismatch: config model {:?} but the checkpoint holds {:?}",
                config.model,
                ck.model.config()
            )));
        }
    }

    let out = OutDir::lock(&args.out_dir)?;
    let cases = config.data.load()?;
    let split =
        make_split(&cases.ids(), config.train.seed).map_err(|e| Failure::data(e.to_string()))?;
    let manifest = RunManifest {
        version: env!("CARGO_PKG_VERSION"),
        build_id: option_env!("VOXSEG_BUILD_ID").unwrap_or("unset"),
        rng_algorithm: voxseg::rng::RNG_ALGORITHM,
        formats: Formats {
            checkpoint_magic: String::from_utf8_lossy(CHECKPOINT_MAGIC).into_owned(),
            checkpoint_version: CHECKPOINT_FORMAT_VERSION,
            volume_magic: String::from_utf8_lossy(voxseg::data::vox::MAGIC).into_owned(),
            history: "jsonl: epoch, train_loss, val_loss, lr",
        },
        seed: config.train.seed,
        folds: &folds,
        resumed_at_epoch: resume
            .as_ref()
            .and_then(|c| c.trainer.as_ref())
            .map(|s| s.epochs_done),
        labels: LABEL_NAMES
            .iter()
            .enumerate()
            .map(|(value, &name)| LabelEntry {
                value: value as u8,
                name,
            })
            .collect(),
        config: &config,
        split: &split,
    };
    write_json(&out.path(RUN_MANIFEST), &manifest)?;

    if !args.all_folds {
        train_fold(out.root(), &config, &cases, &split, folds[0], resume)?;
        return Ok(());
    }
    let mut reports = Vec::new();
    for &fold in &folds {
        reports.push(train_fold(
            &out.path(format!("fold_{fold}")),
            &config,
            &cases,
            &split,
            fold,
            None,
        )?);
    }
    let mean = ClassMetrics::mean(&reports.iter().map(|r| r.metrics).collect::<Vec<_>>());
    let mean_best_val_loss =
        reports.iter().map(|r| r.best_val_loss).sum::<f64>() / reports.len() as f64;
    let cv = CvReport {
        folds: reports,
        mean,
        mean_best_val_loss,
    };
    write_json(&out.path(CV_REPORT), &cv)?;
    println!(
        "cross-validation mean over {} folds: DSC {:.4} JI {:.4} NSD {:.4}",
        cv.folds.len(),
        mean.dsc,
        mean.ji,
        mean.nsd
    );
    Ok(())
}

fn save_checkpoint(path: &Path, ck: &Checkpoint) -> CmdResult {
    write_atomic(path, &ck.to_bytes()?)
}

/// Train one fold into `dir`: history, last and best checkpoints, and the best
/// model's validation metrics.
fn train_fold(
    dir: &Path,
    config: &RunConfig,
    cases: &CaseSet,
    split: &SplitPlan,
    fold: usize,
    resume: Option<Checkpoint>,
) -> CmdResult<FoldReport> {
    let train_ids = split.train_ids(fold)?;
    let val_ids = split.val_ids(fold)?;
    let dims = config.train.input_dims;
    let train = cases.prepare(&train_ids, dims)?;
    let val = cases.prepare(&val_ids, dims)?;
    let resumed = resume.is_some();
    let mut trainer = match resume {
        Some(ck) => Trainer::resume(ck, config.train.clone())?,
        None => Trainer::new(config.model.clone(), config.train.clone())?,
    };

    let best_path = dir.join(BEST);
    let mut best: (Model, usize, f64) = (trainer.model.clone(), 0, f64::INFINITY);
    if resumed && best_path.exists() {
        let ck =
            Checkpoint::load(&best_path).context(format!("checkpoint {}", best_path.display()))?;
        if let Some((epoch, rec)) = trainer
            .history
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.val_loss.total_cmp(&b.1.val_loss))
        {
            best = (ck.model, epoch, rec.val_loss);
        }
    }

    let total = config.train.epochs;
    while trainer.epochs_done < total {
        let (rec, improved) = trainer.run_epoch(&train, &val)?;
        if improved {
            best = (trainer.model.clone(), rec.epoch, rec.val_loss);
            save_checkpoint(&best_path, &Checkpoint::new(best.0.clone()))?;
        }
        write_jsonl(&dir.join(HISTORY), &trainer.history)?;
        save_checkpoint(&dir.join(LAST), &trainer.checkpoint())?;
        println!(
            "fold {fold} epoch {}/{total} train {:.6} val {:.6} lr {:.3e}{}",
            rec.epoch + 1,
            rec.train_loss,
            rec.val_loss,
            rec.lr,
            if improved { " *" } else { "" }
        );
    }
    // a resumed run that was already complete still leaves a full directory
    write_jsonl(&dir.join(HISTORY), &trainer.history)?;
    save_checkpoint(&dir.join(LAST), &trainer.checkpoint())?;
    if !best_path.exists() {
        save_checkpoint(&best_path, &Checkpoint::new(best.0.clone()))?;
    }

    let reports = evaluate(&best.0, &cases.select(&val_ids)?)?;
    let line = write_metrics(&dir.join(VAL_METRICS), &reports)?;
    println!(
        "fold {fold} best at epoch {} val loss {:.6}; validation DSC {:.4} JI {:.4} NSD {:.4}",
        best.1 + 1,
        best.2,
        line.aggregate.dsc,
        line.aggregate.ji,
        line.aggregate.nsd
    );
    Ok(FoldReport {
        fold,
        train_cases: train_ids.len(),
        val_ids,
        best_epoch: best.1,
        best_val_loss: best.2,
        metrics: line.aggregate,
    })
}
