use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use voxseg::data::{load_labels, make_split};
use voxseg::metrics::{evaluate_case, MetricsReport};
use voxseg::nn::Variant;
use voxseg::train::{predict_labels, CaseSet};

use crate::cmd::load_model;
use crate::config::{DataConfig, RunConfig};
use crate::failure::{CmdResult, Context, Failure};
use crate::outdir::OutDir;
use crate::report::{print_table, write_metrics};

pub const METRICS: &str = "metrics.jsonl";

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Subset {
    All,
    /// The held-out test cases of the split.
    Test,
    /// The validation cases of `--fold`.
    Val,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Model to evaluate.
    #[arg(
        long,
        required_unless_present = "predictions_dir",
        conflicts_with = "predictions_dir"
    )]
    pub checkpoint: Option<PathBuf>,
    /// Score saved label maps named `<id>.vox`, `<id>.nii.gz` or `<id>.nii` instead of a model.
    #[arg(long)]
    pub predictions_dir: Option<PathBuf>,
    /// Run configuration; supplies the data source, split seed and expected architecture.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Ground-truth dataset manifest (overrides the config's data).
    #[arg(long)]
    pub data_manifest: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Expected architecture of the checkpoint.
    #[arg(long)]
    pub arch: Option<Variant>,
    #[arg(long, value_enum, default_value = "all")]
    pub subset: Subset,
    /// Fold whose validation cases `--subset val` selects.
    #[arg(long, default_value_t = 0)]
    pub fold: usize,
    /// Split seed for `--subset test|val` (default: the config's `train.seed`, else 0).
    #[arg(long)]
    pub seed: Option<u64>,
}

/// Find the saved prediction for `id` in `dir`.
fn prediction_path(dir: &Path, id: &str) -> CmdResult<PathBuf> {
    ["vox", "nii.gz", "nii"]
        .iter()
        .map(|ext| dir.join(format!("{id}.{ext}")))
        .find(|p| p.exists())
        .ok_or_else(|| {
            Failure::data(format!(
                "no prediction for case {id:?} in {}",
                dir.display()
            ))
        })
}

pub fn run(args: EvalArgs) -> CmdResult {
    let config = args.config.as_deref().map(RunConfig::load).transpose()?;
    let data = match (&args.data_manifest, &config) {
        (Some(m), _) => DataConfig::from_manifest(m.clone()),
        (None, Some(c)) => c.data.clone(),
        (None, None) => {
            return Err(Failure::config(
                "eval needs --data-manifest or --config for ground truth",
            ))
        }
    };
    let model = match &args.checkpoint {
        Some(p) => Some(load_model(p, args.arch, config.as_ref().map(|c| &c.model))?),
        None => None,
    };
    let cases = data.load()?;
    let ids = select(&cases, &args, config.as_ref())?;
    if ids.is_empty() {
        return Err(Failure::data("the case list is empty"));
    }
    let out = OutDir::lock(&args.out_dir)?;

    let mut reports: Vec<MetricsReport> = Vec::with_capacity(ids.len());
    for id in &ids {
        let (image, gt) = cases.get(id)?;
        let pred = match (&model, &args.predictions_dir) {
            (Some(m), _) => predict_labels(m, image)?,
            (None, Some(dir)) => {
                let path = prediction_path(dir, id)?;
                let mut l = load_labels(&path).context(format!("prediction {}", path.display()))?;
                l.id = id.clone();
                l
            }
            (None, None) => unreachable!("clap requires one source"),
        };
        reports.push(evaluate_case(&pred, gt).context(format!("case {id}"))?);
    }
    let line = write_metrics(&out.path(METRICS), &reports)?;
    print_table(&line);
    Ok(())
}

fn select(cases: &CaseSet, args: &EvalArgs, config: Option<&RunConfig>) -> CmdResult<Vec<String>> {
    let ids = cases.ids();
    if args.subset == Subset::All {
        return Ok(ids);
    }
    let seed = args.seed.or(config.map(|c| c.train.seed)).unwrap_or(0);
    let split = make_split(&ids, seed).map_err(|e| Failure::data(e.to_string()))?;
    Ok(match args.subset {
        Subset::Test => split.test_ids,
        _ => split.val_ids(args.fold)?,
    })
}
