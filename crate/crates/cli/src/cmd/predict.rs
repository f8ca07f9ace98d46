use std::path::{Path, PathBuf};

use clap::Args;
use voxseg::data::{load_volume, nifti, stem_id, vox, DataManifest, LabelMap};
use voxseg::nn::Variant;
use voxseg::train::predict_labels;

use crate::cmd::load_model;
use crate::config::RunConfig;
use crate::failure::{CmdResult, Context, Failure};
use crate::outdir::{write_atomic, OutDir};

#[derive(Args, Debug)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Image to segment (`.vox`, `.nii` or `.nii.gz`); repeatable.
    #[arg(long = "input")]
    pub inputs: Vec<PathBuf>,
    /// Segment every image listed in a dataset manifest.
    #[arg(long)]
    pub data_manifest: Option<PathBuf>,
    /// Run configuration; its manifest is used when no inputs are given and
    /// its model must match the checkpoint.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub arch: Option<Variant>,
}

fn is_nifti(path: &Path) -> bool {
    let name = path.to_string_lossy();
    name.ends_with(".nii") || name.ends_with(".nii.gz")
}

pub fn run(args: PredictArgs) -> CmdResult {
    let config = args.config.as_deref().map(RunConfig::load).transpose()?;
    let model = load_model(
        &args.checkpoint,
        args.arch,
        config.as_ref().map(|c| &c.model),
    )?;
    let manifest = args
        .data_manifest
        .clone()
        .or_else(|| config.as_ref().and_then(|c| c.data.manifest.clone()));
    let mut jobs: Vec<(String, PathBuf)> = args
        .inputs
        .iter()
        .map(|p| (stem_id(p), p.clone()))
        .collect();
    if let Some(path) = &manifest {
        let m = DataManifest::load(path)?;
        jobs.extend(m.cases.into_iter().map(|c| (c.id, c.image)));
    }
    if jobs.is_empty() {
        return Err(Failure::data(
            "no input images: pass --input, --data-manifest or a config with a manifest",
        ));
    }
    let out = OutDir::lock(&args.out_dir)?;
    for (id, path) in jobs {
        let mut image = load_volume(&path).context(format!("input {}", path.display()))?;
        image.id = id.clone();
        let labels = predict_labels(&model, &image)?;
        write_labels(&out, &labels)?;
        if is_nifti(&path) {
            let template = nifti::read_file(&path).context(format!("input {}", path.display()))?;
            let bytes = nifti::encode(
                labels.dims,
                labels.spacing,
                nifti::Payload::U8(&labels.labels),
                Some(&template.header),
            )?;
            nifti::write_file(&out.path(format!("{id}.nii.gz")), &bytes)?;
        }
        println!(
            "{id}: {:?} -> {}",
            labels.dims,
            out.path(format!("{id}.vox")).display()
        );
    }
    Ok(())
}

fn write_labels(out: &OutDir, labels: &LabelMap) -> CmdResult {
    let meta = vox::Meta::new(
        vox::Kind::Label,
        Some(labels.id.clone()),
        labels.dims,
        labels.spacing,
    );
    let data: Vec<f32> = labels.labels.iter().map(|&c| f32::from(c)).collect();
    write_atomic(
        &out.path(format!("{}.vox", labels.id)),
        &vox::encode(&meta, &data)?,
    )
}
