use std::path::PathBuf;

use clap::Args;
use voxseg::data::{vox, CaseEntry, DataManifest};
use voxseg::synth::{gen_case, SynthSpec};

use crate::failure::{CmdResult, Failure};
use crate::outdir::{write_atomic, write_json, OutDir};

pub const MANIFEST: &str = "manifest.json";

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Number of cases.
    #[arg(long, default_value_t = 10)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Grid size as D,H,W.
    #[arg(long, value_delimiter = ',', default_values_t = [32, 32, 32])]
    pub dims: Vec<usize>,
    /// Voxel spacing in mm as D,H,W.
    #[arg(long, value_delimiter = ',', default_values_t = [1.0, 1.0, 1.0])]
    pub spacing: Vec<f64>,
    #[arg(long, default_value_t = 10.0)]
    pub noise_std: f32,
}

/// Write `images/<id>.vox`, `labels/<id>.vox` and a manifest with relative paths.
pub fn run(args: SynthArgs) -> CmdResult {
    if args.dims.len() != 3 || args.spacing.len() != 3 {
        return Err(Failure::config(
            "--dims and --spacing take three comma-separated values",
        ));
    }
    let spec = SynthSpec {
        dims: [args.dims[0], args.dims[1], args.dims[2]],
        spacing: [args.spacing[0], args.spacing[1], args.spacing[2]],
        noise_std: args.noise_std,
        seed: args.seed,
    };
    spec.validate()?;
    let out = OutDir::lock(&args.out_dir)?;
    let mut manifest = DataManifest::default();
    for index in 0..args.n {
        let (image, labels) = gen_case(&spec, index)?;
        let id = image.id.clone();
        let image_rel = PathBuf::from("images").join(format!("{id}.vox"));
        let label_rel = PathBuf::from("labels").join(format!("{id}.vox"));
        let meta = vox::Meta::new(
            vox::Kind::Image,
            Some(id.clone()),
            image.dims,
            image.spacing,
        );
        write_atomic(&out.path(&image_rel), &vox::encode(&meta, &image.data)?)?;
        let meta = vox::Meta::new(
            vox::Kind::Label,
            Some(id.clone()),
            labels.dims,
            labels.spacing,
        );
        let values: Vec<f32> = labels.labels.iter().map(|&c| f32::from(c)).collect();
        write_atomic(&out.path(&label_rel), &vox::encode(&meta, &values)?)?;
        manifest.cases.push(CaseEntry {
            id,
            image: image_rel,
            label: Some(label_rel),
        });
    }
    write_json(&out.path(MANIFEST), &manifest)?;
    println!("wrote {} cases to {}", args.n, out.root().display());
    Ok(())
}
