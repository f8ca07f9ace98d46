use std::path::PathBuf;

use clap::Args;
use image::{Rgb, RgbImage};
use voxseg::data::{load_labels, load_volume, LabelMap, Volume, NUM_CLASSES};
use voxseg::train::predict_labels;

use crate::cmd::load_model;
use crate::failure::{CmdResult, Context, Failure, Status};
use crate::outdir::OutDir;

pub const GT_ONLY: Rgb<u8> = Rgb([255, 0, 0]);
pub const PRED_ONLY: Rgb<u8> = Rgb([0, 255, 255]);
pub const BOTH: Rgb<u8> = Rgb([255, 255, 0]);

#[derive(Args, Debug)]
pub struct OverlayArgs {
    #[arg(long)]
    pub image: PathBuf,
    /// Ground-truth label map.
    #[arg(long)]
    pub gt: PathBuf,
    /// Predicted label map.
    #[arg(
        long,
        required_unless_present = "checkpoint",
        conflicts_with = "checkpoint"
    )]
    pub pred: Option<PathBuf>,
    /// Predict with this model instead of reading `--pred`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Write every axial slice, not only those containing foreground.
    #[arg(long)]
    pub all_slices: bool,
    /// Integer upscaling factor of the written images.
    #[arg(long, default_value_t = 1)]
    pub scale: u32,
}

/// Pixels of `class` in slice `z` with a 4-neighbour outside the class or the slice.
fn contour(l: &LabelMap, z: usize, class: u8) -> Vec<bool> {
    let [_, h, w] = l.dims;
    let at = |y: usize, x: usize| l.labels[(z * h + y) * w + x];
    let mut out = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            if at(y, x) != class {
                continue;
            }
            let edge = y == 0 || x == 0 || y + 1 == h || x + 1 == w;
            out[y * w + x] = edge
                || at(y - 1, x) != class
                || at(y + 1, x) != class
                || at(y, x - 1) != class
                || at(y, x + 1) != class;
        }
    }
    out
}

/// Grayscale slice with ground-truth and prediction contours of every
/// foreground class: red where only the ground truth has an edge, cyan where
/// only the prediction does, yellow where both agree.
pub fn render_slice(
    image: &Volume,
    gt: &LabelMap,
    pred: &LabelMap,
    z: usize,
    lo: f32,
    hi: f32,
) -> RgbImage {
    let [_, h, w] = image.dims;
    let plane = h * w;
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let v = image.data[z * plane + y as usize * w + x as usize];
        let g = (((v - lo) / span).clamp(0.0, 1.0) * 255.0).round() as u8;
        Rgb([g, g, g])
    });
    let mut gt_edge = vec![false; plane];
    let mut pred_edge = vec![false; plane];
    let mut agree = vec![false; plane];
    for class in 1..NUM_CLASSES as u8 {
        let g = contour(gt, z, class);
        let p = contour(pred, z, class);
        for i in 0..plane {
            gt_edge[i] |= g[i];
            pred_edge[i] |= p[i];
            agree[i] |= g[i] && p[i];
        }
    }
    for i in 0..plane {
        let colour = if agree[i] {
            BOTH
        } else if gt_edge[i] {
            GT_ONLY
        } else if pred_edge[i] {
            PRED_ONLY
        } else {
            continue;
        };
        img.put_pixel((i % w) as u32, (i / w) as u32, colour);
    }
    img
}

pub fn run(args: OverlayArgs) -> CmdResult {
    if args.scale == 0 {
        return Err(Failure::config("--scale must be at least 1"));
    }
    let image = load_volume(&args.image).context(format!("image {}", args.image.display()))?;
    let gt = load_labels(&args.gt).context(format!("labels {}", args.gt.display()))?;
    gt.check_pairs_with(&image)?;
    let pred = match (&args.pred, &args.checkpoint) {
        (Some(p), _) => load_labels(p).context(format!("labels {}", p.display()))?,
        (None, Some(ck)) => predict_labels(&load_model(ck, None, None)?, &image)?,
        (None, None) => unreachable!("clap requires one source"),
    };
    pred.check_pairs_with(&image)?;
    let out = OutDir::lock(&args.out_dir)?;
    let (lo, hi) = image
        .data
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let plane = image.dims[1] * image.dims[2];
    let mut written = 0;
    for z in 0..image.dims[0] {
        let range = z * plane..(z + 1) * plane;
        let foreground = gt.labels[range.clone()]
            .iter()
            .chain(&pred.labels[range])
            .any(|&c| c != 0);
        if !(foreground || args.all_slices) {
            continue;
        }
        let mut img = render_slice(&image, &gt, &pred, z, lo, hi);
        if args.scale > 1 {
            img = image::imageops::resize(
                &img,
                img.width() * args.scale,
                img.height() * args.scale,
                image::imageops::FilterType::Nearest,
            );
        }
        let path = out.path(format!("slice_{z:03}.png"));
        img.save(&path).map_err(|e| {
            Failure::new(
                Status::Other,
                format!("cannot write {}: {e}", path.display()),
            )
        })?;
        written += 1;
    }
    println!("wrote {written} slices to {}", out.root().display());
    Ok(())
}
