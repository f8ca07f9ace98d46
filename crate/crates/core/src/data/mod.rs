//! Volumes, label maps, file formats, and preprocessing.
//!
//! Volumes are stored row-major as `[D, H, W]` with the last axis fastest.
//! For NIfTI files this is `[nz, ny, nx]`, the file's own memory order, and
//! `spacing` follows the same axis order.

mod augment;
mod manifest;
pub mod nifti;
mod pad;
mod split;
pub mod vox;

pub use augment::{augment, AugmentParams};
pub use manifest::{load_case, CaseEntry, DataManifest};
pub use pad::{pad_or_crop, pad_or_crop_labels, round_up_dims, Placement};
pub use split::{make_split, SplitPlan, TEST_FRACTION};

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Label ids: 0 background, 1 hippocampus head (anterior), 2 body (posterior).
pub const NUM_CLASSES: usize = 3;

pub const LABEL_NAMES: [&str; NUM_CLASSES] = ["background", "head", "body"];

/// Image intensities on a voxel grid with spacing in mm.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub id: String,
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub data: Vec<f32>,
}

/// Integer class labels on a voxel grid.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelMap {
    pub id: String,
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub labels: Vec<u8>,
}

fn check_grid(dims: [usize; 3], spacing: [f64; 3], len: usize) -> Result<()> {
    if dims.contains(&0) || dims.iter().product::<usize>() != len {
        return Err(Error::dim(format!("grid {dims:?} does not hold {len} voxels")));
    }
    if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
        return Err(Error::Data(format!("spacing must be positive, got {spacing:?}")));
    }
    Ok(())
}

impl Volume {
    pub fn new(id: impl Into<String>, dims: [usize; 3], spacing: [f64; 3], data: Vec<f32>) -> Result<Self> {
        check_grid(dims, spacing, data.len())?;
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("volume contains non-finite intensities".into()));
        }
        Ok(Self {
            id: id.into(),
            dims,
            spacing,
            data,
        })
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// `[1, 1, D, H, W]` network input.
    pub fn to_tensor(&self) -> Tensor {
        let [d, h, w] = self.dims;
        Tensor::new(vec![1, 1, d, h, w], self.data.clone()).expect("grid checked on construction")
    }
}

impl LabelMap {
    pub fn new(id: impl Into<String>, dims: [usize; 3], spacing: [f64; 3], labels: Vec<u8>) -> Result<Self> {
        check_grid(dims, spacing, labels.len())?;
        Ok(Self {
            id: id.into(),
            dims,
            spacing,
            labels,
        })
    }

    pub fn check_classes(&self, num_classes: usize) -> Result<()> {
        match self.labels.iter().find(|&&l| usize::from(l) >= num_classes) {
            Some(&bad) => Err(Error::Data(format!(
                "label map {} contains label {bad}, expected < {num_classes}",
                self.id
            ))),
            None => Ok(()),
        }
    }

    pub fn check_pairs_with(&self, v: &Volume) -> Result<()> {
        if self.dims != v.dims {
            return Err(Error::Data(format!(
                "labels {:?} and image {:?} of case {} differ in shape",
                self.dims, v.dims, v.id
            )));
        }
        if self
            .spacing
            .iter()
            .zip(&v.spacing)
            .any(|(a, b)| (a - b).abs() > 1e-4 * a.abs().max(1.0))
        {
            return Err(Error::Data(format!("labels and image of case {} differ in spacing", v.id)));
        }
        Ok(())
    }

    /// Class counts indexed by label value.
    pub fn histogram(&self) -> [usize; 256] {
        let mut h = [0usize; 256];
        self.labels.iter().for_each(|&l| h[usize::from(l)] += 1);
        h
    }

    /// Per-voxel argmax over the channel axis of `[1, C, D, H, W]` scores.
    /// Ties go to the lower class.
    pub fn from_scores(id: impl Into<String>, scores: &Tensor, spacing: [f64; 3]) -> Result<Self> {
        let [n, c, d, h, w] = scores.dims5()?;
        if n != 1 {
            return Err(Error::dim("argmax over a batch of more than one case"));
        }
        let s = d * h * w;
        let x = scores.data();
        let labels = (0..s)
            .map(|v| {
                let mut best = 0;
                for ch in 1..c {
                    if x[ch * s + v] > x[best * s + v] {
                        best = ch;
                    }
                }
                best as u8
            })
            .collect();
        LabelMap::new(id, [d, h, w], spacing, labels)
    }
}

/// Per-volume z-score: `(x - mean) / max(std, 1e-8)`, population std.
pub fn zscore_normalize(v: &Volume) -> Volume {
    let n = v.data.len() as f64;
    let mean = v.data.iter().map(|&x| f64::from(x)).sum::<f64>() / n;
    let var = v
        .data
        .iter()
        .map(|&x| {
            let d = f64::from(x) - mean;
            d * d
        })
        .sum::<f64>()
        / n;
    let std = var.sqrt().max(1e-8);
    Volume {
        id: v.id.clone(),
        dims: v.dims,
        spacing: v.spacing,
        data: v.data.iter().map(|&x| ((f64::from(x) - mean) / std) as f32).collect(),
    }
}

/// `[1, C, D, H, W]` one-hot encoding of a label map.
pub fn onehot(l: &LabelMap, num_classes: usize) -> Result<Tensor> {
    l.check_classes(num_classes)?;
    let [d, h, w] = l.dims;
    let s = d * h * w;
    let mut data = vec![0.0f32; num_classes * s];
    for (v, &c) in l.labels.iter().enumerate() {
        data[usize::from(c) * s + v] = 1.0;
    }
    Tensor::new(vec![1, num_classes, d, h, w], data)
}

fn is_nifti_path(path: &Path) -> bool {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
    name.ends_with(".nii") || name.ends_with(".nii.gz")
}

/// Case id from a file name: the name without `.vox`, `.nii` or `.nii.gz`.
pub fn stem_id(path: &Path) -> String {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("case");
    for ext in [".nii.gz", ".nii", ".vox"] {
        if let Some(s) = name.strip_suffix(ext) {
            return s.to_string();
        }
    }
    name.to_string()
}

/// Read an image from NIfTI-1 (optionally gzipped) or the portable `.vox` format.
pub fn load_volume(path: &Path) -> Result<Volume> {
    let id = stem_id(path);
    if is_nifti_path(path) {
        let img = nifti::read_file(path)?;
        Volume::new(id, img.dims, img.spacing, img.data)
    } else {
        let (meta, data) = vox::read_file(path)?;
        if meta.kind != vox::Kind::Image {
            return Err(Error::Data(format!("{} holds labels, not an image", path.display())));
        }
        Volume::new(meta.id.unwrap_or(id), meta.dims, meta.spacing, data)
    }
}

/// Read a label map; values must be small non-negative integers.
pub fn load_labels(path: &Path) -> Result<LabelMap> {
    let id = stem_id(path);
    let (dims, spacing, data, id) = if is_nifti_path(path) {
        let img = nifti::read_file(path)?;
        (img.dims, img.spacing, img.data, id)
    } else {
        let (meta, data) = vox::read_file(path)?;
        if meta.kind != vox::Kind::Label {
            return Err(Error::Data(format!("{} holds an image, not labels", path.display())));
        }
        (meta.dims, meta.spacing, data, meta.id.unwrap_or(id))
    };
    let labels = data
        .iter()
        .map(|&v| {
            if (0.0..=255.0).contains(&v) && v.fract() == 0.0 {
                Ok(v as u8)
            } else {
                Err(Error::Data(format!("{}: non-integer label value {v}", path.display())))
            }
        })
        .collect::<Result<Vec<u8>>>()?;
    LabelMap::new(id, dims, spacing, labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zscore_cases() {
        let v = Volume::new("a", [1, 2, 2], [1.0; 3], vec![0.0, 0.0, 4.0, 4.0]).unwrap();
        assert_eq!(zscore_normalize(&v).data, vec![-1.0, -1.0, 1.0, 1.0]);
        let c = Volume::new("c", [2, 2, 2], [1.0; 3], vec![3.0; 8]).unwrap();
        assert!(zscore_normalize(&c).data.iter().all(|&x| x == 0.0));
        let r = Volume::new("r", [2, 3, 4], [1.0; 3], (0..24).map(|i| (i * i) as f32).collect()).unwrap();
        let once = zscore_normalize(&r);
        let twice = zscore_normalize(&once);
        assert!(once.data.iter().zip(&twice.data).all(|(a, b)| (a - b).abs() < 1e-6));
    }

    #[test]
    fn onehot_cases() {
        let l = LabelMap::new("l", [1, 2, 2], [1.0; 3], vec![0, 1, 2, 0]).unwrap();
        let t = onehot(&l, 3).unwrap();
        assert_eq!(t.shape(), &[1, 3, 1, 2, 2]);
        assert_eq!(t.data(), &[1., 0., 0., 1., 0., 1., 0., 0., 0., 0., 1., 0.]);
        assert_eq!(LabelMap::from_scores("l", &t, [1.0; 3]).unwrap(), l);
        let bad = LabelMap::new("b", [1, 1, 1], [1.0; 3], vec![3]).unwrap();
        assert!(matches!(onehot(&bad, 3), Err(Error::Data(_))));
    }

    #[test]
    fn rejects_bad_grids() {
        assert!(Volume::new("x", [2, 2, 2], [1.0; 3], vec![0.0; 7]).is_err());
        assert!(Volume::new("x", [1, 1, 1], [0.0, 1.0, 1.0], vec![0.0]).is_err());
        assert!(Volume::new("x", [1, 1, 1], [1.0; 3], vec![f32::NAN]).is_err());
    }

    #[test]
    fn stems() {
        assert_eq!(stem_id(Path::new("/a/hippo_001.nii.gz")), "hippo_001");
        assert_eq!(stem_id(Path::new("x.vox")), "x");
    }
}
