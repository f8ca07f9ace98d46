//! Overlap and surface-distance metrics on binary masks.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::LabelMap;
use crate::error::{Error, Result};

/// Surface tolerance used for reported NSD values, in mm.
pub const NSD_TOLERANCE_MM: f64 = 4.0;

/// Foreground class ids and their names.
pub const FOREGROUND_CLASSES: [(u8, &str); 2] = [(1, "head"), (2, "body")];

/// A binary mask over a `D x H x W` grid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    dims: [usize; 3],
    data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(dims: [usize; 3], data: Vec<bool>) -> Result<Self> {
        if dims.iter().product::<usize>() != data.len() {
            return Err(Error::dim(format!(
                "mask dims {dims:?} need {} voxels, got {}",
                dims.iter().product::<usize>(),
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn from_labels(labels: &LabelMap, class: u8) -> Self {
        Self {
            dims: labels.dims,
            data: labels.labels.iter().map(|&l| l == class).collect(),
        }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    fn check_same(&self, other: &BinaryMask) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::dim(format!(
                "mask shapes differ: {:?} vs {:?}",
                self.dims, other.dims
            )));
        }
        Ok(())
    }

    fn overlap(&self, other: &BinaryMask) -> Result<(usize, usize, usize)> {
        self.check_same(other)?;
        let (mut a, mut b, mut both) = (0, 0, 0);
        for (&x, &y) in self.data.iter().zip(&other.data) {
            a += usize::from(x);
            b += usize::from(y);
            both += usize::from(x && y);
        }
        Ok((a, b, both))
    }
}

/// Dice coefficient `2|A∩B| / (|A| + |B|)`; two empty masks score 1.
pub fn dsc(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    let (a, b, both) = pred.overlap(gt)?;
    if a + b == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (a + b) as f64)
}

/// Jaccard index `|A∩B| / |A∪B|`; two empty masks score 1.
pub fn jaccard(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    let (a, b, both) = pred.overlap(gt)?;
    let union = a + b - both;
    if union == 0 {
        return Ok(1.0);
    }
    Ok(both as f64 / union as f64)
}

fn is_boundary(mask: &BinaryMask, z: usize, y: usize, x: usize) -> bool {
    let [d, h, w] = mask.dims;
    let at = |z: usize, y: usize, x: usize| mask.data[(z * h + y) * w + x];
    z == 0
        || y == 0
        || x == 0
        || z + 1 == d
        || y + 1 == h
        || x + 1 == w
        || !at(z - 1, y, x)
        || !at(z + 1, y, x)
        || !at(z, y - 1, x)
        || !at(z, y + 1, x)
        || !at(z, y, x - 1)
        || !at(z, y, x + 1)
}

/// Foreground voxels with at least one background face neighbour (outside the
/// grid counts as background), as a mask.
pub fn surface_mask(mask: &BinaryMask) -> BinaryMask {
    let [d, h, w] = mask.dims;
    let mut out = vec![false; mask.data.len()];
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let i = (z * h + y) * w + x;
                out[i] = mask.data[i] && is_boundary(mask, z, y, x);
            }
        }
    }
    BinaryMask { dims: mask.dims, data: out }
}

/// Boundary voxel centres in mm (`index * spacing`), in index order.
pub fn extract_surface(mask: &BinaryMask, spacing: [f64; 3]) -> Vec<[f64; 3]> {
    let s = surface_mask(mask);
    let [_, h, w] = s.dims;
    s.data
        .iter()
        .enumerate()
        .filter(|(_, &b)| b)
        .map(|(i, _)| {
            let (z, y, x) = (i / (h * w), (i / w) % h, i % w);
            [z as f64 * spacing[0], y as f64 * spacing[1], x as f64 * spacing[2]]
        })
        .collect()
}

/// One-dimensional squared distance transform along a line (lower envelope
/// of parabolas). `f` holds squared distances so far (`INFINITY` for none);
/// `step` is the voxel spacing along the line.
fn edt_line(f: &[f64], step: f64, out: &mut [f64], v: &mut [usize], zs: &mut [f64]) {
    let n = f.len();
    let pos = |q: usize| q as f64 * step;
    let mut k: usize = 0;
    let mut started = false;
    for q in 0..n {
        if f[q].is_infinite() {
            continue;
        }
        if !started {
            v[0] = q;
            zs[0] = f64::NEG_INFINITY;
            zs[1] = f64::INFINITY;
            started = true;
            continue;
        }
        loop {
            let p = v[k];
            let s = ((f[q] + pos(q) * pos(q)) - (f[p] + pos(p) * pos(p))) / (2.0 * (pos(q) - pos(p)));
            if s <= zs[k] && k > 0 {
                k -= 1;
                continue;
            }
            if s <= zs[k] {
                // k == 0: the new parabola dominates everywhere
                v[0] = q;
                zs[0] = f64::NEG_INFINITY;
                zs[1] = f64::INFINITY;
                break;
            }
            k += 1;
            v[k] = q;
            zs[k] = s;
            zs[k + 1] = f64::INFINITY;
            break;
        }
    }
    if !started {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    }
    let mut j = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while zs[j + 1] < pos(q) {
            j += 1;
        }
        let d = (q as f64 - v[j] as f64) * step;
        *o = f[v[j]] + d * d;
    }
}

/// Exact squared Euclidean distance (mm²) from every voxel to the nearest set voxel of `mask`.
pub fn squared_distance_field(mask: &BinaryMask, spacing: [f64; 3]) -> Vec<f64> {
    let [d, h, w] = mask.dims;
    let mut g: Vec<f64> = mask
        .data
        .iter()
        .map(|&b| if b { 0.0 } else { f64::INFINITY })
        .collect();
    let longest = d.max(h).max(w);
    let mut line = vec![0.0; longest];
    let mut out = vec![0.0; longest];
    let mut v = vec![0usize; longest];
    let mut zs = vec![0.0; longest + 1];
    let strides = [h * w, w, 1];
    let extents = [d, h, w];
    for axis in 0..3 {
        let n = extents[axis];
        let stride = strides[axis];
        for start in 0..g.len() {
            // visit each line once, from its first element
            if (start / stride) % n != 0 {
                continue;
            }
            for i in 0..n {
                line[i] = g[start + i * stride];
            }
            // first axis: values are 0 / inf, the envelope handles both
            edt_line(&line[..n], spacing[axis], &mut out[..n], &mut v, &mut zs);
            for i in 0..n {
                g[start + i * stride] = out[i];
            }
        }
    }
    g
}

fn check_spacing(spacing: [f64; 3]) -> Result<()> {
    if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
        return Err(Error::config(format!("spacing must be positive, got {spacing:?}")));
    }
    Ok(())
}

/// Normalized surface distance: the fraction of both boundaries lying within
/// `tolerance` mm of the other boundary. Both empty: 1; one empty: 0.
pub fn nsd(pred: &BinaryMask, gt: &BinaryMask, spacing: [f64; 3], tolerance: f64) -> Result<f64> {
    pred.check_same(gt)?;
    check_spacing(spacing)?;
    if !(tolerance > 0.0) {
        return Err(Error::config(format!("tolerance must be positive, got {tolerance}")));
    }
    let sp = surface_mask(pred);
    let sg = surface_mask(gt);
    let (np, ng) = (sp.count(), sg.count());
    if np == 0 && ng == 0 {
        return Ok(1.0);
    }
    if np == 0 || ng == 0 {
        return Ok(0.0);
    }
    let dist_to_gt = squared_distance_field(&sg, spacing);
    let dist_to_pred = squared_distance_field(&sp, spacing);
    let within = |surface: &BinaryMask, field: &[f64]| {
        surface
            .data
            .iter()
            .zip(field)
            .filter(|(&b, &d2)| b && d2.sqrt() <= tolerance)
            .count()
    };
    let hits = within(&sp, &dist_to_gt) + within(&sg, &dist_to_pred);
    Ok(hits as f64 / (np + ng) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub dsc: f64,
    pub ji: f64,
    pub nsd: f64,
}

impl ClassMetrics {
    pub fn mean(items: &[ClassMetrics]) -> ClassMetrics {
        let n = items.len().max(1) as f64;
        ClassMetrics {
            dsc: items.iter().map(|m| m.dsc).sum::<f64>() / n,
            ji: items.iter().map(|m| m.ji).sum::<f64>() / n,
            nsd: items.iter().map(|m| m.nsd).sum::<f64>() / n,
        }
    }
}

/// Metrics of one case: per foreground class and their unweighted mean.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub case_id: String,
    pub per_class: BTreeMap<String, ClassMetrics>,
    pub mean_foreground: ClassMetrics,
}

pub fn class_metrics(pred: &BinaryMask, gt: &BinaryMask, spacing: [f64; 3]) -> Result<ClassMetrics> {
    Ok(ClassMetrics {
        dsc: dsc(pred, gt)?,
        ji: jaccard(pred, gt)?,
        nsd: nsd(pred, gt, spacing, NSD_TOLERANCE_MM)?,
    })
}

/// Score a predicted label map against ground truth using the ground truth's spacing.
pub fn evaluate_case(pred: &LabelMap, gt: &LabelMap) -> Result<MetricsReport> {
    if pred.dims != gt.dims {
        return Err(Error::dim(format!(
            "prediction {:?} vs ground truth {:?}",
            pred.dims, gt.dims
        )));
    }
    for (which, map) in [("prediction", pred), ("ground truth", gt)] {
        if let Some(&bad) = map.labels.iter().find(|&&l| l > 2) {
            return Err(Error::Data(format!("{which} {} contains label {bad}", map.id)));
        }
    }
    let mut per_class = BTreeMap::new();
    let mut all = Vec::new();
    for (class, name) in FOREGROUND_CLASSES {
        let m = class_metrics(
            &BinaryMask::from_labels(pred, class),
            &BinaryMask::from_labels(gt, class),
            gt.spacing,
        )?;
        per_class.insert(name.to_string(), m);
        all.push(m);
    }
    Ok(MetricsReport {
        case_id: gt.id.clone(),
        per_class,
        mean_foreground: ClassMetrics::mean(&all),
    })
}

/// Mean over cases of each case's foreground mean.
pub fn aggregate(reports: &[MetricsReport]) -> ClassMetrics {
    let means: Vec<ClassMetrics> = reports.iter().map(|r| r.mean_foreground).collect();
    ClassMetrics::mean(&means)
}
