//! Synthetic hippocampus-like cases and brute-force reference implementations.
//!
//! Each case holds two non-overlapping, randomly oriented ellipsoids: the
//! head (label 1) and, further along axis 0, the body (label 2). Intensities
//! are constant per class plus Gaussian noise.

pub mod oracle;
pub mod reference;
pub mod suite;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{LabelMap, Volume};
use crate::error::{Error, Result};
use crate::rng::{self, tag};

/// Foreground fraction bounds enforced by rejection sampling.
pub const FOREGROUND_RANGE: (f64, f64) = (0.02, 0.15);

/// Mean intensity of background, head and body.
pub const CLASS_MEANS: [f32; 3] = [100.0, 180.0, 140.0];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub noise_std: f32,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            dims: [32; 3],
            spacing: [1.0; 3],
            noise_std: 10.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Ellipsoid {
    centre: [f64; 3],
    radii: [f64; 3],
    /// Rows are the ellipsoid's axes in grid coordinates.
    axes: [[f64; 3]; 3],
}

impl Ellipsoid {
    fn contains(&self, p: [f64; 3]) -> bool {
        let d = [p[0] - self.centre[0], p[1] - self.centre[1], p[2] - self.centre[2]];
        let mut s = 0.0;
        for (axis, r) in self.axes.iter().zip(&self.radii) {
            let q = axis[0] * d[0] + axis[1] * d[1] + axis[2] * d[2];
            s += (q / r) * (q / r);
        }
        s <= 1.0
    }
}

fn random_axes<R: Rng>(rng: &mut R, max_angle: f64) -> [[f64; 3]; 3] {
    let mut m = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    for axis in 0..3 {
        let (s, c) = rng.random_range(-max_angle..=max_angle).sin_cos();
        let (i, j) = ((axis + 1) % 3, (axis + 2) % 3);
        let mut next = m;
        for row in &mut next {
            let (a, b) = (row[i], row[j]);
            row[i] = c * a - s * b;
            row[j] = s * a + c * b;
        }
        m = next;
    }
    m
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| d < 8) {
            return Err(Error::config(format!("synthetic dims must be at least 8, got {:?}", self.dims)));
        }
        if self.spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::config(format!("spacing must be positive, got {:?}", self.spacing)));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::config("noise_std must be finite and non-negative"));
        }
        Ok(())
    }

    fn sample_shapes<R: Rng>(&self, rng: &mut R) -> [Ellipsoid; 2] {
        // grid units; radii scale with each axis' extent
        let n = self.dims.map(|d| d as f64);
        let centre = n.map(|e| (e - 1.0) / 2.0);
        let mut parts = [[0.0f64; 3]; 2];
        for radii in &mut parts {
            radii[0] = rng.random_range(0.13..0.19) * n[0];
            radii[1] = rng.random_range(0.12..0.18) * n[1];
            radii[2] = rng.random_range(0.12..0.18) * n[2];
        }
        let reach = |r: &[f64; 3]| r.iter().cloned().fold(0.0, f64::max);
        let gap = 1.0;
        let split = centre[0] + rng.random_range(-0.05..0.05) * n[0];
        let lateral = |rng: &mut R, a: usize| centre[a] + rng.random_range(-0.06..0.06) * n[a];
        let head = Ellipsoid {
            centre: [split - gap / 2.0 - reach(&parts[0]), lateral(rng, 1), lateral(rng, 2)],
            radii: parts[0],
            axes: random_axes(rng, 0.5),
        };
        let body = Ellipsoid {
            centre: [split + gap / 2.0 + reach(&parts[1]), lateral(rng, 1), lateral(rng, 2)],
            radii: parts[1],
            axes: random_axes(rng, 0.5),
        };
        [head, body]
    }

    fn rasterize(&self, shapes: &[Ellipsoid; 2]) -> Vec<u8> {
        let [d, h, w] = self.dims;
        let mut labels = vec![0u8; d * h * w];
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let p = [z as f64, y as f64, x as f64];
                    let i = (z * h + y) * w + x;
                    if shapes[0].contains(p) {
                        labels[i] = 1;
                    } else if shapes[1].contains(p) {
                        labels[i] = 2;
                    }
                }
            }
        }
        labels
    }
}

pub fn case_id(index: usize) -> String {
    format!("synth_{index:03}")
}

/// Generate case `index` of the dataset described by `spec`.
pub fn gen_case(spec: &SynthSpec, index: usize) -> Result<(Volume, LabelMap)> {
    spec.validate()?;
    let mut r = rng::stream(spec.seed, &[tag::SYNTH, index as u64]);
    let n: usize = spec.dims.iter().product();
    let mut labels = None;
    for _ in 0..1000 {
        let shapes = spec.sample_shapes(&mut r);
        let l = spec.rasterize(&shapes);
        let fg = l.iter().filter(|&&c| c != 0).count() as f64 / n as f64;
        let both = l.contains(&1) && l.contains(&2);
        if both && (FOREGROUND_RANGE.0..=FOREGROUND_RANGE.1).contains(&fg) {
            labels = Some(l);
            break;
        }
    }
    let labels = labels.ok_or_else(|| {
        Error::config(format!(
            "dims {:?} cannot hold a foreground fraction in {FOREGROUND_RANGE:?}",
            spec.dims
        ))
    })?;
    let noise = Normal::new(0.0f32, spec.noise_std).map_err(|e| Error::config(e.to_string()))?;
    let data = labels
        .iter()
        .map(|&c| {
            let mean = CLASS_MEANS[usize::from(c)];
            if spec.noise_std > 0.0 {
                mean + noise.sample(&mut r)
            } else {
                mean
            }
        })
        .collect();
    let id = case_id(index);
    Ok((
        Volume::new(id.clone(), spec.dims, spec.spacing, data)?,
        LabelMap::new(id, spec.dims, spec.spacing, labels)?,
    ))
}

pub fn gen_dataset(spec: &SynthSpec, count: usize) -> Result<Vec<(Volume, LabelMap)>> {
    (0..count).map(|i| gen_case(spec, i)).collect()
}
