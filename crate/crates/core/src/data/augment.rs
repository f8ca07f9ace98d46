//! Random rotation and flipping applied jointly to an image and its labels.

use rand::Rng;

use crate::error::Result;

use super::{LabelMap, Volume};

/// One draw of augmentation parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentParams {
    /// Rotation about axes 0, 1, 2 in radians.
    pub angles: [f64; 3],
    pub flips: [bool; 3],
}

impl AugmentParams {
    pub const IDENTITY: Self = Self {
        angles: [0.0; 3],
        flips: [false; 3],
    };

    /// Angles uniform in `[-max_angle_deg, max_angle_deg]`, each axis flipped
    /// with probability `flip_prob`.
    pub fn sample<R: Rng>(rng: &mut R, max_angle_deg: f64, flip_prob: f64) -> Self {
        let max = max_angle_deg.abs().to_radians();
        let angles = std::array::from_fn(|_| if max > 0.0 { rng.random_range(-max..=max) } else { 0.0 });
        let flips = std::array::from_fn(|_| rng.random::<f64>() < flip_prob);
        Self { angles, flips }
    }

    /// `R = R0 · R1 · R2`, where `Ra` rotates the plane spanned by the other two axes.
    pub fn rotation(&self) -> [[f64; 3]; 3] {
        let mut r = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        for axis in 0..3 {
            let (s, c) = self.angles[axis].sin_cos();
            let (i, j) = ((axis + 1) % 3, (axis + 2) % 3);
            let mut m = [[0.0; 3]; 3];
            m[axis][axis] = 1.0;
            m[i][i] = c;
            m[i][j] = -s;
            m[j][i] = s;
            m[j][j] = c;
            r = matmul(&r, &m);
        }
        r
    }

    /// Rotate (about the volume centre, in mm) and then flip both inputs.
    pub fn apply(&self, v: &Volume, l: &LabelMap) -> Result<(Volume, LabelMap)> {
        l.check_pairs_with(v)?;
        let (mut data, mut labels) = if self.angles.iter().all(|&a| a == 0.0) {
            (v.data.clone(), l.labels.clone())
        } else {
            rotate(v.dims, v.spacing, &self.rotation(), &v.data, &l.labels)
        };
        for axis in 0..3 {
            if self.flips[axis] {
                flip(&mut data, v.dims, axis);
                flip(&mut labels, v.dims, axis);
            }
        }
        Ok((
            Volume::new(v.id.clone(), v.dims, v.spacing, data)?,
            LabelMap::new(l.id.clone(), l.dims, l.spacing, labels)?,
        ))
    }
}

fn matmul(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    std::array::from_fn(|i| std::array::from_fn(|j| (0..3).map(|k| a[i][k] * b[k][j]).sum()))
}

/// Sample each output voxel at `R^T` of its physical position.
fn rotate(dims: [usize; 3], spacing: [f64; 3], r: &[[f64; 3]; 3], data: &[f32], labels: &[u8]) -> (Vec<f32>, Vec<u8>) {
    let centre = dims.map(|d| (d as f64 - 1.0) / 2.0);
    let n: usize = dims.iter().product();
    let mut out = vec![0.0f32; n];
    let mut out_l = vec![0u8; n];
    let at = |z: usize, y: usize, x: usize| (z * dims[1] + y) * dims[2] + x;
    for z in 0..dims[0] {
        for y in 0..dims[1] {
            for x in 0..dims[2] {
                let p = [
                    (z as f64 - centre[0]) * spacing[0],
                    (y as f64 - centre[1]) * spacing[1],
                    (x as f64 - centre[2]) * spacing[2],
                ];
                // source position in voxel units
                let s: [f64; 3] =
                    std::array::from_fn(|a| (r[0][a] * p[0] + r[1][a] * p[1] + r[2][a] * p[2]) / spacing[a] + centre[a]);
                let o = at(z, y, x);

                let near = s.map(|c| c.round());
                if (0..3).all(|a| near[a] >= 0.0 && near[a] <= (dims[a] - 1) as f64) {
                    out_l[o] = labels[at(near[0] as usize, near[1] as usize, near[2] as usize)];
                }

                let base = s.map(|c| c.floor());
                let frac: [f64; 3] = std::array::from_fn(|a| s[a] - base[a]);
                let mut acc = 0.0f64;
                for corner in 0..8 {
                    let mut w = 1.0;
                    let mut idx = [0usize; 3];
                    let mut inside = true;
                    for a in 0..3 {
                        let bit = (corner >> (2 - a)) & 1;
                        let c = base[a] + bit as f64;
                        w *= if bit == 1 { frac[a] } else { 1.0 - frac[a] };
                        if c < 0.0 || c > (dims[a] - 1) as f64 {
                            inside = false;
                        } else {
                            idx[a] = c as usize;
                        }
                    }
                    if inside && w != 0.0 {
                        acc += w * f64::from(data[at(idx[0], idx[1], idx[2])]);
                    }
                }
                out[o] = acc as f32;
            }
        }
    }
    (out, out_l)
}

fn flip<T>(data: &mut [T], dims: [usize; 3], axis: usize) {
    let [d, h, w] = dims;
    match axis {
        0 => {
            let plane = h * w;
            for z in 0..d / 2 {
                let (a, b) = data.split_at_mut((d - 1 - z) * plane);
                a[z * plane..(z + 1) * plane].swap_with_slice(&mut b[..plane]);
            }
        }
        1 => {
            for z in 0..d {
                for y in 0..h / 2 {
                    let r0 = (z * h + y) * w;
                    let r1 = (z * h + h - 1 - y) * w;
                    let (a, b) = data.split_at_mut(r1);
                    a[r0..r0 + w].swap_with_slice(&mut b[..w]);
                }
            }
        }
        _ => data.chunks_exact_mut(w).for_each(<[T]>::reverse),
    }
}

/// Sample parameters from `rng` and apply them.
pub fn augment<R: Rng>(
    v: &Volume,
    l: &LabelMap,
    rng: &mut R,
    max_angle_deg: f64,
    flip_prob: f64,
) -> Result<(Volume, LabelMap)> {
    AugmentParams::sample(rng, max_angle_deg, flip_prob).apply(v, l)
}
