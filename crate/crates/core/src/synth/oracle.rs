//! Direct, unoptimized definitions used to cross-check the fast paths.
//! Nothing here calls into the kernels it is meant to verify.

use super::reference::{self, Array};
use crate::error::Result;
use crate::metrics::BinaryMask;
use crate::tensor::Tensor;

/// Convolution straight from the definition: stride 1, zero padding,
/// dilation, accumulated in f64.
pub fn naive_conv3d(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    padding: [usize; 3],
    dilation: usize,
) -> Result<Tensor> {
    let bias = bias.map(|b| Array::from(b).data);
    let out = reference::conv3d(&Array::from(input), &Array::from(weight), bias.as_deref(), padding, dilation)?;
    Tensor::new(out.shape, out.data.into_iter().map(|v| v as f32).collect())
}

/// Central-difference gradient of a scalar function. The divisor is the
/// step actually taken after rounding `x ± h` to f32.
pub fn fd_grad(f: impl Fn(&[f32]) -> f64, x: &[f32], h: f32) -> Vec<f64> {
    let mut work = x.to_vec();
    (0..x.len())
        .map(|i| {
            let (xp, xm) = (x[i] + h, x[i] - h);
            work[i] = xp;
            let fp = f(&work);
            work[i] = xm;
            let fm = f(&work);
            work[i] = x[i];
            (fp - fm) / (f64::from(xp) - f64::from(xm))
        })
        .collect()
}

/// Boundary voxels: set voxels with a face neighbour that is unset or
/// outside the grid.
fn boundary(mask: &BinaryMask) -> Vec<[usize; 3]> {
    let [d, h, w] = mask.dims();
    let m = mask.data();
    let set = |z: isize, y: isize, x: isize| {
        z >= 0 && y >= 0 && x >= 0 && (z as usize) < d && (y as usize) < h && (x as usize) < w && m[((z as usize) * h + y as usize) * w + x as usize]
    };
    let mut out = Vec::new();
    for z in 0..d as isize {
        for y in 0..h as isize {
            for x in 0..w as isize {
                if !set(z, y, x) {
                    continue;
                }
                let faces = [(-1, 0, 0), (1, 0, 0), (0, -1, 0), (0, 1, 0), (0, 0, -1), (0, 0, 1)];
                if faces.iter().any(|&(a, b, c)| !set(z + a, y + b, x + c)) {
                    out.push([z as usize, y as usize, x as usize]);
                }
            }
        }
    }
    out
}

fn squared_mm(a: [usize; 3], b: [usize; 3], spacing: [f64; 3]) -> f64 {
    let d: [f64; 3] = std::array::from_fn(|i| (a[i] as f64 - b[i] as f64) * spacing[i]);
    d[0] * d[0] + d[1] * d[1] + d[2] * d[2]
}

/// Normalized surface distance from all pairwise boundary distances.
pub fn brute_nsd(pred: &BinaryMask, gt: &BinaryMask, spacing: [f64; 3], tolerance: f64) -> f64 {
    let (sp, sg) = (boundary(pred), boundary(gt));
    match (sp.is_empty(), sg.is_empty()) {
        (true, true) => return 1.0,
        (true, false) | (false, true) => return 0.0,
        _ => {}
    }
    let within = |from: &[[usize; 3]], to: &[[usize; 3]]| {
        from.iter()
            .filter(|&&a| {
                let best = to.iter().map(|&b| squared_mm(a, b, spacing)).fold(f64::INFINITY, f64::min);
                best.sqrt() <= tolerance
            })
            .count()
    };
    (within(&sp, &sg) + within(&sg, &sp)) as f64 / (sp.len() + sg.len()) as f64
}
