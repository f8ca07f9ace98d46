//! Centred zero padding / cropping to network-compatible grid sizes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{LabelMap, Volume};

/// Where an original grid sits inside a padded one. `offset[a]` is the signed
/// position of original index 0 along axis `a` in the target grid (negative
/// when that axis was cropped).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Placement {
    pub original: [usize; 3],
    pub target: [usize; 3],
    pub offset: [i64; 3],
}

/// Smallest multiple of `divisor` at or above each extent.
pub fn round_up_dims(dims: [usize; 3], divisor: usize) -> [usize; 3] {
    dims.map(|d| d.div_ceil(divisor) * divisor)
}

impl Placement {
    pub fn centred(original: [usize; 3], target: [usize; 3]) -> Result<Self> {
        if original.iter().chain(&target).any(|&d| d == 0) {
            return Err(Error::dim("zero-sized grid in pad_or_crop"));
        }
        let offset = std::array::from_fn(|a| (target[a] as i64 - original[a] as i64) / 2);
        Ok(Self {
            original,
            target,
            offset,
        })
    }

    fn remap<T: Copy>(&self, src: &[T], from: [usize; 3], to: [usize; 3], sign: i64, fill: T) -> Vec<T> {
        let mut out = vec![fill; to.iter().product()];
        let off = self.offset.map(|o| o * sign);
        for z in 0..to[0] {
            let sz = z as i64 - off[0];
            if sz < 0 || sz >= from[0] as i64 {
                continue;
            }
            for y in 0..to[1] {
                let sy = y as i64 - off[1];
                if sy < 0 || sy >= from[1] as i64 {
                    continue;
                }
                let x0 = off[2].max(0) as usize;
                let x1 = ((from[2] as i64 + off[2]).min(to[2] as i64)).max(0) as usize;
                if x1 <= x0 {
                    continue;
                }
                let drow = (z * to[1] + y) * to[2];
                let srow = (sz as usize * from[1] + sy as usize) * from[2];
                let sx0 = (x0 as i64 - off[2]) as usize;
                out[drow + x0..drow + x1].copy_from_slice(&src[srow + sx0..srow + sx0 + (x1 - x0)]);
            }
        }
        out
    }

    /// Map data on the original grid into the target grid.
    pub fn forward<T: Copy>(&self, src: &[T], fill: T) -> Vec<T> {
        self.remap(src, self.original, self.target, 1, fill)
    }

    /// Map data on the target grid back onto the original grid; voxels that
    /// were cropped away get `fill`.
    pub fn inverse<T: Copy>(&self, src: &[T], fill: T) -> Vec<T> {
        self.remap(src, self.target, self.original, -1, fill)
    }
}

/// Pad with zeros or crop, centred, so the volume has `target` dims.
pub fn pad_or_crop(v: &Volume, target: [usize; 3]) -> Result<(Volume, Placement)> {
    let p = Placement::centred(v.dims, target)?;
    let out = Volume::new(v.id.clone(), target, v.spacing, p.forward(&v.data, 0.0))?;
    Ok((out, p))
}

/// Label counterpart of [`pad_or_crop`]; padding is background.
pub fn pad_or_crop_labels(l: &LabelMap, target: [usize; 3]) -> Result<(LabelMap, Placement)> {
    let p = Placement::centred(l.dims, target)?;
    let out = LabelMap::new(l.id.clone(), target, l.spacing, p.forward(&l.labels, 0))?;
    Ok((out, p))
}
