//! Double-precision re-implementation of the network layers, losses and
//! blocks, written from their definitions. Finite differences of these
//! functions are free of the f32 rounding noise that limits differences of
//! the tape, so the gradient checks differentiate them instead.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::losses::{BCE_CLAMP, DICE_EPS};
use crate::tensor::Tensor;

/// Dense row-major f64 array.
#[derive(Clone, Debug, PartialEq)]
pub struct Array {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Array {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    fn dims5(&self) -> Result<[usize; 5]> {
        <[usize; 5]>::try_from(self.shape.as_slice())
            .map_err(|_| Error::dim(format!("expected a 5-d array, got {:?}", self.shape)))
    }
}

impl From<&Tensor> for Array {
    fn from(t: &Tensor) -> Self {
        Self {
            shape: t.shape().to_vec(),
            data: t.data().iter().map(|&v| f64::from(v)).collect(),
        }
    }
}

/// Records which side of every kink an evaluation landed on (leaky ReLU
/// input signs, max-pool winners) as an FNV-1a hash.
#[derive(Clone, Copy, Debug)]
pub struct Branches(u64);

impl Default for Branches {
    fn default() -> Self {
        Self(0xcbf2_9ce4_8422_2325)
    }
}

impl Branches {
    fn mix(&mut self, x: u64) {
        self.0 ^= x;
        self.0 = self.0.wrapping_mul(0x0000_0100_0000_01b3);
    }

    pub fn signature(&self) -> u64 {
        self.0
    }
}

/// Stride-1 zero-padded dilated convolution.
pub fn conv3d(x: &Array, weight: &Array, bias: Option<&[f64]>, padding: [usize; 3], dilation: usize) -> Result<Array> {
    let [n, cin, d, h, w] = x.dims5()?;
    let [cout, wcin, kd, kh, kw] = weight.dims5()?;
    if wcin != cin {
        return Err(Error::dim(format!("weight expects {wcin} input channels, got {cin}")));
    }
    let ext = |size: usize, pad: usize, k: usize| (size + 2 * pad).checked_sub(dilation * (k - 1)).filter(|&e| e > 0);
    let (od, oh, ow) = match (ext(d, padding[0], kd), ext(h, padding[1], kh), ext(w, padding[2], kw)) {
        (Some(a), Some(b), Some(c)) => (a, b, c),
        _ => return Err(Error::dim("kernel larger than padded input")),
    };
    let mut out = Vec::with_capacity(n * cout * od * oh * ow);
    for b in 0..n {
        for co in 0..cout {
            for z in 0..od {
                for y in 0..oh {
                    for xo in 0..ow {
                        let mut acc = bias.map_or(0.0, |t| t[co]);
                        for ci in 0..cin {
                            for a in 0..kd {
                                for bb in 0..kh {
                                    for c in 0..kw {
                                        let iz = (z + a * dilation) as isize - padding[0] as isize;
                                        let iy = (y + bb * dilation) as isize - padding[1] as isize;
                                        let ix = (xo + c * dilation) as isize - padding[2] as isize;
                                        if iz < 0 || iy < 0 || ix < 0 || iz >= d as isize || iy >= h as isize || ix >= w as isize {
                                            continue;
                                        }
                                        let xi = (((b * cin + ci) * d + iz as usize) * h + iy as usize) * w + ix as usize;
                                        let ki = (((co * cin + ci) * kd + a) * kh + bb) * kw + c;
                                        acc += x.data[xi] * weight.data[ki];
                                    }
                                }
                            }
                        }
                        out.push(acc);
                    }
                }
            }
        }
    }
    Ok(Array {
        shape: vec![n, cout, od, oh, ow],
        data: out,
    })
}

/// Per-channel normalization with batch statistics (biased variance).
pub fn batchnorm_train(x: &Array, gamma: &[f64], beta: &[f64], eps: f64) -> Result<Array> {
    let [n, c, d, h, w] = x.dims5()?;
    let s = d * h * w;
    let mut out = x.clone();
    for ch in 0..c {
        let idx = |b: usize| (b * c + ch) * s..(b * c + ch + 1) * s;
        let count = (n * s) as f64;
        let mean = (0..n).flat_map(|b| x.data[idx(b)].iter()).sum::<f64>() / count;
        let var = (0..n).flat_map(|b| x.data[idx(b)].iter()).map(|v| (v - mean).powi(2)).sum::<f64>() / count;
        let inv = 1.0 / (var + eps).sqrt();
        for b in 0..n {
            for v in &mut out.data[idx(b)] {
                *v = gamma[ch] * (*v - mean) * inv + beta[ch];
            }
        }
    }
    Ok(out)
}

/// Normalization with fixed statistics.
pub fn batchnorm_eval(x: &Array, gamma: &[f64], beta: &[f64], mean: &[f64], var: &[f64], eps: f64) -> Result<Array> {
    let [_, c, d, h, w] = x.dims5()?;
    let s = d * h * w;
    let mut out = x.clone();
    for (i, v) in out.data.iter_mut().enumerate() {
        let ch = (i / s) % c;
        *v = gamma[ch] * (*v - mean[ch]) / (var[ch] + eps).sqrt() + beta[ch];
    }
    Ok(out)
}

pub fn leaky_relu(x: &Array, slope: f64, branches: &mut Branches) -> Array {
    let mut out = x.clone();
    for v in &mut out.data {
        branches.mix(u64::from(*v >= 0.0));
        if *v < 0.0 {
            *v *= slope;
        }
    }
    out
}

/// 2x2x2 max pooling with stride 2; the first maximal element wins ties.
pub fn maxpool(x: &Array, branches: &mut Branches) -> Result<Array> {
    let [n, c, d, h, w] = x.dims5()?;
    if d % 2 != 0 || h % 2 != 0 || w % 2 != 0 {
        return Err(Error::dim("max pooling needs even spatial dims"));
    }
    let mut out = Array::zeros(&[n, c, d / 2, h / 2, w / 2]);
    let mut o = 0;
    for nc in 0..n * c {
        for z in 0..d / 2 {
            for y in 0..h / 2 {
                for xo in 0..w / 2 {
                    let mut best = (f64::NEG_INFINITY, usize::MAX);
                    for k in 0..8 {
                        let (dz, dy, dx) = (k / 4, (k / 2) % 2, k % 2);
                        let i = ((nc * d + 2 * z + dz) * h + 2 * y + dy) * w + 2 * xo + dx;
                        if best.1 == usize::MAX || x.data[i] > best.0 {
                            best = (x.data[i], i);
                        }
                    }
                    branches.mix(best.1 as u64);
                    out.data[o] = best.0;
                    o += 1;
                }
            }
        }
    }
    Ok(out)
}

/// Nearest-neighbour upsampling by an integer factor.
pub fn upsample(x: &Array, factor: usize) -> Result<Array> {
    let [n, c, d, h, w] = x.dims5()?;
    let (od, oh, ow) = (d * factor, h * factor, w * factor);
    let mut out = Array::zeros(&[n, c, od, oh, ow]);
    for nc in 0..n * c {
        for z in 0..od {
            for y in 0..oh {
                for xo in 0..ow {
                    out.data[((nc * od + z) * oh + y) * ow + xo] =
                        x.data[((nc * d + z / factor) * h + y / factor) * w + xo / factor];
                }
            }
        }
    }
    Ok(out)
}

pub fn concat_channels(parts: &[&Array]) -> Result<Array> {
    let first = parts.first().ok_or_else(|| Error::dim("nothing to concatenate"))?.dims5()?;
    let s: usize = first[2..].iter().product();
    let mut channels = 0;
    for p in parts {
        let d = p.dims5()?;
        if d[0] != first[0] || d[2..] != first[2..] {
            return Err(Error::dim("concatenated arrays disagree on batch or spatial dims"));
        }
        channels += d[1];
    }
    let mut data = Vec::with_capacity(first[0] * channels * s);
    for b in 0..first[0] {
        for p in parts {
            let c = p.shape[1];
            data.extend_from_slice(&p.data[b * c * s..(b + 1) * c * s]);
        }
    }
    Ok(Array {
        shape: vec![first[0], channels, first[2], first[3], first[4]],
        data,
    })
}

pub fn add(a: &Array, b: &Array) -> Result<Array> {
    if a.shape != b.shape {
        return Err(Error::dim("added arrays differ in shape"));
    }
    Ok(Array {
        shape: a.shape.clone(),
        data: a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect(),
    })
}

/// Softmax over axis 1.
pub fn softmax_channels(x: &Array) -> Array {
    let (n, c) = (x.shape[0], x.shape[1]);
    let s: usize = x.shape[2..].iter().product();
    let mut out = x.clone();
    for b in 0..n {
        for v in 0..s {
            let at = |ch: usize| (b * c + ch) * s + v;
            let m = (0..c).map(|ch| x.data[at(ch)]).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = (0..c).map(|ch| (x.data[at(ch)] - m).exp()).sum();
            for ch in 0..c {
                out.data[at(ch)] = (x.data[at(ch)] - m).exp() / z;
            }
        }
    }
    out
}

/// `1 - mean over samples and classes 1.. of (2 sum pq + eps) / (sum p^2 + sum q^2 + eps)`.
pub fn soft_dice(p: &Array, q: &Array) -> f64 {
    let (n, c) = (p.shape[0], p.shape[1]);
    let s: usize = p.shape[2..].iter().product();
    let mut total = 0.0;
    for b in 0..n {
        for ch in 1..c {
            let r = (b * c + ch) * s..(b * c + ch + 1) * s;
            let inter: f64 = p.data[r.clone()].iter().zip(&q.data[r.clone()]).map(|(a, b)| a * b).sum();
            let denom: f64 = p.data[r.clone()].iter().zip(&q.data[r]).map(|(a, b)| a * a + b * b).sum();
            total += (2.0 * inter + DICE_EPS) / (denom + DICE_EPS);
        }
    }
    1.0 - total / (n * (c - 1)) as f64
}

/// Mean binary cross-entropy over every element, probabilities clamped.
pub fn bce(p: &Array, q: &Array) -> f64 {
    let sum: f64 = p
        .data
        .iter()
        .zip(&q.data)
        .map(|(&pv, &qv)| {
            let pc = pv.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
            -(qv * pc.ln() + (1.0 - qv) * (1.0 - pc).ln())
        })
        .sum();
    sum / p.data.len() as f64
}

/// Blocks evaluated against named parameters, batch norm in training mode.
pub struct Net<'a> {
    pub params: &'a BTreeMap<String, Array>,
    pub slope: f64,
    pub eps: f64,
    pub branches: Branches,
}

impl<'a> Net<'a> {
    pub fn new(params: &'a BTreeMap<String, Array>, slope: f64, eps: f64) -> Self {
        Self {
            params,
            slope,
            eps,
            branches: Branches::default(),
        }
    }

    fn get(&self, name: &str) -> Result<&'a Array> {
        self.params
            .get(name)
            .ok_or_else(|| Error::State(format!("missing parameter {name}")))
    }

    pub fn conv(&self, x: &Array, prefix: &str, padding: usize, dilation: usize) -> Result<Array> {
        let w = self.get(&format!("{prefix}.weight"))?;
        let b = self.get(&format!("{prefix}.bias"))?;
        conv3d(x, w, Some(&b.data), [padding; 3], dilation)
    }

    pub fn conv_norm_act(&mut self, x: &Array, conv: &str, norm: &str, dilation: usize) -> Result<Array> {
        let y = self.conv(x, conv, dilation, dilation)?;
        let g = self.get(&format!("{norm}.gamma"))?;
        let b = self.get(&format!("{norm}.beta"))?;
        let y = batchnorm_train(&y, &g.data, &b.data, self.eps)?;
        Ok(leaky_relu(&y, self.slope, &mut self.branches))
    }

    /// Returns `(skip, pooled)`.
    pub fn encoder_block(&mut self, x: &Array, prefix: &str, residual: bool) -> Result<(Array, Array)> {
        let h = self.conv_norm_act(x, &format!("{prefix}.conv1"), &format!("{prefix}.bn1"), 1)?;
        let mut skip = self.conv_norm_act(&h, &format!("{prefix}.conv2"), &format!("{prefix}.bn2"), 1)?;
        if residual {
            let proj = format!("{prefix}.proj");
            let shortcut = if self.params.contains_key(&format!("{proj}.weight")) {
                self.conv(x, &proj, 0, 1)?
            } else {
                x.clone()
            };
            skip = add(&skip, &shortcut)?;
        }
        let pooled = maxpool(&skip, &mut self.branches)?;
        Ok((skip, pooled))
    }

    pub fn bottleneck(&mut self, x: &Array, prefix: &str, dilations: &[usize]) -> Result<Array> {
        let mut y = x.clone();
        for (i, &d) in dilations.iter().enumerate() {
            y = self.conv_norm_act(&y, &format!("{prefix}.conv{}", i + 1), &format!("{prefix}.bn{}", i + 1), d)?;
        }
        Ok(y)
    }

    pub fn decoder_block(&mut self, x: &Array, skip: &Array, prefix: &str) -> Result<Array> {
        let up = upsample(x, 2)?;
        let cat = concat_channels(&[&up, skip])?;
        let h = self.conv_norm_act(&cat, &format!("{prefix}.conv1"), &format!("{prefix}.bn1"), 1)?;
        self.conv_norm_act(&h, &format!("{prefix}.conv2"), &format!("{prefix}.bn2"), 1)
    }

    pub fn deep_supervision_head(&self, outputs: &[&Array], prefix: &str) -> Result<Array> {
        let full = outputs.last().ok_or_else(|| Error::dim("no decoder outputs"))?.shape[2];
        let ups = outputs
            .iter()
            .map(|o| upsample(o, full / o.shape[2]))
            .collect::<Result<Vec<_>>>()?;
        let cat = concat_channels(&ups.iter().collect::<Vec<_>>())?;
        self.conv(&cat, prefix, 0, 1)
    }
}
