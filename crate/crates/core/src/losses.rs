//! Soft Dice + binary cross-entropy training loss.
//!
//! Both terms act on per-voxel class probabilities `[N, C, D, H, W]` (softmax
//! output) against one-hot targets of the same shape. The Dice term uses the
//! squared denominator form and averages over the foreground channels
//! `1..C` and the batch; the cross-entropy term is averaged over every voxel
//! and every channel.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Function, Tape, Tensor, Var};

/// Smoothing constant on numerator and denominator of the Dice ratio.
pub const DICE_EPS: f64 = 1e-5;
/// Probabilities are clamped to `[BCE_CLAMP, 1 - BCE_CLAMP]` before the logarithm.
pub const BCE_CLAMP: f64 = 1e-7;

/// The three parts of a training loss evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossValue {
    pub total: f64,
    pub dice_part: f64,
    pub bce_part: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    #[default]
    Combined,
    Dice,
    Bce,
}

fn check_pair(probs: &Tensor, onehot: &Tensor) -> Result<(usize, usize, usize)> {
    if probs.shape() != onehot.shape() {
        return Err(Error::dim(format!(
            "probabilities {:?} vs targets {:?}",
            probs.shape(),
            onehot.shape()
        )));
    }
    let shape = probs.shape();
    if shape.len() < 3 || shape[1] < 2 {
        return Err(Error::dim(format!(
            "loss needs [N, C>=2, ...] tensors, got {shape:?}"
        )));
    }
    Ok((shape[0], shape[1], shape[2..].iter().product()))
}

/// Per (sample, foreground class) overlap sums `(sum p*q, sum p^2 + sum q^2)`.
fn dice_sums(probs: &Tensor, onehot: &Tensor, n: usize, c: usize, s: usize) -> Vec<(f64, f64)> {
    let (p, q) = (probs.data(), onehot.data());
    let mut out = Vec::with_capacity(n * (c - 1));
    for b in 0..n {
        for ch in 1..c {
            let r = (b * c + ch) * s..(b * c + ch + 1) * s;
            let mut inter = 0.0f64;
            let mut denom = 0.0f64;
            for (&pv, &qv) in p[r.clone()].iter().zip(&q[r]) {
                let (pv, qv) = (f64::from(pv), f64::from(qv));
                inter += pv * qv;
                denom += pv * pv + qv * qv;
            }
            out.push((inter, denom));
        }
    }
    out
}

/// Value of the soft Dice loss without recording anything.
pub fn soft_dice_value(probs: &Tensor, onehot: &Tensor) -> Result<f64> {
    let (n, c, s) = check_pair(probs, onehot)?;
    let sums = dice_sums(probs, onehot, n, c, s);
    let mean: f64 = sums
        .iter()
        .map(|&(i, d)| (2.0 * i + DICE_EPS) / (d + DICE_EPS))
        .sum::<f64>()
        / sums.len() as f64;
    Ok(1.0 - mean)
}

#[derive(Debug)]
struct SoftDice {
    target: Tensor,
    sums: Vec<(f64, f64)>,
}

impl Function for SoftDice {
    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad_out: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let probs = inputs[0];
        let shape = probs.shape();
        let (n, c) = (shape[0], shape[1]);
        let s: usize = shape[2..].iter().product();
        let k = self.sums.len() as f64;
        let g = f64::from(grad_out.data()[0]);
        let (p, q) = (probs.data(), self.target.data());
        let mut gp = vec![0.0f32; p.len()];
        for b in 0..n {
            for ch in 1..c {
                let (inter, denom) = self.sums[b * (c - 1) + ch - 1];
                let num = 2.0 * inter + DICE_EPS;
                let den = denom + DICE_EPS;
                let scale = -g / (k * den * den);
                let r = (b * c + ch) * s..(b * c + ch + 1) * s;
                for ((o, &pv), &qv) in gp[r.clone()].iter_mut().zip(&p[r.clone()]).zip(&q[r]) {
                    let d = 2.0 * f64::from(qv) * den - num * 2.0 * f64::from(pv);
                    *o = (scale * d) as f32;
                }
            }
        }
        Ok(vec![Some(Tensor::new(shape.to_vec(), gp)?)])
    }
}

/// `1 - mean_{n, c>=1} (2 sum pq + eps) / (sum p^2 + sum q^2 + eps)`.
pub fn soft_dice_loss(tape: &mut Tape, probs: Var, onehot: &Tensor) -> Result<Var> {
    let p = tape.value(probs);
    let (n, c, s) = check_pair(p, onehot)?;
    let sums = dice_sums(p, onehot, n, c, s);
    let mean: f64 = sums
        .iter()
        .map(|&(i, d)| (2.0 * i + DICE_EPS) / (d + DICE_EPS))
        .sum::<f64>()
        / sums.len() as f64;
    let value = Tensor::scalar((1.0 - mean) as f32);
    Ok(tape.custom(
        &[probs],
        value,
        Box::new(SoftDice {
            target: onehot.clone(),
            sums,
        }),
    ))
}

fn clamp_prob(p: f32) -> f64 {
    f64::from(p).clamp(BCE_CLAMP, 1.0 - BCE_CLAMP)
}

/// Value of the cross-entropy term without recording anything.
pub fn bce_value(probs: &Tensor, onehot: &Tensor) -> Result<f64> {
    check_pair(probs, onehot)?;
    Ok(bce_sum(probs.data(), onehot.data()) / probs.len() as f64)
}

fn bce_sum(p: &[f32], q: &[f32]) -> f64 {
    p.iter()
        .zip(q)
        .map(|(&pv, &qv)| {
            let pc = clamp_prob(pv);
            let qv = f64::from(qv);
            -(qv * pc.ln() + (1.0 - qv) * (1.0 - pc).ln())
        })
        .sum()
}

#[derive(Debug)]
struct Bce {
    target: Tensor,
    clamp_key: u64,
}

impl Function for Bce {
    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad_out: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let probs = inputs[0];
        let m = probs.len() as f64;
        let g = f64::from(grad_out.data()[0]);
        let data = probs
            .data()
            .iter()
            .zip(self.target.data())
            .map(|(&pv, &qv)| {
                let p = f64::from(pv);
                if !(BCE_CLAMP..=1.0 - BCE_CLAMP).contains(&p) {
                    return 0.0;
                }
                let q = f64::from(qv);
                (g * -(q / p - (1.0 - q) / (1.0 - p)) / m) as f32
            })
            .collect();
        Ok(vec![Some(Tensor::new(probs.shape().to_vec(), data)?)])
    }

    fn branch_key(&self) -> u64 {
        self.clamp_key
    }
}

/// Mean over all voxels and channels of `-[q ln p + (1-q) ln(1-p)]` with `p` clamped.
pub fn bce_loss(tape: &mut Tape, probs: Var, onehot: &Tensor) -> Result<Var> {
    let p = tape.value(probs);
    check_pair(p, onehot)?;
    let value = bce_sum(p.data(), onehot.data()) / p.len() as f64;
    let clamp_key = p.data().iter().enumerate().fold(0u64, |h, (i, &v)| {
        let f = f64::from(v);
        if (BCE_CLAMP..=1.0 - BCE_CLAMP).contains(&f) {
            h
        } else {
            h.rotate_left(7) ^ (i as u64 + 1)
        }
    });
    Ok(tape.custom(
        &[probs],
        Tensor::scalar(value as f32),
        Box::new(Bce {
            target: onehot.clone(),
            clamp_key,
        }),
    ))
}

/// Dice plus cross-entropy. The returned [`Var`] is the differentiable total.
pub fn combined_loss(tape: &mut Tape, probs: Var, onehot: &Tensor) -> Result<(Var, LossValue)> {
    training_loss(tape, probs, onehot, LossKind::Combined)
}

/// The selected loss; a disabled term reports zero.
pub fn training_loss(tape: &mut Tape, probs: Var, onehot: &Tensor, kind: LossKind) -> Result<(Var, LossValue)> {
    let scalar = |t: &Tape, v: Var| f64::from(t.value(v).data()[0]);
    match kind {
        LossKind::Combined => {
            let dice = soft_dice_loss(tape, probs, onehot)?;
            let bce = bce_loss(tape, probs, onehot)?;
            let total = tape.add(dice, bce)?;
            let (d, b) = (scalar(tape, dice), scalar(tape, bce));
            Ok((
                total,
                LossValue {
                    total: d + b,
                    dice_part: d,
                    bce_part: b,
                },
            ))
        }
        LossKind::Dice => {
            let dice = soft_dice_loss(tape, probs, onehot)?;
            let d = scalar(tape, dice);
            Ok((dice, LossValue { total: d, dice_part: d, bce_part: 0.0 }))
        }
        LossKind::Bce => {
            let bce = bce_loss(tape, probs, onehot)?;
            let b = scalar(tape, bce);
            Ok((bce, LossValue { total: b, dice_part: 0.0, bce_part: b }))
        }
    }
}
