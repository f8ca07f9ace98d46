//! Central finite-difference checks of tape gradients.

use rand::Rng;

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Debug)]
pub struct GradcheckOptions {
    /// Perturbation size for central differences.
    pub h: f32,
    /// Check at most this many randomly chosen elements of each input.
    pub max_elements: Option<usize>,
    /// Reduce the output with a seeded random projection instead of a plain
    /// sum. Needed for ops whose plain sum is constant (softmax, batch norm).
    pub random_projection: bool,
    pub seed: u64,
    /// Entries whose gradient is below this fraction of the largest analytic
    /// entry (over all inputs) are compared against that floor instead of
    /// their own magnitude. Gradients that are exactly zero in theory (a conv
    /// bias followed by batch norm) come out of f32 arithmetic as rounding
    /// residue, which has no meaningful relative error.
    pub scale_floor: f64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            h: 1e-3,
            max_elements: None,
            random_projection: false,
            seed: 0,
            scale_floor: 0.0,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradcheckReport {
    /// max over checked elements of |analytic - numeric| / max(|analytic|, |numeric|, floor)
    /// with `floor = max(1e-8, scale_floor * max |analytic|)`
    pub max_rel_error: f64,
    pub checked: usize,
    /// Elements whose every step size crossed a kink of a piecewise op.
    pub skipped: usize,
    /// (input, element, analytic, numeric) at the worst element.
    pub worst: Option<(usize, usize, f64, f64)>,
}

/// Samples per side of the base point in each stencil round.
const TAPS: usize = 4;

/// Compare tape gradients of `f` with finite differences.
///
/// `f` records an operation on a fresh tape given leaves for `inputs` and
/// returns its output; the output is reduced to a scalar (sum or random
/// projection). Each selected input element is moved to `x0 + t` for
/// `t = ±h·j/4, j = 1..4`, and the slope at `t = 0` of a least-squares cubic
/// through the samples is the numeric derivative. Sampling on a side stops
/// at the first point where a piecewise op changes branch (leaky ReLU sign,
/// max-pool winner, clamp), so a kink on one side leaves a one-sided fit.
/// With fewer than five usable samples the round is repeated at `h/4`, and
/// after three rounds the element is skipped.
pub fn gradcheck<F>(f: F, inputs: &[Tensor], opts: &GradcheckOptions) -> Result<GradcheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    gradcheck_with_reference(f, None::<fn(&[Tensor]) -> Result<(Vec<f64>, u64)>>, inputs, opts)
}

/// Like [`gradcheck`], but when `reference` is given the numeric side
/// differentiates the projection of `reference(inputs)`, a higher-precision
/// evaluation of the same output returning `(values, branch signature)`.
/// The reference must agree with the tape output at the base point to within
/// `1e-3` relative to the output's largest magnitude.
pub fn gradcheck_with_reference<F, R>(
    f: F,
    reference: Option<R>,
    inputs: &[Tensor],
    opts: &GradcheckOptions,
) -> Result<GradcheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
    R: Fn(&[Tensor]) -> Result<(Vec<f64>, u64)>,
{
    let mut r = rng::stream(opts.seed, &[rng::tag::TEST, 0x67c]);

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let n_out = tape.value(out).len();
    let weights: Vec<f32> = if opts.random_projection {
        (0..n_out).map(|_| r.random_range(-1.0f32..1.0)).collect()
    } else {
        vec![1.0; n_out]
    };
    let mut base_signature = tape.branch_signature();
    if let Some(reference) = &reference {
        let (values, signature) = reference(inputs)?;
        let y = tape.value(out).data();
        let size = y.iter().fold(1.0f64, |m, &v| m.max(f64::from(v).abs()));
        let gap = y
            .iter()
            .zip(&values)
            .fold(0.0f64, |m, (&a, &b)| m.max((f64::from(a) - b).abs()));
        if values.len() != y.len() || gap > 1e-3 * size {
            return Err(Error::State(format!(
                "reference output differs from the tape output by {gap:e}"
            )));
        }
        base_signature = signature;
    }
    let loss = tape.dot_const(out, weights.clone())?;
    let grads = tape.backward(loss)?;

    let project = |y: &mut dyn Iterator<Item = f64>| -> f64 { y.zip(&weights).map(|(a, &b)| a * f64::from(b)).sum() };
    let eval = |values: &[Tensor]| -> Result<(f64, u64)> {
        if let Some(reference) = &reference {
            let (y, signature) = reference(values)?;
            return Ok((project(&mut y.into_iter()), signature));
        }
        let mut t = Tape::new();
        let vs: Vec<Var> = values.iter().map(|v| t.param(v.clone())).collect();
        let o = f(&mut t, &vs)?;
        let s = project(&mut t.value(o).data().iter().map(|&v| f64::from(v)));
        Ok((s, t.branch_signature()))
    };
    let (f0, _) = eval(inputs)?;

    let scale = vars
        .iter()
        .filter_map(|&v| grads.get(v))
        .flat_map(|g| g.data().iter())
        .fold(0.0f64, |m, &g| m.max(f64::from(g).abs()));
    let floor = (opts.scale_floor * scale).max(1e-8);

    let mut report = GradcheckReport::default();
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[i]);
        let mut elements: Vec<usize> = (0..input.len()).collect();
        if let Some(k) = opts.max_elements {
            // partial Fisher-Yates: the first k entries become a uniform sample
            for j in 0..k.min(elements.len()) {
                let pick = r.random_range(j..elements.len());
                elements.swap(j, pick);
            }
            elements.truncate(k);
        }
        for e in elements {
            let x0 = input.data()[e];
            let mut numeric = None;
            let mut h = opts.h;
            for _ in 0..3 {
                let mut samples = vec![(0.0, f0)];
                for sign in [1.0f32, -1.0] {
                    for j in 1..=TAPS {
                        let x = x0 + sign * h * j as f32 / TAPS as f32;
                        work[i].data_mut()[e] = x;
                        let (fx, sx) = eval(&work)?;
                        if sx != base_signature {
                            break;
                        }
                        samples.push(((f64::from(x) - f64::from(x0)) / f64::from(h), fx));
                    }
                }
                work[i].data_mut()[e] = x0;
                if samples.len() >= 5 {
                    numeric = Some(cubic_slope_at_zero(&samples) / f64::from(h));
                    break;
                }
                h /= 4.0;
            }
            let Some(numeric) = numeric else {
                report.skipped += 1;
                continue;
            };
            let a = analytic.map_or(0.0, |g| f64::from(g.data()[e]));
            let denom = a.abs().max(numeric.abs()).max(floor);
            let rel = (a - numeric).abs() / denom;
            report.checked += 1;
            if report.worst.is_none() || rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((i, e, a, numeric));
            }
        }
    }
    Ok(report)
}

/// Linear coefficient of the least-squares cubic through `(u, f)` samples,
/// from the normal equations solved by Gaussian elimination.
fn cubic_slope_at_zero(samples: &[(f64, f64)]) -> f64 {
    const K: usize = 4;
    let mut m = [[0.0f64; K + 1]; K];
    for &(u, fu) in samples {
        let pow: [f64; K] = [1.0, u, u * u, u * u * u];
        for row in 0..K {
            for col in 0..K {
                m[row][col] += pow[row] * pow[col];
            }
            m[row][K] += pow[row] * fu;
        }
    }
    for col in 0..K {
        let pivot = (col..K)
            .max_by(|&a, &b| m[a][col].abs().total_cmp(&m[b][col].abs()))
            .unwrap_or(col);
        m.swap(col, pivot);
        for row in 0..K {
            if row != col {
                let factor = m[row][col] / m[col][col];
                for k in col..=K {
                    m[row][k] -= factor * m[col][k];
                }
            }
        }
    }
    m[1][K] / m[1][1]
}
