//! The finite-difference and oracle checks run by `voxseg gradcheck` and the
//! acceptance tests.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::StandardNormal;

use super::oracle::{brute_nsd, naive_conv3d};
use super::reference::{self, Array, Branches, Net as RefNet};
use crate::error::Result;
use crate::losses::{bce_loss, combined_loss, soft_dice_loss};
use crate::metrics::{nsd, BinaryMask};
use crate::nn::blocks::{
    bottleneck, decoder_block, deep_supervision_head, encoder_block, init_bottleneck, init_decoder_block,
    init_encoder_block,
};
use crate::nn::{Binder, ParamStore};
use crate::rng::{self, tag, Stream};
use crate::tensor::{gradcheck_with_reference, BatchNormState, ConvGeometry, GradcheckOptions, NormMode, Tape, Tensor, Var};

/// Maximum relative error accepted by the gradient checks.
pub const GRAD_TOLERANCE: f64 = 1e-2;
/// Gradient entries below this fraction of an instance's largest entry are
/// judged against that floor; see [`GradcheckOptions::scale_floor`].
pub const SCALE_FLOOR: f64 = 1e-3;
/// Maximum absolute difference accepted between optimized and naive convolution.
pub const CONV_TOLERANCE: f64 = 1e-4;

/// Outcome of one named check over several random instances.
#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: String,
    pub instances: usize,
    pub max_error: f64,
    pub tolerance: f64,
    /// Gradient elements whose perturbation always crossed a kink.
    pub skipped: usize,
    pub checked: usize,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_error < self.tolerance && self.checked > 0
    }
}

type Recorder = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;
type Reference = Box<dyn Fn(&[Tensor]) -> Result<(Vec<f64>, u64)>>;

/// One gradient check: the tape recording under test and a double-precision
/// reference of the same output whose finite differences it is compared to.
struct Instance {
    inputs: Vec<Tensor>,
    opts: GradcheckOptions,
    f: Recorder,
    reference: Reference,
}

fn normal(r: &mut Stream, shape: &[usize], scale: f32) -> Tensor {
    Tensor::from_fn(shape, |_| r.sample::<f32, _>(StandardNormal) * scale)
}

fn uniform(r: &mut Stream, shape: &[usize], lo: f32, hi: f32) -> Tensor {
    Tensor::from_fn(shape, |_| r.random_range(lo..hi))
}

fn arrays(values: &[Tensor]) -> Vec<Array> {
    values.iter().map(Array::from).collect()
}

/// Reference for an op without kinks.
fn smooth(f: impl Fn(&[Array]) -> Result<Array> + 'static) -> Reference {
    Box::new(move |v| Ok((f(&arrays(v))?.data, 0)))
}

fn opts(h: f32, projection: bool, max_elements: Option<usize>, seed: u64) -> GradcheckOptions {
    GradcheckOptions {
        h,
        max_elements,
        random_projection: projection,
        seed,
        scale_floor: SCALE_FLOOR,
    }
}

fn run_gradient_case(
    name: &str,
    seed: u64,
    case: u64,
    instances: usize,
    make: impl Fn(&mut Stream, u64) -> Instance,
) -> Result<CheckResult> {
    let mut res = CheckResult {
        name: name.to_string(),
        instances,
        max_error: 0.0,
        tolerance: GRAD_TOLERANCE,
        skipped: 0,
        checked: 0,
    };
    for i in 0..instances {
        let mut r = rng::stream(seed, &[tag::TEST, case, i as u64]);
        let inst = make(&mut r, rng::derive_key(seed, &[case, i as u64]));
        let rep = gradcheck_with_reference(&inst.f, Some(&inst.reference), &inst.inputs, &inst.opts)?;
        res.max_error = res.max_error.max(rep.max_rel_error);
        res.skipped += rep.skipped;
        res.checked += rep.checked;
    }
    Ok(res)
}

fn spatial(r: &mut Stream, lo: usize, hi: usize) -> [usize; 3] {
    std::array::from_fn(|_| r.random_range(lo..=hi))
}

/// Prepare a block check: the block input plus every stored parameter
/// become gradcheck inputs, bound by name on each evaluation. `reference`
/// evaluates the same block in double precision.
fn block_instance(
    store: ParamStore,
    x: Tensor,
    slope: f32,
    seed: u64,
    run: impl Fn(&mut Binder, Var) -> Result<Var> + 'static,
    reference: impl Fn(&mut RefNet, &Array) -> Result<Array> + 'static,
) -> Instance {
    let names: Vec<String> = store.params.keys().cloned().collect();
    let eps = store.norms.values().next().map_or(1e-5, |s| f64::from(s.eps));
    let mut inputs = vec![x];
    inputs.extend(store.params.values().cloned());
    let ref_names = names.clone();
    let f: Recorder = Box::new(move |t: &mut Tape, v: &[Var]| {
        let bound: BTreeMap<String, Var> = names.iter().cloned().zip(v[1..].iter().copied()).collect();
        let mut st = store.clone();
        let mut b = Binder::train(t, &mut st, slope).with_bound(bound);
        run(&mut b, v[0])
    });
    let reference: Reference = Box::new(move |v: &[Tensor]| {
        let params: BTreeMap<String, Array> = ref_names.iter().cloned().zip(v[1..].iter().map(Array::from)).collect();
        let mut net = RefNet::new(&params, f64::from(slope), eps);
        let y = reference(&mut net, &Array::from(&v[0]))?;
        Ok((y.data, net.branches.signature()))
    });
    Instance {
        inputs,
        opts: opts(1e-2, true, Some(4), seed),
        f,
        reference,
    }
}

/// Finite-difference checks of every differentiable op, the losses and the
/// network blocks, `instances` random instances each. Tape gradients (f32)
/// are compared with finite differences of the double-precision reference.
pub fn gradient_suite(seed: u64, instances: usize) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    out.push(run_gradient_case("conv3d", seed, 1, instances, |r, s| {
        let (cin, cout) = (r.random_range(1..=3), r.random_range(1..=3));
        let k = if r.random_bool(0.25) { 1 } else { 3 };
        let dilation = r.random_range(1..=2);
        let padding = std::array::from_fn(|_| r.random_range(0..=dilation));
        let dims = spatial(r, 2 * dilation + 1, 5);
        let geom = ConvGeometry { padding, dilation };
        Instance {
            inputs: vec![
                normal(r, &[2, cin, dims[0], dims[1], dims[2]], 1.0),
                normal(r, &[cout, cin, k, k, k], 0.5),
                normal(r, &[cout], 0.5),
            ],
            opts: opts(5e-2, true, None, s),
            f: Box::new(move |t, v| t.conv3d(v[0], v[1], Some(v[2]), geom)),
            reference: smooth(move |a| reference::conv3d(&a[0], &a[1], Some(&a[2].data), padding, dilation)),
        }
    })?);
    out.push(run_gradient_case("maxpool3d", seed, 2, instances, |r, s| {
        let dims = spatial(r, 1, 3).map(|d| 2 * d);
        Instance {
            inputs: vec![normal(r, &[2, 2, dims[0], dims[1], dims[2]], 1.0)],
            opts: opts(1e-2, true, None, s),
            f: Box::new(|t, v| t.maxpool3d(v[0])),
            reference: Box::new(|v| {
                let mut br = Branches::default();
                let y = reference::maxpool(&Array::from(&v[0]), &mut br)?;
                Ok((y.data, br.signature()))
            }),
        }
    })?);
    out.push(run_gradient_case("upsample3d", seed, 3, instances, |r, s| {
        let dims = spatial(r, 1, 3);
        let factor = r.random_range(2..=4);
        Instance {
            inputs: vec![normal(r, &[1, 2, dims[0], dims[1], dims[2]], 1.0)],
            opts: opts(5e-2, true, None, s),
            f: Box::new(move |t, v| t.upsample3d(v[0], factor)),
            reference: smooth(move |a| reference::upsample(&a[0], factor)),
        }
    })?);
    out.push(run_gradient_case("batchnorm3d (train)", seed, 4, instances, |r, s| {
        let c = r.random_range(1..=3);
        let dims = spatial(r, 2, 3);
        let eps = f64::from(BatchNormState::new(c).eps);
        Instance {
            inputs: vec![
                normal(r, &[2, c, dims[0], dims[1], dims[2]], 1.5),
                uniform(r, &[c], 0.5, 1.5),
                normal(r, &[c], 0.5),
            ],
            opts: opts(1e-2, true, None, s),
            f: Box::new(move |t, v| t.batchnorm3d(v[0], v[1], v[2], &mut BatchNormState::new(c), NormMode::Train)),
            reference: smooth(move |a| reference::batchnorm_train(&a[0], &a[1].data, &a[2].data, eps)),
        }
    })?);
    out.push(run_gradient_case("batchnorm3d (eval)", seed, 5, instances, |r, s| {
        let c = r.random_range(1..=3);
        let dims = spatial(r, 1, 3);
        let mut state = BatchNormState::new(c);
        state.running_mean = normal(r, &[c], 1.0).into_data();
        state.running_var = uniform(r, &[c], 0.5, 2.0).into_data();
        let stats = state.clone();
        Instance {
            inputs: vec![
                normal(r, &[1, c, dims[0], dims[1], dims[2]], 1.0),
                uniform(r, &[c], 0.5, 1.5),
                normal(r, &[c], 0.5),
            ],
            opts: opts(5e-2, true, None, s),
            f: Box::new(move |t, v| t.batchnorm3d(v[0], v[1], v[2], &mut state.clone(), NormMode::Eval)),
            reference: smooth(move |a| {
                let wide = |v: &[f32]| v.iter().map(|&x| f64::from(x)).collect::<Vec<_>>();
                let (mean, var) = (wide(&stats.running_mean), wide(&stats.running_var));
                reference::batchnorm_eval(&a[0], &a[1].data, &a[2].data, &mean, &var, f64::from(stats.eps))
            }),
        }
    })?);
    out.push(run_gradient_case("leaky_relu", seed, 6, instances, |r, s| {
        let slope = r.random_range(0.0..0.3);
        Instance {
            inputs: vec![normal(r, &[1, 2, 3, 3, 3], 1.0)],
            opts: opts(1e-2, true, None, s),
            f: Box::new(move |t, v| Ok(t.leaky_relu(v[0], slope))),
            reference: Box::new(move |v| {
                let mut br = Branches::default();
                let y = reference::leaky_relu(&Array::from(&v[0]), f64::from(slope), &mut br);
                Ok((y.data, br.signature()))
            }),
        }
    })?);
    out.push(run_gradient_case("concat_channels", seed, 7, instances, |r, s| {
        let dims = spatial(r, 1, 3);
        let (c1, c2) = (r.random_range(1..=3), r.random_range(1..=3));
        Instance {
            inputs: vec![
                normal(r, &[2, c1, dims[0], dims[1], dims[2]], 1.0),
                normal(r, &[2, c2, dims[0], dims[1], dims[2]], 1.0),
            ],
            opts: opts(5e-2, true, None, s),
            f: Box::new(|t, v| t.concat_channels(&[v[0], v[1]])),
            reference: smooth(|a| reference::concat_channels(&[&a[0], &a[1]])),
        }
    })?);
    out.push(run_gradient_case("add", seed, 8, instances, |r, s| {
        let dims = spatial(r, 1, 3);
        let shape = [1, 2, dims[0], dims[1], dims[2]];
        Instance {
            inputs: vec![normal(r, &shape, 1.0), normal(r, &shape, 1.0)],
            opts: opts(5e-2, true, None, s),
            f: Box::new(|t, v| t.add(v[0], v[1])),
            reference: smooth(|a| reference::add(&a[0], &a[1])),
        }
    })?);
    out.push(run_gradient_case("softmax_channels", seed, 9, instances, |r, s| {
        let dims = spatial(r, 1, 3);
        Instance {
            inputs: vec![normal(r, &[2, 3, dims[0], dims[1], dims[2]], 1.5)],
            opts: opts(5e-2, true, None, s),
            f: Box::new(|t, v| t.softmax_channels(v[0])),
            reference: smooth(|a| Ok(reference::softmax_channels(&a[0]))),
        }
    })?);

    let target = |r: &mut Stream, n: usize, dims: [usize; 3]| {
        let s = dims.iter().product::<usize>();
        let labels: Vec<usize> = (0..n * s).map(|_| r.random_range(0..3)).collect();
        Tensor::from_fn(&[n, 3, dims[0], dims[1], dims[2]], |i| {
            let (b, rest) = (i / (3 * s), i % (3 * s));
            let (c, v) = (rest / s, rest % s);
            f32::from(u8::from(labels[b * s + v] == c))
        })
    };
    out.push(run_gradient_case("soft_dice_loss", seed, 10, instances, |r, s| {
        let dims = spatial(r, 2, 4);
        let q = target(r, 1, dims);
        let qa = Array::from(&q);
        Instance {
            inputs: vec![uniform(r, &[1, 3, dims[0], dims[1], dims[2]], 0.05, 0.95)],
            opts: opts(2e-2, false, None, s),
            f: Box::new(move |t, v| soft_dice_loss(t, v[0], &q)),
            reference: Box::new(move |v| Ok((vec![reference::soft_dice(&Array::from(&v[0]), &qa)], 0))),
        }
    })?);
    out.push(run_gradient_case("bce_loss", seed, 11, instances, |r, s| {
        let dims = spatial(r, 2, 4);
        let q = target(r, 1, dims);
        let qa = Array::from(&q);
        Instance {
            inputs: vec![uniform(r, &[1, 3, dims[0], dims[1], dims[2]], 0.2, 0.8)],
            opts: opts(2e-2, false, None, s),
            f: Box::new(move |t, v| bce_loss(t, v[0], &q)),
            reference: Box::new(move |v| Ok((vec![reference::bce(&Array::from(&v[0]), &qa)], 0))),
        }
    })?);
    out.push(run_gradient_case("combined_loss(softmax)", seed, 12, instances, |r, s| {
        let dims = spatial(r, 2, 4);
        let q = target(r, 2, dims);
        let qa = Array::from(&q);
        Instance {
            inputs: vec![normal(r, &[2, 3, dims[0], dims[1], dims[2]], 1.0)],
            opts: opts(5e-2, false, None, s),
            f: Box::new(move |t, v| {
                let p = t.softmax_channels(v[0])?;
                Ok(combined_loss(t, p, &q)?.0)
            }),
            reference: Box::new(move |v| {
                let p = reference::softmax_channels(&Array::from(&v[0]));
                Ok((vec![reference::soft_dice(&p, &qa) + reference::bce(&p, &qa)], 0))
            }),
        }
    })?);

    let slope = 0.01;
    for (case, residual) in [(13u64, false), (14, true)] {
        let name = if residual { "encoder_block (residual)" } else { "encoder_block" };
        out.push(run_gradient_case(name, seed, case, instances, |r, s| {
            let (cin, cout) = (r.random_range(1..=2), r.random_range(2..=3));
            let mut store = ParamStore::default();
            init_encoder_block(&mut store, "enc", cin, cout, residual, slope, r);
            let x = normal(r, &[2, cin, 4, 4, 4], 1.0);
            block_instance(
                store,
                x,
                slope,
                s,
                move |b, x| Ok(encoder_block(b, x, "enc", residual)?.1),
                move |net, x| Ok(net.encoder_block(x, "enc", residual)?.1),
            )
        })?);
    }
    out.push(run_gradient_case("bottleneck (dilated)", seed, 15, instances, |r, s| {
        let c = r.random_range(2..=3);
        let mut store = ParamStore::default();
        init_bottleneck(&mut store, "bott", c, c, 4, slope, r);
        let x = normal(r, &[2, c, 3, 3, 3], 1.0);
        block_instance(
            store,
            x,
            slope,
            s,
            |b, x| bottleneck(b, x, "bott", &[1, 2, 4, 8]),
            |net, x| net.bottleneck(x, "bott", &[1, 2, 4, 8]),
        )
    })?);
    out.push(run_gradient_case("decoder_block", seed, 16, instances, |r, s| {
        let (cin, cskip) = (r.random_range(2..=3), r.random_range(1..=2));
        let mut store = ParamStore::default();
        init_decoder_block(&mut store, "dec", cin, cskip, slope, r);
        let x = normal(r, &[2, cin, 2, 2, 2], 1.0);
        let skip = normal(r, &[2, cskip, 4, 4, 4], 1.0);
        let skip_ref = Array::from(&skip);
        block_instance(
            store,
            x,
            slope,
            s,
            move |b, x| {
                let sk = b.tape.constant(skip.clone());
                decoder_block(b, x, sk, "dec")
            },
            move |net, x| net.decoder_block(x, &skip_ref, "dec"),
        )
    })?);
    out.push(run_gradient_case("deep_supervision_head", seed, 17, instances, |r, s| {
        let c = r.random_range(1..=2);
        let mut store = ParamStore::default();
        store.init_conv("head", 3 * c, 3, 1, 1.0, r);
        store.params.insert("head.bias".into(), normal(r, &[3], 0.5));
        let coarse = normal(r, &[1, c, 1, 1, 1], 1.0);
        let mid = normal(r, &[1, c, 2, 2, 2], 1.0);
        let (coarse_ref, mid_ref) = (Array::from(&coarse), Array::from(&mid));
        let x = normal(r, &[1, c, 4, 4, 4], 1.0);
        let mut inst = block_instance(
            store,
            x,
            slope,
            s,
            move |b, x| {
                let c0 = b.tape.constant(coarse.clone());
                let c1 = b.tape.constant(mid.clone());
                deep_supervision_head(b, &[c0, c1, x], "head")
            },
            move |net, x| net.deep_supervision_head(&[&coarse_ref, &mid_ref, x], "head"),
        );
        inst.opts = opts(5e-2, true, None, s);
        inst
    })?);
    Ok(out)
}

fn random_mask(r: &mut Stream, dims: [usize; 3]) -> BinaryMask {
    // blobs: a random box plus sparse noise, so surfaces are non-trivial
    let n: usize = dims.iter().product();
    let lo: [usize; 3] = std::array::from_fn(|a| r.random_range(0..dims[a]));
    let hi: [usize; 3] = std::array::from_fn(|a| r.random_range(lo[a]..dims[a]));
    let p = r.random_range(0.0..0.2);
    let data = (0..n)
        .map(|i| {
            let c = [i / (dims[1] * dims[2]), (i / dims[2]) % dims[1], i % dims[2]];
            let inside = (0..3).all(|a| c[a] >= lo[a] && c[a] <= hi[a]);
            inside ^ r.random_bool(p)
        })
        .collect();
    BinaryMask::new(dims, data).expect("dims match")
}

/// Optimized vs naive convolution on `conv_configs` random configurations
/// (dilations cycling through 1, 2, 4, 8), and grid NSD vs all-pairs NSD on
/// `nsd_pairs` random mask pairs.
pub fn oracle_suite(seed: u64, conv_configs: usize, nsd_pairs: usize) -> Result<Vec<CheckResult>> {
    let mut conv = CheckResult {
        name: "conv3d vs naive_conv3d".into(),
        instances: conv_configs,
        max_error: 0.0,
        tolerance: CONV_TOLERANCE,
        skipped: 0,
        checked: 0,
    };
    for i in 0..conv_configs {
        let mut r = rng::stream(seed, &[tag::TEST, 100, i as u64]);
        let dilation = [1, 2, 4, 8][i % 4];
        let k = if i % 5 == 4 { 1 } else { 3 };
        let span = dilation * (k - 1) + 1;
        let padding: [usize; 3] = std::array::from_fn(|_| r.random_range(0..=dilation));
        let dims: [usize; 3] = std::array::from_fn(|a| {
            let min = span.saturating_sub(2 * padding[a]).max(1);
            r.random_range(min..=min.max(10))
        });
        let (cin, cout, n) = (r.random_range(1..=4), r.random_range(1..=4), r.random_range(1..=2));
        let x = normal(&mut r, &[n, cin, dims[0], dims[1], dims[2]], 1.0);
        let w = normal(&mut r, &[cout, cin, k, k, k], 0.5);
        let b = normal(&mut r, &[cout], 0.5);
        let fast = crate::tensor::kernels::conv3d_forward(&x, &w, Some(&b), &ConvGeometry { padding, dilation })?;
        let slow = naive_conv3d(&x, &w, Some(&b), padding, dilation)?;
        assert_eq!(fast.shape(), slow.shape());
        for (a, b) in fast.data().iter().zip(slow.data()) {
            conv.max_error = conv.max_error.max(f64::from((a - b).abs()));
        }
        conv.checked += fast.len();
    }

    let mut surf = CheckResult {
        name: "nsd vs brute_nsd".into(),
        instances: nsd_pairs,
        max_error: 0.0,
        tolerance: f64::MIN_POSITIVE,
        skipped: 0,
        checked: 0,
    };
    for i in 0..nsd_pairs {
        let mut r = rng::stream(seed, &[tag::TEST, 101, i as u64]);
        let dims = spatial(&mut r, 1, 16);
        let spacing = std::array::from_fn(|_| [0.5, 1.0, 1.5, 2.0, 3.0][r.random_range(0..5)]);
        let tol = [1.0, 2.5, 4.0][i % 3];
        let (a, b) = (random_mask(&mut r, dims), random_mask(&mut r, dims));
        let fast = nsd(&a, &b, spacing, tol)?;
        let slow = brute_nsd(&a, &b, spacing, tol);
        surf.max_error = surf.max_error.max((fast - slow).abs());
        surf.checked += 1;
    }
    Ok(vec![conv, surf])
}
