use std::collections::BTreeSet;

use proptest::prelude::*;
use voxseg::losses::combined_loss;
use voxseg::nn::blocks::{bottleneck, encoder_block, init_bottleneck, init_encoder_block};
use voxseg::nn::{Binder, Model, ModelConfig, ParamStore, Variant};
use voxseg::rng;
use voxseg::{Tape, Tensor};

/// Parameter count of the base-8 proposed network, recorded when the
/// architecture was fixed.
const PROPOSED_BASE8_PARAMS: usize = 2_361_635;

fn config(variant: Variant) -> ModelConfig {
    ModelConfig::default().with_base_channels(8).with_variant(variant)
}

fn input(dims: [usize; 3], seed: u64) -> Tensor {
    let mut r = rng::stream(seed, &[rng::tag::TEST]);
    Tensor::from_fn(&[1, 1, dims[0], dims[1], dims[2]], |_| rand::Rng::random_range(&mut r, -1.0f32..1.0))
}

#[test]
fn parameter_count_is_frozen() {
    let m = Model::build(config(Variant::Proposed), 0).unwrap();
    assert_eq!(m.param_count(), PROPOSED_BASE8_PARAMS);
    let again = Model::build(config(Variant::Proposed), 99).unwrap();
    assert_eq!(m.param_shapes(), again.param_shapes());
}

#[test]
fn proposed_and_dilated_differ_only_in_head_and_projections() {
    let proposed = Model::build(config(Variant::Proposed), 0).unwrap();
    let dilated = Model::build(config(Variant::Unet3dDilated), 0).unwrap();
    let names = |m: &Model| m.param_shapes().into_iter().collect::<BTreeSet<_>>();
    let (p, d) = (names(&proposed), names(&dilated));
    let only_p: Vec<String> = p.difference(&d).map(|(n, _)| n.clone()).collect();
    let only_d: Vec<String> = d.difference(&p).map(|(n, _)| n.clone()).collect();
    let mut expected_p: Vec<String> = (0..4)
        .flat_map(|l| [format!("enc{l}.proj.bias"), format!("enc{l}.proj.weight")])
        .chain(["ds_head.bias".into(), "ds_head.weight".into()])
        .collect();
    expected_p.sort();
    assert_eq!(only_p, expected_p);
    assert_eq!(only_d, ["final.bias", "final.weight"]);

    // encoder convolutions, norms and the bottleneck are shared exactly
    let body = |m: &Model| -> usize {
        m.param_shapes()
            .iter()
            .filter(|(n, _)| (n.starts_with("enc") && !n.contains(".proj.")) || n.starts_with("bott."))
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    };
    assert_eq!(body(&proposed), body(&dilated));
    let proj: usize = [8 + 8, 8 * 16 + 16, 16 * 32 + 32, 32 * 64 + 64].iter().sum();
    let head = 120 * 3 + 3;
    let final_conv = 8 * 3 + 3;
    assert_eq!(proposed.param_count() - dilated.param_count(), proj + head - final_conv);

    let plain = Model::build(config(Variant::Unet3d), 0).unwrap();
    let bott = |m: &Model| m.param_shapes().iter().filter(|(n, _)| n.starts_with("bott.conv")).count();
    assert_eq!((bott(&plain), bott(&dilated)), (4, 8));
}

#[test]
fn deep_supervision_reaches_every_decoder_level_directly() {
    let mut lengths = Vec::new();
    for variant in [Variant::Proposed, Variant::Unet3d] {
        let mut model = Model::build(config(variant), 3).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(input([16, 16, 16], 1));
        let out = model.forward_train(&mut tape, x).unwrap();
        let probs = tape.softmax_channels(out.logits).unwrap();
        let target = Tensor::from_fn(&[1, 3, 16, 16, 16], |i| f32::from(u8::from(i / 4096 == (i % 4096) % 3)));
        let (loss, _) = combined_loss(&mut tape, probs, &target).unwrap();
        let grads = tape.backward(loss).unwrap();
        for l in 0..4 {
            let w = out.bindings[&format!("dec{l}.conv1.weight")];
            let g = grads.get(w).expect("decoder weights receive a gradient");
            assert!(g.data().iter().any(|&v| v != 0.0), "{variant}: dec{l} gradient is zero");
        }
        let dist = tape.path_lengths(loss);
        let per_level: Vec<usize> = out.decoder_outputs.iter().map(|v| dist[v.index()].unwrap()).collect();
        lengths.push(per_level);
    }
    let (proposed, plain) = (&lengths[0], &lengths[1]);
    // deepest first: with the head every level is a few ops from the loss
    assert!(proposed.iter().max().unwrap() - proposed.iter().min().unwrap() <= 1, "{proposed:?}");
    // without it the deeper levels only reach the loss through every shallower decoder block
    for w in plain.windows(2) {
        assert!(w[0] >= w[1] + 8, "{plain:?}");
    }
    assert!(plain[0] > proposed.iter().max().unwrap() + 2 * 8, "{plain:?} vs {proposed:?}");
}

/// Extent along each axis of the response to a centred unit impulse through a
/// linearized bottleneck: all-ones kernels, identity norms, slope 1.
fn impulse_extent(dilations: &[usize]) -> [usize; 3] {
    let mut store = ParamStore::default();
    init_bottleneck(&mut store, "b", 1, 1, dilations.len(), 1.0, &mut rng::stream(0, &[]));
    for (name, t) in store.params.iter_mut() {
        if name.ends_with(".weight") {
            *t = Tensor::full(t.shape(), 1.0);
        }
    }
    let n = 41;
    let c = n / 2;
    let mut x = Tensor::zeros(&[1, 1, n, n, n]);
    x.data_mut()[(c * n + c) * n + c] = 1.0;
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let y = {
        let mut b = Binder::eval(&mut tape, &store, 1.0);
        bottleneck(&mut b, xv, "b", dilations).unwrap()
    };
    let out = tape.value(y).data();
    let mut extent = [0; 3];
    for (axis, e) in extent.iter_mut().enumerate() {
        let hit: Vec<usize> = (0..n)
            .filter(|&i| {
                let mut p = [c; 3];
                p[axis] = i;
                out[(p[0] * n + p[1]) * n + p[2]] != 0.0
            })
            .collect();
        *e = hit.last().unwrap() - hit.first().unwrap();
    }
    extent
}

#[test]
fn dilated_bottleneck_widens_the_receptive_field() {
    let dilated = impulse_extent(&[1, 2, 4, 8]);
    let plain = impulse_extent(&[1, 1]);
    assert_eq!(dilated, [30; 3]);
    assert_eq!(plain, [4; 3]);
    for axis in 0..3 {
        assert_eq!(dilated[axis] - plain[axis], 2 * (1 + 2 + 4 + 8) - 2 * (1 + 1));
    }
}

#[test]
fn zeroed_encoder_reduces_to_projection_and_pooling() {
    let mut store = ParamStore::default();
    init_encoder_block(&mut store, "e", 2, 4, true, 0.01, &mut rng::stream(5, &[]));
    for (name, t) in store.params.iter_mut() {
        if name.starts_with("e.conv") || name.ends_with(".beta") {
            *t = Tensor::zeros(t.shape());
        }
    }
    let x = Tensor::from_fn(&[1, 2, 4, 4, 4], |i| ((i * 37) % 11) as f32 - 5.0);
    let w = store.params["e.proj.weight"].clone();
    let bias = store.params["e.proj.bias"].clone();
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let (skip, pooled) = {
        let mut b = Binder::eval(&mut tape, &store, 0.01);
        encoder_block(&mut b, xv, "e", true).unwrap()
    };
    let skip = tape.value(skip).clone();
    for co in 0..4 {
        for v in 0..64 {
            let want: f32 = bias.data()[co] + (0..2).map(|ci| w.data()[co * 2 + ci] * x.data()[ci * 64 + v]).sum::<f32>();
            assert!((skip.data()[co * 64 + v] - want).abs() < 1e-5);
        }
    }
    let pooled = tape.value(pooled);
    assert_eq!(pooled.shape(), &[1, 4, 2, 2, 2]);
    for co in 0..4 {
        for (z, y, xx) in (0..8).map(|i| (i / 4, i / 2 % 2, i % 2)) {
            let mut m = f32::NEG_INFINITY;
            for k in 0..8 {
                let (dz, dy, dx) = (k / 4, k / 2 % 2, k % 2);
                m = m.max(skip.data()[co * 64 + ((2 * z + dz) * 4 + 2 * y + dy) * 4 + 2 * xx + dx]);
            }
            assert_eq!(pooled.data()[co * 8 + (z * 2 + y) * 2 + xx], m);
        }
    }
}

#[test]
fn eval_forward_is_pure_and_finite() {
    let model = Model::build(config(Variant::Proposed), 4).unwrap();
    let x = input([32, 64, 32], 2);
    let a = model.predict(&x).unwrap();
    let b = model.predict(&x).unwrap();
    assert_eq!(a.shape(), &[1, 3, 32, 64, 32]);
    assert!(a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
    assert_eq!(model, Model::build(config(Variant::Proposed), 4).unwrap());
    let zeros = model.predict(&Tensor::zeros(&[1, 1, 16, 16, 16])).unwrap();
    assert!(zeros.all_finite());
    assert!(matches!(model.predict(&Tensor::zeros(&[1, 1, 16, 24, 16])), Err(voxseg::Error::Dimension(_))));
}

#[test]
fn zero_head_gives_uniform_probabilities() {
    let mut model = Model::build(config(Variant::Proposed), 4).unwrap();
    for name in ["ds_head.weight", "ds_head.bias"] {
        let t = &model.store.params[name];
        let zeros = Tensor::zeros(t.shape());
        model.store.params.insert(name.into(), zeros);
    }
    let mut tape = Tape::new();
    let x = tape.constant(input([16, 16, 16], 3));
    let out = model.forward(&mut tape, x).unwrap();
    let p = tape.softmax_channels(out.logits).unwrap();
    assert!(tape.value(p).data().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-7));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn every_variant_keeps_spatial_shape(k in proptest::array::uniform3(1usize..3), v in 0usize..3) {
        let variant = Variant::ALL[v];
        let model = Model::build(config(variant), 0).unwrap();
        let dims = k.map(|k| 16 * k);
        let out = model.predict(&input(dims, 0)).unwrap();
        prop_assert_eq!(out.shape(), &[1, 3, dims[0], dims[1], dims[2]]);
    }
}
