use proptest::prelude::*;
use voxseg::synth::oracle::naive_conv3d;
use voxseg::synth::reference::{self, Array};
use voxseg::tensor::{gradcheck, gradcheck_with_reference, BatchNormState, ConvGeometry, GradcheckOptions, NormMode};
use voxseg::{Tape, Tensor};

fn tensor(shape: &[usize], seed: u64, scale: f32) -> Tensor {
    let mut r = voxseg::rng::stream(seed, &[voxseg::rng::tag::TEST]);
    Tensor::from_fn(shape, |_| rand::Rng::random_range(&mut r, -scale..scale))
}

fn dims5() -> impl Strategy<Value = [usize; 5]> {
    (1usize..3, 1usize..4, 1usize..4, 1usize..4, 1usize..4).prop_map(|(n, c, d, h, w)| [n, c, d, h, w])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn upsample_backward_is_the_adjoint(shape in dims5(), factor in 1usize..4, seed in any::<u64>()) {
        let x = tensor(&shape, seed, 1.0);
        let mut tape = Tape::new();
        let xv = tape.param(x.clone());
        let up = tape.upsample3d(xv, factor).unwrap();
        let y = tensor(tape.value(up).shape(), seed ^ 1, 1.0);
        let lhs = tape.value(up).dot(&y).unwrap();
        let loss = tape.dot_const(up, y.data().to_vec()).unwrap();
        let g = tape.backward(loss).unwrap();
        let rhs = x.dot(g.get(xv).unwrap()).unwrap();
        prop_assert!((lhs - rhs).abs() < 1e-4 * lhs.abs().max(1.0), "{} vs {}", lhs, rhs);
    }

    #[test]
    fn softmax_rows_sum_to_one_for_large_logits(shape in dims5(), scale in prop_oneof![Just(1.0f32), Just(100.0), Just(1e4)], seed in any::<u64>()) {
        let x = tensor(&shape, seed, scale);
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let p = tape.softmax_channels(xv).unwrap();
        let p = tape.value(p);
        prop_assert!(p.all_finite());
        let [n, c, d, h, w] = shape;
        let s = d * h * w;
        for b in 0..n {
            for v in 0..s {
                let total: f64 = (0..c).map(|ch| f64::from(p.data()[(b * c + ch) * s + v])).sum();
                prop_assert!((total - 1.0).abs() < 1e-6, "{}", total);
            }
        }
    }

    #[test]
    fn maxpool_backward_conserves_mass(shape in dims5(), seed in any::<u64>()) {
        let shape = [shape[0], shape[1], 2 * shape[2], 2 * shape[3], 2 * shape[4]];
        let mut tape = Tape::new();
        let xv = tape.param(tensor(&shape, seed, 1.0));
        let y = tape.maxpool3d(xv).unwrap();
        let w = tensor(tape.value(y).shape(), seed ^ 7, 1.0);
        let loss = tape.dot_const(y, w.data().to_vec()).unwrap();
        let g = tape.backward(loss).unwrap();
        prop_assert!((g.get(xv).unwrap().sum() - w.sum()).abs() < 1e-5);
    }

    #[test]
    fn conv_matches_naive_reference(
        shape in dims5(),
        cout in 1usize..4,
        dilation in prop_oneof![Just(1usize), Just(2), Just(4), Just(8)],
        same in any::<bool>(),
        seed in any::<u64>(),
    ) {
        let shape = [shape[0], shape[1], shape[2] + 2, shape[3] + 2, shape[4] + 2];
        let geom = if same { ConvGeometry::same3(dilation) } else { ConvGeometry { padding: [dilation; 3], dilation: 1 } };
        let x = tensor(&shape, seed, 1.0);
        let w = tensor(&[cout, shape[1], 3, 3, 3], seed ^ 3, 1.0);
        let b = tensor(&[cout], seed ^ 5, 1.0);
        let mut tape = Tape::new();
        let (xv, wv, bv) = (tape.constant(x.clone()), tape.constant(w.clone()), tape.constant(b.clone()));
        let y = tape.conv3d(xv, wv, Some(bv), geom).unwrap();
        let want = naive_conv3d(&x, &w, Some(&b), geom.padding, geom.dilation).unwrap();
        prop_assert_eq!(tape.value(y).shape(), want.shape());
        if same {
            prop_assert_eq!(&tape.value(y).shape()[2..], &shape[2..]);
        }
        for (a, e) in tape.value(y).data().iter().zip(want.data()) {
            prop_assert!((a - e).abs() < 1e-4);
        }
    }

    #[test]
    fn conv_backward_is_the_adjoint(
        shape in dims5(),
        cout in 1usize..4,
        dilation in prop_oneof![Just(1usize), Just(2), Just(4)],
        padding in prop_oneof![Just(None), Just(Some(0usize)), Just(Some(9))],
        seed in any::<u64>(),
    ) {
        // `None` pads to keep dims; 9 is wider than any kernel span here
        let shape = [shape[0], shape[1], shape[2] + 2, shape[3] * 4, shape[4] + 2];
        let geom = match padding {
            None => ConvGeometry::same3(dilation),
            Some(p) => ConvGeometry { padding: [p; 3], dilation },
        };
        let x = tensor(&shape, seed, 1.0);
        let w = tensor(&[cout, shape[1], 3, 3, 3], seed ^ 3, 1.0);
        let want = naive_conv3d(&x, &w, None, geom.padding, geom.dilation);
        prop_assume!(want.is_ok());
        let mut tape = Tape::new();
        let (xv, wv) = (tape.param(x.clone()), tape.param(w.clone()));
        let y = tape.conv3d(xv, wv, None, geom).unwrap();
        let r = tensor(tape.value(y).shape(), seed ^ 9, 1.0);
        // the conv is bilinear, so <conv(x, w), r> = <x, gx> = <w, gw>
        let lhs = tape.value(y).dot(&r).unwrap();
        let loss = tape.dot_const(y, r.data().to_vec()).unwrap();
        let g = tape.backward(loss).unwrap();
        let via_x = x.dot(g.get(xv).unwrap()).unwrap();
        let via_w = w.dot(g.get(wv).unwrap()).unwrap();
        let tol = 1e-4 * lhs.abs().max(1.0) * (shape[1] * 27) as f64;
        prop_assert!((lhs - via_x).abs() < tol, "{} vs {}", lhs, via_x);
        prop_assert!((lhs - via_w).abs() < tol, "{} vs {}", lhs, via_w);
    }

    #[test]
    fn batchnorm_running_variance_stays_non_negative(shape in dims5(), seed in any::<u64>()) {
        let c = shape[1];
        let mut state = BatchNormState::new(c);
        for step in 0..3 {
            let mut tape = Tape::new();
            let x = tape.constant(tensor(&shape, seed + step, 5.0));
            let g = tape.constant(Tensor::full(&[c], 1.0));
            let b = tape.constant(Tensor::zeros(&[c]));
            let y = tape.batchnorm3d(x, g, b, &mut state, NormMode::Train).unwrap();
            prop_assert!(tape.value(y).all_finite());
        }
        prop_assert!(state.running_var.iter().all(|&v| v >= 0.0));
    }
}

#[test]
fn every_reachable_leaf_gets_a_gradient() {
    let mut tape = Tape::new();
    let x = tape.param(tensor(&[1, 2, 4, 4, 4], 1, 1.0));
    let w = tape.param(tensor(&[3, 2, 3, 3, 3], 2, 0.3));
    let unused = tape.param(tensor(&[3], 3, 1.0));
    let frozen = tape.constant(tensor(&[3], 4, 1.0));
    let y = tape.conv3d(x, w, Some(frozen), ConvGeometry::same3(1)).unwrap();
    let y = tape.leaky_relu(y, 0.01);
    let loss = tape.sum(y).unwrap();
    let g = tape.backward(loss).unwrap();
    assert!(g.get(x).is_some() && g.get(w).is_some());
    assert!(g.get(unused).is_none());
    assert!(g.get(frozen).is_none());
}

#[test]
fn plain_gradcheck_examples() {
    let opts = GradcheckOptions::default();
    let x = Tensor::from_fn(&[2, 3, 4], |i| if i % 2 == 0 { 0.5 + i as f32 * 0.1 } else { -0.5 - i as f32 * 0.1 });
    let leaky = gradcheck(|t, v| Ok(t.leaky_relu(v[0], 0.01)), &[x], &opts).unwrap();
    assert!(leaky.max_rel_error < 1e-3, "{leaky:?}");

    let a = tensor(&[2, 3, 4], 5, 1.0);
    let b = tensor(&[2, 3, 4], 6, 1.0);
    let add = gradcheck(|t, v| t.add(v[0], v[1]), &[a, b], &opts).unwrap();
    assert!(add.max_rel_error < 1e-4, "{add:?}");

    let x = tensor(&[1, 2, 4, 4, 4], 7, 1.0);
    let w = tensor(&[2, 2, 3, 3, 3], 8, 0.5);
    let bias = tensor(&[2], 9, 0.5);
    // the numeric side differentiates the f64 reference; f32 rounding of the
    // 128 summed outputs would otherwise dominate the smallest entries
    let conv = gradcheck_with_reference(
        |t, v| t.conv3d(v[0], v[1], Some(v[2]), ConvGeometry::same3(1)),
        Some(|v: &[Tensor]| {
            let bias: Vec<f64> = v[2].data().iter().map(|&b| f64::from(b)).collect();
            let y = reference::conv3d(&Array::from(&v[0]), &Array::from(&v[1]), Some(&bias), [1; 3], 1)?;
            Ok((y.data, 0))
        }),
        &[x, w, bias],
        &opts,
    )
    .unwrap();
    assert_eq!(conv.checked, 128 + 108 + 2);
    assert!(conv.max_rel_error < 1e-2, "{conv:?}");
}

#[test]
fn softmax_of_extreme_logits() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::new(vec![1, 3, 1, 1, 1], vec![1000.0, 0.0, 0.0]).unwrap());
    let p = tape.softmax_channels(x).unwrap();
    assert_eq!(tape.value(p).data(), &[1.0, 0.0, 0.0]);
    let x = tape.constant(Tensor::full(&[1, 3, 1, 1, 1], -1e4));
    let p = tape.softmax_channels(x).unwrap();
    assert!(tape.value(p).data().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-7));
}
