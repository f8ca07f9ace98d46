use std::collections::BTreeSet;

use proptest::prelude::*;
use voxseg::data::{
    self, load_labels, load_volume, make_split, nifti, onehot, pad_or_crop, pad_or_crop_labels, vox, zscore_normalize,
    AugmentParams, LabelMap, Placement, Volume,
};
use voxseg::rng;
use voxseg::synth::{gen_case, SynthSpec};
use voxseg::{Error, FormatError};

fn ids(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("case_{i:03}")).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn split_partitions_every_id(n in 10usize..300, seed in any::<u64>()) {
        let all = ids(n);
        let plan = make_split(&all, seed).unwrap();
        prop_assert_eq!(plan.test_ids.len(), n.div_ceil(10));
        prop_assert_eq!(plan.num_folds(), 9);
        let sizes: Vec<usize> = plan.folds.iter().map(Vec::len).collect();
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        let mut seen = BTreeSet::new();
        for id in plan.test_ids.iter().chain(plan.folds.iter().flatten()) {
            prop_assert!(seen.insert(id.clone()), "{} appears twice", id);
        }
        prop_assert_eq!(seen, all.iter().cloned().collect::<BTreeSet<_>>());
        prop_assert_eq!(&plan, &make_split(&all, seed).unwrap());
        for fold in 0..9 {
            let train = plan.train_ids(fold).unwrap();
            let val = plan.val_ids(fold).unwrap();
            prop_assert_eq!(train.len() + val.len() + plan.test_ids.len(), n);
            prop_assert!(val.iter().all(|v| !train.contains(v)));
        }
    }

    #[test]
    fn split_ignores_input_order(n in 10usize..60, seed in any::<u64>()) {
        let mut shuffled = ids(n);
        shuffled.reverse();
        prop_assert_eq!(make_split(&ids(n), seed).unwrap(), make_split(&shuffled, seed).unwrap());
    }

    #[test]
    fn padding_labels_is_exactly_invertible(
        dims in proptest::array::uniform3(1usize..20),
        extra in proptest::array::uniform3(0usize..12),
        seed in any::<u64>(),
    ) {
        let n: usize = dims.iter().product();
        let mut r = rng::stream(seed, &[]);
        let labels: Vec<u8> = (0..n).map(|_| rand::Rng::random_range(&mut r, 0..3)).collect();
        let l = LabelMap::new("c", dims, [1.0; 3], labels).unwrap();
        let target = std::array::from_fn(|a| dims[a] + extra[a]);
        let (padded, placement) = pad_or_crop_labels(&l, target).unwrap();
        prop_assert_eq!(padded.dims, target);
        prop_assert_eq!(padded.labels.iter().filter(|&&v| v != 0).count(), l.labels.iter().filter(|&&v| v != 0).count());
        prop_assert_eq!(placement.inverse(&padded.labels, 0), l.labels);
    }

    #[test]
    fn cropping_then_restoring_keeps_the_centre(
        dims in proptest::array::uniform3(2usize..16),
        cut in proptest::array::uniform3(0usize..6),
    ) {
        let target = std::array::from_fn(|a| dims[a].saturating_sub(cut[a]).max(1));
        let n: usize = dims.iter().product();
        let v = Volume::new("c", dims, [1.0; 3], (0..n).map(|i| i as f32 + 1.0).collect()).unwrap();
        let (cropped, placement) = pad_or_crop(&v, target).unwrap();
        let back = placement.inverse(&cropped.data, 0.0);
        let kept = back.iter().filter(|&&x| x != 0.0).count();
        prop_assert_eq!(kept, target.iter().product::<usize>());
        for (a, b) in back.iter().zip(&v.data) {
            prop_assert!(*a == 0.0 || a == b);
        }
    }

    #[test]
    fn zscore_standardizes(values in proptest::collection::vec(-1e3f32..1e3, 8..400)) {
        let spread = values.iter().cloned().fold(f32::NEG_INFINITY, f32::max) - values.iter().cloned().fold(f32::INFINITY, f32::min);
        prop_assume!(spread > 1e-2);
        let n = values.len();
        let v = Volume::new("c", [1, 1, n], [1.0; 3], values).unwrap();
        let z = zscore_normalize(&v);
        let mean = z.data.iter().map(|&x| f64::from(x)).sum::<f64>() / n as f64;
        let std = (z.data.iter().map(|&x| (f64::from(x) - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
        prop_assert!(mean.abs() < 1e-4, "mean {}", mean);
        prop_assert!((std - 1.0).abs() < 1e-3, "std {}", std);
        let twice = zscore_normalize(&z);
        for (a, b) in twice.data.iter().zip(&z.data) {
            prop_assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn vox_round_trip_is_exact(
        dims in proptest::array::uniform3(1usize..6),
        spacing in proptest::array::uniform3(0.1f64..4.0),
        seed in any::<u64>(),
    ) {
        let n: usize = dims.iter().product();
        let mut r = rng::stream(seed, &[]);
        let data: Vec<f32> = (0..n).map(|_| rand::Rng::random::<f32>(&mut r) * 100.0 - 50.0).collect();
        let meta = vox::Meta::new(vox::Kind::Image, Some("x".into()), dims, spacing);
        let bytes = vox::encode(&meta, &data).unwrap();
        let (m2, d2) = vox::decode(&bytes).unwrap();
        prop_assert_eq!(m2, meta);
        prop_assert_eq!(d2.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), data.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn augmentation_preserves_label_set_and_volume(case in 0usize..1000, seed in any::<u64>()) {
        let spec = SynthSpec { seed: 11, noise_std: 0.0, ..SynthSpec::default() };
        let (v, l) = gen_case(&spec, case % 8).unwrap();
        let mut r = rng::stream(seed, &[]);
        let (v2, l2) = data::augment(&v, &l, &mut r, 10.0, 0.5).unwrap();
        prop_assert_eq!(v2.dims, v.dims);
        let set = |m: &LabelMap| m.labels.iter().copied().collect::<BTreeSet<u8>>();
        prop_assert_eq!(set(&l2), set(&l));
        for class in 1..=2u8 {
            let before = l.labels.iter().filter(|&&c| c == class).count() as f64;
            let after = l2.labels.iter().filter(|&&c| c == class).count() as f64;
            prop_assert!(((after - before) / before).abs() < 0.2, "class {} {} -> {}", class, before, after);
        }
    }
}

#[test]
fn split_examples() {
    let plan = make_split(&ids(263), 3).unwrap();
    assert_eq!(plan.test_ids.len(), 27);
    let mut sizes: Vec<usize> = plan.folds.iter().map(Vec::len).collect();
    sizes.sort_unstable_by(|a, b| b.cmp(a));
    assert_eq!(sizes, [27, 27, 26, 26, 26, 26, 26, 26, 26]);
    let plan = make_split(&ids(100), 3).unwrap();
    assert_eq!(plan.test_ids.len(), 10);
    assert!(plan.folds.iter().all(|f| f.len() == 10));
    let other = make_split(&ids(100), 4).unwrap();
    assert_ne!(plan.test_ids, other.test_ids);
    let plan = make_split(&ids(20), 0).unwrap();
    assert_eq!(plan.test_ids.len(), 2);
    assert!(plan.folds.iter().all(|f| f.len() == 2));
    assert!(matches!(make_split(&ids(9), 0), Err(Error::Config(_))));
    assert!(matches!(plan.val_ids(9), Err(Error::Config(_))));
}

#[test]
fn pad_example_and_identity() {
    let v = Volume::new("c", [35, 50, 35], [1.0; 3], vec![1.0; 35 * 50 * 35]).unwrap();
    let (p, placement) = pad_or_crop(&v, [48, 64, 48]).unwrap();
    assert_eq!(p.dims, [48, 64, 48]);
    assert_eq!(placement.offset, [6, 7, 6]);
    assert_eq!(p.data.iter().filter(|&&x| x == 1.0).count(), v.data.len());
    let (same, id) = pad_or_crop(&v, [35, 50, 35]).unwrap();
    assert_eq!(same, v);
    assert_eq!(id, Placement::centred([35, 50, 35], [35, 50, 35]).unwrap());
    assert_eq!(id.offset, [0, 0, 0]);
}

#[test]
fn zscore_examples() {
    let v = Volume::new("c", [1, 1, 4], [1.0; 3], vec![0.0, 0.0, 4.0, 4.0]).unwrap();
    assert_eq!(zscore_normalize(&v).data, vec![-1.0, -1.0, 1.0, 1.0]);
    let c = Volume::new("c", [1, 2, 2], [1.0; 3], vec![7.0; 4]).unwrap();
    assert_eq!(zscore_normalize(&c).data, vec![0.0; 4]);
}

#[test]
fn onehot_inverts_by_argmax() {
    let labels: Vec<u8> = (0..60).map(|i| (i * 7 % 3) as u8).collect();
    let l = LabelMap::new("c", [3, 4, 5], [1.0; 3], labels).unwrap();
    let t = onehot(&l, 3).unwrap();
    assert_eq!(t.shape(), &[1, 3, 3, 4, 5]);
    let back = LabelMap::from_scores("c", &t, [1.0; 3]).unwrap();
    assert_eq!(back.labels, l.labels);
    for v in 0..60 {
        let s: f32 = (0..3).map(|c| t.data()[c * 60 + v]).sum();
        assert_eq!(s, 1.0);
    }
    let bg = LabelMap::new("c", [1, 1, 2], [1.0; 3], vec![0, 0]).unwrap();
    assert_eq!(&onehot(&bg, 3).unwrap().data()[..2], &[1.0, 1.0]);
    let bad = LabelMap::new("c", [1, 1, 2], [1.0; 3], vec![0, 3]).unwrap();
    assert!(matches!(onehot(&bad, 3), Err(Error::Data(_))));
}

fn smooth_pair() -> (Volume, LabelMap) {
    let n = 32;
    let c = (n as f64 - 1.0) / 2.0;
    let mut data = Vec::new();
    for z in 0..n {
        for y in 0..n {
            for x in 0..n {
                let r2 = ((z as f64 - c).powi(2) + 0.7 * (y as f64 - c).powi(2) + 1.3 * (x as f64 - c).powi(2)) / 36.0;
                data.push((-r2).exp() as f32);
            }
        }
    }
    let labels = data.iter().map(|&v| u8::from(v > 0.5)).collect();
    (
        Volume::new("s", [n; 3], [1.0; 3], data).unwrap(),
        LabelMap::new("s", [n; 3], [1.0; 3], labels).unwrap(),
    )
}

#[test]
fn rotation_round_trip_is_within_interpolation_error() {
    let (v, l) = smooth_pair();
    for axis in 0..3 {
        let mut angles = [0.0; 3];
        angles[axis] = 10f64.to_radians();
        let fwd = AugmentParams { angles, flips: [false; 3] };
        angles[axis] = -angles[axis];
        let back = AugmentParams { angles, flips: [false; 3] };
        let (v1, l1) = fwd.apply(&v, &l).unwrap();
        let (v2, _) = back.apply(&v1, &l1).unwrap();
        let mad = v2.data.iter().zip(&v.data).map(|(a, b)| f64::from((a - b).abs())).sum::<f64>() / v.data.len() as f64;
        assert!(mad < 0.05, "axis {axis}: mean abs diff {mad}");
        assert!(v1.data.iter().zip(&v.data).any(|(a, b)| a != b));
    }
}

#[test]
fn flips_are_exact_involutions() {
    let (v, l) = smooth_pair();
    let flip = AugmentParams { angles: [0.0; 3], flips: [true, false, true] };
    let (v1, l1) = flip.apply(&v, &l).unwrap();
    assert_eq!(l1.labels.iter().filter(|&&c| c == 1).count(), l.labels.iter().filter(|&&c| c == 1).count());
    let (v2, l2) = flip.apply(&v1, &l1).unwrap();
    assert_eq!((v2, l2), (v.clone(), l.clone()));
    assert_eq!(AugmentParams::IDENTITY.apply(&v, &l).unwrap(), (v, l));
}

#[test]
fn files_round_trip_through_both_formats() {
    let dir = tempfile::tempdir().unwrap();
    let dims = [4, 4, 4];
    let data: Vec<f32> = (0..64).map(|i| i as f32 * 0.5).collect();
    let meta = vox::Meta::new(vox::Kind::Image, None, dims, [1.0, 1.5, 2.0]);
    let path = dir.path().join("img_01.vox");
    vox::write_file(&path, &meta, &data).unwrap();
    let v = load_volume(&path).unwrap();
    assert_eq!((v.id.as_str(), v.dims, v.spacing), ("img_01", dims, [1.0, 1.5, 2.0]));
    assert_eq!(v.data, data);
    assert!(matches!(load_labels(&path), Err(Error::Data(_))));

    let labels: Vec<u8> = (0..64).map(|i| (i % 3) as u8).collect();
    let bytes = nifti::encode(dims, [1.0; 3], nifti::Payload::U8(&labels), None).unwrap();
    let npath = dir.path().join("lab_01.nii.gz");
    nifti::write_file(&npath, &bytes).unwrap();
    let l = load_labels(&npath).unwrap();
    assert_eq!((l.id.as_str(), l.dims, l.spacing), ("lab_01", dims, [1.0; 3]));
    assert_eq!(l.labels, labels);

    // truncated payload, wrong magic and unsupported datatype are distinct errors
    let mut short = vox::encode(&meta, &data).unwrap();
    short.truncate(short.len() - 4);
    assert!(matches!(vox::decode(&short), Err(Error::Format(FormatError::Truncated { .. }))));
    let mut magic = vox::encode(&meta, &data).unwrap();
    magic[0] = b'X';
    assert!(matches!(vox::decode(&magic), Err(Error::Format(FormatError::BadMagic { .. }))));
    let mut nshort = bytes.clone();
    nshort.truncate(nshort.len() - 1);
    assert!(matches!(nifti::read_bytes(&nshort), Err(Error::Format(FormatError::Truncated { .. }))));
    let mut ntype = bytes;
    ntype[70..72].copy_from_slice(&128i16.to_le_bytes());
    assert!(matches!(nifti::read_bytes(&ntype), Err(Error::Format(FormatError::UnsupportedDatatype(128)))));
}
