use std::collections::BTreeMap;

use odigen_core::checkpoint::{decode, encode, StoredTensor, TensorFile};
use odigen_core::evalkit::{continuity_metrics, fid};
use odigen_core::gan::{continuity_pad_backward, continuity_pad_with, PadColumns};
use odigen_core::geometry::{dir_from_equirect, equirect_from_dir, extract_snapshot, CameraPose, SnapshotGeometry};
use odigen_core::image::{EquirectImage, Image};
use odigen_core::nn::Tensor4;
use proptest::prelude::*;

fn tensor(shape: (usize, usize, usize, usize), vals: &[f64]) -> Tensor4<f64> {
    let (_, c, h, w) = shape;
    Tensor4::from_fn(shape, |n, ci, y, x| vals[((n * c + ci) * h + y) * w + x])
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn padding_backward_is_the_adjoint(
        h in 1usize..6,
        w in 4usize..12,
        side in 1usize..4,
        seed in any::<u64>(),
        vals in prop::collection::vec(-1.0f64..1.0, 2 * 2 * 8 * 20),
    ) {
        prop_assume!(2 * side < w);
        let cols: Vec<PadColumns> = (0..2)
            .map(|i| PadColumns { top: (seed as usize + i) % w, bottom: (seed as usize / 7 + 3 * i) % w })
            .collect();
        let x = tensor((2, 2, h, w), &vals);
        let g = tensor((2, 2, h + 2, w + 2 * side), &vals[vals.len() - 2 * 2 * (h + 2) * (w + 2 * side)..]);
        let px = continuity_pad_with(&x, side, &cols).unwrap();
        let bg = continuity_pad_backward(&g, side, &cols).unwrap();
        let lhs: f64 = px.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(bg.data()).map(|(a, b)| a * b).sum();
        prop_assert!((lhs - rhs).abs() < 1e-9 * (1.0 + lhs.abs()));
    }

    #[test]
    fn continuity_is_mirror_invariant(w in 2usize..20, h in 1usize..10, seed in any::<u64>()) {
        let v = |x: usize, y: usize, c: usize| ((seed.wrapping_mul(31) as usize + x * 7 + y * 13 + c * 5) % 97) as f32 / 96.0;
        let img = Image::from_fn(w, h, 3, |x, y, px| (0..3).for_each(|c| px[c] = v(x, y, c)));
        let flipped = Image::from_fn(w, h, 3, |x, y, px| (0..3).for_each(|c| px[c] = v(w - 1 - x, y, c)));
        let (a, b) = (continuity_metrics(&img), continuity_metrics(&flipped));
        prop_assert!((a.sigma_top - b.sigma_top).abs() < 1e-9);
        prop_assert!((a.sigma_bottom - b.sigma_bottom).abs() < 1e-9);
        prop_assert!((a.sigma_lr - b.sigma_lr).abs() < 1e-9);
    }

    #[test]
    fn checkpoint_round_trip(
        data in prop::collection::vec(any::<f32>(), 0..40),
        key in "[a-z_]{1,12}",
        value in "[ -~]{0,20}",
    ) {
        let mut config = BTreeMap::new();
        config.insert(key, value.trim().to_string());
        let file = TensorFile { config, tensors: vec![StoredTensor { name: "t".into(), shape: vec![data.len()], data }] };
        let back = decode(&encode(&file).unwrap()).unwrap();
        let bits = |f: &TensorFile| f.tensors[0].data.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&back), bits(&file));
        prop_assert_eq!(back.config, file.config);
    }

    #[test]
    fn equirect_round_trip(u in 0.0f64..256.0, v in 0.5f64..127.5) {
        let (u2, v2) = equirect_from_dir(dir_from_equirect(u, v, 256, 128).unwrap(), 256, 128).unwrap();
        let du = (u - u2).abs();
        prop_assert!(du.min(256.0 - du) < 1e-9);
        prop_assert!((v - v2).abs() < 1e-9);
    }

    #[test]
    fn constant_panorama_gives_constant_view(lon in -180.0f64..180.0, lat in -80.0f64..80.0, value in 0.0f32..1.0) {
        let odi = EquirectImage::filled(64, 32, 3, value).unwrap();
        let view = extract_snapshot(&odi, CameraPose::from_degrees(lon, lat).unwrap(), SnapshotGeometry::scaled_for_width(64)).unwrap();
        prop_assert!(view.data().iter().all(|p| (p - value).abs() < 1e-6));
    }

    #[test]
    fn fid_is_symmetric_and_non_negative(vals in prop::collection::vec(-3.0f64..3.0, 60)) {
        let a: Vec<Vec<f64>> = vals[..30].chunks(3).map(<[f64]>::to_vec).collect();
        let b: Vec<Vec<f64>> = vals[30..].chunks(3).map(<[f64]>::to_vec).collect();
        let (ab, ba) = (fid(&a, &b).unwrap().value, fid(&b, &a).unwrap().value);
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - ba).abs() < 1e-6 * (1.0 + ab));
    }
}
