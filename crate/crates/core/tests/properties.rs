use std::collections::BTreeSet;

use cxinpaint_core::data::{
    central_region, composite, denormalize, make_masked, normalize_pixel, quantize, split_dataset,
};
use cxinpaint_core::metrics::{diff_map, mse, psnr_from_mse, ssim};
use cxinpaint_core::{Rng, Tensor};
use image::GrayImage;
use proptest::prelude::*;

fn plane(side: usize) -> impl Strategy<Value = Tensor<f64>> {
    prop::collection::vec(0u8..=255, side * side)
        .prop_map(move |v| Tensor::new(&[1, side, side], v.into_iter().map(f64::from).collect()).unwrap())
}

#[test]
fn every_byte_survives_normalization() {
    for p in 0..=255u8 {
        let v = normalize_pixel(p);
        assert!((-1.0..=1.0).contains(&v));
        assert_eq!(quantize(v), p);
        assert!((denormalize(v) - p as f64).abs() < 1e-9);
    }
}

proptest! {
    #[test]
    fn reshape_round_trips(rows in 1usize..6, cols in 1usize..6, seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let t = Tensor::<f64>::from_fn(&[rows, cols], |_| rng.uniform());
        let flat = t.reshape(&[rows * cols]).unwrap();
        prop_assert_eq!(flat.data(), t.data());
        prop_assert_eq!(flat.reshape(&[rows, cols]).unwrap(), t.clone());
        prop_assert!(t.reshape(&[rows * cols + 1]).is_err());
    }

    #[test]
    fn mse_is_a_symmetric_premetric(a in plane(8), b in plane(8)) {
        let ab = mse(&a, &b).unwrap();
        prop_assert_eq!(ab, mse(&b, &a).unwrap());
        prop_assert!(ab >= 0.0);
        prop_assert_eq!(mse(&a, &a).unwrap(), 0.0);
        prop_assert_eq!(ab == 0.0, a == b);
    }

    #[test]
    fn psnr_falls_as_error_grows(x in 1e-6f64..1e5, factor in 1.0001f64..100.0) {
        prop_assert!(psnr_from_mse(x * factor) < psnr_from_mse(x));
    }

    #[test]
    fn ssim_is_symmetric_and_bounded(a in plane(12), b in plane(12)) {
        let ab = ssim(&a, &b).unwrap();
        prop_assert!((ab - ssim(&b, &a).unwrap()).abs() < 1e-12);
        prop_assert!(ab <= 1.0 + 1e-12);
        prop_assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn diff_map_is_symmetric_and_zero_on_identity(
        a in prop::collection::vec(any::<u8>(), 36),
        b in prop::collection::vec(any::<u8>(), 36),
    ) {
        let ia = GrayImage::from_raw(6, 6, a).unwrap();
        let ib = GrayImage::from_raw(6, 6, b).unwrap();
        prop_assert_eq!(diff_map(&ia, &ib).unwrap(), diff_map(&ib, &ia).unwrap());
        prop_assert!(diff_map(&ia, &ia).unwrap().pixels().all(|p| p.0[0] == 0));
    }

    #[test]
    fn masking_partitions_every_patch(half in 1usize..12, fill in -1.0f64..1.0, seed in any::<u64>()) {
        let side = 2 * half;
        let mut rng = Rng::new(seed);
        let patch = Tensor::<f64>::from_fn(&[1, side, side], |_| rng.uniform_range(-1.0, 1.0));
        let m = make_masked(&patch, fill).unwrap();
        let (off, inner) = central_region(side);
        prop_assert_eq!(m.target.shape(), &[1, 1, inner, inner]);
        prop_assert_eq!(m.mask.sum().unwrap(), (inner * inner) as f64);
        for y in 0..side {
            for x in 0..side {
                let inside = (off..off + inner).contains(&y) && (off..off + inner).contains(&x);
                let c = m.context.get(&[0, 0, y, x]).unwrap();
                prop_assert_eq!(c, if inside { fill } else { patch.get(&[0, y, x]).unwrap() });
                prop_assert_eq!(m.mask.get(&[0, 0, y, x]).unwrap(), if inside { 1.0 } else { 0.0 });
            }
        }
        let rebuilt = composite(&m.context, &m.target).unwrap();
        prop_assert_eq!(rebuilt.data(), patch.data());
    }

    #[test]
    fn splits_are_disjoint_exhaustive_and_keep_groups_together(
        n in 1usize..300,
        groups in 1usize..40,
        val in 0.0f64..0.4,
        seed in any::<u64>(),
    ) {
        let items: Vec<usize> = (0..n).collect();
        let group = |i: &usize| i % groups;
        let (a, b, c) = split_dataset(items, group, [1.0 - val - 0.1, val, 0.1], &mut Rng::new(seed)).unwrap();
        let mut all: Vec<usize> = a.iter().chain(&b).chain(&c).copied().collect();
        all.sort();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        let keys = |s: &[usize]| s.iter().map(group).collect::<BTreeSet<_>>();
        let (ka, kb, kc) = (keys(&a), keys(&b), keys(&c));
        prop_assert!(ka.is_disjoint(&kb) && ka.is_disjoint(&kc) && kb.is_disjoint(&kc));
    }

    #[test]
    fn rng_streams_resume_from_saved_state(seed in any::<u64>(), skip in 0usize..50) {
        let mut a = Rng::new(seed);
        for _ in 0..skip {
            a.next_u64();
        }
        let mut b = Rng::from_state(a.state());
        let xs: Vec<u64> = (0..20).map(|_| a.next_u64()).collect();
        let ys: Vec<u64> = (0..20).map(|_| b.next_u64()).collect();
        prop_assert_eq!(xs, ys);
        let mut c = Rng::new(seed);
        let mut d = Rng::new(seed);
        prop_assert_eq!(c.normal(0.0, 1.0).unwrap(), d.normal(0.0, 1.0).unwrap());
    }
}
