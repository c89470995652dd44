use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use relreason::augment::{augment_batch, grayscale, sample_view, sample_view_traced, AugmentPolicy};
use relreason::dataio::{synth_shapes, FloatImage};

fn noise(h: usize, w: usize, seed: u64) -> FloatImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    FloatImage::new(h, w, 3, (0..h * w * 3).map(|_| rng.gen()).collect()).unwrap()
}

#[test]
fn degenerate_policy_is_identity() {
    let policy = AugmentPolicy::identity();
    assert_eq!((policy.crop_scale, policy.crop_aspect), ([1.0, 1.0], [1.0, 1.0]));
    let img = noise(32, 32, 0);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..20 {
        assert_eq!(sample_view(&img, &policy, &mut rng), img);
    }
}

#[test]
fn grayscale_branch_equalises_channels() {
    let mut img = noise(8, 8, 2);
    grayscale(&mut img);
    for p in img.data.chunks(3) {
        assert!(p[0] == p[1] && p[1] == p[2]);
    }
    let policy = AugmentPolicy::default();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut seen = 0;
    for _ in 0..200 {
        let (view, trace) = sample_view_traced(&noise(16, 16, 4), &policy, &mut rng);
        if trace.grayscale && trace.jitter.is_none() {
            seen += 1;
            assert!(view.data.chunks(3).all(|p| p[0] == p[1] && p[1] == p[2]));
        }
    }
    assert!(seen > 0);
}

#[test]
fn crop_sweep_respects_bounds() {
    let policy = AugmentPolicy::default();
    let img = noise(32, 32, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (mut lo_area, mut hi_area, mut lo_aspect, mut hi_aspect) = (f32::MAX, 0.0f32, f32::MAX, 0.0f32);
    for _ in 0..10_000 {
        let (_, t) = sample_view_traced(&img, &policy, &mut rng);
        lo_area = lo_area.min(t.area_fraction);
        hi_area = hi_area.max(t.area_fraction);
        lo_aspect = lo_aspect.min(t.relative_aspect);
        hi_aspect = hi_aspect.max(t.relative_aspect);
        assert!(t.crop.x >= 0.0 && t.crop.y >= 0.0);
        assert!(t.crop.x + t.crop.w <= 32.0 + 1e-4 && t.crop.y + t.crop.h <= 32.0 + 1e-4);
    }
    let tol = 1e-5;
    assert!(lo_area >= 0.08 - tol && hi_area <= 1.0 + tol, "area [{lo_area}, {hi_area}]");
    assert!(lo_aspect >= 0.75 - tol && hi_aspect <= 4.0 / 3.0 + tol, "aspect [{lo_aspect}, {hi_aspect}]");
    // The sweep actually reaches both ends of the ranges.
    assert!(lo_area < 0.1 && hi_area > 0.95);
    assert!(lo_aspect < 0.77 && hi_aspect > 1.3);
}

#[test]
fn batch_shapes_and_determinism() {
    let batch: Vec<FloatImage> = (0..4).map(|i| noise(32, 32, 10 + i)).collect();
    let policy = AugmentPolicy::default();
    let run = |seed| augment_batch(&batch, &policy, 3, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    let views = run(7);
    assert_eq!(views.len(), 3);
    for v in &views {
        assert_eq!(v.len(), 4);
        for (a, b) in v.iter().zip(&batch) {
            assert_eq!((a.height, a.width, a.channels), (b.height, b.width, b.channels));
        }
    }
    assert_eq!(views, run(7));
    assert_ne!(views, run(8));
    assert!(augment_batch(&batch, &policy, 0, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
}

#[test]
fn views_of_the_same_image_differ() {
    let ds = synth_shapes(1000, 4, 32, 11).unwrap();
    let batch: Vec<FloatImage> = (0..ds.len()).map(|i| ds.float_image(i)).collect();
    let views = augment_batch(&batch, &AugmentPolicy::default(), 2, &mut ChaCha8Rng::seed_from_u64(12)).unwrap();
    let differ = views[0].iter().zip(&views[1]).filter(|(a, b)| a != b).count();
    assert!(differ as f64 >= 0.99 * batch.len() as f64, "{differ} of {}", batch.len());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn views_stay_in_unit_range(seed in any::<u64>(), side in 4usize..20) {
        let img = noise(side, side + 3, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let view = sample_view(&img, &AugmentPolicy::default(), &mut rng);
        prop_assert_eq!((view.height, view.width), (side, side + 3));
        prop_assert!(view.data.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn views_are_a_function_of_the_seed(seed in any::<u64>()) {
        let img = noise(12, 12, 1);
        let a = sample_view(&img, &AugmentPolicy::default(), &mut ChaCha8Rng::seed_from_u64(seed));
        let b = sample_view(&img, &AugmentPolicy::default(), &mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(a, b);
    }
}
