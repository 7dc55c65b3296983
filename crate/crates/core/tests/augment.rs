use std::collections::HashMap;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use shadow_defense::augment::{make_example, quadruplicate, Affine, AugmentConfig, FourChannelImage};
use shadow_defense::color::RgbImage;
use shadow_defense::data::{generate_synthetic, Sample, SyntheticSpec};
use shadow_defense::profiles::{compute_profile, ProfileKind, ProfileMap};

fn samples(n_per_class: usize) -> Vec<Sample> {
    let ds = generate_synthetic(&SyntheticSpec {
        class_count: 4,
        samples_per_class: n_per_class,
        ..SyntheticSpec::default()
    })
    .unwrap();
    ds.train.into_iter().chain(ds.test).collect()
}

fn off(kind: ProfileKind) -> AugmentConfig {
    AugmentConfig {
        profile_kind: kind,
        adv: false,
        transform: false,
        ..AugmentConfig::default()
    }
}

#[test]
fn flags_off_keeps_rgb_and_profiles_the_source() {
    let s = &samples(1)[0];
    for kind in [ProfileKind::AdaThresh, ProfileKind::Edges] {
        let cfg = off(kind);
        let out = make_example(&s.image, &s.mask, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(out.rgb_image(), s.image);
        let profile = compute_profile(&s.image, kind, &cfg.profile).unwrap();
        assert_eq!(out.profile(), profile.as_raw());
    }
}

#[test]
fn unit_strength_shadow_is_identity() {
    let s = &samples(1)[1];
    let cfg = AugmentConfig {
        adv: true,
        transform: false,
        k_range: [1.0, 1.0],
        ..AugmentConfig::default()
    };
    for seed in 0..10 {
        let out = make_example(&s.image, &s.mask, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        assert_eq!(out.rgb_image(), s.image);
    }
}

#[test]
fn seeded_examples_are_reproducible() {
    let s = &samples(1)[2];
    let cfg = AugmentConfig::default();
    let a = make_example(&s.image, &s.mask, &cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let b = make_example(&s.image, &s.mask, &cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    assert_eq!(a, b);
    let bits = |img: &FourChannelImage| img.rgb().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a), bits(&b));
}

#[test]
fn quadruplicate_sizes_and_labels() {
    let src: Vec<Sample> = samples(3).into_iter().take(10).collect();
    let out = quadruplicate(&src, &AugmentConfig::default()).unwrap();
    assert_eq!(out.len(), 40);
    for combo in [(false, false), (false, true), (true, false), (true, true)] {
        assert_eq!(out.iter().filter(|s| (s.adv, s.transform) == combo).count(), 10);
    }
    for (s, o) in src.iter().zip(out.iter().filter(|o| !o.adv && !o.transform)) {
        assert_eq!(o.image.rgb_image(), s.image);
        assert_eq!(o.label, s.label);
    }
    let mut hist_in: HashMap<usize, usize> = HashMap::new();
    let mut hist_out: HashMap<usize, usize> = HashMap::new();
    src.iter().for_each(|s| *hist_in.entry(s.label).or_default() += 4);
    out.iter().for_each(|s| *hist_out.entry(s.label).or_default() += 1);
    assert_eq!(hist_in, hist_out);
}

#[test]
fn quadruplicate_respects_disabled_flags() {
    let src: Vec<Sample> = samples(2);
    let n = src.len();
    assert_eq!(quadruplicate(&src, &off(ProfileKind::Edges)).unwrap().len(), n);
    let adv_only = AugmentConfig {
        transform: false,
        ..AugmentConfig::default()
    };
    assert_eq!(quadruplicate(&src, &adv_only).unwrap().len(), 2 * n);
    assert!(quadruplicate(&[], &AugmentConfig::default()).is_err());
}

#[test]
fn identity_transform_is_exact() {
    let s = &samples(1)[0];
    let img = FourChannelImage::new(&s.image, &compute_profile(&s.image, ProfileKind::Edges, &Default::default()).unwrap())
        .unwrap();
    assert_eq!(Affine::identity().apply(&img), img);
}

#[test]
fn integer_translation_shifts_and_zero_fills() {
    let rgb = RgbImage::from_fn(8, 8, |x, y| [(10 + x * 20) as u8, (y * 30) as u8, 77]);
    let img = FourChannelImage::new(&rgb, &ProfileMap::blank(8, 8)).unwrap();
    let shift = Affine {
        tx: 2.0,
        ty: -1.0,
        ..Affine::identity()
    };
    let out = shift.apply(&img).rgb_image();
    for y in 0..8 {
        for x in 0..8 {
            let (sx, sy) = (x as i64 - 2, y as i64 + 1);
            let expected = if (0..8).contains(&sx) && (0..8).contains(&sy) {
                rgb.pixel(sx as usize, sy as usize)
            } else {
                [0, 0, 0]
            };
            assert_eq!(out.pixel(x, y), expected, "({x}, {y})");
        }
    }
}

#[test]
fn quarter_turn_permutes_pixels() {
    let rgb = RgbImage::from_fn(6, 6, |x, y| [(x * 40) as u8, (y * 40) as u8, 5]);
    let img = FourChannelImage::new(&rgb, &ProfileMap::blank(6, 6)).unwrap();
    let turn = Affine {
        rotation_deg: 90.0,
        ..Affine::identity()
    };
    let out = turn.apply(&img).rgb_image();
    // Forward map (x, y) -> (-(y - c) + c, (x - c) + c) on pixel centers.
    for y in 0..6 {
        for x in 0..6 {
            let (dx, dy) = (5 - y, x);
            assert_eq!(out.pixel(dx, dy), rgb.pixel(x, y));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn profile_plane_stays_binary(seed in any::<u64>(), idx in 0usize..8, edges in any::<bool>()) {
        let all = samples(2);
        let s = &all[idx];
        let cfg = AugmentConfig {
            profile_kind: if edges { ProfileKind::Edges } else { ProfileKind::AdaThresh },
            ..AugmentConfig::default()
        };
        let out = make_example(&s.image, &s.mask, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert!(out.profile().iter().all(|&v| v == 0 || v == 255));
        prop_assert!(out.rgb().iter().all(|&v| (0.0..=255.0).contains(&v)));
    }

    #[test]
    fn no_shadow_means_source_rgb_before_transform(seed in any::<u64>(), idx in 0usize..8) {
        let all = samples(2);
        let s = &all[idx];
        let cfg = AugmentConfig { adv: false, transform: false, ..AugmentConfig::default() };
        let out = make_example(&s.image, &s.mask, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(out.rgb_image(), s.image.clone());
    }
}
