use acis::compute::Tensor;
use acis::environment::*;
use acis::scoring::{potential, BinaryMask, ScoreFunction};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn scene_from_masks(masks: Vec<BinaryMask>) -> Scene {
    let (h, w) = (masks[0].height(), masks[0].width());
    Scene {
        seed: 0,
        image: Tensor::zeros(&[1, h, w]),
        gt_masks: masks,
    }
}

#[test]
fn generation_is_deterministic() {
    let cfg = SceneConfig::default();
    for seed in [0, 1, 99, u64::MAX] {
        let a = generate_scene(seed, &cfg).unwrap();
        let b = generate_scene(seed, &cfg).unwrap();
        assert_eq!(a, b);
        assert!(a.image.data().iter().zip(b.image.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}

#[test]
fn ten_thousand_scenes_are_valid() {
    let cfg = SceneConfig::default();
    for i in 0..10_000 {
        let s = generate_scene(scene_seed(7, i), &cfg).unwrap();
        let n = s.instance_count();
        assert!((cfg.n_min..=cfg.n_max).contains(&n));
        for (j, a) in s.gt_masks.iter().enumerate() {
            assert!(a.area() >= MIN_VISIBLE_PIXELS);
            for b in &s.gt_masks[j + 1..] {
                assert_eq!(a.intersection_area(b), 0);
            }
        }
        assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn impossible_placement_is_an_error() {
    let cfg = SceneConfig {
        height: 16,
        width: 16,
        n_min: 10,
        n_max: 10,
        shape_kinds: vec![ShapeKind::Rectangle],
        overlap_prob: 0.0,
    };
    assert!(matches!(generate_scene(3, &cfg), Err(acis::Error::SceneGeneration(_))));
}

#[test]
fn pixel_right_of_centroid_is_bin_zero() {
    let square = BinaryMask::from_fn(16, 16, |y, x| (5..=9).contains(&y) && (5..=9).contains(&x));
    let aux = angle_quantization(&scene_from_masks(vec![square]));
    assert!(aux.angle_bins[0].get(7, 9));
    assert!(aux.angle_bins[2].get(9, 7));
    assert!(aux.angle_bins[0].get(7, 7), "centre pixel");
}

fn rotate(m: &BinaryMask) -> BinaryMask {
    // (x, y) -> (W-1-y, x) on a square grid.
    let n = m.height();
    let mut out = BinaryMask::empty(n, n);
    for y in 0..n {
        for x in 0..n {
            if m.get(y, x) {
                out.set(x, n - 1 - y, true);
            }
        }
    }
    out
}

fn is_centroid(m: &BinaryMask, y: usize, x: usize) -> bool {
    let (mut count, mut sx, mut sy) = (0, 0, 0);
    for yy in 0..m.height() {
        for xx in 0..m.width() {
            if m.get(yy, xx) {
                count += 1;
                sx += xx;
                sy += yy;
            }
        }
    }
    x * count == sx && y * count == sy
}

#[test]
fn quarter_turn_permutes_bins_by_two() {
    // A pixel sitting exactly on its centroid has no direction and is
    // excluded; every other pixel must move two bins on.
    let cfg = SceneConfig::default();
    let n = cfg.height;
    for seed in 0..50 {
        let s = generate_scene(seed, &cfg).unwrap();
        let rotated = scene_from_masks(s.gt_masks.iter().map(rotate).collect());
        let a = angle_quantization(&s);
        let b = angle_quantization(&rotated);
        let bin_at = |aux: &AuxChannels, y: usize, x: usize| (0..ANGLE_BINS).find(|&k| aux.angle_bins[k].get(y, x));
        for m in &s.gt_masks {
            for y in 0..n {
                for x in 0..n {
                    if !m.get(y, x) || is_centroid(m, y, x) {
                        continue;
                    }
                    let before = bin_at(&a, y, x).unwrap();
                    let after = bin_at(&b, x, n - 1 - y).unwrap();
                    assert_eq!(after, (before + 2) % ANGLE_BINS, "seed {seed} pixel ({y}, {x})");
                }
            }
        }
    }
}

#[test]
fn bins_partition_the_foreground() {
    let cfg = SceneConfig::default();
    for seed in 0..200 {
        let s = generate_scene(seed, &cfg).unwrap();
        let aux = angle_quantization(&s);
        for i in 0..s.height() * s.width() {
            let active = aux.angle_bins.iter().filter(|b| b.bits()[i]).count();
            assert_eq!(active, usize::from(aux.foreground.bits()[i]));
        }
        assert_eq!(aux.foreground, BinaryMask::union_of(s.height(), s.width(), &s.gt_masks));
    }
}

fn context(seed: u64) -> std::sync::Arc<SceneContext> {
    SceneContext::new(generate_scene(seed, &SceneConfig::default()).unwrap())
}

#[test]
fn transition_examples() {
    let ctx = context(1);
    let s0 = EnvState::empty(ctx.clone());
    let zero = Tensor::zeros(&[1, 1, 32, 32]);
    assert_eq!(transition(&s0, &zero).mask(), s0.mask());

    let a = Tensor::new(vec![1, 1, 32, 32], (0..1024).map(|i| if i < 100 { 0.8 } else { 0.0 }).collect());
    let b = Tensor::new(vec![1, 1, 32, 32], (0..1024).map(|i| if i >= 500 { 1.0 } else { 0.0 }).collect());
    let s1 = transition(&s0, &a);
    assert_eq!(transition(&s1, &a).mask(), s1.mask());
    let ab = transition(&s1, &b);
    let ba = transition(&transition(&s0, &b), &a);
    assert_eq!(ab.mask(), ba.mask());
}

#[test]
fn initial_state_examples() {
    let ctx = context(5);
    let n = ctx.scene.instance_count();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (s, targets) = initial_state(&ctx, n, &mut rng).unwrap();
    assert!(s.mask().data().iter().all(|&v| v == 0.0));
    assert_eq!(targets, ctx.scene.gt_masks);

    let (s, targets) = initial_state(&ctx, 1, &mut rng).unwrap();
    assert_eq!(targets.len(), 1);
    let others: Vec<_> = ctx.scene.gt_masks.iter().filter(|m| **m != targets[0]).cloned().collect();
    let union = BinaryMask::union_of(32, 32, &others);
    assert_eq!(BinaryMask::from_probabilities(32, 32, s.mask().data()), union);

    assert!(initial_state(&ctx, n + 1, &mut rng).is_err());
    assert!(initial_state(&ctx, 0, &mut rng).is_err());
}

#[test]
fn accumulated_masks_have_expected_potential() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for seed in 0..30 {
        let ctx = context(seed);
        let n = ctx.scene.instance_count();
        for remaining in 1..=n {
            let (_, targets) = initial_state(&ctx, remaining, &mut rng).unwrap();
            let done: Vec<_> = ctx.scene.gt_masks.iter().filter(|m| !targets.contains(m)).cloned().collect();
            let phi = potential(&done, &ctx.scene.gt_masks, ScoreFunction::Dice);
            assert!((phi - (n - remaining) as f64).abs() < 1e-12);
        }
    }
}

#[test]
fn pyramid_examples() {
    let ctx = context(2);
    let state = EnvState::empty(ctx.clone());
    let p1 = build_state_pyramid(&state, 1).unwrap();
    assert_eq!(p1.levels.len(), 1);
    assert_eq!(p1.levels[0], state.input_stack());

    let p = build_state_pyramid(&state, 5).unwrap();
    assert_eq!(p.levels[4].shape(), &[1, STATE_CHANNELS, 2, 2]);
    // Two halvings equal one 4x4 block average.
    let full = state.input_stack();
    let l2 = &p.levels[2];
    for c in 0..STATE_CHANNELS {
        for oy in 0..8 {
            for ox in 0..8 {
                let mut acc = 0.0;
                for dy in 0..4 {
                    for dx in 0..4 {
                        acc += full.data()[c * 1024 + (4 * oy + dy) * 32 + 4 * ox + dx];
                    }
                }
                let got = l2.data()[c * 64 + oy * 8 + ox];
                assert!((got - acc / 16.0).abs() < 1e-12);
            }
        }
    }
    assert!(build_state_pyramid(&state, 7).is_err());
}

#[test]
fn constant_input_stays_constant() {
    let x = Tensor::filled(&[1, 2, 16, 16], 0.375);
    for level in downsample_levels(&x, 5).unwrap() {
        assert!(level.data().iter().all(|&v| v == 0.375));
    }
}

#[test]
fn split_file_round_trip_and_tamper_detection() {
    let cfg = SceneConfig {
        height: 16,
        width: 16,
        n_min: 1,
        n_max: 3,
        ..SceneConfig::default()
    };
    let scenes = generate_split(11, 12, &cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("split.bin");
    save_split(&path, &cfg, &scenes).unwrap();
    let (cfg2, loaded) = load_split(&path).unwrap();
    assert_eq!(cfg2, cfg);
    assert_eq!(loaded, scenes);

    let mut bytes = encode_split(&cfg, &scenes);
    let last = bytes.len() - 1;
    bytes[last] ^= 0xFF;
    assert!(matches!(decode_split(&bytes), Err(acis::Error::SceneFile(_))));
    assert!(decode_split(&bytes[..bytes.len() - 3]).is_err());
    assert!(decode_split(b"NOPE").is_err());
}

#[test]
fn exports_netpbm_files() {
    let cfg = SceneConfig::default();
    let scenes = generate_split(1, 2, &cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    export_scenes(dir.path(), &scenes).unwrap();
    let pgm = std::fs::read(dir.path().join("scene_0000.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n32 32\n255\n"));
    assert_eq!(pgm.len(), 13 + 1024);
    let pbm = std::fs::read(dir.path().join("scene_0001_mask0.pbm")).unwrap();
    assert!(pbm.starts_with(b"P4\n32 32\n"));
    assert_eq!(pbm.len(), 9 + 4 * 32);
}

proptest! {
    #[test]
    fn transition_is_monotone(a in proptest::collection::vec(0.0f64..1.0, 1024), b in proptest::collection::vec(0.0f64..1.0, 1024)) {
        let ctx = context(0);
        let s = EnvState::with_mask(ctx, Tensor::new(vec![1024], a));
        let next = transition(&s, &Tensor::new(vec![1024], b));
        prop_assert!(next.mask().data().iter().zip(s.mask().data()).all(|(n, o)| n >= o));
    }
}
