use acis::assignment::{brute_force_matching, ScoreMatrix};
use acis::scoring::{
    dice, discounted_returns, iou, potential, reward_sequence, sbd, score_matrix, BinaryMask, MetricSummary,
    ScoreFunction,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_mask(rng: &mut impl Rng, h: usize, w: usize, density: f64) -> BinaryMask {
    let bits = (0..h * w).map(|_| rng.gen_bool(density)).collect();
    BinaryMask::new(h, w, bits)
}

fn random_rect(rng: &mut impl Rng, h: usize, w: usize) -> BinaryMask {
    let (y0, x0) = (rng.gen_range(0..h), rng.gen_range(0..w));
    let (y1, x1) = (rng.gen_range(y0..h), rng.gen_range(x0..w));
    BinaryMask::from_fn(h, w, |y, x| (y0..=y1).contains(&y) && (x0..=x1).contains(&x))
}

/// Independent oracle: enumerate injective maps of all predictions into gts.
fn brute_potential(preds: &[BinaryMask], gts: &[BinaryMask], f: ScoreFunction) -> f64 {
    fn go(i: usize, preds: &[BinaryMask], gts: &[BinaryMask], used: &mut Vec<bool>, f: ScoreFunction) -> f64 {
        if i == preds.len() {
            return 0.0;
        }
        // Row i may also stay unassigned when predictions outnumber gts.
        let mut best = if preds.len() > gts.len() { go(i + 1, preds, gts, used, f) } else { f64::NEG_INFINITY };
        for j in 0..gts.len() {
            if !used[j] {
                used[j] = true;
                best = best.max(f.score(&preds[i], &gts[j]) + go(i + 1, preds, gts, used, f));
                used[j] = false;
            }
        }
        best
    }
    go(0, preds, gts, &mut vec![false; gts.len()], f)
}

#[test]
fn potential_matches_exhaustive_search() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..200 {
        let gts: Vec<_> = (0..4).map(|_| random_rect(&mut rng, 8, 8)).collect();
        let preds: Vec<_> = (0..3).map(|_| random_rect(&mut rng, 8, 8)).collect();
        for f in [ScoreFunction::Dice, ScoreFunction::Iou] {
            let fast = potential(&preds, &gts, f);
            assert!((fast - brute_potential(&preds, &gts, f)).abs() < 1e-12);
        }
    }
}

#[test]
fn potential_of_permuted_perfect_predictions() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let gts: Vec<_> = (0..5).map(|_| random_rect(&mut rng, 8, 8)).collect();
    let mut preds = gts.clone();
    preds.reverse();
    assert!((potential(&preds, &gts, ScoreFunction::Dice) - 5.0).abs() < 1e-12);
}

#[test]
fn reward_algebra_on_random_episodes() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..500 {
        let n = rng.gen_range(1..=6);
        let t = rng.gen_range(1..=n);
        let gts: Vec<_> = (0..n).map(|_| random_rect(&mut rng, 8, 8)).collect();
        let preds: Vec<_> = (0..t).map(|_| random_mask(&mut rng, 8, 8, 0.3)).collect();
        let trace = reward_sequence(&preds, &gts, ScoreFunction::Dice, 0.9);
        let sum: f64 = trace.rewards.iter().sum();
        assert!((sum - trace.potentials[t]).abs() < 1e-12);
        assert!(trace.rewards.iter().all(|&r| r >= 0.0));
        for s in 0..t {
            let forward: f64 = (s..t).map(|i| 0.9f64.powi((i - s) as i32) * trace.rewards[i]).sum();
            assert!((forward - trace.returns[s]).abs() < 1e-12);
        }
    }
}

#[test]
fn metric_summary_averages_dic() {
    let m = BinaryMask::from_fn(4, 4, |y, _| y == 0);
    let gts = [m.clone(), BinaryMask::from_fn(4, 4, |y, _| y == 1)];
    let p1 = [m.clone()];
    let p2 = [m.clone(), m.clone(), m.clone(), m];
    let s = MetricSummary::evaluate([(&p1[..], &gts[..]), (&p2[..], &gts[..])], 0.0);
    assert_eq!(s.dic, 1.5);
    assert_eq!(s.count, 2);
    assert_eq!(s.csv_record("r", 3)[..3], ["r".to_string(), "3".into(), format!("{:.6}", s.sbd)]);
}

#[test]
fn score_matrix_layout() {
    let a = BinaryMask::from_fn(2, 2, |y, _| y == 0);
    let b = BinaryMask::from_fn(2, 2, |_, x| x == 0);
    let m: ScoreMatrix = score_matrix(std::slice::from_ref(&a), &[a.clone(), b], ScoreFunction::Iou);
    assert_eq!((m.rows(), m.cols()), (1, 2));
    assert_eq!(m.data(), &[1.0, 1.0 / 3.0]);
    assert_eq!(brute_force_matching(&m).unwrap().mapping, vec![Some(0)]);
}

fn mask_pair() -> impl Strategy<Value = (BinaryMask, BinaryMask)> {
    (proptest::collection::vec(any::<bool>(), 36), proptest::collection::vec(any::<bool>(), 36))
        .prop_map(|(a, b)| (BinaryMask::new(6, 6, a), BinaryMask::new(6, 6, b)))
}

proptest! {
    #[test]
    fn dice_iou_relations((s, t) in mask_pair()) {
        let (d, j) = (dice(&s, &t), iou(&s, &t));
        prop_assert_eq!(d, dice(&t, &s));
        prop_assert_eq!(j, iou(&t, &s));
        prop_assert!((0.0..=1.0).contains(&d) && (0.0..=1.0).contains(&j));
        prop_assert!(j <= d);
        if j == d {
            prop_assert!(d == 0.0 || d == 1.0);
        }
    }

    #[test]
    fn sbd_of_self_is_one(masks in proptest::collection::vec(proptest::collection::vec(any::<bool>(), 16), 1..5)) {
        let masks: Vec<_> = masks.into_iter().map(|b| BinaryMask::new(4, 4, b)).collect();
        prop_assert_eq!(sbd(&masks, &masks), 1.0);
    }

    #[test]
    fn returns_recursion(rewards in proptest::collection::vec(0.0f64..1.0, 1..12), gamma in 0.01f64..=1.0) {
        let g = discounted_returns(&rewards, gamma);
        for t in 0..rewards.len() {
            let next = g.get(t + 1).copied().unwrap_or(0.0);
            prop_assert!((g[t] - (rewards[t] + gamma * next)).abs() < 1e-12);
        }
    }
}
