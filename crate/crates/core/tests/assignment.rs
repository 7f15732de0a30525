use acis::assignment::{brute_force_matching, max_matching, perturbed_matching, ScoreMatrix};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> ScoreMatrix {
    ScoreMatrix::from_fn(rows, cols, |_, _| rng.gen::<f64>()).unwrap()
}

/// Independent oracle: every permutation of 0..n via Heap's algorithm.
fn best_square_total(s: &ScoreMatrix) -> f64 {
    let n = s.rows();
    let mut perm: Vec<usize> = (0..n).collect();
    let mut c = vec![0; n];
    let eval = |p: &[usize]| p.iter().enumerate().map(|(i, &j)| s.get(i, j)).sum::<f64>();
    let mut best = eval(&perm);
    let mut count = 1;
    let mut i = 0;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(c[i], i);
            }
            best = best.max(eval(&perm));
            count += 1;
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    assert_eq!(count, (1..=n).product::<usize>());
    best
}

#[test]
fn six_by_six_matches_full_permutation_search() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..200 {
        let s = random_matrix(&mut rng, 6, 6);
        let a = max_matching(&s);
        assert!((a.total - best_square_total(&s)).abs() < 1e-12);
    }
}

#[test]
fn agrees_with_brute_force_on_five_by_seven() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..1000 {
        let s = random_matrix(&mut rng, 5, 7);
        let fast = max_matching(&s);
        let slow = brute_force_matching(&s).unwrap();
        assert_eq!(fast, slow);
    }
}

#[test]
fn tied_integer_scores_agree_with_brute_force() {
    // Coarse scores produce many exact ties and exercise the tie-break.
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..300 {
        let rows = rng.gen_range(1..=6);
        let cols = rng.gen_range(1..=6);
        let s = ScoreMatrix::from_fn(rows, cols, |_, _| rng.gen_range(0..3) as f64 / 2.0).unwrap();
        assert_eq!(max_matching(&s), brute_force_matching(&s).unwrap());
    }
}

#[test]
fn perturbation_flips_close_assignments() {
    let s = ScoreMatrix::new(2, 2, vec![0.5, 0.495, 0.495, 0.5]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut diagonal = 0;
    let draws = 10_000;
    for _ in 0..draws {
        if perturbed_matching(&s, 1.0, &mut rng).mapping == vec![Some(0), Some(1)] {
            diagonal += 1;
        }
    }
    assert!(diagonal > 0 && diagonal < draws, "diagonal chosen {diagonal} times");
}

#[test]
fn tiny_perturbation_keeps_separated_assignment() {
    let s = ScoreMatrix::new(2, 2, vec![0.9, 0.1, 0.2, 0.8]).unwrap();
    let reference = max_matching(&s);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..10_000 {
        assert_eq!(perturbed_matching(&s, 1e-9, &mut rng).mapping, reference.mapping);
    }
}

fn matrix_strategy() -> impl Strategy<Value = ScoreMatrix> {
    (1usize..=6, 1usize..=6).prop_flat_map(|(r, c)| {
        proptest::collection::vec(0.0f64..1.0, r * c).prop_map(move |d| ScoreMatrix::new(r, c, d).unwrap())
    })
}

fn assert_injective(mapping: &[Option<usize>]) {
    let mut cols: Vec<usize> = mapping.iter().flatten().copied().collect();
    let n = cols.len();
    cols.sort_unstable();
    cols.dedup();
    assert_eq!(cols.len(), n);
}

proptest! {
    #[test]
    fn mapping_is_injective_and_total_consistent(s in matrix_strategy()) {
        let a = max_matching(&s);
        assert_injective(&a.mapping);
        prop_assert_eq!(a.mapping.iter().flatten().count(), s.rows().min(s.cols()));
        let total: f64 = a.assigned().map(|(i, j)| s.get(i, j)).sum();
        prop_assert_eq!(total, a.total);
        prop_assert_eq!(a.total, brute_force_matching(&s).unwrap().total);
    }

    #[test]
    fn constant_shift(s in matrix_strategy(), c in 0.0f64..2.0) {
        let shifted = ScoreMatrix::new(s.rows(), s.cols(), s.data().iter().map(|v| v + c).collect()).unwrap();
        let a = max_matching(&s);
        let b = max_matching(&shifted);
        prop_assert_eq!(&a.mapping, &b.mapping);
        let k = s.rows().min(s.cols()) as f64;
        prop_assert!((b.total - a.total - c * k).abs() < 1e-9);
    }

    #[test]
    fn row_permutation_preserves_total(s in matrix_strategy(), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        let mut order: Vec<usize> = (0..s.rows()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let permuted = ScoreMatrix::from_fn(s.rows(), s.cols(), |i, j| s.get(order[i], j)).unwrap();
        let a = max_matching(&s);
        let b = max_matching(&permuted);
        prop_assert!((a.total - b.total).abs() < 1e-12);
        // The permuted matching, read back through the permutation, is optimal for the original.
        let total: f64 = b.assigned().map(|(i, j)| s.get(order[i], j)).sum();
        prop_assert!((total - a.total).abs() < 1e-12);
    }

    #[test]
    fn appending_row_never_decreases_total(s in matrix_strategy(), extra in proptest::collection::vec(0.0f64..1.0, 6)) {
        let mut data = s.data().to_vec();
        data.extend_from_slice(&extra[..s.cols()]);
        let grown = ScoreMatrix::new(s.rows() + 1, s.cols(), data).unwrap();
        prop_assert!(max_matching(&grown).total >= max_matching(&s).total);
    }
}
