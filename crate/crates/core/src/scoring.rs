//! Score functions, state potentials, rewards and evaluation metrics.

use std::fmt;

use crate::assignment::{max_matching, ScoreMatrix};

/// Threshold used to binarise soft masks.
pub const BINARIZE_THRESHOLD: f64 = 0.5;

/// An `H × W` mask with values in {0, 1}, stored row-major.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Self {
        assert_eq!(bits.len(), height * width, "mask data length must be height*width");
        BinaryMask { height, width, bits }
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self::new(height, width, vec![false; height * width])
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let bits = (0..height).flat_map(|y| (0..width).map(move |x| (y, x))).map(|(y, x)| f(y, x)).collect();
        Self::new(height, width, bits)
    }

    /// Pixels strictly above [`BINARIZE_THRESHOLD`] are set.
    pub fn from_probabilities(height: usize, width: usize, probs: &[f64]) -> Self {
        Self::new(height, width, probs.iter().map(|&p| p > BINARIZE_THRESHOLD).collect())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub(crate) fn bits_mut(&mut self) -> &mut [bool] {
        &mut self.bits
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    pub fn area(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    fn check_shape(&self, other: &BinaryMask) {
        assert!(
            self.height == other.height && self.width == other.width,
            "mask shape mismatch: {}x{} vs {}x{}",
            self.height,
            self.width,
            other.height,
            other.width
        );
    }

    pub fn intersection_area(&self, other: &BinaryMask) -> usize {
        self.check_shape(other);
        self.bits.iter().zip(&other.bits).filter(|(a, b)| **a && **b).count()
    }

    pub fn union_with(&mut self, other: &BinaryMask) {
        self.check_shape(other);
        for (a, b) in self.bits.iter_mut().zip(&other.bits) {
            *a |= *b;
        }
    }

    /// Pixel values as 0.0 / 1.0.
    pub fn to_f64(&self) -> Vec<f64> {
        self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }

    pub fn union_of<'a>(height: usize, width: usize, masks: impl IntoIterator<Item = &'a BinaryMask>) -> BinaryMask {
        let mut out = BinaryMask::empty(height, width);
        for m in masks {
            out.union_with(m);
        }
        out
    }
}

impl fmt::Debug for BinaryMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "BinaryMask {}x{}", self.height, self.width)?;
        for y in 0..self.height {
            let row: String = (0..self.width).map(|x| if self.get(y, x) { '#' } else { '.' }).collect();
            writeln!(f, "{row}")?;
        }
        Ok(())
    }
}

/// 2|S∩T| / (|S|+|T|); two empty masks score 1.
pub fn dice(s: &BinaryMask, t: &BinaryMask) -> f64 {
    let inter = s.intersection_area(t);
    let total = s.area() + t.area();
    if total == 0 {
        1.0
    } else {
        2.0 * inter as f64 / total as f64
    }
}

/// |S∩T| / |S∪T|; two empty masks score 1.
pub fn iou(s: &BinaryMask, t: &BinaryMask) -> f64 {
    let inter = s.intersection_area(t);
    let union = s.area() + t.area() - inter;
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ScoreFunction {
    Dice,
    Iou,
}

impl ScoreFunction {
    pub fn score(self, s: &BinaryMask, t: &BinaryMask) -> f64 {
        match self {
            ScoreFunction::Dice => dice(s, t),
            ScoreFunction::Iou => iou(s, t),
        }
    }
}

impl std::str::FromStr for ScoreFunction {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "dice" => Ok(ScoreFunction::Dice),
            "iou" => Ok(ScoreFunction::Iou),
            other => Err(format!("unknown score function '{other}' (expected dice or iou)")),
        }
    }
}

/// `preds.len() × gts.len()` matrix of pairwise scores.
pub fn score_matrix(preds: &[BinaryMask], gts: &[BinaryMask], f: ScoreFunction) -> ScoreMatrix {
    let mut data = Vec::with_capacity(preds.len() * gts.len());
    for p in preds {
        data.extend(gts.iter().map(|g| f.score(p, g)));
    }
    ScoreMatrix::new(preds.len(), gts.len(), data).expect("non-empty finite score matrix")
}

/// Best achievable summed score of `preds` under an injective assignment to
/// `gts`. No predictions gives 0.
pub fn potential(preds: &[BinaryMask], gts: &[BinaryMask], f: ScoreFunction) -> f64 {
    assert!(!gts.is_empty(), "potential needs at least one ground-truth mask");
    if preds.is_empty() {
        return 0.0;
    }
    max_matching(&score_matrix(preds, gts, f)).total
}

/// Potentials, rewards and discounted returns of one episode.
#[derive(Clone, Debug, PartialEq)]
pub struct RewardTrace {
    /// φ_1..φ_{T+1}, with φ_1 = 0.
    pub potentials: Vec<f64>,
    pub rewards: Vec<f64>,
    pub returns: Vec<f64>,
    pub gamma: f64,
}

/// G_t = r_t + γ·G_{t+1}, G_{T+1} = 0.
pub fn discounted_returns(rewards: &[f64], gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for (t, r) in rewards.iter().enumerate().rev() {
        acc = r + gamma * acc;
        out[t] = acc;
    }
    out
}

pub fn reward_sequence(preds: &[BinaryMask], gts: &[BinaryMask], f: ScoreFunction, gamma: f64) -> RewardTrace {
    assert!(gamma > 0.0 && gamma <= 1.0, "gamma must lie in (0, 1]");
    let mut potentials = Vec::with_capacity(preds.len() + 1);
    potentials.push(0.0);
    for t in 1..=preds.len() {
        potentials.push(potential(&preds[..t], gts, f));
    }
    let rewards: Vec<f64> = potentials.windows(2).map(|w| w[1] - w[0]).collect();
    let returns = discounted_returns(&rewards, gamma);
    RewardTrace {
        potentials,
        rewards,
        returns,
        gamma,
    }
}

fn best_dice(a: &[BinaryMask], b: &[BinaryMask]) -> f64 {
    let total: f64 = a
        .iter()
        .map(|x| b.iter().map(|y| dice(x, y)).fold(0.0, f64::max))
        .sum();
    total / a.len() as f64
}

/// Symmetric best Dice; 0 when either list is empty.
pub fn sbd(preds: &[BinaryMask], gts: &[BinaryMask]) -> f64 {
    if preds.is_empty() || gts.is_empty() {
        return 0.0;
    }
    best_dice(preds, gts).min(best_dice(gts, preds))
}

/// Absolute difference in counting.
pub fn dic(pred_count: usize, gt_count: usize) -> usize {
    pred_count.abs_diff(gt_count)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Coverage {
    pub mwcov: f64,
    pub mucov: f64,
    pub avg_fp: f64,
    pub avg_fn: f64,
}

/// Coverage and false-positive/negative rates. A prediction (ground truth)
/// counts as unmatched when its best IoU is at most `overlap_threshold`.
pub fn coverage_metrics(preds: &[BinaryMask], gts: &[BinaryMask], overlap_threshold: f64) -> Coverage {
    assert!(!gts.is_empty(), "coverage needs at least one ground-truth mask");
    if preds.is_empty() {
        return Coverage {
            mwcov: 0.0,
            mucov: 0.0,
            avg_fp: 0.0,
            avg_fn: 1.0,
        };
    }
    let best_gt: Vec<f64> = gts
        .iter()
        .map(|g| preds.iter().map(|p| iou(p, g)).fold(0.0, f64::max))
        .collect();
    let areas: Vec<f64> = gts.iter().map(|g| g.area() as f64).collect();
    let total_area: f64 = areas.iter().sum();
    let mucov = best_gt.iter().sum::<f64>() / gts.len() as f64;
    let mwcov = if total_area > 0.0 {
        best_gt.iter().zip(&areas).map(|(s, a)| s * a).sum::<f64>() / total_area
    } else {
        mucov
    };
    let fp = preds
        .iter()
        .filter(|p| gts.iter().all(|g| iou(p, g) <= overlap_threshold))
        .count();
    let fn_ = best_gt.iter().filter(|&&s| s <= overlap_threshold).count();
    Coverage {
        mwcov,
        mucov,
        avg_fp: fp as f64 / preds.len() as f64,
        avg_fn: fn_ as f64 / gts.len() as f64,
    }
}

/// Dataset-level means of every evaluation metric.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MetricSummary {
    pub sbd: f64,
    pub dic: f64,
    pub mwcov: f64,
    pub mucov: f64,
    pub avg_fp: f64,
    pub avg_fn: f64,
    pub count: usize,
}

impl MetricSummary {
    pub const CSV_HEADER: [&'static str; 8] = ["run_id", "epoch", "SBD", "DiC", "MWCov", "MUCov", "AvgFP", "AvgFN"];

    /// Averages over `(predictions, ground truths)` pairs.
    pub fn evaluate<'a>(
        samples: impl IntoIterator<Item = (&'a [BinaryMask], &'a [BinaryMask])>,
        overlap_threshold: f64,
    ) -> Self {
        let mut s = MetricSummary::default();
        for (preds, gts) in samples {
            let cov = coverage_metrics(preds, gts, overlap_threshold);
            s.sbd += sbd(preds, gts);
            s.dic += dic(preds.len(), gts.len()) as f64;
            s.mwcov += cov.mwcov;
            s.mucov += cov.mucov;
            s.avg_fp += cov.avg_fp;
            s.avg_fn += cov.avg_fn;
            s.count += 1;
        }
        if s.count > 0 {
            let n = s.count as f64;
            for v in [&mut s.sbd, &mut s.dic, &mut s.mwcov, &mut s.mucov, &mut s.avg_fp, &mut s.avg_fn] {
                *v /= n;
            }
        }
        s
    }

    pub fn csv_record(&self, run_id: &str, epoch: usize) -> Vec<String> {
        let mut row = vec![run_id.to_string(), epoch.to_string()];
        row.extend(
            [self.sbd, self.dic, self.mwcov, self.mucov, self.avg_fp, self.avg_fn]
                .iter()
                .map(|v| format!("{v:.6}")),
        );
        row
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(rows: &[&str]) -> BinaryMask {
        let h = rows.len();
        let w = rows[0].len();
        BinaryMask::from_fn(h, w, |y, x| rows[y].as_bytes()[x] == b'#')
    }

    #[test]
    fn dice_hand_count() {
        let t = mask(&["##.###"]);
        let s = mask(&["###..."]);
        // |S|=3, |T|=5, overlap 2
        assert_eq!(dice(&s, &t), 0.5);
    }

    #[test]
    fn iou_hand_count() {
        let s = mask(&["####.."]);
        let t = mask(&["..####"]);
        assert!((iou(&s, &t) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn empty_conventions() {
        let e = BinaryMask::empty(2, 2);
        let f = mask(&["#.", ".."]);
        assert_eq!(dice(&e, &e), 1.0);
        assert_eq!(iou(&e, &e), 1.0);
        assert_eq!(dice(&e, &f), 0.0);
        assert_eq!(iou(&f, &e), 0.0);
    }

    #[test]
    #[should_panic(expected = "shape mismatch")]
    fn shape_mismatch_panics() {
        dice(&BinaryMask::empty(2, 2), &BinaryMask::empty(2, 3));
    }

    #[test]
    fn perfect_predictions_reward_one_each() {
        let gts = vec![mask(&["#...."]), mask(&[".#..."]), mask(&["..##."])];
        let trace = reward_sequence(&gts, &gts, ScoreFunction::Dice, 0.9);
        assert_eq!(trace.rewards, vec![1.0, 1.0, 1.0]);
        assert!((trace.returns[0] - 2.71).abs() < 1e-12);
        assert_eq!(trace.potentials[0], 0.0);
    }

    #[test]
    fn disjoint_prediction_earns_nothing() {
        let gts = vec![mask(&["##..."])];
        let preds = vec![mask(&["....#"])];
        assert_eq!(reward_sequence(&preds, &gts, ScoreFunction::Iou, 0.9).rewards, vec![0.0]);
    }

    #[test]
    fn potential_single_match() {
        let gts = vec![mask(&["#..."]), mask(&[".#.."]), mask(&["..##"])];
        assert_eq!(potential(&[gts[2].clone()], &gts, ScoreFunction::Dice), 1.0);
        assert_eq!(potential(&[], &gts, ScoreFunction::Dice), 0.0);
    }

    #[test]
    fn sbd_two_by_two_hand_value() {
        // gts: A = cols 0-1, B = cols 2-3; preds: P = cols 0-2, Q = col 3.
        let a = mask(&["##.."]);
        let b = mask(&["..##"]);
        let p = mask(&["###."]);
        let q = mask(&["...#"]);
        // best(P)=max(4/5, 2/5)=0.8, best(Q)=max(0, 2/3)=2/3 -> 11/15
        // best(A)=0.8, best(B)=max(2/5, 2/3)=2/3 -> 11/15
        let v = sbd(&[p, q], &[a, b]);
        assert!((v - 11.0 / 15.0).abs() < 1e-15);
    }

    #[test]
    fn dic_values() {
        assert_eq!(dic(5, 5), 0);
        assert_eq!(dic(3, 5), 2);
        assert_eq!(dic(7, 5), 2);
    }

    #[test]
    fn coverage_area_weighting() {
        // gt0: 12 pixels, pred covers 6 of them -> IoU 0.5; gt1: 4 pixels, exact.
        let gt0 = BinaryMask::from_fn(4, 8, |y, x| y < 3 && x < 4);
        let gt1 = BinaryMask::from_fn(4, 8, |y, x| y == 3 && x >= 4);
        let p0 = BinaryMask::from_fn(4, 8, |y, x| y < 3 && x < 2);
        let cov = coverage_metrics(&[p0, gt1.clone()], &[gt0, gt1], 0.0);
        assert!((cov.mucov - 0.75).abs() < 1e-15);
        assert!((cov.mwcov - 0.625).abs() < 1e-15);
        assert_eq!(cov.avg_fp, 0.0);
        assert_eq!(cov.avg_fn, 0.0);
    }

    #[test]
    fn coverage_extra_background_prediction() {
        let gts = vec![mask(&["#..."]), mask(&[".#.."]), mask(&["..#."])];
        let mut preds = gts.clone();
        preds.push(BinaryMask::empty(1, 4));
        let cov = coverage_metrics(&preds, &gts, 0.0);
        assert_eq!(cov.avg_fp, 0.25);
        assert_eq!((cov.mwcov, cov.mucov, cov.avg_fn), (1.0, 1.0, 0.0));
    }

    #[test]
    fn coverage_no_predictions() {
        let gts = vec![mask(&["#..."])];
        let cov = coverage_metrics(&[], &gts, 0.0);
        assert_eq!((cov.mwcov, cov.mucov, cov.avg_fp, cov.avg_fn), (0.0, 0.0, 0.0, 1.0));
    }
}
