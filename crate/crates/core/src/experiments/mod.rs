//! Experiment drivers behind the `acis` command line: seeded scene splits,
//! pre-training and training pipelines, the five-variant ablation, the
//! per-timestep Dice report, state blocking, and the two ordering studies.

pub mod cli;
mod config;
mod lockin;
mod oracle;
pub mod svg;

use std::path::Path;
use std::sync::Arc;

use sha2::{Digest, Sha256};

use crate::actor::{pretrain_cvae, Actor, Block, PretrainReport};
use crate::assignment::max_matching;
use crate::critic::Critic;
use crate::environment::{encode_split, generate_split, scene_seed, SceneConfig, SceneContext};
use crate::error::{Error, Result};
use crate::scoring::{dice, score_matrix, BinaryMask, MetricSummary, ScoreFunction};
use crate::trainer::{evaluate_actor, train, train_baseline, BaselineMode, Output, TrainReport};

pub use config::{RunConfig, KEYS};
pub use lockin::{ordering_lockin_demo, LockinReport, LockinRow, LOCKIN_HEADER};
pub use oracle::{oracle_ordering, ordering_stats, OracleGroup, OracleReport, PatchNet, SceneOrdering, ORACLE_HEADER};

/// Seeded pre-training, training, validation and test scenes.
#[derive(Clone, Debug)]
pub struct Splits {
    pub pretrain: Vec<Arc<SceneContext>>,
    pub train: Vec<Arc<SceneContext>>,
    pub val: Vec<Arc<SceneContext>>,
    pub test: Vec<Arc<SceneContext>>,
    /// SHA-256 of the serialised splits, hex encoded.
    pub hash: String,
}

const SPLIT_STREAMS: [u64; 4] = [11, 12, 13, 14];

/// Generates every split from `split_seed`; the same config always yields
/// the same scenes and hash.
pub fn build_splits(cfg: &RunConfig) -> Result<Splits> {
    let scene_cfg = cfg.scene_config();
    let counts = [cfg.pretrain_scenes, cfg.train_scenes, cfg.val_scenes, cfg.test_scenes];
    let mut hasher = Sha256::new();
    let mut parts = Vec::with_capacity(4);
    for (stream, count) in SPLIT_STREAMS.into_iter().zip(counts) {
        let scenes = generate_split(scene_seed(cfg.split_seed, stream), count, &scene_cfg)?;
        hasher.update(encode_split(&scene_cfg, &scenes));
        parts.push(
            scenes
                .into_iter()
                .map(|s| SceneContext::with_aux_noise(s, cfg.aux_noise))
                .collect::<Vec<_>>(),
        );
    }
    let hash = hasher.finalize().iter().map(|b| format!("{b:02x}")).collect();
    let test = parts.pop().expect("four splits");
    let val = parts.pop().expect("four splits");
    let train = parts.pop().expect("four splits");
    let pretrain = parts.pop().expect("four splits");
    Ok(Splits {
        pretrain,
        train,
        val,
        test,
        hash,
    })
}

/// Scenes of `cfg` regenerated with a different seed stream and overrides.
pub fn extra_scenes(cfg: &RunConfig, stream: u64, count: usize, scene_cfg: &SceneConfig) -> Result<Vec<Arc<SceneContext>>> {
    Ok(generate_split(scene_seed(cfg.split_seed, stream), count, scene_cfg)?
        .into_iter()
        .map(|s| SceneContext::with_aux_noise(s, cfg.aux_noise))
        .collect())
}

/// Writes a one-line `#` comment, a header row and the records.
pub fn write_csv(path: &Path, comment: &str, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    let body = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    let mut bytes = format!("# {comment}\n").into_bytes();
    bytes.extend(body);
    std::fs::write(path, bytes)?;
    Ok(())
}

fn f6(v: f64) -> String {
    format!("{v:.6}")
}

/// Pre-trains a fresh actor on the pre-training split.
pub fn pretrain_actor(cfg: &RunConfig, splits: &Splits, seed: u64) -> Result<(Actor, PretrainReport)> {
    let mut actor = Actor::new(cfg.arch(), seed)?;
    let pre = crate::actor::PretrainConfig {
        seed,
        ..cfg.pretrain_config()
    };
    let report = pretrain_cvae(&mut actor, &splits.pretrain, &splits.val, &pre)?;
    Ok((actor, report))
}

/// Loads `cfg.pretrained` or pre-trains in the run.
pub fn pretrained_actor(cfg: &RunConfig, splits: &Splits, seed: u64) -> Result<Actor> {
    if cfg.pretrained.is_empty() {
        return Ok(pretrain_actor(cfg, splits, seed)?.0);
    }
    let actor = Actor::load(Path::new(&cfg.pretrained))?;
    if actor.arch != cfg.arch() {
        return Err(Error::Config(format!(
            "pre-trained checkpoint {} does not match the configured architecture",
            cfg.pretrained
        )));
    }
    Ok(actor)
}

/// A fresh actor seeded by `seed`, initialised from `pretrained`. Without
/// `init_from_pretrain` only the decoder is copied.
fn initial_actor(cfg: &RunConfig, pretrained: &Actor, seed: u64) -> Result<Actor> {
    let mut actor = Actor::new(cfg.arch(), seed)?;
    if cfg.init_from_pretrain {
        actor.copy_from(pretrained, &[]);
    } else {
        actor.copy_from(pretrained, &["actor.encoder.", "actor.lstm.", "actor.heads.", "actor.term."]);
    }
    Ok(actor)
}

/// Actor-critic training from a pre-trained decoder.
pub fn train_actor_critic(
    cfg: &RunConfig,
    pretrained: &Actor,
    splits: &Splits,
    output: Option<Output>,
) -> Result<(Actor, Critic, TrainReport)> {
    let mut actor = initial_actor(cfg, pretrained, cfg.seed.wrapping_add(1))?;
    let mut critic = Critic::new(cfg.critic_config(), cfg.seed.wrapping_add(2))?;
    let report = train(
        &cfg.trainer_config(),
        &mut actor,
        &mut critic,
        &splits.train,
        &splits.val,
        cfg.max_steps(),
        output,
    )?;
    Ok((actor, critic, report))
}

/// Supervised baseline training from the pre-trained actor.
pub fn train_supervised(cfg: &RunConfig, pretrained: &Actor, splits: &Splits, output: Option<Output>) -> Result<(Actor, TrainReport)> {
    let mut actor = initial_actor(cfg, pretrained, cfg.seed.wrapping_add(1))?;
    let report = train_baseline(
        &cfg.baseline_config(),
        &mut actor,
        &splits.train,
        &splits.val,
        cfg.max_steps(),
        cfg.baseline_mode,
        output,
    )?;
    Ok((actor, report))
}

pub const EVAL_HEADER: [&str; 8] = MetricSummary::CSV_HEADER;

/// Mean-action evaluation with learned termination.
pub fn evaluate(actor: &Actor, scenes: &[Arc<SceneContext>], max_steps: usize) -> MetricSummary {
    evaluate_actor(actor, scenes, max_steps)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Variant {
    Bl,
    BlTrunc,
    AcDice,
    AcDiceNoKl,
    AcDiceNoSp,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Bl,
        Variant::BlTrunc,
        Variant::AcDice,
        Variant::AcDiceNoKl,
        Variant::AcDiceNoSp,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Bl => "BL",
            Variant::BlTrunc => "BL-Trunc",
            Variant::AcDice => "AC-Dice",
            Variant::AcDiceNoKl => "AC-Dice-NoKL",
            Variant::AcDiceNoSp => "AC-Dice-NoSP",
        }
    }

    pub fn is_baseline(self) -> bool {
        matches!(self, Variant::Bl | Variant::BlTrunc)
    }

    /// The run config of this variant for one seed.
    pub fn config(self, base: &RunConfig, seed: u64) -> RunConfig {
        let mut cfg = base.clone();
        cfg.seed = seed;
        cfg.score = ScoreFunction::Dice;
        match self {
            Variant::Bl => cfg.baseline_mode = BaselineMode::FullBptt,
            Variant::BlTrunc => cfg.baseline_mode = BaselineMode::Truncated,
            Variant::AcDice => {}
            Variant::AcDiceNoKl => cfg.kl_weight = 0.0,
            Variant::AcDiceNoSp => cfg.state_pyramid = false,
        }
        cfg
    }
}

/// One variant/seed result; `outcome` holds the failure message on abort.
#[derive(Clone, Debug)]
pub struct AblationRow {
    pub variant: Variant,
    pub seed: u64,
    pub config: RunConfig,
    pub outcome: std::result::Result<MetricSummary, String>,
    pub best_epoch: usize,
}

#[derive(Clone, Debug)]
pub struct TrainedModel {
    pub variant: Variant,
    pub seed: u64,
    pub actor: Actor,
}

#[derive(Clone, Debug)]
pub struct AblationReport {
    pub split_hash: String,
    pub rows: Vec<AblationRow>,
    pub models: Vec<TrainedModel>,
}

pub const ABLATION_HEADER: [&str; 12] = [
    "variant", "seed", "status", "SBD", "DiC", "MWCov", "MUCov", "AvgFP", "AvgFN", "best_epoch", "kl_weight", "split_hash",
];

impl AblationReport {
    pub fn any_failed(&self) -> bool {
        self.rows.iter().any(|r| r.outcome.is_err())
    }

    /// Median of `f` over the successful seeds of `variant`.
    pub fn median(&self, variant: Variant, f: impl Fn(&MetricSummary) -> f64) -> Option<f64> {
        let vals: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.variant == variant)
            .filter_map(|r| r.outcome.as_ref().ok().map(&f))
            .collect();
        median(&vals)
    }

    pub fn model(&self, variant: Variant, seed: u64) -> Option<&Actor> {
        self.models
            .iter()
            .find(|m| m.variant == variant && m.seed == seed)
            .map(|m| &m.actor)
    }

    /// Per-run rows followed by one median row per variant.
    pub fn csv_rows(&self) -> Vec<Vec<String>> {
        let mut rows = Vec::new();
        for r in &self.rows {
            let mut row = vec![r.variant.name().to_string(), r.seed.to_string()];
            match &r.outcome {
                Ok(m) => {
                    row.push("ok".into());
                    row.extend([m.sbd, m.dic, m.mwcov, m.mucov, m.avg_fp, m.avg_fn].map(f6));
                    row.push(r.best_epoch.to_string());
                }
                Err(msg) => {
                    row.push(format!("FAILED: {msg}"));
                    row.extend(std::iter::repeat_n(String::new(), 7));
                }
            }
            row.push(r.config.kl_weight.to_string());
            row.push(self.split_hash.clone());
            rows.push(row);
        }
        for v in Variant::ALL {
            let Some(sbd) = self.median(v, |m| m.sbd) else { continue };
            let mut row = vec![v.name().to_string(), "median".into(), "ok".into(), f6(sbd)];
            for f in [
                (|m: &MetricSummary| m.dic) as fn(&MetricSummary) -> f64,
                |m| m.mwcov,
                |m| m.mucov,
                |m| m.avg_fp,
                |m| m.avg_fn,
            ] {
                row.push(f6(self.median(v, f).expect("variant has results")));
            }
            row.push(String::new());
            row.push(v.config(&RunConfig::default(), 0).kl_weight.to_string());
            row.push(self.split_hash.clone());
            rows.push(row);
        }
        rows
    }
}

pub fn median(vals: &[f64]) -> Option<f64> {
    if vals.is_empty() {
        return None;
    }
    let mut v = vals.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

/// Trains every variant for every seed on one shared set of splits and
/// evaluates on the test split. Pre-training runs once per seed and
/// pyramid setting. With `out`, each run writes its log and checkpoint to
/// `out/<variant>/seed<k>/` and the table to `out/ablation.csv`.
pub fn run_ablation(base: &RunConfig, variants: &[Variant], out: Option<&Path>) -> Result<AblationReport> {
    base.validate()?;
    let splits = build_splits(base)?;
    let mut report = AblationReport {
        split_hash: splits.hash.clone(),
        rows: Vec::new(),
        models: Vec::new(),
    };
    for &seed in &base.seeds {
        let mut pretrained: [Option<Actor>; 2] = [None, None];
        for &variant in variants {
            let cfg = variant.config(base, seed);
            let slot = usize::from(cfg.state_pyramid);
            let result = (|| -> Result<(Actor, usize)> {
                if pretrained[slot].is_none() {
                    pretrained[slot] = Some(if cfg.state_pyramid {
                        pretrained_actor(&cfg, &splits, seed)?
                    } else {
                        pretrain_actor(&cfg, &splits, seed)?.0
                    });
                }
                let pre = pretrained[slot].as_ref().expect("just set");
                let dir = out.map(|o| o.join(variant.name()).join(format!("seed{seed}")));
                if let Some(d) = &dir {
                    std::fs::create_dir_all(d)?;
                }
                let echo = cfg.echo();
                let output = dir.as_deref().map(|d| Output { dir: d, comment: &echo });
                if variant.is_baseline() {
                    let (actor, rep) = train_supervised(&cfg, pre, &splits, output)?;
                    Ok((actor, rep.best_epoch))
                } else {
                    let (actor, _, rep) = train_actor_critic(&cfg, pre, &splits, output)?;
                    Ok((actor, rep.best_epoch))
                }
            })();
            let (outcome, best_epoch) = match result {
                Ok((actor, best_epoch)) => {
                    let m = evaluate(&actor, &splits.test, cfg.max_steps());
                    report.models.push(TrainedModel { variant, seed, actor });
                    (Ok(m), best_epoch)
                }
                Err(e) => (Err(e.to_string()), 0),
            };
            report.rows.push(AblationRow {
                variant,
                seed,
                config: cfg,
                outcome,
                best_epoch,
            });
            if let Some(o) = out {
                write_csv(&o.join("ablation.csv"), &base.echo(), &ABLATION_HEADER, &report.csv_rows())?;
            }
        }
    }
    Ok(report)
}

/// Dice of each prediction against its max-matched ground truth (0 when
/// unmatched).
pub fn matched_dice(preds: &[BinaryMask], gts: &[BinaryMask]) -> Vec<f64> {
    if preds.is_empty() {
        return Vec::new();
    }
    if gts.is_empty() {
        return vec![0.0; preds.len()];
    }
    let scores = score_matrix(preds, gts, ScoreFunction::Dice);
    let a = max_matching(&scores);
    let mut out = vec![0.0; preds.len()];
    for (i, j) in a.assigned() {
        out[i] = dice(&preds[i], &gts[j]);
    }
    out
}

/// Mean, population standard deviation and sample count of one timestep.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct TimestepStat {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

/// Per-timestep Dice under ground-truth stopping.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TimestepReport {
    pub steps: Vec<TimestepStat>,
    /// Raw values per timestep.
    pub values: Vec<Vec<f64>>,
}

impl TimestepReport {
    /// Pooled mean over the last `ceil(T / 3)` timesteps.
    pub fn final_third_mean(&self) -> f64 {
        let t = self.values.len();
        let k = t.div_ceil(3);
        let pooled: Vec<f64> = self.values[t - k..].iter().flatten().copied().collect();
        pooled.iter().sum::<f64>() / pooled.len().max(1) as f64
    }
}

fn stat(v: &[f64]) -> TimestepStat {
    let n = v.len();
    if n == 0 {
        return TimestepStat::default();
    }
    let mean = v.iter().sum::<f64>() / n as f64;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
    TimestepStat {
        mean,
        std: var.sqrt(),
        count: n,
    }
}

/// Runs exactly N steps per scene and records the Dice of the `t`-th
/// prediction against its max-matched ground truth.
pub fn per_timestep_report(actor: &Actor, scenes: &[Arc<SceneContext>]) -> TimestepReport {
    timestep_from_predictions(scenes.iter().map(|c| {
        let n = c.scene.instance_count();
        let preds = actor.infer(c, n, Block::None, Some(n)).masks;
        (preds, c.scene.gt_masks.clone())
    }))
}

/// Per-timestep statistics from `(predictions, ground truths)` pairs.
pub fn timestep_from_predictions(pairs: impl IntoIterator<Item = (Vec<BinaryMask>, Vec<BinaryMask>)>) -> TimestepReport {
    let mut values: Vec<Vec<f64>> = Vec::new();
    for (preds, gts) in pairs {
        for (t, d) in matched_dice(&preds, &gts).into_iter().enumerate() {
            if values.len() <= t {
                values.resize(t + 1, Vec::new());
            }
            values[t].push(d);
        }
    }
    TimestepReport {
        steps: values.iter().map(|v| stat(v)).collect(),
        values,
    }
}

pub const TIMESTEP_HEADER: [&str; 5] = ["model", "timestep", "mean_dice", "std_dice", "count"];

pub fn timestep_rows(named: &[(&str, &TimestepReport)]) -> Vec<Vec<String>> {
    let mut rows = Vec::new();
    for (name, r) in named {
        for (t, s) in r.steps.iter().enumerate() {
            rows.push(vec![name.to_string(), (t + 1).to_string(), f6(s.mean), f6(s.std), s.count.to_string()]);
        }
    }
    rows
}

/// SVG bar chart of several per-timestep reports side by side.
pub fn timestep_svg(named: &[(&str, &TimestepReport)]) -> String {
    let groups: Vec<svg::Series> = named
        .iter()
        .map(|(name, r)| svg::Series {
            label: name.to_string(),
            values: r.steps.iter().map(|s| (s.mean, s.std)).collect(),
        })
        .collect();
    let bars = named.iter().map(|(_, r)| r.steps.len()).max().unwrap_or(0);
    let labels: Vec<String> = (1..=bars).map(|t| t.to_string()).collect();
    svg::bar_chart("Dice per timestep", "timestep", "Dice", &labels, &groups)
}

/// Metrics of one blocking configuration.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlockingRow {
    pub block: Block,
    /// Mean max-matched Dice with exactly N predictions per scene.
    pub dice: f64,
    /// Mean |DiC| under learned termination.
    pub dic: f64,
    pub sbd: f64,
}

pub fn block_name(b: Block) -> &'static str {
    match b {
        Block::None => "none",
        Block::Lstm => "lstm",
        Block::Mask => "mask",
    }
}

/// Evaluates `actor` with the selected recurrent state zeroed at every step.
pub fn state_blocking_eval(actor: &Actor, scenes: &[Arc<SceneContext>], block: Block, max_steps: usize) -> BlockingRow {
    let (mut dice_sum, mut dice_n) = (0.0, 0usize);
    let mut preds = Vec::with_capacity(scenes.len());
    for c in scenes {
        let gts = &c.scene.gt_masks;
        let n = gts.len();
        let fixed = actor.infer(c, n, block, Some(n)).masks;
        for d in matched_dice(&fixed, gts) {
            dice_sum += d;
            dice_n += 1;
        }
        preds.push(actor.infer(c, max_steps, block, None).masks);
    }
    let m = MetricSummary::evaluate(
        preds.iter().zip(scenes).map(|(p, c)| (p.as_slice(), c.scene.gt_masks.as_slice())),
        0.0,
    );
    BlockingRow {
        block,
        dice: dice_sum / dice_n.max(1) as f64,
        dic: m.dic,
        sbd: m.sbd,
    }
}

pub const BLOCKING_HEADER: [&str; 5] = ["model", "block", "dice", "abs_dic", "sbd"];

pub fn blocking_rows(model: &str, rows: &[BlockingRow]) -> Vec<Vec<String>> {
    rows.iter()
        .map(|r| vec![model.to_string(), block_name(r.block).into(), f6(r.dice), f6(r.dic), f6(r.sbd)])
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bar(h: usize, w: usize, rows: std::ops::Range<usize>) -> BinaryMask {
        BinaryMask::from_fn(h, w, |y, _| rows.contains(&y))
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(&[]), None);
    }

    #[test]
    fn matched_dice_follows_assignment_not_order() {
        let gts = vec![bar(4, 4, 0..2), bar(4, 4, 2..4)];
        let preds = vec![bar(4, 4, 2..4), bar(4, 4, 0..1)];
        let d = matched_dice(&preds, &gts);
        assert_eq!(d[0], 1.0);
        assert!((d[1] - 2.0 / 3.0).abs() < 1e-12);
        let extra = matched_dice(&[gts[0].clone(), gts[1].clone(), gts[0].clone()], &gts);
        assert_eq!(extra.iter().filter(|&&x| x == 0.0).count(), 1);
    }

    #[test]
    fn perfect_predictions_give_unit_bars() {
        let gts = vec![bar(4, 4, 0..1), bar(4, 4, 1..3), bar(4, 4, 3..4)];
        let r = timestep_from_predictions([(gts.clone(), gts.clone()), (gts[..2].to_vec(), gts[..2].to_vec())]);
        assert_eq!(r.steps.len(), 3);
        assert!(r.steps.iter().all(|s| s.mean == 1.0 && s.std == 0.0));
        assert_eq!(r.steps.iter().map(|s| s.count).collect::<Vec<_>>(), [2, 2, 1]);
        assert_eq!(r.final_third_mean(), 1.0);
    }

    #[test]
    fn final_third_pools_the_last_ceil_third() {
        let r = TimestepReport {
            steps: vec![],
            values: vec![vec![0.0], vec![0.0], vec![0.0], vec![1.0, 0.5], vec![0.0]],
        };
        // T = 5 keeps the last two timesteps: (1 + 0.5 + 0) / 3.
        assert!((r.final_third_mean() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn variant_configs() {
        let base = RunConfig::default();
        assert_eq!(Variant::AcDiceNoKl.config(&base, 3).kl_weight, 0.0);
        assert!(Variant::AcDiceNoKl.config(&base, 3).echo().contains(" kl_weight=0 "));
        assert!(!Variant::AcDiceNoSp.config(&base, 0).state_pyramid);
        assert_eq!(Variant::Bl.config(&base, 0).baseline_mode, BaselineMode::FullBptt);
        assert_eq!(Variant::AcDice.config(&base, 9).seed, 9);
    }
}
