//! Supervised recurrent baselines: each episode predicts every instance
//! from an empty canvas, predictions are matched to ground truths by
//! maximum soft-Dice assignment, and the matched pixelwise BCE is
//! minimised together with the termination BCE.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{bce_logit, evaluate_actor, write_log, LogRow, Output, Phase, Plateau, TrainReport, TrainerConfig};
use crate::actor::{ActionMode, Actor};
use crate::assignment::{perturbed_matching, Assignment, ScoreMatrix};
use crate::compute::{AdamState, Bound, Tape, Tensor, Var};
use crate::environment::SceneContext;
use crate::error::{Error, Result};

/// How gradients flow between timesteps.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BaselineMode {
    /// Through the LSTM state and the accumulated mask.
    FullBptt,
    /// Hidden state and accumulated mask detached after every step.
    Truncated,
}

impl BaselineMode {
    pub fn name(self) -> &'static str {
        match self {
            BaselineMode::FullBptt => "full_bptt",
            BaselineMode::Truncated => "truncated",
        }
    }
}

fn soft_dice(p: &[f64], g: &[bool]) -> f64 {
    let (mut inter, mut sp, mut sg) = (0.0, 0.0, 0.0);
    for (&a, &b) in p.iter().zip(g) {
        sp += a;
        if b {
            inter += a;
            sg += 1.0;
        }
    }
    if sp + sg == 0.0 {
        1.0
    } else {
        2.0 * inter / (sp + sg)
    }
}

/// Result of one baseline episode on the tape.
#[derive(Clone, Debug)]
pub struct BaselineEpisode {
    pub loss: Var,
    /// Step → ground-truth assignment used for the BCE targets.
    pub assignment: Assignment,
    /// Per-step decoded masks.
    pub masks: Vec<Var>,
    /// Mean soft Dice of the matched pairs.
    pub matched_dice: f64,
}

/// Builds the baseline loss of one full episode (one step per ground
/// truth, plus a stop step) on `tape`.
#[allow(clippy::too_many_arguments)]
pub fn baseline_episode_loss(
    tape: &mut Tape,
    actor: &Actor,
    p: &Bound,
    ctx: &SceneContext,
    mode: BaselineMode,
    termination_weight: f64,
    matching_noise: f64,
    rng: &mut impl Rng,
) -> BaselineEpisode {
    let (h, w) = (ctx.height(), ctx.width());
    let n = ctx.scene.instance_count();
    let hid = actor.arch.hidden;
    let mut m = tape.constant(Tensor::zeros(&[1, 1, h, w]));
    let mut hv = tape.constant(Tensor::zeros(&[1, hid]));
    let mut cv = tape.constant(Tensor::zeros(&[1, hid]));
    let mut masks = Vec::with_capacity(n);
    let mut terms = Vec::new();
    for _ in 0..n {
        let input = Actor::input_var(tape, &[ctx], m);
        let pyramid = actor.pyramid(tape, &[ctx], m);
        let v = actor.step(tape, p, input, &pyramid, hv, cv, ActionMode::Mean);
        let bce = bce_logit(tape, v.term_logit, 1.0);
        terms.push(tape.scale(bce, termination_weight));
        masks.push(v.mask);
        let next = tape.maximum(m, v.mask);
        match mode {
            BaselineMode::FullBptt => {
                m = next;
                hv = v.h;
                cv = v.c;
            }
            BaselineMode::Truncated => {
                m = tape.detach(next);
                hv = tape.detach(v.h);
                cv = tape.detach(v.c);
            }
        }
    }
    let input = Actor::input_var(tape, &[ctx], m);
    let feature = actor.encode(tape, p, input);
    let (hl, _) = actor.recur(tape, p, feature, hv, cv);
    let logit = actor.terminate(tape, p, hl, feature);
    let bce = bce_logit(tape, logit, 0.0);
    terms.push(tape.scale(bce, termination_weight));

    let gts = &ctx.scene.gt_masks;
    let scores = ScoreMatrix::from_fn(n, n, |i, j| soft_dice(tape.value(masks[i]).data(), gts[j].bits()))
        .expect("non-empty square score matrix");
    let assignment = perturbed_matching(&scores, matching_noise, rng);
    let mut matched = 0.0;
    for (i, j) in assignment.assigned() {
        matched += scores.get(i, j);
        let target = Tensor::new(vec![1, 1, h, w], gts[j].to_f64());
        terms.push(tape.bce(masks[i], &target));
    }
    let mut loss = terms[0];
    for &t in &terms[1..] {
        loss = tape.add(loss, t);
    }
    BaselineEpisode {
        loss,
        assignment,
        masks,
        matched_dice: matched / n as f64,
    }
}

/// Trains every actor parameter, decoder included, on the supervised
/// objective. Plateaus decay the learning rate once, then stop training.
#[allow(clippy::too_many_arguments)]
pub fn train_baseline(
    cfg: &TrainerConfig,
    actor: &mut Actor,
    train_set: &[Arc<SceneContext>],
    val_set: &[Arc<SceneContext>],
    max_steps: usize,
    mode: BaselineMode,
    output: Option<Output>,
) -> Result<TrainReport> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::InvalidArgument("training needs at least one scene".into()));
    }
    let n_max = train_set.iter().map(|c| c.scene.instance_count()).max().unwrap_or(0);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::new(actor.params.params(), cfg.actor_lr, cfg.actor_weight_decay);
    let mut plateau = Plateau::new(cfg.patience);
    let mut lr_decayed = false;
    let mut report = TrainReport {
        best_val_sbd: f64::NEG_INFINITY,
        ..Default::default()
    };
    let mut best = actor.clone();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut dice_sum, mut episodes) = (0.0, 0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            actor.params.zero_grad();
            for &i in chunk {
                let mut tape = Tape::new();
                let p = actor.bind(&mut tape);
                let ep = baseline_episode_loss(
                    &mut tape,
                    actor,
                    &p,
                    &train_set[i],
                    mode,
                    cfg.termination_weight,
                    cfg.matching_noise,
                    &mut rng,
                );
                let value = tape.value(ep.loss).item();
                if !value.is_finite() {
                    return Err(Error::Diverged(format!("baseline loss became {value} in epoch {epoch}")));
                }
                loss_sum += value;
                dice_sum += ep.matched_dice;
                episodes += 1;
                let grads = tape.backward(ep.loss);
                actor.params.accumulate(&grads, &p);
            }
            actor.params.scale_grad(1.0 / chunk.len() as f64);
            adam.step(actor.params.params_mut());
        }
        let val = evaluate_actor(actor, val_set, max_steps);
        report.log.push(LogRow {
            epoch,
            phase: Phase::Baseline,
            mean_reward: dice_sum / episodes as f64,
            critic_loss: loss_sum / episodes as f64,
            val_sbd: val.sbd,
            val_dic: val.dic,
            remaining: n_max,
            actor_lr: adam.lr,
        });
        if val.sbd > report.best_val_sbd {
            report.best_val_sbd = val.sbd;
            report.best_epoch = epoch;
            best = actor.clone();
            if let Some(out) = output {
                actor.save(&out.dir.join("actor.ckpt"))?;
            }
        }
        if let Some(out) = output {
            write_log(&out.dir.join("train_log.csv"), out.comment, &report.log)?;
        }
        if plateau.observe(val.sbd) {
            if lr_decayed {
                break;
            }
            adam.lr *= cfg.lr_decay;
            lr_decayed = true;
            plateau.reset_counter();
        }
    }
    *actor = best;
    Ok(report)
}
