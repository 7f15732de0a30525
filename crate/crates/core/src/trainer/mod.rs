//! Actor-critic training: episode rollouts into a per-minibatch replay
//! buffer, critic regression on Monte-Carlo returns, actor updates through
//! the critic, warm-up, curriculum and learning-rate decay. Supervised
//! baselines live in [`baseline`].

mod baseline;
mod schedule;

use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::actor::{ActionMode, Actor};
use crate::compute::{AdamState, Tape, Tensor, Var};
use crate::critic::{critic_loss, BnMode, Critic};
use crate::environment::{initial_state, transition, EnvState, SceneContext};
use crate::error::{Error, Result};
use crate::scoring::{reward_sequence, BinaryMask, MetricSummary, RewardTrace, ScoreFunction};

pub use baseline::{baseline_episode_loss, train_baseline, BaselineMode};
pub use schedule::{Curriculum, Plateau};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainerConfig {
    pub gamma: f64,
    pub actor_lr: f64,
    pub critic_lr: f64,
    /// Weight of the KL term in the actor update.
    pub kl_weight: f64,
    pub actor_weight_decay: f64,
    pub critic_weight_decay: f64,
    /// Weight of the termination BCE in actor and baseline updates.
    pub termination_weight: f64,
    /// Epochs during which only the critic is updated.
    pub warmup_epochs: usize,
    /// Upper bound on training epochs.
    pub epochs: usize,
    /// Scenes per minibatch.
    pub batch_size: usize,
    /// Remaining-instance increment on each plateau.
    pub curriculum_step: usize,
    /// Epochs without validation improvement that count as a plateau.
    pub patience: usize,
    pub lr_decay: f64,
    pub score: ScoreFunction,
    /// Mean-KL bound tracked per actor batch; `None` means `10 · latent`.
    pub kl_ceiling: Option<f64>,
    /// Standard deviation of the score noise used by baseline matching.
    pub matching_noise: f64,
    pub seed: u64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            gamma: 0.9,
            actor_lr: 1e-3,
            critic_lr: 1e-3,
            kl_weight: 1e-3,
            actor_weight_decay: 1e-5,
            critic_weight_decay: 1e-4,
            termination_weight: 1.0,
            warmup_epochs: 3,
            epochs: 40,
            batch_size: 8,
            curriculum_step: 5,
            patience: 5,
            lr_decay: 0.1,
            score: ScoreFunction::Dice,
            kl_ceiling: None,
            matching_noise: 0.0,
            seed: 0,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return bad("gamma must lie in (0, 1)");
        }
        if self.actor_lr <= 0.0 || self.critic_lr <= 0.0 {
            return bad("learning rates must be positive");
        }
        if self.kl_weight < 0.0 || self.termination_weight < 0.0 || self.matching_noise < 0.0 {
            return bad("loss weights and matching noise must be non-negative");
        }
        if self.actor_weight_decay < 0.0 || self.critic_weight_decay < 0.0 {
            return bad("weight decay must be non-negative");
        }
        if self.batch_size == 0 || self.curriculum_step == 0 || self.patience == 0 {
            return bad("batch size, curriculum step and patience must be positive");
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad("lr_decay must lie in (0, 1]");
        }
        Ok(())
    }
}

/// One executed timestep.
#[derive(Clone, Debug)]
pub struct StepRecord {
    /// `M_t`, `[1, 1, H, W]`.
    pub state_mask: Tensor,
    pub action: Tensor,
    /// Soft decoded mask `m_t`, `[1, 1, H, W]`.
    pub decoded: Tensor,
    pub reward: f64,
}

#[derive(Clone, Debug)]
pub struct Episode {
    pub context: Arc<SceneContext>,
    /// `M_1`: the ground truths given away by the curriculum.
    pub initial_mask: Tensor,
    /// Ground truths still to be predicted, in scene order.
    pub targets: Vec<BinaryMask>,
    pub steps: Vec<StepRecord>,
    pub trace: RewardTrace,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn total_reward(&self) -> f64 {
        self.trace.rewards.iter().sum()
    }
}

/// Episodes of the current minibatch.
#[derive(Clone, Debug, Default)]
pub struct ReplayBuffer {
    pub episodes: Vec<Episode>,
}

impl ReplayBuffer {
    pub fn clear(&mut self) {
        self.episodes.clear();
    }

    pub fn push(&mut self, e: Episode) {
        self.episodes.push(e);
    }

    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    /// Number of `(s_t, m_t, G_t)` tuples.
    pub fn transitions(&self) -> usize {
        self.episodes.iter().map(Episode::len).sum()
    }
}

pub(crate) fn standard_normal(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.sample(StandardNormal)).collect())
}

/// Rolls out `remaining` sampled steps from a curriculum start state.
pub fn run_episode(
    ctx: &Arc<SceneContext>,
    actor: &Actor,
    remaining: usize,
    score: ScoreFunction,
    gamma: f64,
    rng: &mut impl Rng,
) -> Result<Episode> {
    let (mut state, targets) = initial_state(ctx, remaining, rng)?;
    let initial_mask = state.mask().clone();
    let mut hidden = crate::actor::Hidden::zeros(1, actor.arch.hidden);
    let mut steps = Vec::with_capacity(remaining);
    let mut preds = Vec::with_capacity(remaining);
    for _ in 0..remaining {
        let noise = standard_normal(rng, &[1, actor.arch.latent]);
        let out = actor.actor_step(&state, &hidden, ActionMode::Sample(&noise));
        preds.push(BinaryMask::from_probabilities(
            state.height(),
            state.width(),
            out.decoded_mask.data(),
        ));
        steps.push(StepRecord {
            state_mask: state.mask().clone(),
            action: out.action,
            decoded: out.decoded_mask.clone(),
            reward: 0.0,
        });
        state = transition(&state, &out.decoded_mask);
        hidden = out.hidden;
    }
    let trace = reward_sequence(&preds, &targets, score, gamma);
    for (s, &r) in steps.iter_mut().zip(&trace.rewards) {
        s.reward = r;
    }
    Ok(Episode {
        context: ctx.clone(),
        initial_mask,
        targets,
        steps,
        trace,
    })
}

/// One Adam step on the mean critic loss over every buffered transition,
/// with batch-statistics normalisation. Returns the loss before the step.
pub fn update_critic(buffer: &ReplayBuffer, critic: &mut Critic, adam: &mut AdamState) -> Result<f64> {
    if buffer.transitions() == 0 {
        return Err(Error::InvalidArgument("critic update on an empty buffer".into()));
    }
    let mut ctxs = Vec::new();
    let mut states = Vec::new();
    let mut preds = Vec::new();
    let mut targets = Vec::new();
    for e in &buffer.episodes {
        for (s, &g) in e.steps.iter().zip(&e.trace.returns) {
            ctxs.push(e.context.as_ref());
            states.push(&s.state_mask);
            preds.push(&s.decoded);
            targets.push(g);
        }
    }
    let mut tape = Tape::new();
    let p = critic.bind(&mut tape);
    let sm = tape.constant(Tensor::concat_batch(&states));
    let pm = tape.constant(Tensor::concat_batch(&preds));
    let input = Critic::input_var(&mut tape, &ctxs, sm, pm);
    let (q, stats) = critic.forward(&mut tape, &p, input, BnMode::Train);
    let targets = Tensor::new(vec![targets.len(), 1], targets);
    let loss = critic_loss(&mut tape, q, &targets);
    let value = tape.value(loss).item();
    if !value.is_finite() {
        return Err(Error::Diverged(format!("critic loss became {value}")));
    }
    let grads = tape.backward(loss);
    critic.params.zero_grad();
    critic.params.accumulate(&grads, &p);
    adam.step(critic.params.params_mut());
    critic.update_running(&stats);
    Ok(value)
}

/// Loss weights of the actor update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ActorLossWeights {
    pub kl: f64,
    pub termination: f64,
}

/// Summary of one actor update.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ActorUpdate {
    pub mean_q: f64,
    /// Mean KL per step over the batch.
    pub mean_kl: f64,
    pub termination_loss: f64,
}

pub(crate) fn bce_logit(tape: &mut Tape, logit: Var, label: f64) -> Var {
    let p = tape.sigmoid(logit);
    tape.bce(p, &Tensor::filled(&[1, 1], label))
}

/// Actor objective for one re-run of a buffered episode: per step
/// `−Q(s_t, m_t) + β·KL_t + w·BCE(continue)`, plus a final stop label.
/// States are detached between steps; the LSTM state is not.
pub fn actor_episode_loss(
    tape: &mut Tape,
    actor: &Actor,
    actor_params: &crate::compute::Bound,
    critic: &Critic,
    critic_params: &crate::compute::Bound,
    episode: &Episode,
    weights: ActorLossWeights,
    rng: &mut impl Rng,
) -> (Var, ActorUpdate) {
    let ctx = episode.context.as_ref();
    let mut state = EnvState::with_mask(episode.context.clone(), episode.initial_mask.clone());
    let hid = actor.arch.hidden;
    let mut h = tape.constant(Tensor::zeros(&[1, hid]));
    let mut c = tape.constant(Tensor::zeros(&[1, hid]));
    let mut terms = Vec::new();
    let mut stats = ActorUpdate::default();
    let n = episode.len();
    for _ in 0..n {
        let m = tape.constant(state.mask().clone());
        let input = Actor::input_var(tape, &[ctx], m);
        let pyramid = actor.pyramid(tape, &[ctx], m);
        let noise = standard_normal(rng, &[1, actor.arch.latent]);
        let v = actor.step(tape, actor_params, input, &pyramid, h, c, ActionMode::Sample(&noise));
        let cin = Critic::input_var(tape, &[ctx], m, v.mask);
        let (q, _) = critic.forward(tape, critic_params, cin, BnMode::Eval);
        let q = tape.sum(q);
        stats.mean_q += tape.value(q).item();
        terms.push(tape.scale(q, -1.0));
        let kl = tape.kl_diag_gaussian(v.mu, v.log_var);
        stats.mean_kl += tape.value(kl).item();
        terms.push(tape.scale(kl, weights.kl));
        let bce = bce_logit(tape, v.term_logit, 1.0);
        stats.termination_loss += tape.value(bce).item();
        terms.push(tape.scale(bce, weights.termination));
        let decoded = tape.value(v.mask).clone();
        state = transition(&state, &decoded);
        h = v.h;
        c = v.c;
    }
    let m = tape.constant(state.mask().clone());
    let input = Actor::input_var(tape, &[ctx], m);
    let feature = actor.encode(tape, actor_params, input);
    let (h, _) = actor.recur(tape, actor_params, feature, h, c);
    let logit = actor.terminate(tape, actor_params, h, feature);
    let bce = bce_logit(tape, logit, 0.0);
    stats.termination_loss += tape.value(bce).item();
    terms.push(tape.scale(bce, weights.termination));
    let mut loss = terms[0];
    for &t in &terms[1..] {
        loss = tape.add(loss, t);
    }
    let steps = n.max(1) as f64;
    stats.mean_q /= steps;
    stats.mean_kl /= steps;
    stats.termination_loss /= (n + 1) as f64;
    (loss, stats)
}

/// Re-runs every buffered episode from its initial state with fresh
/// noise and takes one Adam step on the mean episode loss. The critic is
/// read in eval mode and never written; decoder parameters must be frozen
/// by the caller.
pub fn update_actor(
    buffer: &ReplayBuffer,
    actor: &mut Actor,
    critic: &Critic,
    adam: &mut AdamState,
    weights: ActorLossWeights,
    rng: &mut impl Rng,
) -> Result<ActorUpdate> {
    if buffer.is_empty() {
        return Err(Error::InvalidArgument("actor update on an empty buffer".into()));
    }
    actor.params.zero_grad();
    let mut total = ActorUpdate::default();
    for e in &buffer.episodes {
        let mut tape = Tape::new();
        let ap = actor.bind(&mut tape);
        let cp = critic.bind_frozen(&mut tape);
        let (loss, stats) = actor_episode_loss(&mut tape, actor, &ap, critic, &cp, e, weights, rng);
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(Error::Diverged(format!("actor loss became {value}")));
        }
        let grads = tape.backward(loss);
        actor.params.accumulate(&grads, &ap);
        total.mean_q += stats.mean_q;
        total.mean_kl += stats.mean_kl;
        total.termination_loss += stats.termination_loss;
    }
    let n = buffer.len() as f64;
    actor.params.scale_grad(1.0 / n);
    if !actor.params.grads_finite() {
        return Err(Error::Diverged("actor gradient is not finite".into()));
    }
    adam.step(actor.params.params_mut());
    total.mean_q /= n;
    total.mean_kl /= n;
    total.termination_loss /= n;
    Ok(total)
}

/// Mean-action inference over `scenes` with the learned stop signal.
pub fn evaluate_actor(actor: &Actor, scenes: &[Arc<SceneContext>], max_steps: usize) -> MetricSummary {
    let preds: Vec<Vec<BinaryMask>> = scenes.iter().map(|c| actor.infer_episode(c, max_steps)).collect();
    MetricSummary::evaluate(
        preds.iter().zip(scenes).map(|(p, c)| (p.as_slice(), c.scene.gt_masks.as_slice())),
        0.0,
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Warmup,
    ActorCritic,
    Baseline,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Warmup => "warmup",
            Phase::ActorCritic => "actor_critic",
            Phase::Baseline => "baseline",
        }
    }
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub epoch: usize,
    pub phase: Phase,
    /// Mean per-episode reward sum (baselines: mean matched soft Dice).
    pub mean_reward: f64,
    /// Mean critic loss (baselines: mean supervised loss).
    pub critic_loss: f64,
    pub val_sbd: f64,
    pub val_dic: f64,
    pub remaining: usize,
    pub actor_lr: f64,
}

pub const LOG_HEADER: [&str; 8] = [
    "epoch",
    "phase",
    "mean_reward",
    "critic_loss",
    "val_sbd",
    "val_dic",
    "remaining",
    "actor_lr",
];

/// Writes `rows` as CSV preceded by a `# comment` line.
pub fn write_log(path: &Path, comment: &str, rows: &[LogRow]) -> Result<()> {
    let mut buf = Vec::new();
    writeln!(buf, "# {comment}")?;
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        w.write_record(LOG_HEADER)?;
        for r in rows {
            w.write_record([
                r.epoch.to_string(),
                r.phase.name().to_string(),
                format!("{:.6}", r.mean_reward),
                format!("{:.6}", r.critic_loss),
                format!("{:.6}", r.val_sbd),
                format!("{:.6}", r.val_dic),
                r.remaining.to_string(),
                format!("{:e}", r.actor_lr),
            ])?;
        }
        w.flush()?;
    }
    fs::write(path, buf)?;
    Ok(())
}

/// Where training writes its log and checkpoints.
#[derive(Clone, Copy, Debug)]
pub struct Output<'a> {
    pub dir: &'a Path,
    /// Config echo placed on the log's comment line.
    pub comment: &'a str,
}

#[derive(Clone, Debug, Default)]
pub struct TrainReport {
    pub log: Vec<LogRow>,
    pub best_val_sbd: f64,
    pub best_epoch: usize,
    /// Largest per-batch mean KL seen in actor updates.
    pub max_batch_kl: f64,
    pub kl_ceiling: f64,
    pub kl_ceiling_breaches: usize,
    pub critic_losses: Vec<f64>,
}

/// Full actor-critic training. The actor's decoder is frozen for the
/// whole run; the best-validation actor and critic are restored at the
/// end. `max_steps` bounds validation episodes.
pub fn train(
    cfg: &TrainerConfig,
    actor: &mut Actor,
    critic: &mut Critic,
    train_set: &[Arc<SceneContext>],
    val_set: &[Arc<SceneContext>],
    max_steps: usize,
    output: Option<Output>,
) -> Result<TrainReport> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::InvalidArgument("training needs at least one scene".into()));
    }
    let n_max = train_set.iter().map(|c| c.scene.instance_count()).max().unwrap_or(1);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let decoder_was_trainable: Vec<bool> = actor.params.params().iter().map(|p| p.trainable).collect();
    actor.set_decoder_trainable(false);
    let result = train_inner(cfg, actor, critic, train_set, val_set, max_steps, n_max, output, &mut rng);
    for (p, t) in actor.params.params_mut().iter_mut().zip(decoder_was_trainable) {
        p.trainable = t;
    }
    result
}

#[allow(clippy::too_many_arguments)]
fn train_inner(
    cfg: &TrainerConfig,
    actor: &mut Actor,
    critic: &mut Critic,
    train_set: &[Arc<SceneContext>],
    val_set: &[Arc<SceneContext>],
    max_steps: usize,
    n_max: usize,
    output: Option<Output>,
    rng: &mut ChaCha8Rng,
) -> Result<TrainReport> {
    let mut actor_adam = AdamState::new(actor.params.params(), cfg.actor_lr, cfg.actor_weight_decay);
    let mut critic_adam = AdamState::new(critic.params.params(), cfg.critic_lr, cfg.critic_weight_decay);
    let weights = ActorLossWeights {
        kl: cfg.kl_weight,
        termination: cfg.termination_weight,
    };
    let kl_ceiling = cfg.kl_ceiling.unwrap_or(10.0 * actor.arch.latent as f64);
    let mut curriculum = Curriculum::new(1, cfg.curriculum_step, n_max + 1);
    let mut plateau = Plateau::new(cfg.patience);
    let mut lr_decayed = false;
    let mut report = TrainReport {
        kl_ceiling,
        best_val_sbd: f64::NEG_INFINITY,
        ..Default::default()
    };
    let mut best = (actor.clone(), critic.clone());
    let mut buffer = ReplayBuffer::default();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 0..cfg.epochs {
        let warmup = epoch < cfg.warmup_epochs;
        order.shuffle(rng);
        let (mut reward_sum, mut episodes, mut closs_sum, mut batches) = (0.0, 0usize, 0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            buffer.clear();
            for &i in chunk {
                let ctx = &train_set[i];
                let remaining = curriculum.remaining().min(ctx.scene.instance_count());
                let e = run_episode(ctx, actor, remaining, cfg.score, cfg.gamma, rng)?;
                reward_sum += e.total_reward();
                episodes += 1;
                buffer.push(e);
            }
            let closs = update_critic(&buffer, critic, &mut critic_adam)?;
            closs_sum += closs;
            batches += 1;
            report.critic_losses.push(closs);
            if !warmup {
                let upd = update_actor(&buffer, actor, critic, &mut actor_adam, weights, rng)?;
                report.max_batch_kl = report.max_batch_kl.max(upd.mean_kl);
                if upd.mean_kl > kl_ceiling {
                    report.kl_ceiling_breaches += 1;
                }
            }
        }
        let val = evaluate_actor(actor, val_set, max_steps);
        report.log.push(LogRow {
            epoch,
            phase: if warmup { Phase::Warmup } else { Phase::ActorCritic },
            mean_reward: reward_sum / episodes.max(1) as f64,
            critic_loss: closs_sum / batches.max(1) as f64,
            val_sbd: val.sbd,
            val_dic: val.dic,
            remaining: curriculum.remaining(),
            actor_lr: actor_adam.lr,
        });
        if val.sbd > report.best_val_sbd {
            report.best_val_sbd = val.sbd;
            report.best_epoch = epoch;
            best = (actor.clone(), critic.clone());
            if let Some(out) = output {
                actor.save(&out.dir.join("actor.ckpt"))?;
                critic.save(&out.dir.join("critic.ckpt"))?;
            }
        }
        if let Some(out) = output {
            write_log(&out.dir.join("train_log.csv"), out.comment, &report.log)?;
        }
        if warmup {
            continue;
        }
        if plateau.observe(val.sbd) {
            if curriculum.extend() {
                plateau.reset_counter();
            } else if !lr_decayed {
                actor_adam.lr *= cfg.lr_decay;
                critic_adam.lr *= cfg.lr_decay;
                lr_decayed = true;
                plateau.reset_counter();
            } else {
                break;
            }
        }
    }
    *actor = best.0;
    *critic = best.1;
    Ok(report)
}
