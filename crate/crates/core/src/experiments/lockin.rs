//! Ordering lock-in: small supervised models trained from scratch on
//! two-instance scenes tend to keep whichever prediction order the matching
//! picked at initialisation. Perturbing the matching breaks the lock.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{extra_scenes, f6, median, RunConfig};
use crate::actor::{Actor, Block};
use crate::compute::{AdamState, Tape};
use crate::environment::{scene_seed, SceneContext};
use crate::error::{Error, Result};
use crate::scoring::dice;
use crate::trainer::{baseline_episode_loss, BaselineMode};

const LOCKIN_STREAM: u64 = 21;
const HEAD_JITTER: f64 = 0.1;

/// Agreement between initial and converged order at one noise level.
#[derive(Clone, Debug, PartialEq)]
pub struct LockinRow {
    pub sigma: f64,
    /// Per-seed fraction of scenes whose converged first prediction matches
    /// the ground truth assigned to step 0 at initialisation.
    pub agreement: Vec<f64>,
    /// Per-seed fraction of scenes where the larger instance comes first.
    pub larger_first: Vec<f64>,
}

impl LockinRow {
    pub fn median_agreement(&self) -> f64 {
        median(&self.agreement).unwrap_or(f64::NAN)
    }

    pub fn mean_agreement(&self) -> f64 {
        self.agreement.iter().sum::<f64>() / self.agreement.len().max(1) as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LockinReport {
    pub rows: Vec<LockinRow>,
}

pub const LOCKIN_HEADER: [&str; 5] = ["sigma", "median_agreement", "mean_agreement", "median_larger_first", "seeds"];

impl LockinReport {
    pub fn csv_rows(&self) -> Vec<Vec<String>> {
        self.rows
            .iter()
            .map(|r| {
                vec![
                    r.sigma.to_string(),
                    f6(r.median_agreement()),
                    f6(r.mean_agreement()),
                    f6(median(&r.larger_first).unwrap_or(f64::NAN)),
                    r.agreement.len().to_string(),
                ]
            })
            .collect()
    }

    pub fn svg(&self) -> String {
        let pts = self.rows.iter().map(|r| (r.sigma, r.median_agreement())).collect();
        super::svg::line_chart("Order lock-in vs matching noise", "sigma", "median agreement", &[("agreement".into(), pts)])
    }
}

/// Ground-truth index the exact matching assigns to the first step.
fn initial_first(actor: &Actor, ctx: &SceneContext) -> usize {
    let mut tape = Tape::new();
    let p = actor.bind_frozen(&mut tape);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let ep = baseline_episode_loss(&mut tape, actor, &p, ctx, BaselineMode::Truncated, 0.0, 0.0, &mut rng);
    let first = ep.assignment.assigned().find(|&(i, _)| i == 0).map(|(_, j)| j);
    first.expect("step 0 is matched")
}

/// Ground truth best covered by the first of exactly two predictions.
fn converged_first(actor: &Actor, ctx: &Arc<SceneContext>) -> usize {
    let preds = actor.infer(ctx, 2, Block::None, Some(2)).masks;
    let gts = &ctx.scene.gt_masks;
    let (a, b) = (dice(&preds[0], &gts[0]), dice(&preds[0], &gts[1]));
    usize::from(b > a)
}

/// Supervised updates over `scenes` for `epochs` passes, no early stopping.
fn fit(actor: &mut Actor, scenes: &[Arc<SceneContext>], sigma: f64, epochs: usize, cfg: &RunConfig, rng: &mut ChaCha8Rng) -> Result<()> {
    let mut adam = AdamState::new(actor.params.params(), cfg.actor_lr, cfg.actor_weight_decay);
    let mut order: Vec<usize> = (0..scenes.len()).collect();
    for epoch in 0..epochs {
        order.shuffle(rng);
        for chunk in order.chunks(cfg.batch_size) {
            actor.params.zero_grad();
            for &i in chunk {
                let mut tape = Tape::new();
                let p = actor.bind(&mut tape);
                let ep = baseline_episode_loss(&mut tape, actor, &p, &scenes[i], BaselineMode::Truncated, cfg.termination_weight, sigma, rng);
                let v = tape.value(ep.loss).item();
                if !v.is_finite() {
                    return Err(Error::Diverged(format!("lock-in loss became {v} in epoch {epoch}")));
                }
                let grads = tape.backward(ep.loss);
                actor.params.accumulate(&grads, &p);
            }
            actor.params.scale_grad(1.0 / chunk.len() as f64);
            adam.step(actor.params.params_mut());
        }
    }
    Ok(())
}

/// A model sharing the pre-trained decoder, with a fresh encoder, LSTM and
/// termination head, and a latent head jittered so that the first
/// prediction already depends on the seed.
fn seeded_model(pretrained: &Actor, seed: u64) -> Result<Actor> {
    let mut actor = Actor::new(pretrained.arch.clone(), seed)?;
    actor.copy_from(pretrained, &["actor.encoder.", "actor.lstm.", "actor.heads.", "actor.term."]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, HEAD_JITTER).expect("valid std");
    for id in actor.params.ids().collect::<Vec<_>>() {
        if actor.params.name(id).starts_with("actor.heads.mu_logvar") {
            for v in actor.params.get_mut(id).value.data_mut() {
                *v += noise.sample(&mut rng);
            }
        }
    }
    Ok(actor)
}

/// For each of `lockin_seeds` seeds: a model on the pre-trained decoder is
/// warmed up for `lockin_warmup` epochs with exact matching, which fixes
/// the initial order; copies then train for `lockin_epochs` more epochs at
/// every noise level and the converged order is compared to the initial one.
pub fn ordering_lockin_demo(cfg: &RunConfig, pretrained: &Actor) -> Result<LockinReport> {
    cfg.validate()?;
    if pretrained.arch != cfg.arch() {
        return Err(Error::Config("pre-trained actor does not match the configured architecture".into()));
    }
    let mut scene_cfg = cfg.scene_config();
    scene_cfg.n_min = 2;
    scene_cfg.n_max = 2;
    let scenes = extra_scenes(cfg, LOCKIN_STREAM, cfg.lockin_scenes, &scene_cfg)?;
    let larger: Vec<usize> = scenes
        .iter()
        .map(|c| usize::from(c.scene.gt_masks[1].area() > c.scene.gt_masks[0].area()))
        .collect();
    let mut rows: Vec<LockinRow> = cfg
        .lockin_sigmas
        .iter()
        .map(|&sigma| LockinRow {
            sigma,
            agreement: Vec::new(),
            larger_first: Vec::new(),
        })
        .collect();
    for k in 0..cfg.lockin_seeds as u64 {
        let seed = scene_seed(cfg.seed, k);
        let mut init = seeded_model(pretrained, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        fit(&mut init, &scenes, 0.0, cfg.lockin_warmup, cfg, &mut rng)?;
        let first: Vec<usize> = scenes.iter().map(|c| initial_first(&init, c)).collect();
        for row in &mut rows {
            let mut actor = init.clone();
            let mut rng = ChaCha8Rng::seed_from_u64(scene_seed(seed, 1));
            fit(&mut actor, &scenes, row.sigma, cfg.lockin_epochs, cfg, &mut rng)?;
            let conv: Vec<usize> = scenes.iter().map(|c| converged_first(&actor, c)).collect();
            let n = scenes.len() as f64;
            row.agreement
                .push(conv.iter().zip(&first).filter(|(a, b)| a == b).count() as f64 / n);
            row.larger_first
                .push(conv.iter().zip(&larger).filter(|(a, b)| a == b).count() as f64 / n);
        }
    }
    Ok(LockinReport { rows })
}
