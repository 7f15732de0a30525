//! cVAE pre-training: reconstruct one ground-truth mask from its latent code.
//!
//! The encoder sees the image, auxiliary channels and the target mask; the
//! decoder's pyramid carries a random union of the other instances as the
//! accumulated mask, matching what it will see during sequential training.
//! The LSTM is bypassed: the encoder feature feeds the latent heads directly.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::Actor;
use crate::compute::{AdamState, Tape, Tensor};
use crate::environment::SceneContext;
use crate::error::{Error, Result};
use crate::scoring::{dice, BinaryMask};

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub kl_weight: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 20,
            batch_size: 16,
            learning_rate: 1e-3,
            weight_decay: 1e-5,
            kl_weight: 1.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PretrainReport {
    /// Mean per-sample loss (pixel-summed BCE plus weighted KL) per epoch.
    pub epoch_losses: Vec<f64>,
    /// Held-out reconstruction Dice after each epoch.
    pub val_dice: Vec<f64>,
    pub steps: u64,
}

struct Sample {
    scene: usize,
    target: usize,
    context: Vec<usize>,
}

fn draw_context(n: usize, target: usize, rng: &mut impl Rng) -> Vec<usize> {
    (0..n).filter(|&j| j != target && rng.gen_bool(0.5)).collect()
}

fn mask_tensor(masks: &[&BinaryMask], ids: impl Iterator<Item = usize>) -> Vec<f64> {
    let mut out = vec![0.0; masks.first().map_or(0, |m| m.bits().len())];
    for j in ids {
        for (o, &b) in out.iter_mut().zip(masks[j].bits()) {
            if b {
                *o = 1.0;
            }
        }
    }
    out
}

/// Builds `(contexts, target, context-mask)` batch tensors.
fn batch_tensors<'a>(scenes: &'a [Arc<SceneContext>], batch: &[Sample]) -> (Vec<&'a SceneContext>, Tensor, Tensor) {
    let ctxs: Vec<&SceneContext> = batch.iter().map(|s| scenes[s.scene].as_ref()).collect();
    let (h, w) = (ctxs[0].height(), ctxs[0].width());
    let mut target = Vec::with_capacity(batch.len() * h * w);
    let mut context = Vec::with_capacity(batch.len() * h * w);
    for (s, ctx) in batch.iter().zip(&ctxs) {
        let gts: Vec<&BinaryMask> = ctx.scene.gt_masks.iter().collect();
        target.extend(gts[s.target].to_f64());
        context.extend(mask_tensor(&gts, s.context.iter().copied()));
    }
    let shape = vec![batch.len(), 1, h, w];
    (ctxs, Tensor::new(shape.clone(), target), Tensor::new(shape, context))
}

fn standard_normal(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.sample(StandardNormal)).collect())
}

/// Trains encoder, latent heads and decoder. LSTM and termination
/// parameters are left untouched.
pub fn pretrain_cvae(
    actor: &mut Actor,
    train: &[Arc<SceneContext>],
    val: &[Arc<SceneContext>],
    cfg: &PretrainConfig,
) -> Result<PretrainReport> {
    if train.is_empty() {
        return Err(Error::InvalidArgument("pre-training needs at least one scene".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let saved: Vec<bool> = actor.params.params().iter().map(|p| p.trainable).collect();
    actor.params.set_trainable_prefix("actor.", true);
    actor.params.set_trainable_prefix("actor.lstm.", false);
    actor.params.set_trainable_prefix("actor.term.", false);
    let mut adam = AdamState::new(actor.params.params(), cfg.learning_rate, cfg.weight_decay);
    let pixels = (actor.arch.height * actor.arch.width) as f64;
    let mut report = PretrainReport::default();
    let result = (|| {
        for _ in 0..cfg.epochs {
            let mut samples: Vec<(usize, usize)> = train
                .iter()
                .enumerate()
                .flat_map(|(i, c)| (0..c.scene.instance_count()).map(move |k| (i, k)))
                .collect();
            samples.shuffle(&mut rng);
            let mut total = 0.0;
            for chunk in samples.chunks(cfg.batch_size.max(1)) {
                let batch: Vec<Sample> = chunk
                    .iter()
                    .map(|&(scene, target)| Sample {
                        scene,
                        target,
                        context: draw_context(train[scene].scene.instance_count(), target, &mut rng),
                    })
                    .collect();
                let (ctxs, target, context) = batch_tensors(train, &batch);
                let noise = standard_normal(&mut rng, &[batch.len(), actor.arch.latent]);
                let mut tape = Tape::new();
                let p = actor.bind(&mut tape);
                let tgt = tape.constant(target.clone());
                let input = Actor::input_var(&mut tape, &ctxs, tgt);
                let cm = tape.constant(context);
                let pyramid = actor.pyramid(&mut tape, &ctxs, cm);
                let feature = actor.encode(&mut tape, &p, input);
                let (mu, lv) = actor.latent_heads(&mut tape, &p, feature);
                let a = tape.reparameterize(mu, lv, &noise);
                let recon = actor.decode(&mut tape, &p, a, &pyramid);
                let bce = tape.bce(recon, &target);
                let bce = tape.scale(bce, pixels);
                let kl = tape.kl_diag_gaussian(mu, lv);
                let kl = tape.scale(kl, cfg.kl_weight);
                let loss = tape.add(bce, kl);
                let value = tape.value(loss).item();
                if !value.is_finite() {
                    return Err(Error::Diverged(format!(
                        "pre-training loss became {value} after {} steps",
                        report.steps
                    )));
                }
                total += value * batch.len() as f64;
                let grads = tape.backward(loss);
                actor.params.zero_grad();
                actor.params.accumulate(&grads, &p);
                adam.step(actor.params.params_mut());
                report.steps += 1;
            }
            report.epoch_losses.push(total / samples.len() as f64);
            if !val.is_empty() {
                report.val_dice.push(reconstruction_dice(actor, val, cfg.seed ^ 0x5EED));
            }
        }
        Ok(())
    })();
    for (p, t) in actor.params.params_mut().iter_mut().zip(saved) {
        p.trainable = t;
    }
    result.map(|()| report)
}

/// Mean Dice of mean-action reconstructions over every instance of
/// `scenes`, with contexts drawn from a generator seeded by `seed`.
pub fn reconstruction_dice(actor: &Actor, scenes: &[Arc<SceneContext>], seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples: Vec<Sample> = scenes
        .iter()
        .enumerate()
        .flat_map(|(i, c)| (0..c.scene.instance_count()).map(move |k| (i, k)))
        .map(|(scene, target)| Sample {
            scene,
            target,
            context: draw_context(scenes[scene].scene.instance_count(), target, &mut rng),
        })
        .collect();
    if samples.is_empty() {
        return 0.0;
    }
    let (h, w) = (actor.arch.height, actor.arch.width);
    let mut total = 0.0;
    for chunk in samples.chunks(32) {
        let (ctxs, target, context) = batch_tensors(scenes, chunk);
        let mut tape = Tape::new();
        let p = actor.bind_frozen(&mut tape);
        let tgt = tape.constant(target);
        let input = Actor::input_var(&mut tape, &ctxs, tgt);
        let cm = tape.constant(context);
        let pyramid = actor.pyramid(&mut tape, &ctxs, cm);
        let feature = actor.encode(&mut tape, &p, input);
        let (mu, _) = actor.latent_heads(&mut tape, &p, feature);
        let recon = actor.decode(&mut tape, &p, mu, &pyramid);
        let out = tape.value(recon);
        for (b, s) in chunk.iter().enumerate() {
            let pred = BinaryMask::from_probabilities(h, w, &out.data()[b * h * w..(b + 1) * h * w]);
            total += dice(&pred, &scenes[s.scene].scene.gt_masks[s.target]);
        }
    }
    total / samples.len() as f64
}

/// Decodes `latents` (`[B, latent]`) against the context of `ctx` with an
/// empty accumulated mask.
pub fn decode_latents(actor: &Actor, ctx: &SceneContext, latents: &Tensor) -> Tensor {
    let b = latents.shape()[0];
    let ctxs = vec![ctx; b];
    let mut tape = Tape::new();
    let p = actor.bind_frozen(&mut tape);
    let zeros = Tensor::zeros(&[b, 1, actor.arch.height, actor.arch.width]);
    let m = tape.constant(zeros);
    let pyramid = actor.pyramid(&mut tape, &ctxs, m);
    let a = tape.constant(latents.clone());
    let out = actor.decode(&mut tape, &p, a, &pyramid);
    tape.value(out).clone()
}
