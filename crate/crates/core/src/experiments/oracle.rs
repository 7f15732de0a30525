//! Oracle ordering: a patch segmentation network is given the true location
//! of every instance and only the visiting order varies. The spread of
//! scene Dice across random orders measures how much the order matters.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{extra_scenes, f6, RunConfig};
use crate::compute::{AdamState, ParamId, ParamStore, Tape, Tensor, Var};
use crate::environment::{scene_seed, SceneContext};
use crate::error::{Error, Result};
use crate::scoring::{dice, BinaryMask};

const PATCH_CHANNELS: usize = 3;
const ORACLE_TRAIN_STREAM: u64 = 31;
const OCCLUDED_STREAM: u64 = 32;
const CLEAR_STREAM: u64 = 33;

/// Square window of side `size` centred on the mask centroid and clamped
/// to the image, as `(y0, x0)`.
fn window(mask: &BinaryMask, size: usize) -> ((usize, usize), (usize, usize)) {
    let (h, w) = (mask.height(), mask.width());
    let (mut sy, mut sx, mut n) = (0usize, 0usize, 0usize);
    for y in 0..h {
        for x in 0..w {
            if mask.get(y, x) {
                sy += y;
                sx += x;
                n += 1;
            }
        }
    }
    let (cy, cx) = if n == 0 { (h / 2, w / 2) } else { (sy / n, sx / n) };
    let y0 = cy.saturating_sub(size / 2).min(h - size);
    let x0 = cx.saturating_sub(size / 2).min(w - size);
    ((y0, x0), (cy, cx))
}

/// Fully convolutional patch segmenter: image, context and centroid
/// channels in, instance probability out.
#[derive(Clone, Debug)]
pub struct PatchNet {
    pub patch: usize,
    params: ParamStore,
    layers: Vec<(ParamId, ParamId)>,
}

impl PatchNet {
    pub fn new(patch: usize, channels: &[usize], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let mut layers = Vec::new();
        let mut ci = PATCH_CHANNELS;
        for (k, &co) in channels.iter().chain(std::iter::once(&1)).enumerate() {
            let bound = (6.0 / (9 * ci) as f64).sqrt();
            let w = Tensor::new(vec![co, ci, 3, 3], (0..co * ci * 9).map(|_| rng.gen_range(-bound..=bound)).collect());
            let wid = params.add(format!("patch.conv{k}.w"), w, true);
            let bid = params.add(format!("patch.conv{k}.b"), Tensor::zeros(&[co]), true);
            layers.push((wid, bid));
            ci = co;
        }
        PatchNet { patch, params, layers }
    }

    /// `[B, 3, P, P]` → probabilities `[B, 1, P, P]`.
    fn forward(&self, tape: &mut Tape, p: &crate::compute::Bound, mut x: Var) -> Var {
        let last = self.layers.len() - 1;
        for (k, &(w, b)) in self.layers.iter().enumerate() {
            x = tape.conv2d(x, p[w], Some(p[b]), 1);
            x = if k == last { tape.sigmoid(x) } else { tape.relu(x) };
        }
        x
    }

    /// Network input for the instance located by `target` with the given
    /// context, plus the window origin.
    fn input(&self, ctx: &SceneContext, target: &BinaryMask, context: &BinaryMask) -> (Vec<f64>, (usize, usize)) {
        let s = self.patch;
        let w = ctx.width();
        let ((y0, x0), (cy, cx)) = window(target, s);
        let img = ctx.scene.image.data();
        let mut data = vec![0.0; PATCH_CHANNELS * s * s];
        for y in 0..s {
            for x in 0..s {
                let (gy, gx) = (y0 + y, x0 + x);
                data[y * s + x] = img[gy * w + gx];
                data[s * s + y * s + x] = f64::from(u8::from(context.get(gy, gx)));
                let near = gy.abs_diff(cy) <= 1 && gx.abs_diff(cx) <= 1;
                data[2 * s * s + y * s + x] = f64::from(u8::from(near));
            }
        }
        (data, (y0, x0))
    }

    /// BCE training on patches centred on ground-truth instances, with each
    /// other instance present in the context with probability one half.
    pub fn train(&mut self, scenes: &[Arc<SceneContext>], epochs: usize, batch: usize, lr: f64, seed: u64) -> Result<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut items: Vec<(usize, usize)> = scenes
            .iter()
            .enumerate()
            .flat_map(|(i, c)| (0..c.scene.instance_count()).map(move |j| (i, j)))
            .collect();
        let mut adam = AdamState::new(self.params.params(), lr, 0.0);
        let s = self.patch;
        let mut losses = Vec::with_capacity(epochs);
        for _ in 0..epochs {
            items.shuffle(&mut rng);
            let (mut sum, mut n) = (0.0, 0usize);
            for chunk in items.chunks(batch.max(1)) {
                let (mut xs, mut ts) = (Vec::new(), Vec::new());
                for &(i, j) in chunk {
                    let ctx = &scenes[i];
                    let gts = &ctx.scene.gt_masks;
                    let mut context = BinaryMask::empty(ctx.height(), ctx.width());
                    for (k, g) in gts.iter().enumerate() {
                        if k != j && rng.gen_bool(0.5) {
                            context.union_with(g);
                        }
                    }
                    let (x, (y0, x0)) = self.input(ctx, &gts[j], &context);
                    xs.extend(x);
                    for y in 0..s {
                        for x in 0..s {
                            ts.push(f64::from(u8::from(gts[j].get(y0 + y, x0 + x))));
                        }
                    }
                }
                let b = chunk.len();
                let mut tape = Tape::new();
                let p = self.params.bind(&mut tape);
                let x = tape.constant(Tensor::new(vec![b, PATCH_CHANNELS, s, s], xs));
                let y = self.forward(&mut tape, &p, x);
                let loss = tape.bce(y, &Tensor::new(vec![b, 1, s, s], ts));
                let v = tape.value(loss).item();
                if !v.is_finite() {
                    return Err(Error::Diverged(format!("patch network loss became {v}")));
                }
                sum += v * b as f64;
                n += b;
                let grads = tape.backward(loss);
                self.params.zero_grad();
                self.params.accumulate(&grads, &p);
                adam.step(self.params.params_mut());
            }
            losses.push(sum / n.max(1) as f64);
        }
        Ok(losses)
    }

    /// Full-size binary prediction of the instance located by `target`.
    pub fn predict(&self, ctx: &SceneContext, target: &BinaryMask, context: &BinaryMask) -> BinaryMask {
        let s = self.patch;
        let (x, (y0, x0)) = self.input(ctx, target, context);
        let mut tape = Tape::new();
        let p = self.params.bind_frozen(&mut tape);
        let xv = tape.constant(Tensor::new(vec![1, PATCH_CHANNELS, s, s], x));
        let y = self.forward(&mut tape, &p, xv);
        let probs = tape.value(y).data();
        let mut out = BinaryMask::empty(ctx.height(), ctx.width());
        for yy in 0..s {
            for xx in 0..s {
                if probs[yy * s + xx] > 0.5 {
                    out.set(y0 + yy, x0 + xx, true);
                }
            }
        }
        out
    }

    /// Mean per-instance Dice when instances are visited in `order` and
    /// each prediction is added to the shared context.
    pub fn ordering_dice(&self, ctx: &SceneContext, order: &[usize]) -> f64 {
        let gts = &ctx.scene.gt_masks;
        let mut context = BinaryMask::empty(ctx.height(), ctx.width());
        let mut total = 0.0;
        for &j in order {
            let pred = self.predict(ctx, &gts[j], &context);
            total += dice(&pred, &gts[j]);
            context.union_with(&pred);
        }
        total / order.len().max(1) as f64
    }
}

/// Dice statistics of one scene across random orderings.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneOrdering {
    pub seed: u64,
    pub instances: usize,
    pub mean: f64,
    pub std: f64,
    pub best: f64,
    pub worst: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OracleGroup {
    pub name: String,
    pub scenes: Vec<SceneOrdering>,
}

impl OracleGroup {
    pub fn mean_dice(&self) -> f64 {
        self.scenes.iter().map(|s| s.mean).sum::<f64>() / self.scenes.len().max(1) as f64
    }

    /// Mean over scenes of best minus worst ordering Dice.
    pub fn gap(&self) -> f64 {
        self.scenes.iter().map(|s| s.best - s.worst).sum::<f64>() / self.scenes.len().max(1) as f64
    }

    pub fn mean_std(&self) -> f64 {
        self.scenes.iter().map(|s| s.std).sum::<f64>() / self.scenes.len().max(1) as f64
    }

    pub fn best_mean(&self) -> f64 {
        self.scenes.iter().map(|s| s.best).sum::<f64>() / self.scenes.len().max(1) as f64
    }

    pub fn worst_mean(&self) -> f64 {
        self.scenes.iter().map(|s| s.worst).sum::<f64>() / self.scenes.len().max(1) as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OracleReport {
    /// Heavily occluded scenes first, then non-overlapping ones.
    pub groups: Vec<OracleGroup>,
    pub train_losses: Vec<f64>,
}

pub const ORACLE_HEADER: [&str; 8] = ["group", "scene_seed", "instances", "mean_dice", "std_dice", "best", "worst", "gap"];

impl OracleReport {
    /// Per-scene rows followed by one summary row per group.
    pub fn csv_rows(&self) -> Vec<Vec<String>> {
        let mut rows = Vec::new();
        for g in &self.groups {
            for s in &g.scenes {
                rows.push(vec![
                    g.name.clone(),
                    s.seed.to_string(),
                    s.instances.to_string(),
                    f6(s.mean),
                    f6(s.std),
                    f6(s.best),
                    f6(s.worst),
                    f6(s.best - s.worst),
                ]);
            }
        }
        for g in &self.groups {
            rows.push(vec![
                g.name.clone(),
                "all".into(),
                String::new(),
                f6(g.mean_dice()),
                f6(g.mean_std()),
                f6(g.best_mean()),
                f6(g.worst_mean()),
                f6(g.gap()),
            ]);
        }
        rows
    }

    pub fn group(&self, name: &str) -> Option<&OracleGroup> {
        self.groups.iter().find(|g| g.name == name)
    }
}

/// Scores `orderings` random visiting orders for every scene.
pub fn ordering_stats(net: &PatchNet, scenes: &[Arc<SceneContext>], orderings: usize, seed: u64) -> Vec<SceneOrdering> {
    scenes
        .iter()
        .map(|ctx| {
            let n = ctx.scene.instance_count();
            let mut rng = ChaCha8Rng::seed_from_u64(scene_seed(seed, ctx.scene.seed));
            let mut order: Vec<usize> = (0..n).collect();
            let vals: Vec<f64> = (0..orderings.max(1))
                .map(|_| {
                    order.shuffle(&mut rng);
                    net.ordering_dice(ctx, &order)
                })
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            SceneOrdering {
                seed: ctx.scene.seed,
                instances: n,
                mean,
                std: var.sqrt(),
                best: vals.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                worst: vals.iter().copied().fold(f64::INFINITY, f64::min),
            }
        })
        .collect()
}

/// Trains a patch network on the configured scene distribution, then
/// compares ordering sensitivity on fully overlapping and non-overlapping
/// scenes.
pub fn oracle_ordering(cfg: &RunConfig) -> Result<OracleReport> {
    cfg.validate()?;
    let patch = cfg.height.min(cfg.width) / 2;
    let train_cfg = cfg.scene_config();
    let train = extra_scenes(cfg, ORACLE_TRAIN_STREAM, cfg.oracle_train_scenes, &train_cfg)?;
    let mut net = PatchNet::new(patch, &cfg.encoder_channels[..cfg.encoder_channels.len().min(4)], cfg.seed);
    let train_losses = net.train(&train, cfg.oracle_epochs, cfg.pretrain_batch, cfg.pretrain_lr, cfg.seed)?;
    let mut groups = Vec::new();
    for (name, stream, overlap) in [("occluded", OCCLUDED_STREAM, 1.0), ("clear", CLEAR_STREAM, 0.0)] {
        let sc = crate::environment::SceneConfig {
            overlap_prob: overlap,
            ..cfg.scene_config()
        };
        let scenes = extra_scenes(cfg, stream, cfg.oracle_scenes, &sc)?;
        groups.push(OracleGroup {
            name: name.into(),
            scenes: ordering_stats(&net, &scenes, cfg.oracle_orderings, cfg.seed),
        });
    }
    Ok(OracleReport { groups, train_losses })
}
