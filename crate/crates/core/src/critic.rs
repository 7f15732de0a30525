//! Q-value regressor over a state and a decoded actor mask.
//!
//! Input is the image, auxiliary channels, accumulated mask `M_t` and the
//! predicted mask `m_t`. Each stage is conv → batchnorm → ReLU → maxpool,
//! followed by a global max pool and a ReLU MLP ending in one scalar.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::compute::{checkpoint, Bound, ParamId, ParamStore, Tape, Tensor, Var};
use crate::environment::{EnvState, SceneContext, STATIC_CHANNELS};
use crate::error::{Error, Result};

/// Static channels plus `M_t` and `m_t`.
pub const CRITIC_CHANNELS: usize = STATIC_CHANNELS + 2;

const ARCH_ENTRY: &str = "critic.meta.arch";

#[derive(Clone, Debug, PartialEq)]
pub struct CriticConfig {
    pub height: usize,
    pub width: usize,
    /// Output channels of each conv stage.
    pub conv_channels: Vec<usize>,
    /// Hidden FC widths before the scalar output.
    pub fc: Vec<usize>,
    /// Weight kept on the running batchnorm statistics per update.
    pub bn_momentum: f64,
}

impl Default for CriticConfig {
    fn default() -> Self {
        CriticConfig {
            height: 32,
            width: 32,
            conv_channels: vec![8, 16, 32, 32],
            fc: vec![64, 64, 32],
            bn_momentum: 0.9,
        }
    }
}

impl CriticConfig {
    pub fn validate(&self) -> Result<()> {
        let s = self.conv_channels.len();
        if s == 0 || self.conv_channels.contains(&0) || self.fc.contains(&0) {
            return Err(Error::Config("critic layer sizes must be positive and non-empty".into()));
        }
        let f = 1usize << s;
        if !self.height.is_multiple_of(f) || !self.width.is_multiple_of(f) {
            return Err(Error::Config(format!(
                "{}x{} critic input is not divisible by 2^{s}",
                self.height, self.width
            )));
        }
        if !(0.0..1.0).contains(&self.bn_momentum) {
            return Err(Error::Config("bn_momentum must lie in [0, 1)".into()));
        }
        Ok(())
    }

    fn encode_meta(&self) -> Tensor {
        let mut v = vec![self.height as f64, self.width as f64, self.conv_channels.len() as f64];
        v.extend(self.conv_channels.iter().map(|&c| c as f64));
        v.push(self.fc.len() as f64);
        v.extend(self.fc.iter().map(|&c| c as f64));
        v.push(self.bn_momentum);
        Tensor::new(vec![v.len()], v)
    }

    fn decode_meta(t: &Tensor) -> Result<Self> {
        let bad = || Error::Checkpoint("malformed critic architecture entry".into());
        let v = t.data();
        let s = *v.get(2).ok_or_else(bad)? as usize;
        let f = *v.get(3 + s).ok_or_else(bad)? as usize;
        if v.len() != 5 + s + f {
            return Err(bad());
        }
        let cfg = CriticConfig {
            height: v[0] as usize,
            width: v[1] as usize,
            conv_channels: v[3..3 + s].iter().map(|&x| x as usize).collect(),
            fc: v[4 + s..4 + s + f].iter().map(|&x| x as usize).collect(),
            bn_momentum: v[4 + s + f],
        };
        cfg.validate().map_err(|e| Error::Checkpoint(e.to_string()))?;
        Ok(cfg)
    }
}

/// Batchnorm handling for a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    /// Batch statistics; the returned stats feed [`Critic::update_running`].
    Train,
    /// Running statistics; samples are processed independently.
    Eval,
}

#[derive(Clone, Copy, Debug)]
struct ConvIds {
    w: ParamId,
    b: ParamId,
    gamma: ParamId,
    beta: ParamId,
    running_mean: ParamId,
    running_var: ParamId,
}

#[derive(Clone, Debug)]
pub struct Critic {
    pub config: CriticConfig,
    /// Running statistics are stored here as non-trainable entries so
    /// they travel with checkpoints.
    pub params: ParamStore,
    convs: Vec<ConvIds>,
    fcs: Vec<(ParamId, ParamId)>,
}

/// Per-layer `(mean, variance)` of one training-mode batch.
pub type BatchStats = Vec<(Vec<f64>, Vec<f64>)>;

fn kaiming(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize, gain: f64) -> Tensor {
    let bound = gain * (3.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-bound..=bound)).collect())
}

impl Critic {
    pub fn new(config: CriticConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let gain = std::f64::consts::SQRT_2;
        let mut convs = Vec::new();
        let mut cin = CRITIC_CHANNELS;
        for (i, &co) in config.conv_channels.iter().enumerate() {
            let name = format!("critic.conv{i}");
            convs.push(ConvIds {
                w: store.add(format!("{name}.w"), kaiming(&mut rng, &[co, cin, 3, 3], cin * 9, gain), true),
                b: store.add(format!("{name}.b"), Tensor::zeros(&[co]), true),
                gamma: store.add(format!("{name}.bn.gamma"), Tensor::filled(&[co], 1.0), true),
                beta: store.add(format!("{name}.bn.beta"), Tensor::zeros(&[co]), true),
                running_mean: store.add(format!("{name}.bn.running_mean"), Tensor::zeros(&[co]), false),
                running_var: store.add(format!("{name}.bn.running_var"), Tensor::filled(&[co], 1.0), false),
            });
            cin = co;
        }
        let mut fcs = Vec::new();
        let widths: Vec<usize> = config.fc.iter().copied().chain([1]).collect();
        for (i, &out) in widths.iter().enumerate() {
            let g = if i + 1 == widths.len() { 1.0 } else { gain };
            let w = store.add(format!("critic.fc{i}.w"), kaiming(&mut rng, &[out, cin], cin, g), true);
            let b = store.add(format!("critic.fc{i}.b"), Tensor::zeros(&[out]), true);
            fcs.push((w, b));
            cin = out;
        }
        Ok(Critic {
            config,
            params: store,
            convs,
            fcs,
        })
    }

    pub fn bind(&self, tape: &mut Tape) -> Bound {
        self.params.bind(tape)
    }

    pub fn bind_frozen(&self, tape: &mut Tape) -> Bound {
        self.params.bind_frozen(tape)
    }

    /// Stacks contexts, `state_mask` and `pred_mask` (each `[B, 1, H, W]`)
    /// into the critic input.
    pub fn input_var(tape: &mut Tape, contexts: &[&SceneContext], state_mask: Var, pred_mask: Var) -> Var {
        let parts: Vec<&Tensor> = contexts.iter().map(|c| c.static_stack()).collect();
        let fixed = tape.constant(Tensor::concat_batch(&parts));
        tape.concat(&[fixed, state_mask, pred_mask])
    }

    /// `[B, 12, H, W]` → Q as `[B, 1]`. In [`BnMode::Train`] the batch
    /// statistics of every layer are returned.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, input: Var, mode: BnMode) -> (Var, BatchStats) {
        let mut stats = Vec::new();
        let mut x = input;
        for ids in &self.convs {
            x = tape.conv2d(x, p[ids.w], Some(p[ids.b]), 1);
            x = match mode {
                BnMode::Train => {
                    let (y, mean, var) = tape.batchnorm_train(x, p[ids.gamma], p[ids.beta]);
                    stats.push((mean, var));
                    y
                }
                BnMode::Eval => {
                    let mean = self.params.get(ids.running_mean).value.data();
                    let var = self.params.get(ids.running_var).value.data();
                    tape.batchnorm_eval(x, p[ids.gamma], p[ids.beta], mean, var)
                }
            };
            x = tape.relu(x);
            x = tape.maxpool2d(x);
        }
        let mut x = tape.global_maxpool(x);
        for (i, &(w, b)) in self.fcs.iter().enumerate() {
            x = tape.linear(x, p[w], Some(p[b]));
            if i + 1 < self.fcs.len() {
                x = tape.relu(x);
            }
        }
        (x, stats)
    }

    /// Blends batch statistics into the running averages.
    pub fn update_running(&mut self, stats: &BatchStats) {
        let m = self.config.bn_momentum;
        for (ids, (mean, var)) in self.convs.iter().zip(stats) {
            for (id, batch) in [(ids.running_mean, mean), (ids.running_var, var)] {
                let run = &mut self.params.get_mut(id).value;
                for (r, &b) in run.data_mut().iter_mut().zip(batch) {
                    *r = m * *r + (1.0 - m) * b;
                }
            }
        }
    }

    /// Eval-mode Q of a single `(state, mask)` pair, no gradients.
    pub fn q_value(&self, state: &EnvState, mask: &Tensor) -> Result<f64> {
        let (h, w) = (self.config.height, self.config.width);
        if state.height() != h || state.width() != w || mask.len() != h * w {
            return Err(Error::InvalidArgument(format!(
                "critic expects {h}x{w} inputs, got state {}x{} and a mask of {} values",
                state.height(),
                state.width(),
                mask.len()
            )));
        }
        let mut tape = Tape::new();
        let p = self.bind_frozen(&mut tape);
        let sm = tape.constant(state.mask().clone());
        let pm = tape.constant(mask.clone().reshape(&[1, 1, h, w]));
        let input = Self::input_var(&mut tape, &[state.context().as_ref()], sm, pm);
        let (q, _) = self.forward(&mut tape, &p, input, BnMode::Eval);
        Ok(tape.value(q).item())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = self.config.encode_meta();
        let mut bytes = Vec::new();
        let entries = self
            .params
            .iter()
            .map(|(n, p)| (n, &p.value))
            .chain(std::iter::once((ARCH_ENTRY, &meta)));
        checkpoint::write_entries(&mut bytes, entries)?;
        std::fs::write(path, bytes)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let entries = checkpoint::read(path)?;
        let meta = entries
            .iter()
            .find(|(n, _)| n == ARCH_ENTRY)
            .ok_or_else(|| Error::Checkpoint("checkpoint holds no critic architecture".into()))?;
        let mut critic = Critic::new(CriticConfig::decode_meta(&meta.1)?, 0)?;
        checkpoint::restore(&mut critic.params, &entries)?;
        Ok(critic)
    }
}

/// Mean of `(q − G)²` over the batch.
pub fn critic_loss(tape: &mut Tape, q: Var, targets: &Tensor) -> Var {
    tape.mse(q, targets)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn meta_round_trips() {
        let cfg = CriticConfig {
            height: 8,
            width: 8,
            conv_channels: vec![3, 4],
            fc: vec![5],
            bn_momentum: 0.75,
        };
        assert_eq!(CriticConfig::decode_meta(&cfg.encode_meta()).unwrap(), cfg);
    }

    #[test]
    fn validation() {
        assert!(CriticConfig::default().validate().is_ok());
        let c = CriticConfig { height: 24, ..Default::default() };
        assert!(c.validate().is_err());
        let c = CriticConfig { bn_momentum: 1.0, ..Default::default() };
        assert!(c.validate().is_err());
    }

    #[test]
    fn running_stats_blend_with_momentum() {
        let cfg = CriticConfig {
            height: 8,
            width: 8,
            conv_channels: vec![2],
            fc: vec![3],
            bn_momentum: 0.9,
        };
        let mut critic = Critic::new(cfg, 0).unwrap();
        critic.update_running(&vec![(vec![1.0, 2.0], vec![3.0, 5.0])]);
        let mean = critic.params.find("critic.conv0.bn.running_mean").unwrap();
        let var = critic.params.find("critic.conv0.bn.running_var").unwrap();
        let close = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-12);
        assert!(close(critic.params.get(mean).value.data(), &[0.1, 0.2]));
        assert!(close(critic.params.get(var).value.data(), &[1.2, 1.4]));
    }
}
