//! The cVAE policy: encoder → LSTM bottleneck → latent heads → decoder fed
//! by the state pyramid, plus a termination head.

mod pretrain;

use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::compute::{checkpoint, lstm_cell, Bound, LstmVars, ParamId, ParamStore, Tape, Tensor, Var};
use crate::environment::{transition, EnvState, SceneContext, STATE_CHANNELS, STATIC_CHANNELS};
use crate::error::{Error, Result};
use crate::scoring::BinaryMask;

pub use pretrain::{decode_latents, pretrain_cvae, reconstruction_dice, PretrainConfig, PretrainReport};

/// Name of the extra checkpoint tensor holding the architecture.
const ARCH_ENTRY: &str = "actor.meta.arch";
/// Continue/stop decision threshold on the termination probability.
pub const TERMINATION_THRESHOLD: f64 = 0.5;

/// Layer sizes of the actor. The reference networks use an encoder ladder of
/// 32-48-64-96-128 on 224×224 inputs with `hidden = 512`, `z = 256`,
/// `latent = 16`; the defaults here shrink that proportionally.
#[derive(Clone, Debug, PartialEq)]
pub struct ArchConfig {
    pub height: usize,
    pub width: usize,
    /// Output channels of each conv → ReLU → maxpool stage.
    pub encoder_channels: Vec<usize>,
    /// LSTM width (the FC before it has the same width).
    pub hidden: usize,
    pub z: usize,
    /// Latent action dimension.
    pub latent: usize,
    /// Output channels of each stride-2 deconv stage.
    pub decoder_channels: Vec<usize>,
    /// When false, pyramid levels above full resolution are zeros.
    pub state_pyramid: bool,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            height: 32,
            width: 32,
            encoder_channels: vec![8, 16, 24, 32],
            hidden: 64,
            z: 64,
            latent: 8,
            decoder_channels: vec![24, 16, 8, 8],
            state_pyramid: true,
        }
    }
}

impl ArchConfig {
    pub fn stages(&self) -> usize {
        self.encoder_channels.len()
    }

    /// Pyramid levels used by the decoder, full resolution included.
    pub fn pyramid_scales(&self) -> usize {
        self.stages() + 1
    }

    pub fn bottleneck(&self) -> (usize, usize) {
        (self.height >> self.stages(), self.width >> self.stages())
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.stages();
        if s == 0 || self.decoder_channels.len() != s {
            return Err(Error::Config(
                "encoder and decoder ladders must have the same, non-zero length".into(),
            ));
        }
        let f = 1usize << s;
        if !self.height.is_multiple_of(f) || !self.width.is_multiple_of(f) {
            return Err(Error::Config(format!(
                "{}x{} input is not divisible by 2^{s}",
                self.height, self.width
            )));
        }
        if [self.hidden, self.z, self.latent].contains(&0)
            || self.encoder_channels.contains(&0)
            || self.decoder_channels.contains(&0)
        {
            return Err(Error::Config("layer sizes must be positive".into()));
        }
        if self.latent >= self.height * self.width {
            return Err(Error::Config("latent dimension must be far below H*W".into()));
        }
        Ok(())
    }

    fn encode_meta(&self) -> Tensor {
        let mut v = vec![self.height, self.width, self.stages()];
        v.extend(&self.encoder_channels);
        v.extend([self.hidden, self.z, self.latent]);
        v.extend(&self.decoder_channels);
        v.push(usize::from(self.state_pyramid));
        Tensor::new(vec![v.len()], v.into_iter().map(|x| x as f64).collect())
    }

    fn decode_meta(t: &Tensor) -> Result<Self> {
        let bad = || Error::Checkpoint("malformed actor architecture entry".into());
        let v: Vec<usize> = t.data().iter().map(|&x| x as usize).collect();
        let s = *v.get(2).ok_or_else(bad)?;
        if v.len() != 3 + s + 3 + s + 1 {
            return Err(bad());
        }
        let arch = ArchConfig {
            height: v[0],
            width: v[1],
            encoder_channels: v[3..3 + s].to_vec(),
            hidden: v[3 + s],
            z: v[4 + s],
            latent: v[5 + s],
            decoder_channels: v[6 + s..6 + 2 * s].to_vec(),
            state_pyramid: v[6 + 2 * s] != 0,
        };
        arch.validate().map_err(|e| Error::Checkpoint(e.to_string()))?;
        Ok(arch)
    }
}

#[derive(Clone, Copy, Debug)]
struct Dense {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Debug)]
struct ActorIds {
    enc_convs: Vec<Dense>,
    enc_fc: Dense,
    lstm_ih: ParamId,
    lstm_hh: ParamId,
    lstm_b: ParamId,
    head_fc: Dense,
    head_out: Dense,
    dec_fc1: Dense,
    dec_fc2: Dense,
    dec_deconvs: Vec<Dense>,
    dec_out: Dense,
    term: Dense,
}

/// Gaussian-policy actor network with its parameters.
#[derive(Clone, Debug)]
pub struct Actor {
    pub arch: ArchConfig,
    pub params: ParamStore,
    ids: ActorIds,
}

/// Recurrent state carried between steps, `[B, hidden]` each.
#[derive(Clone, Debug, PartialEq)]
pub struct Hidden {
    pub h: Tensor,
    pub c: Tensor,
}

impl Hidden {
    pub fn zeros(batch: usize, hidden: usize) -> Self {
        Hidden {
            h: Tensor::zeros(&[batch, hidden]),
            c: Tensor::zeros(&[batch, hidden]),
        }
    }
}

/// How the latent action is formed from `(μ, log σ²)`.
#[derive(Clone, Copy, Debug)]
pub enum ActionMode<'a> {
    /// `a = μ`.
    Mean,
    /// `a = μ + σ ⊙ noise`, noise `[B, latent]` drawn by the caller.
    Sample(&'a Tensor),
}

/// Tape handles produced by one actor step.
#[derive(Clone, Copy, Debug)]
pub struct StepVars {
    /// Encoder feature preceding the LSTM, `[B, hidden]`.
    pub feature: Var,
    pub h: Var,
    pub c: Var,
    pub mu: Var,
    pub log_var: Var,
    pub action: Var,
    /// Decoded soft mask, `[B, 1, H, W]`.
    pub mask: Var,
    /// `[B, 1]`; positive means "continue".
    pub term_logit: Var,
}

/// Values of one single-sample actor step.
#[derive(Clone, Debug)]
pub struct ActorOutput {
    pub mu: Tensor,
    pub log_var: Tensor,
    pub action: Tensor,
    /// `[1, 1, H, W]`, values in `(0, 1)`.
    pub decoded_mask: Tensor,
    pub termination_logit: f64,
    pub hidden: Hidden,
}

/// Which recurrent state is replaced by zeros at every inference step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Block {
    None,
    Lstm,
    Mask,
}

/// Inference result: binarised masks plus the step at which the
/// termination head first voted to stop, if it did.
#[derive(Clone, Debug)]
pub struct Inference {
    pub masks: Vec<BinaryMask>,
    pub stopped_at: Option<usize>,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-bound..=bound)).collect())
}

struct Builder<'a> {
    store: &'a mut ParamStore,
    rng: ChaCha8Rng,
}

impl Builder<'_> {
    /// Kaiming-uniform weights, zero bias.
    fn dense(&mut self, name: &str, w_shape: &[usize], fan_in: usize, out: usize, gain: f64) -> Dense {
        let bound = gain * (3.0 / fan_in as f64).sqrt();
        let w = uniform(&mut self.rng, w_shape, bound);
        let w = self.store.add(format!("{name}.w"), w, true);
        let b = self.store.add(format!("{name}.b"), Tensor::zeros(&[out]), true);
        Dense { w, b }
    }

    fn zero_dense(&mut self, name: &str, w_shape: &[usize], out: usize) -> Dense {
        let w = self.store.add(format!("{name}.w"), Tensor::zeros(w_shape), true);
        let b = self.store.add(format!("{name}.b"), Tensor::zeros(&[out]), true);
        Dense { w, b }
    }
}

const RELU_GAIN: f64 = std::f64::consts::SQRT_2;

impl Actor {
    /// Fresh parameters. LSTM weights are uniform in ±1/√hidden with forget
    /// bias 1; the μ/log σ² head starts at zero so the initial policy is the
    /// prior.
    pub fn new(arch: ArchConfig, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut store = ParamStore::new();
        let mut b = Builder {
            store: &mut store,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let mut enc_convs = Vec::new();
        let mut cin = STATE_CHANNELS;
        for (i, &co) in arch.encoder_channels.iter().enumerate() {
            enc_convs.push(b.dense(&format!("actor.encoder.conv{i}"), &[co, cin, 3, 3], cin * 9, co, RELU_GAIN));
            cin = co;
        }
        let (bh, bw) = arch.bottleneck();
        let flat = cin * bh * bw;
        let h = arch.hidden;
        let enc_fc = b.dense("actor.encoder.fc", &[h, flat], flat, h, RELU_GAIN);
        let lb = 1.0 / (h as f64).sqrt();
        let lstm_ih = uniform(&mut b.rng, &[4 * h, h], lb);
        let lstm_hh = uniform(&mut b.rng, &[4 * h, h], lb);
        let mut bias = vec![0.0; 4 * h];
        bias[h..2 * h].fill(1.0);
        let lstm_ih = b.store.add("actor.lstm.w_ih", lstm_ih, true);
        let lstm_hh = b.store.add("actor.lstm.w_hh", lstm_hh, true);
        let lstm_b = b.store.add("actor.lstm.bias", Tensor::new(vec![4 * h], bias), true);
        let head_fc = b.dense("actor.heads.fc", &[arch.z, h], h, arch.z, RELU_GAIN);
        let head_out = b.zero_dense("actor.heads.mu_logvar", &[2 * arch.latent, arch.z], 2 * arch.latent);
        let dec_fc1 = b.dense("actor.decoder.fc1", &[arch.z, arch.latent], arch.latent, arch.z, RELU_GAIN);
        let dec_fc2 = b.dense("actor.decoder.fc2", &[flat, arch.z], arch.z, flat, RELU_GAIN);
        let mut dec_deconvs = Vec::new();
        for (i, &co) in arch.decoder_channels.iter().enumerate() {
            let ci = cin + STATE_CHANNELS;
            dec_deconvs.push(b.dense(&format!("actor.decoder.deconv{i}"), &[ci, co, 3, 3], ci * 9, co, RELU_GAIN));
            cin = co;
        }
        let ci = cin + STATE_CHANNELS;
        let dec_out = b.dense("actor.decoder.out", &[ci, 1, 3, 3], ci * 9, 1, 1.0);
        let term = b.dense("actor.term", &[1, 2 * h], 2 * h, 1, 1.0);
        Ok(Actor {
            arch,
            params: store,
            ids: ActorIds {
                enc_convs,
                enc_fc,
                lstm_ih,
                lstm_hh,
                lstm_b,
                head_fc,
                head_out,
                dec_fc1,
                dec_fc2,
                dec_deconvs,
                dec_out,
                term,
            },
        })
    }

    /// Freezes or unfreezes every decoder parameter.
    pub fn set_decoder_trainable(&mut self, trainable: bool) {
        self.params.set_trainable_prefix("actor.decoder.", trainable);
    }

    /// Copies all parameters except those under `skip_prefixes` from `other`.
    pub fn copy_from(&mut self, other: &Actor, skip_prefixes: &[&str]) -> usize {
        self.params.copy_matching(&other.params, |n| {
            (!skip_prefixes.iter().any(|p| n.starts_with(p))).then(|| n.to_string())
        })
    }

    pub fn decoder_snapshot(&self) -> Vec<Tensor> {
        self.params
            .iter()
            .filter(|(n, _)| n.starts_with("actor.decoder."))
            .map(|(_, p)| p.value.clone())
            .collect()
    }

    pub fn bind(&self, tape: &mut Tape) -> Bound {
        self.params.bind(tape)
    }

    pub fn bind_frozen(&self, tape: &mut Tape) -> Bound {
        self.params.bind_frozen(tape)
    }

    /// Image, aux and mask channels as a `[B, 11, H, W]` input, with the
    /// last channel taken from `mask`.
    pub fn input_var(tape: &mut Tape, contexts: &[&SceneContext], mask: Var) -> Var {
        let fixed = stack_levels(contexts, 0);
        let fixed = tape.constant(fixed);
        tape.concat(&[fixed, mask])
    }

    /// Pyramid levels `0..=stages`, each `[B, 11, H/2^m, W/2^m]`, with the
    /// accumulated-mask channel derived from `mask` (`[B, 1, H, W]`).
    pub fn pyramid(&self, tape: &mut Tape, contexts: &[&SceneContext], mask: Var) -> Vec<Var> {
        let mut levels = Vec::with_capacity(self.arch.pyramid_scales());
        let mut m = mask;
        for scale in 0..self.arch.pyramid_scales() {
            if scale > 0 {
                m = tape.avgpool2d(m);
            }
            if scale > 0 && !self.arch.state_pyramid {
                let shape = tape.value(m).shape().to_vec();
                levels.push(tape.constant(Tensor::zeros(&[shape[0], STATE_CHANNELS, shape[2], shape[3]])));
                continue;
            }
            let fixed = tape.constant(stack_levels(contexts, scale));
            levels.push(tape.concat(&[fixed, m]));
        }
        levels
    }

    /// Conv ladder and FC: `[B, 11, H, W]` → `[B, hidden]`.
    pub fn encode(&self, tape: &mut Tape, p: &Bound, input: Var) -> Var {
        let mut x = input;
        for d in &self.ids.enc_convs {
            x = tape.conv2d(x, p[d.w], Some(p[d.b]), 1);
            x = tape.relu(x);
            x = tape.maxpool2d(x);
        }
        let x = tape.linear(x, p[self.ids.enc_fc.w], Some(p[self.ids.enc_fc.b]));
        tape.leaky_relu(x)
    }

    pub fn recur(&self, tape: &mut Tape, p: &Bound, feature: Var, h: Var, c: Var) -> (Var, Var) {
        let vars = LstmVars {
            w_ih: p[self.ids.lstm_ih],
            w_hh: p[self.ids.lstm_hh],
            bias: p[self.ids.lstm_b],
        };
        lstm_cell(tape, feature, h, c, &vars)
    }

    /// `[B, hidden]` → `(μ, log σ²)`, each `[B, latent]`; log σ² is clamped
    /// to `[-20, 2]`.
    pub fn latent_heads(&self, tape: &mut Tape, p: &Bound, h: Var) -> (Var, Var) {
        let x = tape.linear(h, p[self.ids.head_fc.w], Some(p[self.ids.head_fc.b]));
        let x = tape.leaky_relu(x);
        let out = tape.linear(x, p[self.ids.head_out.w], Some(p[self.ids.head_out.b]));
        let l = self.arch.latent;
        let mu = tape.slice_cols(out, 0, l);
        let lv = tape.slice_cols(out, l, l);
        let lv = tape.clamp(lv, crate::compute::tape::LOG_VAR_MIN, crate::compute::tape::LOG_VAR_MAX);
        (mu, lv)
    }

    /// Latent action `[B, latent]` plus pyramid → soft mask `[B, 1, H, W]`.
    pub fn decode(&self, tape: &mut Tape, p: &Bound, action: Var, pyramid: &[Var]) -> Var {
        let ids = &self.ids;
        let x = tape.linear(action, p[ids.dec_fc1.w], Some(p[ids.dec_fc1.b]));
        let x = tape.leaky_relu(x);
        let x = tape.linear(x, p[ids.dec_fc2.w], Some(p[ids.dec_fc2.b]));
        let x = tape.leaky_relu(x);
        let batch = tape.value(x).shape()[0];
        let (bh, bw) = self.arch.bottleneck();
        let c = *self.arch.encoder_channels.last().expect("validated");
        let mut x = tape.reshape(x, &[batch, c, bh, bw]);
        let s = self.arch.stages();
        for (i, d) in ids.dec_deconvs.iter().enumerate() {
            x = tape.concat(&[x, pyramid[s - i]]);
            x = tape.conv_transpose2d(x, p[d.w], Some(p[d.b]), 2);
            x = tape.relu(x);
        }
        x = tape.concat(&[x, pyramid[0]]);
        let x = tape.conv_transpose2d(x, p[ids.dec_out.w], Some(p[ids.dec_out.b]), 1);
        tape.sigmoid(x)
    }

    /// Termination logit from the LSTM output and the feature preceding it.
    pub fn terminate(&self, tape: &mut Tape, p: &Bound, h: Var, feature: Var) -> Var {
        let x = tape.concat(&[h, feature]);
        tape.linear(x, p[self.ids.term.w], Some(p[self.ids.term.b]))
    }

    /// Full step on the tape: encoder input and pyramid must already be built.
    pub fn step(&self, tape: &mut Tape, p: &Bound, input: Var, pyramid: &[Var], h: Var, c: Var, mode: ActionMode) -> StepVars {
        let feature = self.encode(tape, p, input);
        let (h, c) = self.recur(tape, p, feature, h, c);
        let (mu, log_var) = self.latent_heads(tape, p, h);
        let action = match mode {
            ActionMode::Mean => mu,
            ActionMode::Sample(noise) => tape.reparameterize(mu, log_var, noise),
        };
        let mask = self.decode(tape, p, action, pyramid);
        let term_logit = self.terminate(tape, p, h, feature);
        StepVars {
            feature,
            h,
            c,
            mu,
            log_var,
            action,
            mask,
            term_logit,
        }
    }

    /// One forward step on a single state, without gradients.
    pub fn actor_step(&self, state: &EnvState, hidden: &Hidden, mode: ActionMode) -> ActorOutput {
        assert_eq!(
            hidden.h.shape(),
            [1, self.arch.hidden],
            "hidden state must be [1, {}]",
            self.arch.hidden
        );
        let mut tape = Tape::new();
        let p = self.bind_frozen(&mut tape);
        let ctx = state.context().as_ref();
        let mask = tape.constant(state.mask().clone());
        let input = Self::input_var(&mut tape, &[ctx], mask);
        let pyramid = self.pyramid(&mut tape, &[ctx], mask);
        let h = tape.constant(hidden.h.clone());
        let c = tape.constant(hidden.c.clone());
        let v = self.step(&mut tape, &p, input, &pyramid, h, c, mode);
        ActorOutput {
            mu: tape.value(v.mu).clone(),
            log_var: tape.value(v.log_var).clone(),
            action: tape.value(v.action).clone(),
            decoded_mask: tape.value(v.mask).clone(),
            termination_logit: tape.value(v.term_logit).item(),
            hidden: Hidden {
                h: tape.value(v.h).clone(),
                c: tape.value(v.c).clone(),
            },
        }
    }

    /// Runs the mean policy from an empty mask until the termination head
    /// votes to stop or `max_steps` masks have been emitted.
    pub fn infer_episode(&self, ctx: &Arc<SceneContext>, max_steps: usize) -> Vec<BinaryMask> {
        self.infer(ctx, max_steps, Block::None, None).masks
    }

    /// Inference with optional state blocking. With `fixed_steps`, exactly
    /// that many masks are produced regardless of the termination head (the
    /// stop step is still recorded).
    pub fn infer(&self, ctx: &Arc<SceneContext>, max_steps: usize, block: Block, fixed_steps: Option<usize>) -> Inference {
        let (h, w) = (self.arch.height, self.arch.width);
        let mut state = EnvState::empty(ctx.clone());
        let mut hidden = Hidden::zeros(1, self.arch.hidden);
        let mut masks = Vec::new();
        let mut stopped_at = None;
        let limit = fixed_steps.unwrap_or(max_steps);
        for t in 0..limit {
            if block == Block::Lstm {
                hidden = Hidden::zeros(1, self.arch.hidden);
            }
            if block == Block::Mask {
                state = EnvState::empty(ctx.clone());
            }
            let out = self.actor_step(&state, &hidden, ActionMode::Mean);
            let stop = crate::compute::sigmoid(out.termination_logit) < TERMINATION_THRESHOLD;
            if stop && stopped_at.is_none() {
                stopped_at = Some(t);
                if fixed_steps.is_none() {
                    break;
                }
            }
            masks.push(BinaryMask::from_probabilities(h, w, out.decoded_mask.data()));
            state = transition(&state, &out.decoded_mask);
            hidden = out.hidden;
        }
        Inference { masks, stopped_at }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = self.arch.encode_meta();
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
            .ok_or_else(|| Error::Checkpoint("checkpoint holds no actor architecture".into()))?;
        let arch = ArchConfig::decode_meta(&meta.1)?;
        let mut actor = Actor::new(arch, 0)?;
        checkpoint::restore(&mut actor.params, &entries)?;
        Ok(actor)
    }
}

/// Static channels of every context at `scale`, stacked along the batch.
fn stack_levels(contexts: &[&SceneContext], scale: usize) -> Tensor {
    let first = contexts[0].static_level(scale).expect("pyramid scale available");
    let mut shape = first.shape().to_vec();
    debug_assert_eq!(shape[1], STATIC_CHANNELS);
    shape[0] = contexts.len();
    let mut data = Vec::with_capacity(first.len() * contexts.len());
    for c in contexts {
        data.extend_from_slice(c.static_level(scale).expect("pyramid scale available").data());
    }
    Tensor::new(shape, data)
}
