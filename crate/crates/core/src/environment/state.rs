//! MDP states, transitions and the multi-scale state pyramid.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::auxiliary::{angle_quantization, AuxChannels, AUX_CHANNELS};
use super::scene::{scene_seed, Scene};
use crate::compute::{kernels, Tensor};
use crate::error::{Error, Result};
use crate::scoring::BinaryMask;

/// Image plus auxiliary channels.
pub const STATIC_CHANNELS: usize = 1 + AUX_CHANNELS;
/// Static channels plus the accumulated mask.
pub const STATE_CHANNELS: usize = STATIC_CHANNELS + 1;

const AUX_NOISE_STREAM: u64 = 0xA0C5;

/// A scene with its derived channels, shared by every state of an episode.
#[derive(Debug)]
pub struct SceneContext {
    pub scene: Scene,
    pub aux: AuxChannels,
    /// `[1, 10, H/2^m, W/2^m]` for every scale the dims allow.
    static_levels: Vec<Tensor>,
}

impl SceneContext {
    pub fn new(scene: Scene) -> Arc<Self> {
        Self::with_aux_noise(scene, 0.0)
    }

    /// Auxiliary bits are flipped with probability `flip_prob`, seeded from
    /// the scene seed.
    pub fn with_aux_noise(scene: Scene, flip_prob: f64) -> Arc<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(scene_seed(scene.seed, AUX_NOISE_STREAM));
        let aux = angle_quantization(&scene).with_bit_flip_noise(flip_prob, &mut rng);
        let (h, w) = (scene.height(), scene.width());
        let mut data = scene.image.data().to_vec();
        data.extend(aux.to_f64());
        let base = Tensor::new(vec![1, STATIC_CHANNELS, h, w], data);
        let mut static_levels = vec![base];
        loop {
            let last = static_levels.last().expect("non-empty");
            let (lh, lw) = (last.shape()[2], last.shape()[3]);
            if lh % 2 != 0 || lw % 2 != 0 {
                break;
            }
            let next = kernels::avgpool2d(last);
            static_levels.push(next);
        }
        Arc::new(SceneContext {
            scene,
            aux,
            static_levels,
        })
    }

    pub fn height(&self) -> usize {
        self.scene.height()
    }

    pub fn width(&self) -> usize {
        self.scene.width()
    }

    /// Image and auxiliary channels at full resolution, `[1, 10, H, W]`.
    pub fn static_stack(&self) -> &Tensor {
        &self.static_levels[0]
    }

    /// Static channels downsampled `scale` times, if the dims allow it.
    pub fn static_level(&self, scale: usize) -> Option<&Tensor> {
        self.static_levels.get(scale)
    }
}

/// `s_t = (I, M_t)` together with the auxiliary channels.
#[derive(Clone, Debug)]
pub struct EnvState {
    ctx: Arc<SceneContext>,
    /// `[1, 1, H, W]`, values in `[0, 1]`.
    mask: Tensor,
}

impl EnvState {
    /// The first state of an episode: nothing predicted yet.
    pub fn empty(ctx: Arc<SceneContext>) -> Self {
        let mask = Tensor::zeros(&[1, 1, ctx.height(), ctx.width()]);
        EnvState { ctx, mask }
    }

    pub fn with_mask(ctx: Arc<SceneContext>, mask: Tensor) -> Self {
        assert_eq!(mask.len(), ctx.height() * ctx.width(), "mask size must match the scene");
        let mask = mask.reshape(&[1, 1, ctx.height(), ctx.width()]);
        EnvState { ctx, mask }
    }

    pub fn context(&self) -> &Arc<SceneContext> {
        &self.ctx
    }

    pub fn mask(&self) -> &Tensor {
        &self.mask
    }

    pub fn height(&self) -> usize {
        self.ctx.height()
    }

    pub fn width(&self) -> usize {
        self.ctx.width()
    }

    /// `[1, 11, H, W]`: image, foreground, 8 angle bins, accumulated mask.
    pub fn input_stack(&self) -> Tensor {
        let mut data = self.ctx.static_stack().data().to_vec();
        data.extend_from_slice(self.mask.data());
        Tensor::new(vec![1, STATE_CHANNELS, self.height(), self.width()], data)
    }
}

/// `M_{t+1} = max(M_t, decoded)` pixelwise.
pub fn transition(state: &EnvState, decoded: &Tensor) -> EnvState {
    assert_eq!(decoded.len(), state.mask.len(), "decoded mask size must match the state");
    let data = state
        .mask
        .data()
        .iter()
        .zip(decoded.data())
        .map(|(&m, &d)| m.max(d))
        .collect();
    EnvState {
        ctx: state.ctx.clone(),
        mask: Tensor::new(state.mask.shape().to_vec(), data),
    }
}

/// Start state with `N - remaining` randomly chosen ground truths already
/// accumulated into `M_1`. Returns the other masks, in ground-truth order,
/// as the episode's targets.
pub fn initial_state(ctx: &Arc<SceneContext>, remaining: usize, rng: &mut impl Rng) -> Result<(EnvState, Vec<BinaryMask>)> {
    let n = ctx.scene.instance_count();
    if remaining == 0 || remaining > n {
        return Err(Error::InvalidArgument(format!(
            "remaining must lie in 1..={n}, got {remaining}"
        )));
    }
    let done = rand::seq::index::sample(rng, n, n - remaining).into_vec();
    let mut mask = vec![0.0; ctx.height() * ctx.width()];
    let mut targets = Vec::with_capacity(remaining);
    for (i, gt) in ctx.scene.gt_masks.iter().enumerate() {
        if done.contains(&i) {
            for (m, &b) in mask.iter_mut().zip(gt.bits()) {
                if b {
                    *m = 1.0;
                }
            }
        } else {
            targets.push(gt.clone());
        }
    }
    let state = EnvState::with_mask(ctx.clone(), Tensor::new(vec![mask.len()], mask));
    Ok((state, targets))
}

/// Per decoder scale `m`, the state channels average-pooled `m` times.
#[derive(Clone, Debug, PartialEq)]
pub struct StatePyramid {
    /// `levels[m]` is `[1, 11, H/2^m, W/2^m]`.
    pub levels: Vec<Tensor>,
}

/// Average-pools `x` (`[N, C, H, W]`) into `num_scales` levels, the first
/// being `x` itself.
pub fn downsample_levels(x: &Tensor, num_scales: usize) -> Result<Vec<Tensor>> {
    check_divisible(x.shape()[2], x.shape()[3], num_scales)?;
    let mut levels = vec![x.clone()];
    for _ in 1..num_scales {
        let next = kernels::avgpool2d(levels.last().expect("non-empty"));
        levels.push(next);
    }
    Ok(levels)
}

fn check_divisible(h: usize, w: usize, num_scales: usize) -> Result<()> {
    if num_scales == 0 {
        return Err(Error::InvalidArgument("pyramid needs at least one scale".into()));
    }
    let f = 1usize << (num_scales - 1);
    if !h.is_multiple_of(f) || !w.is_multiple_of(f) {
        return Err(Error::InvalidArgument(format!(
            "{h}x{w} is not divisible by 2^{} for a {num_scales}-scale pyramid",
            num_scales - 1
        )));
    }
    Ok(())
}

pub fn build_state_pyramid(state: &EnvState, num_scales: usize) -> Result<StatePyramid> {
    check_divisible(state.height(), state.width(), num_scales)?;
    let masks = downsample_levels(&state.mask, num_scales)?;
    let levels = masks
        .iter()
        .enumerate()
        .map(|(m, mask)| {
            let fixed = state.ctx.static_level(m).expect("divisibility checked");
            let (h, w) = (fixed.shape()[2], fixed.shape()[3]);
            let mut data = fixed.data().to_vec();
            data.extend_from_slice(mask.data());
            Tensor::new(vec![1, STATE_CHANNELS, h, w], data)
        })
        .collect();
    Ok(StatePyramid { levels })
}
