//! Seeded synthetic scenes of occluding shapes on an integer pixel grid.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::compute::Tensor;
use crate::error::{Error, Result};
use crate::scoring::BinaryMask;

/// Shapes whose visible part is smaller than this are dropped.
pub const MIN_VISIBLE_PIXELS: usize = 4;
pub const MAX_INSTANCES: usize = 10;
const PLACEMENT_TRIES: usize = 200;
const SCENE_ATTEMPTS: usize = 50;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ShapeKind {
    Ellipse,
    Rectangle,
    Triangle,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Ellipse, ShapeKind::Rectangle, ShapeKind::Triangle];

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Ellipse => "ellipse",
            ShapeKind::Rectangle => "rectangle",
            ShapeKind::Triangle => "triangle",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        ShapeKind::ALL
            .into_iter()
            .find(|k| k.name() == s.trim())
            .ok_or_else(|| Error::Config(format!("unknown shape kind '{s}'")))
    }

    pub(crate) fn bit(self) -> u8 {
        match self {
            ShapeKind::Ellipse => 1,
            ShapeKind::Rectangle => 2,
            ShapeKind::Triangle => 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    pub n_min: usize,
    pub n_max: usize,
    pub shape_kinds: Vec<ShapeKind>,
    /// Probability that a new shape may overlap the ones already placed.
    pub overlap_prob: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            height: 32,
            width: 32,
            n_min: 2,
            n_max: 6,
            shape_kinds: ShapeKind::ALL.to_vec(),
            overlap_prob: 0.5,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height < 16 || self.width < 16 {
            return Err(Error::Config("scene height and width must be at least 16".into()));
        }
        if self.n_min == 0 || self.n_min > self.n_max || self.n_max > MAX_INSTANCES {
            return Err(Error::Config(format!(
                "instance range must satisfy 1 <= n_min <= n_max <= {MAX_INSTANCES}"
            )));
        }
        if self.shape_kinds.is_empty() {
            return Err(Error::Config("at least one shape kind is required".into()));
        }
        if !(0.0..=1.0).contains(&self.overlap_prob) {
            return Err(Error::Config("overlap_prob must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Half-extent range of a shape's bounding box.
    fn radius_range(&self) -> (i64, i64) {
        let side = self.height.min(self.width) as i64;
        let lo = (side / 10).max(2);
        let hi = (side / 5).max(lo + 1);
        (lo, hi)
    }
}

/// Image plus depth-ordered, pairwise-disjoint visible instance masks.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub seed: u64,
    /// `[1, H, W]`, values in `[0, 1]`.
    pub image: Tensor,
    pub gt_masks: Vec<BinaryMask>,
}

impl Scene {
    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }

    pub fn instance_count(&self) -> usize {
        self.gt_masks.len()
    }

    pub fn foreground(&self) -> BinaryMask {
        BinaryMask::union_of(self.height(), self.width(), &self.gt_masks)
    }
}

/// Per-index seed derivation (SplitMix64 finaliser).
pub fn scene_seed(base: u64, index: u64) -> u64 {
    let mut z = base
        .wrapping_add(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(index.wrapping_mul(0xBF58_476D_1CE4_E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn sample_support(cfg: &SceneConfig, kind: ShapeKind, rng: &mut ChaCha8Rng) -> BinaryMask {
    let (h, w) = (cfg.height as i64, cfg.width as i64);
    let (lo, hi) = cfg.radius_range();
    loop {
        let ry = rng.gen_range(lo..=hi);
        let rx = rng.gen_range(lo..=hi);
        let cy = rng.gen_range(ry..h - ry);
        let cx = rng.gen_range(rx..w - rx);
        let mask = match kind {
            ShapeKind::Ellipse => BinaryMask::from_fn(cfg.height, cfg.width, |y, x| {
                let (dy, dx) = (y as i64 - cy, x as i64 - cx);
                dy * dy * rx * rx + dx * dx * ry * ry <= rx * rx * ry * ry
            }),
            ShapeKind::Rectangle => BinaryMask::from_fn(cfg.height, cfg.width, |y, x| {
                (y as i64 - cy).abs() <= ry && (x as i64 - cx).abs() <= rx
            }),
            ShapeKind::Triangle => {
                let mut v = [(0i64, 0i64); 3];
                for p in &mut v {
                    *p = (rng.gen_range(cy - ry..=cy + ry), rng.gen_range(cx - rx..=cx + rx));
                }
                let area2 = (v[1].1 - v[0].1) * (v[2].0 - v[0].0) - (v[1].0 - v[0].0) * (v[2].1 - v[0].1);
                if area2.abs() < 2 * rx * ry {
                    continue;
                }
                let edge = |a: (i64, i64), b: (i64, i64), p: (i64, i64)| (b.1 - a.1) * (p.0 - a.0) - (b.0 - a.0) * (p.1 - a.1);
                BinaryMask::from_fn(cfg.height, cfg.width, |y, x| {
                    let p = (y as i64, x as i64);
                    let e = [edge(v[0], v[1], p), edge(v[1], v[2], p), edge(v[2], v[0], p)];
                    e.iter().all(|&s| s >= 0) || e.iter().all(|&s| s <= 0)
                })
            }
        };
        if mask.area() >= MIN_VISIBLE_PIXELS {
            return mask;
        }
    }
}

/// Visible parts of `supports` when later entries occlude earlier ones.
fn visible_parts(supports: &[BinaryMask]) -> Vec<BinaryMask> {
    let mut out = Vec::with_capacity(supports.len());
    for (k, s) in supports.iter().enumerate() {
        let mut v = s.clone();
        for later in &supports[k + 1..] {
            for (a, b) in v.bits_mut().iter_mut().zip(later.bits()) {
                *a &= !*b;
            }
        }
        out.push(v);
    }
    out
}

/// Deterministic scene for `seed`.
pub fn generate_scene(seed: u64, cfg: &SceneConfig) -> Result<Scene> {
    generate_with_supports(seed, cfg).map(|(scene, _)| scene)
}

/// The scene together with the full (unoccluded) support of each instance.
fn generate_with_supports(seed: u64, cfg: &SceneConfig) -> Result<(Scene, Vec<BinaryMask>)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..SCENE_ATTEMPTS {
        let n = rng.gen_range(cfg.n_min..=cfg.n_max);
        let mut supports: Vec<BinaryMask> = Vec::with_capacity(n);
        for _ in 0..n {
            for _ in 0..PLACEMENT_TRIES {
                let kind = cfg.shape_kinds[rng.gen_range(0..cfg.shape_kinds.len())];
                let shape = sample_support(cfg, kind, &mut rng);
                let may_overlap = rng.gen_bool(cfg.overlap_prob);
                if may_overlap || supports.iter().all(|s| s.intersection_area(&shape) == 0) {
                    supports.push(shape);
                    break;
                }
            }
        }
        // Dropping a shape only uncovers others, so one pruning pass suffices.
        let visible = visible_parts(&supports);
        supports = supports
            .into_iter()
            .zip(&visible)
            .filter(|(_, v)| v.area() >= MIN_VISIBLE_PIXELS)
            .map(|(s, _)| s)
            .collect();
        let gt_masks = visible_parts(&supports);
        if gt_masks.len() < cfg.n_min {
            continue;
        }
        let image = paint(cfg, &gt_masks, &mut rng);
        return Ok((Scene { seed, image, gt_masks }, supports));
    }
    Err(Error::SceneGeneration(format!(
        "could not place {} shapes on a {}x{} grid (seed {seed})",
        cfg.n_min, cfg.height, cfg.width
    )))
}

fn paint(cfg: &SceneConfig, masks: &[BinaryMask], rng: &mut ChaCha8Rng) -> Tensor {
    let background: f64 = rng.gen_range(0.0..0.2);
    let mut data = vec![background; cfg.height * cfg.width];
    for m in masks {
        let intensity = rng.gen_range(0.35..1.0);
        for (d, &b) in data.iter_mut().zip(m.bits()) {
            if b {
                *d = intensity;
            }
        }
    }
    for d in &mut data {
        *d = (*d + rng.gen_range(-0.03..0.03)).clamp(0.0, 1.0);
    }
    Tensor::new(vec![1, cfg.height, cfg.width], data)
}

/// `count` scenes seeded from `base_seed`.
pub fn generate_split(base_seed: u64, count: usize, cfg: &SceneConfig) -> Result<Vec<Scene>> {
    (0..count as u64).map(|i| generate_scene(scene_seed(base_seed, i), cfg)).collect()
}
