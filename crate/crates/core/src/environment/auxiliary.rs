//! Foreground and angle-quantisation channels computed from ground truth.

use rand::Rng;

use super::scene::Scene;
use crate::scoring::BinaryMask;

pub const ANGLE_BINS: usize = 8;
/// Foreground plus the angle bins.
pub const AUX_CHANNELS: usize = 1 + ANGLE_BINS;

#[derive(Clone, Debug, PartialEq)]
pub struct AuxChannels {
    pub foreground: BinaryMask,
    pub angle_bins: Vec<BinaryMask>,
}

impl AuxChannels {
    /// Flips every bit independently with probability `p`.
    pub fn with_bit_flip_noise(mut self, p: f64, rng: &mut impl Rng) -> Self {
        if p <= 0.0 {
            return self;
        }
        for m in std::iter::once(&mut self.foreground).chain(self.angle_bins.iter_mut()) {
            for b in m.bits_mut() {
                if rng.gen_bool(p) {
                    *b = !*b;
                }
            }
        }
        self
    }

    /// Channel-major pixel values: foreground first, then bins 0..8.
    pub fn to_f64(&self) -> Vec<f64> {
        let mut out = self.foreground.to_f64();
        for b in &self.angle_bins {
            out.extend(b.to_f64());
        }
        out
    }
}

/// 45° sector of the offset `(dx, dy)` from a centroid, with bin 0 starting
/// at angle 0 and sectors half-open. Image rows grow downward, so angles
/// follow `atan2(dy, dx)` in pixel coordinates. A zero offset maps to bin 0.
///
/// Offsets are compared exactly in integer arithmetic.
pub fn angle_bin(dx: i64, dy: i64) -> usize {
    let (ax, ay) = (dx.abs(), dy.abs());
    if dy >= 0 && dx > 0 {
        if dy < dx {
            0
        } else {
            1
        }
    } else if dx <= 0 && dy > 0 {
        if dy > ax {
            2
        } else {
            3
        }
    } else if dx < 0 && dy <= 0 {
        if ay < ax {
            4
        } else {
            5
        }
    } else if dy < 0 {
        if dx < ay {
            6
        } else {
            7
        }
    } else {
        0
    }
}

pub fn angle_quantization(scene: &Scene) -> AuxChannels {
    let (h, w) = (scene.height(), scene.width());
    let mut bins = vec![BinaryMask::empty(h, w); ANGLE_BINS];
    for m in &scene.gt_masks {
        let (mut count, mut sx, mut sy) = (0i64, 0i64, 0i64);
        for y in 0..h {
            for x in 0..w {
                if m.get(y, x) {
                    count += 1;
                    sx += x as i64;
                    sy += y as i64;
                }
            }
        }
        for y in 0..h {
            for x in 0..w {
                if m.get(y, x) {
                    // Offsets scaled by the pixel count keep the centroid integral.
                    let b = angle_bin(x as i64 * count - sx, y as i64 * count - sy);
                    bins[b].set(y, x, true);
                }
            }
        }
    }
    AuxChannels {
        foreground: scene.foreground(),
        angle_bins: bins,
    }
}
