use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{DistanceField, Pose, Scene, SemanticObject, NUM_CATEGORIES, NUM_ROOM_TYPES};

/// Side of the egocentric visual window.
pub const VISUAL_WINDOW: usize = 5;
/// Navigability, room one-hot, object-category one-hot.
pub const VISUAL_CHANNELS: usize = 1 + NUM_ROOM_TYPES + NUM_CATEGORIES;
pub const VISUAL_LEN: usize = VISUAL_WINDOW * VISUAL_WINDOW * VISUAL_CHANNELS;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AudioParams {
    /// Exponent of the geodesic intensity decay.
    pub alpha: f64,
    /// Std of the Gaussian noise added to the signature.
    pub noise_std: f64,
}

impl Default for AudioParams {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            noise_std: 0.005,
        }
    }
}

/// Binaural intensity pair plus a timbre signature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AudioSignal {
    pub left: f64,
    pub right: f64,
    pub signature: Vec<f64>,
    pub audible: bool,
}

impl AudioSignal {
    pub fn silent(dim: usize) -> Self {
        Self {
            left: 0.0,
            right: 0.0,
            signature: vec![0.0; dim],
            audible: false,
        }
    }

    pub fn intensity(&self) -> f64 {
        self.left + self.right
    }
}

/// An active sound source with the geodesic field measured from its cell.
#[derive(Debug, Clone, Copy)]
pub struct SoundSource<'a> {
    pub object: &'a SemanticObject,
    pub gain: f64,
    pub field: &'a DistanceField,
}

/// Renders the binaural signal heard at `pose`. Sources superimpose.
pub fn render_audio<R: Rng + ?Sized>(
    pose: &Pose,
    sources: &[SoundSource<'_>],
    signatures: &[Vec<f64>],
    params: &AudioParams,
    rng: &mut R,
) -> AudioSignal {
    let dim = signatures.first().map_or(0, Vec::len);
    if sources.is_empty() {
        return AudioSignal::silent(dim);
    }
    let (fx, fy) = pose.heading.delta();
    let (rx, ry) = pose.heading.right().delta();
    let mut out = AudioSignal {
        left: 0.0,
        right: 0.0,
        signature: vec![0.0; dim],
        audible: true,
    };
    for src in sources {
        debug_assert_eq!(src.field.origin(), src.object.cell);
        let d = src.field.distance(pose.cell());
        let intensity = src.gain / (1.0 + d).powf(params.alpha);
        let dx = (src.object.cell.x - pose.x) as f64;
        let dy = (src.object.cell.y - pose.y) as f64;
        let fwd = dx * fx as f64 + dy * fy as f64;
        let side = dx * rx as f64 + dy * ry as f64;
        let norm = fwd.hypot(side);
        let sin = if norm > 0.0 { side / norm } else { 0.0 };
        out.right += intensity * (1.0 + sin) / 2.0;
        out.left += intensity * (1.0 - sin) / 2.0;
        for (o, s) in out.signature.iter_mut().zip(&signatures[src.object.category]) {
            *o += intensity * s;
        }
    }
    if params.noise_std > 0.0 {
        let noise = Normal::new(0.0, params.noise_std).expect("finite noise std");
        for o in &mut out.signature {
            *o += noise.sample(rng);
        }
    }
    out
}

/// Egocentric window: rows run from the agent's own row (0) forward to 4,
/// columns from two cells left to two cells right.
pub fn render_visual(scene: &Scene, pose: &Pose) -> Vec<f64> {
    let mut out = vec![0.0; VISUAL_LEN];
    let (fx, fy) = pose.heading.delta();
    let (rx, ry) = pose.heading.right().delta();
    let half = (VISUAL_WINDOW / 2) as i32;
    for f in 0..VISUAL_WINDOW as i32 {
        for l in -half..=half {
            let cell = pose.cell().offset(f * fx + l * rx, f * fy + l * ry);
            let base = ((f as usize) * VISUAL_WINDOW + (l + half) as usize) * VISUAL_CHANNELS;
            let info = scene.info(cell);
            if !info.navigable {
                continue;
            }
            out[base] = 1.0;
            out[base + 1 + info.room_label as usize] = 1.0;
            if let Some(obj) = scene.object_at(cell) {
                out[base + 1 + NUM_ROOM_TYPES + obj.category] = 1.0;
            }
        }
    }
    out
}
