use rand::Rng;
use serde::{Deserialize, Serialize};

use super::FloatFrame;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DistractorKind {
    #[default]
    None,
    Color,
    Camera,
}

impl DistractorKind {
    pub fn name(self) -> &'static str {
        match self {
            DistractorKind::None => "none",
            DistractorKind::Color => "color",
            DistractorKind::Camera => "camera",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Difficulty {
    #[default]
    Easy,
    Medium,
}

impl Difficulty {
    pub fn name(self) -> &'static str {
        match self {
            Difficulty::Easy => "easy",
            Difficulty::Medium => "medium",
        }
    }

    /// Maximum per-channel colour offset.
    pub fn color_magnitude(self) -> f64 {
        match self {
            Difficulty::Easy => 0.1,
            Difficulty::Medium => 0.3,
        }
    }

    /// Maximum viewport translation in pixels along each axis.
    pub fn camera_shift(self) -> i64 {
        match self {
            Difficulty::Easy => 1,
            Difficulty::Medium => 3,
        }
    }
}

/// Perturbs a rendered frame. Colour adds one uniform offset per channel;
/// camera translates the viewport by a random integer offset and fills the
/// uncovered border by repeating the edge. Draws are fresh on every call.
pub fn apply_distractor<R: Rng + ?Sized>(
    frame: &FloatFrame,
    kind: DistractorKind,
    difficulty: Difficulty,
    rng: &mut R,
) -> FloatFrame {
    match kind {
        DistractorKind::None => frame.clone(),
        DistractorKind::Color => {
            let m = difficulty.color_magnitude();
            let offs: [f64; 3] = [
                rng.gen_range(-m..=m),
                rng.gen_range(-m..=m),
                rng.gen_range(-m..=m),
            ];
            let mut out = frame.clone();
            for px in out.data.chunks_mut(3) {
                for c in 0..3 {
                    px[c] = (px[c] + offs[c]).clamp(0.0, 1.0);
                }
            }
            out
        }
        DistractorKind::Camera => {
            let s = difficulty.camera_shift();
            let dx = rng.gen_range(-s..=s);
            let dy = rng.gen_range(-s..=s);
            translate(frame, dx, dy)
        }
    }
}

/// Content moves `dx` columns right and `dy` rows down; uncovered pixels copy
/// the nearest source edge.
pub fn translate(frame: &FloatFrame, dx: i64, dy: i64) -> FloatFrame {
    let g = frame.grid as i64;
    let mut out = frame.clone();
    for r in 0..g {
        for c in 0..g {
            let sr = (r - dy).clamp(0, g - 1) as usize;
            let sc = (c - dx).clamp(0, g - 1) as usize;
            let dst = ((r * g + c) * 3) as usize;
            let src = (sr * frame.grid + sc) * 3;
            for ch in 0..3 {
                out.data[dst + ch] = frame.data[src + ch];
            }
        }
    }
    out
}
