use serde::{Deserialize, Serialize};

use super::constants::{BACKGROUND, BALL_COLOR, CUP_COLOR};
use super::{EnvConfig, EnvState};

/// 8-bit RGB frame, row-major `[G, G, 3]`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Frame {
    grid: usize,
    pixels: Vec<u8>,
}

impl Frame {
    pub fn blank(grid: usize) -> Self {
        Self {
            grid,
            pixels: vec![0; grid * grid * 3],
        }
    }

    pub fn grid(&self) -> usize {
        self.grid
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn to_float(&self) -> FloatFrame {
        FloatFrame {
            grid: self.grid,
            data: self.pixels.iter().map(|p| *p as f64 / 255.0).collect(),
        }
    }
}

/// Floating-point RGB frame with values in [0, 1], row-major `[G, G, 3]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FloatFrame {
    pub grid: usize,
    pub data: Vec<f64>,
}

impl FloatFrame {
    pub fn filled(grid: usize, rgb: [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(grid * grid * 3);
        for _ in 0..grid * grid {
            data.extend_from_slice(&rgb);
        }
        Self { grid, data }
    }

    pub fn get(&self, row: usize, col: usize, ch: usize) -> f64 {
        self.data[(row * self.grid + col) * 3 + ch]
    }

    fn paint(&mut self, row: isize, col: isize, rgb: [f64; 3]) {
        let g = self.grid as isize;
        if (0..g).contains(&row) && (0..g).contains(&col) {
            let i = (row as usize * self.grid + col as usize) * 3;
            self.data[i..i + 3].copy_from_slice(&rgb);
        }
    }

    pub fn quantize(&self) -> Frame {
        Frame {
            grid: self.grid,
            pixels: self
                .data
                .iter()
                .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
                .collect(),
        }
    }
}

/// Continuous pixel coordinates (row, col) of a world position; y points up.
fn to_pixel(grid: usize, pos: [f64; 2]) -> (f64, f64) {
    let g = grid as f64;
    ((1.0 - pos[1]) * 0.5 * g, (pos[0] + 1.0) * 0.5 * g)
}

/// Renders the state without distractors. The cup is a 3-pixel bracket
/// opening upwards, the ball a 2x2 disc drawn on top.
pub fn render_clean(config: &EnvConfig, state: &EnvState) -> FloatFrame {
    let grid = config.grid;
    let mut f = FloatFrame::filled(grid, BACKGROUND);
    let last = grid as isize - 1;
    let (cr, cc) = to_pixel(grid, state.cup_pos);
    let (r, c) = ((cr as isize).clamp(0, last), (cc as isize).clamp(0, last));
    f.paint(r, c - 1, CUP_COLOR);
    f.paint(r + 1, c, CUP_COLOR);
    f.paint(r, c + 1, CUP_COLOR);
    let (br, bc) = to_pixel(grid, state.ball_pos);
    let (r0, c0) = (
        ((br - 0.5).floor() as isize).clamp(0, last - 1),
        ((bc - 0.5).floor() as isize).clamp(0, last - 1),
    );
    for dr in 0..2 {
        for dc in 0..2 {
            f.paint(r0 + dr, c0 + dc, BALL_COLOR);
        }
    }
    f
}
