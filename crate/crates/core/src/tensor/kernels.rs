//! Raw numeric kernels behind the tape: GEMM (backed by `matrixmultiply`)
//! and the im2col/col2im pair used by 3x3 convolutions.

use crate::par::{self, Exec};

/// Row-block size used when splitting a GEMM across workers.
const ROW_BLOCK: usize = 64;
/// Below this many multiply-adds a GEMM always runs on the calling thread.
const PAR_MIN_WORK: usize = 1 << 18;

/// `c = op(a) * op(b) + beta * c` with `op(a)` of shape `[m, k]` and `op(b)`
/// of shape `[k, n]`. When `trans_a` is set, `a` is stored as `[k, m]`;
/// likewise `b` as `[n, k]` when `trans_b` is set. `c` is `[m, n]`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    exec: Exec,
    trans_a: bool,
    trans_b: bool,
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    b: &[f64],
    beta: f64,
    c: &mut [f64],
) {
    assert_eq!(a.len(), m * k, "gemm: lhs length");
    assert_eq!(b.len(), k * n, "gemm: rhs length");
    assert_eq!(c.len(), m * n, "gemm: output length");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };

    let run = |row0: usize, rows: usize, c_block: &mut [f64]| {
        // SAFETY: the strides describe in-bounds views of `a`, `b` and the
        // `rows x n` output block, all checked by the length asserts above.
        unsafe {
            matrixmultiply::dgemm(
                rows,
                k,
                n,
                1.0,
                a.as_ptr().offset(row0 as isize * rsa),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c_block.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    };

    if exec.is_parallel() && m * k * n >= PAR_MIN_WORK && m >= 2 * ROW_BLOCK {
        par::for_each_chunk_mut(exec, c, ROW_BLOCK * n, |i, block| {
            run(i * ROW_BLOCK, block.len() / n, block);
        });
    } else {
        run(0, m, c);
    }
}

/// Geometry of a 3x3 convolution over NHWC input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    pub pad: usize,
}

pub const KERNEL: usize = 3;

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - KERNEL) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - KERNEL) / self.stride + 1
    }

    /// Length of one im2col row.
    pub fn patch_len(&self) -> usize {
        KERNEL * KERNEL * self.in_channels
    }

    pub fn out_pixels(&self) -> usize {
        self.out_height() * self.out_width()
    }
}

/// Unfolds NHWC input into `[batch * out_pixels, 9 * in_channels]` patches,
/// with zero padding. Column order is `(ky, kx, channel)`.
pub fn im2col(exec: Exec, g: &ConvGeometry, input: &[f64]) -> Vec<f64> {
    let (ho, wo, c) = (g.out_height(), g.out_width(), g.in_channels);
    let patch = g.patch_len();
    let per_image = ho * wo * patch;
    let mut cols = vec![0.0; g.batch * per_image];
    let image_len = g.height * g.width * c;
    par::for_each_chunk_mut(exec, &mut cols, per_image, |b, out| {
        let img = &input[b * image_len..(b + 1) * image_len];
        for oy in 0..ho {
            for ox in 0..wo {
                let row = &mut out[(oy * wo + ox) * patch..(oy * wo + ox + 1) * patch];
                for ky in 0..KERNEL {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    for kx in 0..KERNEL {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.width as isize {
                            continue;
                        }
                        let src = (iy as usize * g.width + ix as usize) * c;
                        let dst = (ky * KERNEL + kx) * c;
                        row[dst..dst + c].copy_from_slice(&img[src..src + c]);
                    }
                }
            }
        }
    });
    cols
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the input grid.
pub fn col2im(exec: Exec, g: &ConvGeometry, cols: &[f64]) -> Vec<f64> {
    let (ho, wo, c) = (g.out_height(), g.out_width(), g.in_channels);
    let patch = g.patch_len();
    let image_len = g.height * g.width * c;
    let mut out = vec![0.0; g.batch * image_len];
    par::for_each_chunk_mut(exec, &mut out, image_len, |b, img| {
        let src_img = &cols[b * ho * wo * patch..(b + 1) * ho * wo * patch];
        for oy in 0..ho {
            for ox in 0..wo {
                let row = &src_img[(oy * wo + ox) * patch..(oy * wo + ox + 1) * patch];
                for ky in 0..KERNEL {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    for kx in 0..KERNEL {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.width as isize {
                            continue;
                        }
                        let dst = (iy as usize * g.width + ix as usize) * c;
                        let src = (ky * KERNEL + kx) * c;
                        for ch in 0..c {
                            img[dst + ch] += row[src + ch];
                        }
                    }
                }
            }
        }
    });
    out
}
