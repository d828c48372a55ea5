//! Patch unfolding (`im2col`) and its adjoint (`col2im`) as custom ops.
//!
//! A stride-1 convolution becomes `W · im2col(x)`, so both passes run as
//! dense matrix products. Each op's backward is the other op, which keeps
//! the pair exact under repeated differentiation.

use candle_core::{CpuStorage, CustomOp1, Layout, Shape, Tensor, WithDType};

use crate::error::Result;

#[derive(Debug, Clone, Copy)]
struct Geometry {
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    pad: usize,
}

impl Geometry {
    fn out_hw(&self) -> (usize, usize) {
        (self.h + 2 * self.pad + 1 - self.k, self.w + 2 * self.pad + 1 - self.k)
    }

    /// Calls `f(image_start, column_start, len)` for every maximal run of
    /// in-bounds positions; runs are contiguous in both buffers.
    fn for_each_run(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (oh, ow) = self.out_hw();
        let (k, p) = (self.k, self.pad);
        let ckk = self.c * k * k;
        for b in 0..self.b {
            for c in 0..self.c {
                for di in 0..k {
                    for dj in 0..k {
                        let row = (c * k + di) * k + dj;
                        let col_base = (b * ckk + row) * oh * ow;
                        let x_lo = p.saturating_sub(dj);
                        let x_hi = ow.min((self.w + p).saturating_sub(dj));
                        if x_lo >= x_hi {
                            continue;
                        }
                        for oy in 0..oh {
                            let y = oy + di;
                            if y < p || y - p >= self.h {
                                continue;
                            }
                            let img_row = ((b * self.c + c) * self.h + (y - p)) * self.w;
                            f(img_row + x_lo + dj - p, col_base + oy * ow + x_lo, x_hi - x_lo);
                        }
                    }
                }
            }
        }
    }
}

fn contiguous<'a, T>(data: &'a [T], layout: &Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((s, e)) => Ok(&data[s..e]),
        None => candle_core::bail!("unfold ops need contiguous inputs"),
    }
}

fn gather<T: WithDType>(src: &[T], g: &Geometry) -> Vec<T> {
    let (oh, ow) = g.out_hw();
    let mut out = vec![T::zero(); g.b * g.c * g.k * g.k * oh * ow];
    g.for_each_run(|i, j, n| out[j..j + n].copy_from_slice(&src[i..i + n]));
    out
}

fn scatter<T: WithDType>(src: &[T], g: &Geometry) -> Vec<T> {
    let mut out = vec![T::zero(); g.b * g.c * g.h * g.w];
    g.for_each_run(|i, j, n| {
        for (o, v) in out[i..i + n].iter_mut().zip(&src[j..j + n]) {
            *o += *v;
        }
    });
    out
}

struct Im2Col(Geometry);
struct Col2Im(Geometry);

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = &self.0;
        let (oh, ow) = g.out_hw();
        let shape = Shape::from((g.b, g.c * g.k * g.k, oh * ow));
        let out = match s {
            CpuStorage::F32(v) => CpuStorage::F32(gather(contiguous(v, l)?, g)),
            CpuStorage::F64(v) => CpuStorage::F64(gather(contiguous(v, l)?, g)),
            _ => candle_core::bail!("im2col: only f32 and f64 are supported"),
        };
        Ok((out, shape))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1(Col2Im(self.0))?))
    }
}

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = &self.0;
        let shape = Shape::from((g.b, g.c, g.h, g.w));
        let out = match s {
            CpuStorage::F32(v) => CpuStorage::F32(scatter(contiguous(v, l)?, g)),
            CpuStorage::F64(v) => CpuStorage::F64(scatter(contiguous(v, l)?, g)),
            _ => candle_core::bail!("col2im: only f32 and f64 are supported"),
        };
        Ok((out, shape))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1(Im2Col(self.0))?))
    }
}

/// `(B, C, H, W) → (B, C·k·k, OH·OW)` for a stride-1 `k × k` window with
/// zero padding `pad`. Row index is `(c·k + di)·k + dj`.
pub fn im2col(x: &Tensor, k: usize, pad: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    if k == 0 || h + 2 * pad < k || w + 2 * pad < k {
        return Err(crate::Error::shape(format!("window {k} does not fit {h}x{w} with padding {pad}")));
    }
    let g = Geometry { b, c, h, w, k, pad };
    Ok(x.contiguous()?.apply_op1(Im2Col(g))?)
}
