//! im2col/gemm kernels for strided convolution and its adjoint.
//!
//! All buffers are NCHW. Convolution weights are `[filters, channels, k, k]`;
//! transposed-convolution weights are `[in_channels, filters, k, k]`.

use super::{gemm, Real};
use crate::error::{Error, Result};

/// Square-kernel convolution geometry.
///
/// `pad` zero pixels are added on every side; `pad_extra` further zero
/// pixels are added on the bottom and right edges only, which lets a
/// unit-stride even kernel keep the spatial size. `output_pad` only affects
/// the transposed direction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ConvGeometry {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub pad_extra: usize,
    pub output_pad: usize,
}

impl ConvGeometry {
    pub fn new(kernel: usize, stride: usize, pad: usize) -> Self {
        ConvGeometry {
            kernel,
            stride,
            pad,
            pad_extra: 0,
            output_pad: 0,
        }
    }

    pub fn with_pad_extra(mut self, pad_extra: usize) -> Self {
        self.pad_extra = pad_extra;
        self
    }

    pub fn with_output_pad(mut self, output_pad: usize) -> Self {
        self.output_pad = output_pad;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel == 0 || self.stride == 0 {
            return Err(Error::Geometry(format!(
                "kernel and stride must be positive ({self:?})"
            )));
        }
        if self.output_pad >= self.stride {
            return Err(Error::Geometry(format!(
                "output_pad {} must be smaller than stride {}",
                self.output_pad, self.stride
            )));
        }
        Ok(())
    }

    fn total_pad(&self) -> usize {
        2 * self.pad + self.pad_extra
    }

    /// Spatial size produced by a forward convolution over `input` pixels.
    pub fn conv_output(&self, input: usize) -> Result<usize> {
        self.validate()?;
        let padded = input + self.total_pad();
        if padded < self.kernel {
            return Err(Error::Geometry(format!(
                "kernel {} does not fit input {input} with padding {}",
                self.kernel,
                self.total_pad()
            )));
        }
        Ok((padded - self.kernel) / self.stride + 1)
    }

    /// Spatial size produced by a transposed convolution over `input` pixels.
    pub fn transpose_output(&self, input: usize) -> Result<usize> {
        self.validate()?;
        if input == 0 {
            return Err(Error::Geometry("empty input".into()));
        }
        let grown = (input - 1) * self.stride + self.kernel + self.output_pad;
        if grown <= self.total_pad() {
            return Err(Error::Geometry(format!(
                "transposed output would be {} pixels",
                grown as isize - self.total_pad() as isize
            )));
        }
        Ok(grown - self.total_pad())
    }
}

/// Image block with `channels×height×width` pixels feeding `out_h×out_w`
/// sliding positions.
#[derive(Clone, Copy)]
struct Frame {
    channels: usize,
    height: usize,
    width: usize,
    out_h: usize,
    out_w: usize,
}

impl Frame {
    fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }
}

/// Writes the patch matrix of one image into `cols` (row length `ld`,
/// starting at column `col0`).
fn im2col<T: Real>(
    image: &[T],
    fr: Frame,
    g: &ConvGeometry,
    cols: &mut [T],
    ld: usize,
    col0: usize,
) {
    let k = g.kernel;
    for c in 0..fr.channels {
        let plane = &image[c * fr.height * fr.width..(c + 1) * fr.height * fr.width];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut cols[row * ld + col0..row * ld + col0 + fr.positions()];
                for oy in 0..fr.out_h {
                    let y = (oy * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oy * fr.out_w..(oy + 1) * fr.out_w];
                    if y < 0 || y as usize >= fr.height {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[y as usize * fr.width..(y as usize + 1) * fr.width];
                    for (ox, slot) in line.iter_mut().enumerate() {
                        let x = (ox * g.stride + kj) as isize - g.pad as isize;
                        *slot = if x >= 0 && (x as usize) < fr.width {
                            src[x as usize]
                        } else {
                            T::zero()
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates patch columns back onto the image.
fn col2im<T: Real>(
    cols: &[T],
    fr: Frame,
    g: &ConvGeometry,
    image: &mut [T],
    ld: usize,
    col0: usize,
) {
    let k = g.kernel;
    for c in 0..fr.channels {
        let plane = &mut image[c * fr.height * fr.width..(c + 1) * fr.height * fr.width];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &cols[row * ld + col0..row * ld + col0 + fr.positions()];
                for oy in 0..fr.out_h {
                    let y = (oy * g.stride + ki) as isize - g.pad as isize;
                    if y < 0 || y as usize >= fr.height {
                        continue;
                    }
                    let dst = &mut plane[y as usize * fr.width..(y as usize + 1) * fr.width];
                    for (ox, &v) in src[oy * fr.out_w..(oy + 1) * fr.out_w].iter().enumerate() {
                        let x = (ox * g.stride + kj) as isize - g.pad as isize;
                        if x >= 0 && (x as usize) < fr.width {
                            dst[x as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// `[n, c, p]` → `[c, n·p]`
fn batch_to_channel_major<T: Real>(x: &[T], n: usize, c: usize, p: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for b in 0..n {
        for ch in 0..c {
            let src = &x[(b * c + ch) * p..(b * c + ch + 1) * p];
            out[ch * n * p + b * p..ch * n * p + (b + 1) * p].copy_from_slice(src);
        }
    }
    out
}

/// `[c, n·p]` → `[n, c, p]`
fn channel_major_to_batch<T: Real>(x: &[T], n: usize, c: usize, p: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for ch in 0..c {
        for b in 0..n {
            let src = &x[ch * n * p + b * p..ch * n * p + (b + 1) * p];
            out[(b * c + ch) * p..(b * c + ch + 1) * p].copy_from_slice(src);
        }
    }
    out
}

fn batched_im2col<T: Real>(x: &[T], n: usize, fr: Frame, g: &ConvGeometry) -> Vec<T> {
    let rows = fr.channels * g.kernel * g.kernel;
    let ld = n * fr.positions();
    let mut cols = vec![T::zero(); rows * ld];
    for b in 0..n {
        let img = &x[b * fr.image_len()..(b + 1) * fr.image_len()];
        im2col(img, fr, g, &mut cols, ld, b * fr.positions());
    }
    cols
}

fn batched_col2im<T: Real>(cols: &[T], n: usize, fr: Frame, g: &ConvGeometry) -> Vec<T> {
    let ld = n * fr.positions();
    let mut out = vec![T::zero(); n * fr.image_len()];
    for b in 0..n {
        let img = &mut out[b * fr.image_len()..(b + 1) * fr.image_len()];
        col2im(cols, fr, g, img, ld, b * fr.positions());
    }
    out
}

/// Input/output sizes of one convolution call, `[n, c, h, w]` → `[n, f, oh, ow]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvDims {
    pub batch: usize,
    pub in_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub filters: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvDims {
    fn frame(&self) -> Frame {
        Frame {
            channels: self.in_channels,
            height: self.in_h,
            width: self.in_w,
            out_h: self.out_h,
            out_w: self.out_w,
        }
    }

    /// For transposed convolution the large output plays the image role.
    fn transposed_frame(&self) -> Frame {
        Frame {
            channels: self.filters,
            height: self.out_h,
            width: self.out_w,
            out_h: self.in_h,
            out_w: self.in_w,
        }
    }
}

pub fn conv2d_forward<T: Real>(
    x: &[T],
    w: &[T],
    bias: &[T],
    d: &ConvDims,
    g: &ConvGeometry,
) -> Vec<T> {
    let fr = d.frame();
    let ckk = d.in_channels * g.kernel * g.kernel;
    let np = d.batch * fr.positions();
    let cols = batched_im2col(x, d.batch, fr, g);
    let mut y = vec![T::zero(); d.filters * np];
    for (f, row) in y.chunks_mut(np).enumerate() {
        row.fill(bias[f]);
    }
    gemm(
        false,
        false,
        d.filters,
        ckk,
        np,
        T::one(),
        w,
        &cols,
        T::one(),
        &mut y,
    );
    channel_major_to_batch(&y, d.batch, d.filters, fr.positions())
}

pub fn conv2d_backward_input<T: Real>(dy: &[T], w: &[T], d: &ConvDims, g: &ConvGeometry) -> Vec<T> {
    let fr = d.frame();
    let ckk = d.in_channels * g.kernel * g.kernel;
    let np = d.batch * fr.positions();
    let dyc = batch_to_channel_major(dy, d.batch, d.filters, fr.positions());
    let mut dcols = vec![T::zero(); ckk * np];
    gemm(
        true,
        false,
        ckk,
        d.filters,
        np,
        T::one(),
        w,
        &dyc,
        T::zero(),
        &mut dcols,
    );
    batched_col2im(&dcols, d.batch, fr, g)
}

/// Returns `(d_weight, d_bias)`.
pub fn conv2d_backward_weight<T: Real>(
    x: &[T],
    dy: &[T],
    d: &ConvDims,
    g: &ConvGeometry,
) -> (Vec<T>, Vec<T>) {
    let fr = d.frame();
    let ckk = d.in_channels * g.kernel * g.kernel;
    let np = d.batch * fr.positions();
    let cols = batched_im2col(x, d.batch, fr, g);
    let dyc = batch_to_channel_major(dy, d.batch, d.filters, fr.positions());
    let mut dw = vec![T::zero(); d.filters * ckk];
    gemm(
        false,
        true,
        d.filters,
        np,
        ckk,
        T::one(),
        &dyc,
        &cols,
        T::zero(),
        &mut dw,
    );
    let db = dyc
        .chunks(np)
        .map(|row| row.iter().copied().sum())
        .collect();
    (dw, db)
}

pub fn conv_transpose2d_forward<T: Real>(
    x: &[T],
    w: &[T],
    bias: &[T],
    d: &ConvDims,
    g: &ConvGeometry,
) -> Vec<T> {
    let fr = d.transposed_frame();
    let fkk = d.filters * g.kernel * g.kernel;
    let nhw = d.batch * d.in_h * d.in_w;
    let xc = batch_to_channel_major(x, d.batch, d.in_channels, d.in_h * d.in_w);
    let mut cols = vec![T::zero(); fkk * nhw];
    gemm(
        true,
        false,
        fkk,
        d.in_channels,
        nhw,
        T::one(),
        w,
        &xc,
        T::zero(),
        &mut cols,
    );
    let mut y = batched_col2im(&cols, d.batch, fr, g);
    let plane = d.out_h * d.out_w;
    for (i, chunk) in y.chunks_mut(plane).enumerate() {
        let b = bias[i % d.filters];
        chunk.iter_mut().for_each(|v| *v += b);
    }
    y
}

pub fn conv_transpose2d_backward_input<T: Real>(
    dy: &[T],
    w: &[T],
    d: &ConvDims,
    g: &ConvGeometry,
) -> Vec<T> {
    let fr = d.transposed_frame();
    let fkk = d.filters * g.kernel * g.kernel;
    let nhw = d.batch * d.in_h * d.in_w;
    let cols = batched_im2col(dy, d.batch, fr, g);
    let mut dxc = vec![T::zero(); d.in_channels * nhw];
    gemm(
        false,
        false,
        d.in_channels,
        fkk,
        nhw,
        T::one(),
        w,
        &cols,
        T::zero(),
        &mut dxc,
    );
    channel_major_to_batch(&dxc, d.batch, d.in_channels, d.in_h * d.in_w)
}

/// Returns `(d_weight, d_bias)`.
pub fn conv_transpose2d_backward_weight<T: Real>(
    x: &[T],
    dy: &[T],
    d: &ConvDims,
    g: &ConvGeometry,
) -> (Vec<T>, Vec<T>) {
    let fr = d.transposed_frame();
    let fkk = d.filters * g.kernel * g.kernel;
    let nhw = d.batch * d.in_h * d.in_w;
    let cols = batched_im2col(dy, d.batch, fr, g);
    let xc = batch_to_channel_major(x, d.batch, d.in_channels, d.in_h * d.in_w);
    let mut dw = vec![T::zero(); d.in_channels * fkk];
    gemm(
        false,
        true,
        d.in_channels,
        nhw,
        fkk,
        T::one(),
        &xc,
        &cols,
        T::zero(),
        &mut dw,
    );
    let plane = d.out_h * d.out_w;
    let mut db = vec![T::zero(); d.filters];
    for (i, chunk) in dy.chunks(plane).enumerate() {
        db[i % d.filters] += chunk.iter().copied().sum();
    }
    (dw, db)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_size_formulas() {
        let g = ConvGeometry::new(4, 2, 1);
        assert_eq!(g.conv_output(32).unwrap(), 16);
        assert_eq!(g.transpose_output(4).unwrap(), 8);
        assert_eq!(ConvGeometry::new(3, 2, 0).conv_output(7).unwrap(), 3);
        assert_eq!(
            ConvGeometry::new(3, 2, 1)
                .with_output_pad(1)
                .transpose_output(7)
                .unwrap(),
            14
        );
        assert_eq!(
            ConvGeometry::new(4, 1, 1)
                .with_pad_extra(1)
                .conv_output(32)
                .unwrap(),
            32
        );
    }

    #[test]
    fn invalid_geometry_is_rejected() {
        assert!(ConvGeometry::new(5, 1, 0).conv_output(3).is_err());
        assert!(ConvGeometry::new(3, 2, 0)
            .with_output_pad(2)
            .conv_output(8)
            .is_err());
        assert!(ConvGeometry::new(1, 1, 0).transpose_output(1).is_ok());
        assert!(ConvGeometry::new(1, 1, 1).transpose_output(1).is_err());
    }

    #[test]
    fn transpose_inverts_conv_output_size() {
        for k in 1..6 {
            for s in 1..4 {
                for p in 0..3 {
                    for op in 0..s {
                        let g = ConvGeometry::new(k, s, p).with_output_pad(op);
                        for h in 1..12 {
                            if let Ok(big) = g.transpose_output(h) {
                                assert_eq!(g.conv_output(big).unwrap(), h, "{g:?} h={h}");
                            }
                        }
                    }
                }
            }
        }
    }
}
