//! Raw convolution and pooling kernels over NCHW buffers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    /// Zero padding so that `out = ceil(in / stride)`; the odd extra row or
    /// column goes to the bottom/right.
    Same,
    Valid,
}

/// Output extent and leading pad for one spatial axis.
pub(crate) fn axis_geometry(
    op: &'static str,
    axis: &str,
    input: usize,
    window: usize,
    stride: usize,
    padding: Padding,
) -> Result<(usize, usize)> {
    if window == 0 || stride == 0 {
        return Err(Error::invalid(op, "window and stride must be positive"));
    }
    match padding {
        Padding::Valid => {
            if window > input {
                return Err(Error::invalid(
                    op,
                    format!("window {window} exceeds {axis} extent {input}"),
                ));
            }
            Ok(((input - window) / stride + 1, 0))
        }
        Padding::Same => {
            let out = input.div_ceil(stride);
            let total = ((out - 1) * stride + window).saturating_sub(input);
            Ok((out, total / 2))
        }
    }
}

/// Sliding-window geometry shared by convolution and pooling.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Window {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: (usize, usize),
    pub pad_top: usize,
    pub pad_left: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl Window {
    pub fn new(
        op: &'static str,
        (channels, height, width): (usize, usize, usize),
        (kh, kw): (usize, usize),
        stride: (usize, usize),
        padding: Padding,
    ) -> Result<Self> {
        let (out_h, pad_top) = axis_geometry(op, "height", height, kh, stride.0, padding)?;
        let (out_w, pad_left) = axis_geometry(op, "width", width, kw, stride.1, padding)?;
        Ok(Self {
            channels,
            height,
            width,
            kh,
            kw,
            stride,
            pad_top,
            pad_left,
            out_h,
            out_w,
        })
    }

    pub fn in_plane(&self) -> usize {
        self.height * self.width
    }

    pub fn out_plane(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Input row/column for output position `o` and kernel offset `k`, if inside the image.
    #[inline]
    fn source(&self, oy: usize, ky: usize, ox: usize, kx: usize) -> Option<(usize, usize)> {
        let y = (oy * self.stride.0 + ky).checked_sub(self.pad_top)?;
        let x = (ox * self.stride.1 + kx).checked_sub(self.pad_left)?;
        (y < self.height && x < self.width).then_some((y, x))
    }
}

/// Unfolds one image (`channels x H x W`) into a `(channels*kh*kw) x (out_h*out_w)` matrix.
pub(crate) fn im2col<T: Scalar>(image: &[T], g: &Window, cols: &mut [T]) {
    let plane = g.out_plane();
    for c in 0..g.channels {
        let src = &image[c * g.in_plane()..(c + 1) * g.in_plane()];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..g.out_h {
                    for ox in 0..g.out_w {
                        dst[oy * g.out_w + ox] = match g.source(oy, ky, ox, kx) {
                            Some((y, x)) => src[y * g.width + x],
                            None => T::zero(),
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back, accumulating into `image`.
pub(crate) fn col2im<T: Scalar>(cols: &[T], g: &Window, image: &mut [T]) {
    let plane = g.out_plane();
    for c in 0..g.channels {
        let in_plane = g.in_plane();
        let dst = &mut image[c * in_plane..(c + 1) * in_plane];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..g.out_h {
                    for ox in 0..g.out_w {
                        if let Some((y, x)) = g.source(oy, ky, ox, kx) {
                            dst[y * g.width + x] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation forward pass over a batch. `weight` is `out x in x kh x kw`.
pub(crate) fn conv_forward<T: Scalar>(
    input: &[T],
    batch: usize,
    g: &Window,
    weight: &[T],
    out_channels: usize,
    bias: Option<&[T]>,
) -> Vec<T> {
    let k = g.channels * g.kh * g.kw;
    let plane = g.out_plane();
    let mut out = vec![T::zero(); batch * out_channels * plane];
    let mut cols = vec![T::zero(); k * plane];
    for b in 0..batch {
        let img = &input[b * g.channels * g.in_plane()..(b + 1) * g.channels * g.in_plane()];
        im2col(img, g, &mut cols);
        let dst = &mut out[b * out_channels * plane..(b + 1) * out_channels * plane];
        T::gemm(out_channels, k, plane, weight, false, &cols, false, dst, false);
        if let Some(bias) = bias {
            for (o, &bv) in bias.iter().enumerate() {
                dst[o * plane..(o + 1) * plane].iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    out
}

pub(crate) struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub weight: Option<Vec<T>>,
    pub bias: Option<Vec<T>>,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_backward<T: Scalar>(
    input: &[T],
    batch: usize,
    g: &Window,
    weight: &[T],
    out_channels: usize,
    grad_out: &[T],
    want: (bool, bool, bool),
) -> ConvGrads<T> {
    let k = g.channels * g.kh * g.kw;
    let plane = g.out_plane();
    let in_size = g.channels * g.in_plane();
    let mut d_input = want.0.then(|| vec![T::zero(); batch * in_size]);
    let mut d_weight = want.1.then(|| vec![T::zero(); out_channels * k]);
    let mut d_bias = want.2.then(|| vec![T::zero(); out_channels]);
    let mut cols = vec![T::zero(); k * plane];
    for b in 0..batch {
        let dy = &grad_out[b * out_channels * plane..(b + 1) * out_channels * plane];
        if let Some(db) = d_bias.as_mut() {
            for (o, acc) in db.iter_mut().enumerate() {
                *acc += dy[o * plane..(o + 1) * plane].iter().copied().sum::<T>();
            }
        }
        if let Some(dw) = d_weight.as_mut() {
            im2col(&input[b * in_size..(b + 1) * in_size], g, &mut cols);
            T::gemm(out_channels, plane, k, dy, false, &cols, true, dw, true);
        }
        if let Some(dx) = d_input.as_mut() {
            T::gemm(k, out_channels, plane, weight, true, dy, false, &mut cols, false);
            col2im(&cols, g, &mut dx[b * in_size..(b + 1) * in_size]);
        }
    }
    ConvGrads {
        input: d_input,
        weight: d_weight,
        bias: d_bias,
    }
}

/// Max pooling. Returns the pooled values and, per output, the flat input
/// index that produced it (first row-major occurrence on ties).
pub(crate) fn max_pool_forward<T: Scalar>(input: &[T], batch: usize, g: &Window) -> (Vec<T>, Vec<usize>) {
    let planes = batch * g.channels;
    let mut out = Vec::with_capacity(planes * g.out_plane());
    let mut arg = Vec::with_capacity(planes * g.out_plane());
    for p in 0..planes {
        let base = p * g.in_plane();
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let mut best: Option<(T, usize)> = None;
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        if let Some((y, x)) = g.source(oy, ky, ox, kx) {
                            let idx = base + y * g.width + x;
                            let v = input[idx];
                            if best.is_none_or(|(b, _)| v > b) {
                                best = Some((v, idx));
                            }
                        }
                    }
                }
                let (v, idx) = best.expect("pooling window has at least one in-bounds element");
                out.push(v);
                arg.push(idx);
            }
        }
    }
    (out, arg)
}

/// Average pooling that divides by the number of in-bounds elements, so
/// padding never dilutes the mean.
pub(crate) fn avg_pool_forward<T: Scalar>(input: &[T], batch: usize, g: &Window) -> Vec<T> {
    let planes = batch * g.channels;
    let mut out = Vec::with_capacity(planes * g.out_plane());
    for p in 0..planes {
        let base = p * g.in_plane();
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let mut acc = T::zero();
                let mut count = 0usize;
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        if let Some((y, x)) = g.source(oy, ky, ox, kx) {
                            acc += input[base + y * g.width + x];
                            count += 1;
                        }
                    }
                }
                out.push(acc / T::from_f64(count as f64));
            }
        }
    }
    out
}

pub(crate) fn avg_pool_backward<T: Scalar>(grad_out: &[T], batch: usize, g: &Window) -> Vec<T> {
    let planes = batch * g.channels;
    let mut dx = vec![T::zero(); planes * g.in_plane()];
    for p in 0..planes {
        let base = p * g.in_plane();
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let taps: Vec<(usize, usize)> = (0..g.kh)
                    .flat_map(|ky| (0..g.kw).map(move |kx| (ky, kx)))
                    .filter_map(|(ky, kx)| g.source(oy, ky, ox, kx))
                    .collect();
                let share = grad_out[(p * g.out_h + oy) * g.out_w + ox] / T::from_f64(taps.len() as f64);
                for (y, x) in taps {
                    dx[base + y * g.width + x] += share;
                }
            }
        }
    }
    dx
}
