//! Layer kinds with single-sample forward and backward kernels.
//!
//! Activations are laid out channel-major `(c, h, w)`. Flat vectors use the
//! shape `(n, 1, 1)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Activation shape `(channels, height, width)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shape {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub fn new(c: usize, h: usize, w: usize) -> Self {
        Self { c, h, w }
    }

    pub fn flat(n: usize) -> Self {
        Self { c: n, h: 1, w: 1 }
    }

    pub fn len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerDescriptor {
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Relu,
    #[serde(rename = "maxpool")]
    MaxPool { size: usize, stride: usize },
    #[serde(rename = "globalavgpool")]
    GlobalAvgPool,
    Dense { inputs: usize, outputs: usize },
}

impl LayerDescriptor {
    pub fn conv3x3(in_channels: usize, out_channels: usize, stride: usize) -> Self {
        LayerDescriptor::Conv {
            in_channels,
            out_channels,
            kernel: 3,
            stride,
            padding: 1,
        }
    }

    pub fn dense(inputs: usize, outputs: usize) -> Self {
        LayerDescriptor::Dense { inputs, outputs }
    }

    pub fn name(&self) -> &'static str {
        match self {
            LayerDescriptor::Conv { .. } => "conv",
            LayerDescriptor::Relu => "relu",
            LayerDescriptor::MaxPool { .. } => "maxpool",
            LayerDescriptor::GlobalAvgPool => "globalavgpool",
            LayerDescriptor::Dense { .. } => "dense",
        }
    }

    pub fn is_dense(&self) -> bool {
        matches!(self, LayerDescriptor::Dense { .. })
    }

    pub fn param_count(&self) -> usize {
        match *self {
            LayerDescriptor::Conv {
                in_channels,
                out_channels,
                kernel,
                ..
            } => out_channels * in_channels * kernel * kernel + out_channels,
            LayerDescriptor::Dense { inputs, outputs } => outputs * inputs + outputs,
            _ => 0,
        }
    }

    /// `(fan_in, fan_out)` for weight initialization; `None` for parameter-free layers.
    pub fn fans(&self) -> Option<(usize, usize)> {
        match *self {
            LayerDescriptor::Conv {
                in_channels,
                out_channels,
                kernel,
                ..
            } => Some((in_channels * kernel * kernel, out_channels * kernel * kernel)),
            LayerDescriptor::Dense { inputs, outputs } => Some((inputs, outputs)),
            _ => None,
        }
    }

    /// Number of weights (the leading part of the parameter block; biases follow).
    pub fn weight_count(&self) -> usize {
        match *self {
            LayerDescriptor::Conv { out_channels, .. } => self.param_count() - out_channels,
            LayerDescriptor::Dense { outputs, .. } => self.param_count() - outputs,
            _ => 0,
        }
    }

    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        match *self {
            LayerDescriptor::Conv {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                if kernel == 0 || stride == 0 || out_channels == 0 {
                    return Err(Error::Shape("conv kernel, stride and channels must be positive".into()));
                }
                if input.c != in_channels {
                    return Err(Error::Shape(format!(
                        "conv expects {in_channels} input channels, got {}",
                        input.c
                    )));
                }
                if input.h + 2 * padding < kernel || input.w + 2 * padding < kernel {
                    return Err(Error::Shape(format!(
                        "conv kernel {kernel} larger than padded input {}x{}",
                        input.h, input.w
                    )));
                }
                Ok(Shape::new(
                    out_channels,
                    (input.h + 2 * padding - kernel) / stride + 1,
                    (input.w + 2 * padding - kernel) / stride + 1,
                ))
            }
            LayerDescriptor::Relu => Ok(input),
            LayerDescriptor::MaxPool { size, stride } => {
                if size == 0 || stride == 0 {
                    return Err(Error::Shape("maxpool size and stride must be positive".into()));
                }
                if input.h < size || input.w < size {
                    return Err(Error::Shape(format!(
                        "maxpool window {size} larger than input {}x{}",
                        input.h, input.w
                    )));
                }
                Ok(Shape::new(input.c, (input.h - size) / stride + 1, (input.w - size) / stride + 1))
            }
            LayerDescriptor::GlobalAvgPool => Ok(Shape::flat(input.c)),
            LayerDescriptor::Dense { inputs, outputs } => {
                if outputs == 0 {
                    return Err(Error::Shape("dense layer needs at least one output".into()));
                }
                if input.len() != inputs {
                    return Err(Error::Shape(format!(
                        "dense expects {inputs} inputs, got {}",
                        input.len()
                    )));
                }
                Ok(Shape::flat(outputs))
            }
        }
    }

    /// Computes the layer output for one sample.
    pub fn forward(&self, params: &[f64], input: &[f64], in_shape: Shape) -> Vec<f64> {
        debug_assert_eq!(params.len(), self.param_count());
        debug_assert_eq!(input.len(), in_shape.len());
        match *self {
            LayerDescriptor::Conv { out_channels, .. } => {
                let out_shape = self.output_shape(in_shape).expect("validated shape");
                let p = out_shape.h * out_shape.w;
                let k = self.weight_count() / out_channels;
                let (weights, bias) = params.split_at(self.weight_count());
                let cols = self.im2col(input, in_shape, out_shape);
                let mut out = vec![0.0; out_shape.len()];
                for (oc, plane) in out.chunks_exact_mut(p).enumerate() {
                    plane.fill(bias[oc]);
                    for (kk, &wv) in weights[oc * k..(oc + 1) * k].iter().enumerate() {
                        if wv != 0.0 {
                            axpy(plane, wv, &cols[kk * p..(kk + 1) * p]);
                        }
                    }
                }
                out
            }
            LayerDescriptor::Relu => input.iter().map(|&v| v.max(0.0)).collect(),
            LayerDescriptor::MaxPool { size, stride } => {
                let out_shape = self.output_shape(in_shape).expect("validated shape");
                let mut out = Vec::with_capacity(out_shape.len());
                for c in 0..in_shape.c {
                    for oy in 0..out_shape.h {
                        for ox in 0..out_shape.w {
                            let idx = maxpool_argmax(input, in_shape, c, oy * stride, ox * stride, size);
                            out.push(input[idx]);
                        }
                    }
                }
                out
            }
            LayerDescriptor::GlobalAvgPool => {
                let plane = in_shape.h * in_shape.w;
                input
                    .chunks_exact(plane)
                    .map(|ch| ch.iter().sum::<f64>() / plane as f64)
                    .collect()
            }
            LayerDescriptor::Dense { inputs, outputs } => {
                let (weights, bias) = params.split_at(inputs * outputs);
                (0..outputs)
                    .map(|o| {
                        let row = &weights[o * inputs..(o + 1) * inputs];
                        bias[o] + row.iter().zip(input).map(|(w, x)| w * x).sum::<f64>()
                    })
                    .collect()
            }
        }
    }

    /// Accumulates the parameter gradient into `grad_params` and returns the
    /// gradient with respect to the input when `need_input_grad` is set.
    pub fn backward(
        &self,
        params: &[f64],
        input: &[f64],
        in_shape: Shape,
        grad_out: &[f64],
        grad_params: &mut [f64],
        need_input_grad: bool,
    ) -> Option<Vec<f64>> {
        match *self {
            LayerDescriptor::Conv { out_channels, .. } => {
                let out_shape = self.output_shape(in_shape).expect("validated shape");
                let p = out_shape.h * out_shape.w;
                let nw = self.weight_count();
                let k = nw / out_channels;
                let weights = &params[..nw];
                let (gw, gb) = grad_params.split_at_mut(nw);
                let cols = self.im2col(input, in_shape, out_shape);
                for (oc, g) in grad_out.chunks_exact(p).enumerate() {
                    gb[oc] += g.iter().sum::<f64>();
                    for (kk, acc) in gw[oc * k..(oc + 1) * k].iter_mut().enumerate() {
                        *acc += dot(g, &cols[kk * p..(kk + 1) * p]);
                    }
                }
                need_input_grad.then(|| {
                    let mut gcols = vec![0.0; k * p];
                    for (oc, g) in grad_out.chunks_exact(p).enumerate() {
                        for (kk, &wv) in weights[oc * k..(oc + 1) * k].iter().enumerate() {
                            if wv != 0.0 {
                                axpy(&mut gcols[kk * p..(kk + 1) * p], wv, g);
                            }
                        }
                    }
                    self.col2im(&gcols, in_shape, out_shape)
                })
            }
            LayerDescriptor::Relu => need_input_grad.then(|| {
                input
                    .iter()
                    .zip(grad_out)
                    .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
                    .collect()
            }),
            LayerDescriptor::MaxPool { size, stride } => need_input_grad.then(|| {
                let out_shape = self.output_shape(in_shape).expect("validated shape");
                let mut gi = vec![0.0; in_shape.len()];
                let mut k = 0;
                for c in 0..in_shape.c {
                    for oy in 0..out_shape.h {
                        for ox in 0..out_shape.w {
                            let idx = maxpool_argmax(input, in_shape, c, oy * stride, ox * stride, size);
                            gi[idx] += grad_out[k];
                            k += 1;
                        }
                    }
                }
                gi
            }),
            LayerDescriptor::GlobalAvgPool => need_input_grad.then(|| {
                let plane = in_shape.h * in_shape.w;
                let mut gi = Vec::with_capacity(in_shape.len());
                for &g in grad_out {
                    gi.extend(std::iter::repeat(g / plane as f64).take(plane));
                }
                gi
            }),
            LayerDescriptor::Dense { inputs, outputs } => {
                let (gw, gb) = grad_params.split_at_mut(inputs * outputs);
                for o in 0..outputs {
                    let g = grad_out[o];
                    gb[o] += g;
                    if g != 0.0 {
                        for (w, &x) in gw[o * inputs..(o + 1) * inputs].iter_mut().zip(input) {
                            *w += g * x;
                        }
                    }
                }
                need_input_grad.then(|| {
                    let weights = &params[..inputs * outputs];
                    let mut gi = vec![0.0; inputs];
                    for o in 0..outputs {
                        let g = grad_out[o];
                        if g == 0.0 {
                            continue;
                        }
                        for (acc, &w) in gi.iter_mut().zip(&weights[o * inputs..(o + 1) * inputs]) {
                            *acc += g * w;
                        }
                    }
                    gi
                })
            }
        }
    }

    /// Patch matrix of a convolution: row `(ic, ky, kx)` holds, for every
    /// output position, the input value under that kernel tap (0 in padding).
    fn im2col(&self, input: &[f64], in_shape: Shape, out_shape: Shape) -> Vec<f64> {
        let LayerDescriptor::Conv { in_channels, kernel, stride, padding, .. } = *self else {
            unreachable!("im2col on a non-conv layer")
        };
        let (ih, iw, oh, ow) = (in_shape.h, in_shape.w, out_shape.h, out_shape.w);
        let p = oh * ow;
        let mut cols = vec![0.0; in_channels * kernel * kernel * p];
        for ic in 0..in_channels {
            let src = &input[ic * ih * iw..(ic + 1) * ih * iw];
            for ky in 0..kernel {
                for kx in 0..kernel {
                    let row = ((ic * kernel + ky) * kernel + kx) * p;
                    let (ox0, ox1) = valid_range(kx, padding, stride, iw, ow);
                    for oy in 0..oh {
                        let iy = (oy * stride + ky) as isize - padding as isize;
                        if iy < 0 || iy as usize >= ih {
                            continue;
                        }
                        let line = &src[iy as usize * iw..(iy as usize + 1) * iw];
                        let dst = &mut cols[row + oy * ow..row + (oy + 1) * ow];
                        for ox in ox0..ox1 {
                            dst[ox] = line[ox * stride + kx - padding];
                        }
                    }
                }
            }
        }
        cols
    }

    /// Adjoint of [`Self::im2col`]: scatters patch gradients back onto the input.
    fn col2im(&self, cols: &[f64], in_shape: Shape, out_shape: Shape) -> Vec<f64> {
        let LayerDescriptor::Conv { in_channels, kernel, stride, padding, .. } = *self else {
            unreachable!("col2im on a non-conv layer")
        };
        let (ih, iw, oh, ow) = (in_shape.h, in_shape.w, out_shape.h, out_shape.w);
        let p = oh * ow;
        let mut gi = vec![0.0; in_shape.len()];
        for ic in 0..in_channels {
            let dst = &mut gi[ic * ih * iw..(ic + 1) * ih * iw];
            for ky in 0..kernel {
                for kx in 0..kernel {
                    let row = ((ic * kernel + ky) * kernel + kx) * p;
                    let (ox0, ox1) = valid_range(kx, padding, stride, iw, ow);
                    for oy in 0..oh {
                        let iy = (oy * stride + ky) as isize - padding as isize;
                        if iy < 0 || iy as usize >= ih {
                            continue;
                        }
                        let line = &mut dst[iy as usize * iw..(iy as usize + 1) * iw];
                        let src = &cols[row + oy * ow..row + (oy + 1) * ow];
                        for ox in ox0..ox1 {
                            line[ox * stride + kx - padding] += src[ox];
                        }
                    }
                }
            }
        }
        gi
    }
}

#[inline]
fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += a * xv;
    }
}

/// Dot product with four interleaved partial sums.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for i in 0..4 {
            acc[i] += x[i] * y[i];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Output columns `[ox0, ox1)` whose input column `ox * stride + kx - padding`
/// lies inside `[0, iw)`.
#[inline]
fn valid_range(kx: usize, padding: usize, stride: usize, iw: usize, ow: usize) -> (usize, usize) {
    let ox0 = if kx >= padding { 0 } else { (padding - kx).div_ceil(stride) };
    // need ox * stride + kx - padding <= iw - 1
    let limit = iw + padding;
    let ox1 = if limit > kx { ((limit - kx - 1) / stride + 1).min(ow) } else { 0 };
    (ox0.min(ox1), ox1)
}

/// Flat index of the first maximum in the pooling window (scan order).
#[inline]
fn maxpool_argmax(input: &[f64], s: Shape, c: usize, y0: usize, x0: usize, size: usize) -> usize {
    let base = c * s.h * s.w;
    let mut best = base + y0 * s.w + x0;
    for y in y0..y0 + size {
        for x in x0..x0 + size {
            let i = base + y * s.w + x;
            if input[i] > input[best] {
                best = i;
            }
        }
    }
    best
}
