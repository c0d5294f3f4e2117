//! Forward and backward passes for the local layer types.
//!
//! Every layer computes `y[i, j] = f({x[s·i + δi, s·j + δj]})` over a
//! `k × k` window. Convolution is cross-correlation (no kernel flip) with
//! symmetric zero padding. Each output pixel is accumulated in a fixed order
//! (bias, then input channel, then kernel row, then kernel column), so results
//! are bitwise reproducible and independent of how work is split across threads.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{Dims, Tensor};

/// Output extent of a windowed layer, or `None` if the window does not fit.
pub fn window_output_extent(input: usize, kernel: usize, stride: usize, pad: usize, dilation: usize) -> Option<usize> {
    let effective = (kernel - 1) * dilation + 1;
    let padded = input + 2 * pad;
    if kernel == 0 || stride == 0 || dilation == 0 || effective > padded {
        return None;
    }
    Some((padded - effective) / stride + 1)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams {
    /// `(out_c, in_c, k_h, k_w)`.
    pub weights: Tensor,
    pub bias: Vec<f64>,
    pub stride: usize,
    pub pad: usize,
    pub dilation: usize,
}

impl ConvParams {
    pub fn new(weights: Tensor, bias: Vec<f64>, stride: usize, pad: usize, dilation: usize) -> Result<Self> {
        let p = ConvParams {
            weights,
            bias,
            stride,
            pad,
            dilation,
        };
        p.geometry().validate_kernel(&p.weights, &p.bias)?;
        Ok(p)
    }

    pub fn geometry(&self) -> ConvGeometry {
        ConvGeometry {
            stride: self.stride,
            pad: self.pad,
            dilation: self.dilation,
        }
    }
}

/// Stride, padding and dilation of a convolution, shared by graph nodes whose
/// weights live in a parameter store.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub pad: usize,
    pub dilation: usize,
}

impl ConvGeometry {
    pub const UNIT: ConvGeometry = ConvGeometry {
        stride: 1,
        pad: 0,
        dilation: 1,
    };

    fn validate_kernel(&self, weights: &Tensor, bias: &[f64]) -> Result<()> {
        if self.stride == 0 || self.dilation == 0 {
            return Err(Error::InvalidParameter(format!(
                "stride {} and dilation {} must be at least 1",
                self.stride, self.dilation
            )));
        }
        if bias.len() != weights.dims().n {
            return Err(Error::Shape(format!(
                "bias of length {} for {} output channels",
                bias.len(),
                weights.dims().n
            )));
        }
        Ok(())
    }

    fn output_dims(&self, x: Dims, w: Dims) -> Result<Dims> {
        if w.c != x.c {
            return Err(Error::Shape(format!(
                "kernel expects {} input channels, input {x} has {}",
                w.c, x.c
            )));
        }
        let oh = window_output_extent(x.h, w.h, self.stride, self.pad, self.dilation);
        let ow = window_output_extent(x.w, w.w, self.stride, self.pad, self.dilation);
        match (oh, ow) {
            (Some(oh), Some(ow)) => Ok(Dims::new(x.n, w.n, oh, ow)),
            _ => Err(Error::Shape(format!(
                "kernel {}×{} (dilation {}) does not fit input {x} padded by {}",
                w.h, w.w, self.dilation, self.pad
            ))),
        }
    }
}

/// Zero-padded copy of every plane.
fn pad_planes(x: &Tensor, pad: usize) -> Tensor {
    if pad == 0 {
        return x.clone();
    }
    let d = x.dims();
    let pd = d.with_hw(d.h + 2 * pad, d.w + 2 * pad);
    let mut out = vec![0.0; pd.len()];
    for n in 0..d.n {
        for c in 0..d.c {
            let src = x.plane(n, c);
            let base = (n * d.c + c) * pd.plane();
            for i in 0..d.h {
                let row = base + (i + pad) * pd.w + pad;
                out[row..row + d.w].copy_from_slice(&src[i * d.w..(i + 1) * d.w]);
            }
        }
    }
    Tensor::from_parts(pd, out)
}

/// `out[i*ow + j] += w * src[(s*i + oi)*sw + s*j + oj]` over the output plane.
#[inline]
fn axpy_window(out: &mut [f64], ow: usize, src: &[f64], sw: usize, stride: usize, oi: usize, oj: usize, w: f64) {
    for (i, out_row) in out.chunks_exact_mut(ow).enumerate() {
        let start = (stride * i + oi) * sw + oj;
        if stride == 1 {
            for (o, s) in out_row.iter_mut().zip(&src[start..start + ow]) {
                *o += w * s;
            }
        } else {
            for (j, o) in out_row.iter_mut().enumerate() {
                *o += w * src[start + stride * j];
            }
        }
    }
}

pub fn conv2d_forward(x: &Tensor, p: &ConvParams) -> Result<Tensor> {
    p.geometry().validate_kernel(&p.weights, &p.bias)?;
    conv2d_forward_raw(x, &p.weights, &p.bias, p.geometry())
}

pub(crate) fn conv2d_forward_raw(x: &Tensor, weights: &Tensor, bias: &[f64], g: ConvGeometry) -> Result<Tensor> {
    let wd = weights.dims();
    let od = g.output_dims(x.dims(), wd)?;
    let xp = pad_planes(x, g.pad);
    let pd = xp.dims();
    let plane = od.plane();
    let mut out = vec![0.0; od.len()];
    out.par_chunks_mut(plane).enumerate().for_each(|(idx, out_plane)| {
        let (n, o) = (idx / od.c, idx % od.c);
        out_plane.fill(bias[o]);
        for c in 0..wd.c {
            let src = xp.plane(n, c);
            for di in 0..wd.h {
                for dj in 0..wd.w {
                    let w = weights.at(o, c, di, dj);
                    axpy_window(out_plane, od.w, src, pd.w, g.stride, di * g.dilation, dj * g.dilation, w);
                }
            }
        }
    });
    Ok(Tensor::from_parts(od, out))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvGrads {
    pub x: Tensor,
    pub w: Tensor,
    pub b: Vec<f64>,
}

pub fn conv2d_backward(x: &Tensor, p: &ConvParams, grad_out: &Tensor) -> Result<ConvGrads> {
    p.geometry().validate_kernel(&p.weights, &p.bias)?;
    conv2d_backward_raw(x, &p.weights, p.geometry(), grad_out)
}

pub(crate) fn conv2d_backward_raw(x: &Tensor, weights: &Tensor, g: ConvGeometry, grad_out: &Tensor) -> Result<ConvGrads> {
    let wd = weights.dims();
    let od = g.output_dims(x.dims(), wd)?;
    if grad_out.dims() != od {
        return Err(Error::Shape(format!(
            "output gradient {} does not match convolution output {od}",
            grad_out.dims()
        )));
    }
    let xd = x.dims();
    let xp = pad_planes(x, g.pad);
    let pd = xp.dims();
    let (s, dil) = (g.stride, g.dilation);

    let b: Vec<f64> = (0..od.c)
        .map(|o| (0..od.n).map(|n| grad_out.plane(n, o).iter().sum::<f64>()).sum())
        .collect();

    let ksize = wd.c * wd.h * wd.w;
    let mut gw = vec![0.0; wd.len()];
    gw.par_chunks_mut(ksize).enumerate().for_each(|(o, gw_o)| {
        for c in 0..wd.c {
            for di in 0..wd.h {
                for dj in 0..wd.w {
                    let mut acc = 0.0;
                    for n in 0..od.n {
                        let src = xp.plane(n, c);
                        let go = grad_out.plane(n, o);
                        for i in 0..od.h {
                            let start = (s * i + di * dil) * pd.w + dj * dil;
                            let grow = &go[i * od.w..(i + 1) * od.w];
                            if s == 1 {
                                acc += grow.iter().zip(&src[start..start + od.w]).map(|(a, b)| a * b).sum::<f64>();
                            } else {
                                acc += grow.iter().enumerate().map(|(j, a)| a * src[start + s * j]).sum::<f64>();
                            }
                        }
                    }
                    gw_o[(c * wd.h + di) * wd.w + dj] = acc;
                }
            }
        }
    });

    let mut gxp = vec![0.0; pd.len()];
    gxp.par_chunks_mut(pd.plane()).enumerate().for_each(|(idx, gx_plane)| {
        let (n, c) = (idx / xd.c, idx % xd.c);
        for o in 0..wd.n {
            let go = grad_out.plane(n, o);
            for di in 0..wd.h {
                for dj in 0..wd.w {
                    let w = weights.at(o, c, di, dj);
                    for i in 0..od.h {
                        let start = (s * i + di * dil) * pd.w + dj * dil;
                        let grow = &go[i * od.w..(i + 1) * od.w];
                        if s == 1 {
                            for (t, gv) in gx_plane[start..start + od.w].iter_mut().zip(grow) {
                                *t += w * gv;
                            }
                        } else {
                            for (j, gv) in grow.iter().enumerate() {
                                gx_plane[start + s * j] += w * gv;
                            }
                        }
                    }
                }
            }
        }
    });
    let gxp = Tensor::from_parts(pd, gxp);
    let gx = if g.pad == 0 {
        gxp
    } else {
        gxp.crop(g.pad, g.pad, xd.h, xd.w)?
    };
    Ok(ConvGrads {
        x: gx,
        w: Tensor::from_parts(wd, gw),
        b,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolKind {
    Max,
    Average,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolParams {
    pub kind: PoolKind,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    /// Spacing between window taps; 1 for ordinary pooling.
    pub dilation: usize,
}

impl PoolParams {
    pub fn max(kernel: usize, stride: usize) -> Self {
        PoolParams {
            kind: PoolKind::Max,
            kernel,
            stride,
            pad: 0,
            dilation: 1,
        }
    }

    pub fn average(kernel: usize, stride: usize) -> Self {
        PoolParams {
            kind: PoolKind::Average,
            ..Self::max(kernel, stride)
        }
    }

    fn output_dims(&self, x: Dims) -> Result<Dims> {
        if self.kernel == 0 || self.stride == 0 || self.dilation == 0 {
            return Err(Error::InvalidParameter(format!("degenerate pooling {self:?}")));
        }
        let oh = window_output_extent(x.h, self.kernel, self.stride, self.pad, self.dilation);
        let ow = window_output_extent(x.w, self.kernel, self.stride, self.pad, self.dilation);
        match (oh, ow) {
            (Some(oh), Some(ow)) => Ok(x.with_hw(oh, ow)),
            _ => Err(Error::Shape(format!(
                "pooling window {} does not fit input {x} padded by {}",
                self.kernel, self.pad
            ))),
        }
    }
}

/// What the backward pass of a pooling layer needs from its forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct PoolSwitches {
    pub params: PoolParams,
    pub input_dims: Dims,
    pub output_dims: Dims,
    /// For max pooling, the flat input index chosen by each output element.
    pub indices: Vec<usize>,
}

/// Window taps along one axis that land inside the unpadded input.
fn window_taps(o: usize, p: &PoolParams, extent: usize) -> impl Iterator<Item = usize> + '_ {
    (0..p.kernel).filter_map(move |t| {
        let pos = (o * p.stride + t * p.dilation) as isize - p.pad as isize;
        (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
    })
}

pub fn pool_forward(x: &Tensor, p: &PoolParams) -> Result<(Tensor, PoolSwitches)> {
    let xd = x.dims();
    let od = p.output_dims(xd)?;
    let mut out = vec![0.0; od.len()];
    let mut indices = match p.kind {
        PoolKind::Max => vec![0usize; od.len()],
        PoolKind::Average => Vec::new(),
    };
    for n in 0..xd.n {
        for c in 0..xd.c {
            let base = (n * xd.c + c) * xd.plane();
            let obase = (n * od.c + c) * od.plane();
            for i in 0..od.h {
                for j in 0..od.w {
                    let k = obase + i * od.w + j;
                    match p.kind {
                        PoolKind::Max => {
                            let mut best = f64::NEG_INFINITY;
                            let mut arg = usize::MAX;
                            for r in window_taps(i, p, xd.h) {
                                for q in window_taps(j, p, xd.w) {
                                    let idx = base + r * xd.w + q;
                                    if x.data()[idx] > best || arg == usize::MAX {
                                        best = x.data()[idx];
                                        arg = idx;
                                    }
                                }
                            }
                            if arg == usize::MAX {
                                return Err(Error::Shape(format!(
                                    "pooling window at ({i}, {j}) covers only padding"
                                )));
                            }
                            out[k] = best;
                            indices[k] = arg;
                        }
                        PoolKind::Average => {
                            let mut acc = 0.0;
                            let mut count = 0usize;
                            for r in window_taps(i, p, xd.h) {
                                for q in window_taps(j, p, xd.w) {
                                    acc += x.data()[base + r * xd.w + q];
                                    count += 1;
                                }
                            }
                            if count == 0 {
                                return Err(Error::Shape(format!(
                                    "pooling window at ({i}, {j}) covers only padding"
                                )));
                            }
                            out[k] = acc / count as f64;
                        }
                    }
                }
            }
        }
    }
    Ok((
        Tensor::from_parts(od, out),
        PoolSwitches {
            params: *p,
            input_dims: xd,
            output_dims: od,
            indices,
        },
    ))
}

pub fn pool_backward(switches: &PoolSwitches, grad_out: &Tensor) -> Result<Tensor> {
    let od = switches.output_dims;
    let xd = switches.input_dims;
    if grad_out.dims() != od {
        return Err(Error::Shape(format!(
            "output gradient {} does not match pooling output {od}",
            grad_out.dims()
        )));
    }
    let p = &switches.params;
    let mut gx = vec![0.0; xd.len()];
    match p.kind {
        PoolKind::Max => {
            if switches.indices.len() != od.len() {
                return Err(Error::Shape("stale max-pooling switches".into()));
            }
            for (g, &idx) in grad_out.data().iter().zip(&switches.indices) {
                gx[idx] += g;
            }
        }
        PoolKind::Average => {
            for n in 0..xd.n {
                for c in 0..xd.c {
                    let base = (n * xd.c + c) * xd.plane();
                    let obase = (n * od.c + c) * od.plane();
                    for i in 0..od.h {
                        for j in 0..od.w {
                            let count = window_taps(i, p, xd.h).count() * window_taps(j, p, xd.w).count();
                            let g = grad_out.data()[obase + i * od.w + j] / count as f64;
                            for r in window_taps(i, p, xd.h) {
                                for q in window_taps(j, p, xd.w) {
                                    gx[base + r * xd.w + q] += g;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(xd, gx))
}

pub fn relu_forward(x: &Tensor) -> Tensor {
    Tensor::from_parts(x.dims(), x.data().iter().map(|&v| v.max(0.0)).collect())
}

/// Gradient of ReLU given the layer input `x`.
pub fn relu_backward(x: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    if x.dims() != grad_out.dims() {
        return Err(Error::Shape(format!(
            "relu gradient {} for input {}",
            grad_out.dims(),
            x.dims()
        )));
    }
    Ok(Tensor::from_parts(
        x.dims(),
        x.data()
            .iter()
            .zip(grad_out.data())
            .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
            .collect(),
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DropoutMode {
    Train,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DropoutParams {
    pub rate: f64,
    pub mode: DropoutMode,
}

/// Per-element multipliers applied by a dropout forward pass (0 or 1/(1−rate)).
#[derive(Clone, Debug, PartialEq)]
pub struct DropoutMask {
    pub dims: Dims,
    pub scale: Vec<f64>,
}

pub fn dropout_forward(x: &Tensor, p: &DropoutParams, seed: u64) -> Result<(Tensor, DropoutMask)> {
    if !(0.0..1.0).contains(&p.rate) {
        return Err(Error::InvalidParameter(format!(
            "dropout rate {} outside [0, 1)",
            p.rate
        )));
    }
    let d = x.dims();
    let scale: Vec<f64> = if p.mode == DropoutMode::Test || p.rate == 0.0 {
        vec![1.0; d.len()]
    } else {
        let keep = 1.0 / (1.0 - p.rate);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..d.len())
            .map(|_| if rng.gen::<f64>() < p.rate { 0.0 } else { keep })
            .collect()
    };
    let y = x.data().iter().zip(&scale).map(|(v, s)| v * s).collect();
    Ok((Tensor::from_parts(d, y), DropoutMask { dims: d, scale }))
}

pub fn dropout_backward(mask: &DropoutMask, grad_out: &Tensor) -> Result<Tensor> {
    if mask.dims != grad_out.dims() {
        return Err(Error::Shape(format!(
            "dropout gradient {} for mask {}",
            grad_out.dims(),
            mask.dims
        )));
    }
    Ok(Tensor::from_parts(
        mask.dims,
        grad_out.data().iter().zip(&mask.scale).map(|(g, s)| g * s).collect(),
    ))
}

/// Rewrites a fully connected layer over a `(c, h, w)` input as a convolution
/// whose kernel covers the whole input region.
///
/// `fc_weights` is row-major `n_out × (c·h·w)`, columns in `(c, h, w)` order.
pub fn convolutionalize(fc_weights: &[f64], n_out: usize, fc_bias: &[f64], input: (usize, usize, usize)) -> Result<ConvParams> {
    let (c, h, w) = input;
    let cols = c * h * w;
    if cols == 0 || n_out == 0 || fc_weights.len() != n_out * cols {
        return Err(Error::Shape(format!(
            "{} weights for a {n_out}×({c}·{h}·{w}) fully connected layer",
            fc_weights.len()
        )));
    }
    if fc_bias.len() != n_out {
        return Err(Error::Shape(format!(
            "bias of length {} for {n_out} outputs",
            fc_bias.len()
        )));
    }
    let weights = Tensor::from_vec(Dims::new(n_out, c, h, w), fc_weights.to_vec())?;
    ConvParams::new(weights, fc_bias.to_vec(), 1, 0, 1)
}
