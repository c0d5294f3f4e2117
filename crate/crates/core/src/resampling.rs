//! Two ways to get dense output from a strided net.
//!
//! * Shift-and-stitch, and its exact equivalent: removing subsampling and
//!   rarefying ("dilating") every later filter.
//! * In-network upsampling as a transposed (fractionally strided)
//!   convolution, initialised to bilinear interpolation and optionally learned.
//!
//! Upsampling by an integer factor `f` uses a per-channel kernel of size
//! `k = 2f − (f mod 2)`. The full transposed-convolution output has extent
//! `(in − 1)·f + k`; `(k − f)/2` pixels are trimmed from each side. That margin
//! is always an integer, so the result is exactly `f·in` with no asymmetric
//! trim. Output pixel `u` then sits at input coordinate `(u + ½)/f − ½`, the
//! usual centre-aligned interpolation grid.

use crate::error::{Error, Result};
use crate::field;
use crate::graph::{Graph, Op};
use crate::layers::{ConvParams, PoolParams};
use crate::tensor::{Dims, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct UpsampleParams {
    pub factor: usize,
    /// `(c, 1, k, k)`, one kernel per channel; channels are never mixed.
    pub kernel: Tensor,
    pub learnable: bool,
}

pub fn upsample_kernel_size(factor: usize) -> usize {
    2 * factor - factor % 2
}

impl UpsampleParams {
    pub fn validate(&self) -> Result<()> {
        if self.factor == 0 {
            return Err(Error::InvalidParameter("upsampling factor must be at least 1".into()));
        }
        let d = self.kernel.dims();
        let k = upsample_kernel_size(self.factor);
        if d.c != 1 || d.h != k || d.w != k {
            return Err(Error::Shape(format!(
                "factor-{} upsampling needs a (c, 1, {k}, {k}) kernel, got {d}",
                self.factor
            )));
        }
        Ok(())
    }

    pub fn channels(&self) -> usize {
        self.kernel.dims().n
    }
}

/// Inserts `s − 1` zeros between filter taps: `f'[i][j] = f[i/s][j/s]` when
/// `s` divides both indices (zero-based), zero otherwise.
pub fn dilate_filter(kernel: &Tensor, s: usize) -> Result<Tensor> {
    if s == 0 {
        return Err(Error::InvalidParameter("dilation factor must be at least 1".into()));
    }
    let d = kernel.dims();
    let od = d.with_hw((d.h - 1) * s + 1, (d.w - 1) * s + 1);
    let mut out = Tensor::zeros(od)?;
    for n in 0..d.n {
        for c in 0..d.c {
            for i in 0..d.h {
                for j in 0..d.w {
                    out.set(n, c, i * s, j * s, kernel.at(n, c, i, j));
                }
            }
        }
    }
    Ok(out)
}

/// One-dimensional bilinear profile for factor `f`: `w[i] = 1 − |i − centre| / f`.
///
/// The centre is `f − 1` for odd `f` and `f − ½` for even `f`, which puts the
/// peak midway between the two middle taps when `k` is even. In the 2-D
/// kernel `(1 − |1 − β − {i/f}|)·(1 − |1 − β − {j/f}|)` the second fractional
/// term is `{j/f}`, not `{i/j}`.
pub fn bilinear_profile(f: usize) -> Vec<f64> {
    let k = upsample_kernel_size(f);
    let centre = if f % 2 == 1 { (f - 1) as f64 } else { f as f64 - 0.5 };
    (0..k)
        .map(|i| 1.0 - (i as f64 - centre).abs() / f as f64)
        .collect()
}

/// Bilinear upsampling parameters for `channels` independent channels.
pub fn bilinear_kernel(f: usize, channels: usize) -> Result<UpsampleParams> {
    if f == 0 {
        return Err(Error::InvalidParameter("upsampling factor must be at least 1".into()));
    }
    let profile = bilinear_profile(f);
    let k = profile.len();
    let kernel = Tensor::from_fn(Dims::new(channels, 1, k, k), |_, _, i, j| profile[i] * profile[j])?;
    Ok(UpsampleParams {
        factor: f,
        kernel,
        learnable: true,
    })
}

pub fn upsample_forward(x: &Tensor, p: &UpsampleParams) -> Result<Tensor> {
    p.validate()?;
    upsample_forward_raw(x, &p.kernel, p.factor)
}

/// Gradients with respect to the input and the kernel.
pub fn upsample_backward(x: &Tensor, p: &UpsampleParams, grad_out: &Tensor) -> Result<(Tensor, Tensor)> {
    p.validate()?;
    let (gx, gk) = upsample_backward_raw(x, &p.kernel, p.factor, grad_out, true)?;
    Ok((gx, gk.expect("kernel gradient requested")))
}

fn check_upsample(x: Dims, kernel: Dims, factor: usize) -> Result<usize> {
    let k = upsample_kernel_size(factor);
    if factor == 0 || kernel.h != k || kernel.w != k || kernel.c != 1 {
        return Err(Error::Shape(format!(
            "kernel {kernel} is not a factor-{factor} upsampling kernel"
        )));
    }
    if kernel.n != x.c {
        return Err(Error::Shape(format!(
            "upsampling kernel has {} channels, input {x} has {}",
            kernel.n, x.c
        )));
    }
    Ok((k - factor) / 2)
}

pub(crate) fn upsample_forward_raw(x: &Tensor, kernel: &Tensor, factor: usize) -> Result<Tensor> {
    let xd = x.dims();
    let kd = kernel.dims();
    let trim = check_upsample(xd, kd, factor)?;
    let k = kd.h;
    let od = xd.with_hw(xd.h * factor, xd.w * factor);
    let mut out = Tensor::zeros(od)?;
    for n in 0..xd.n {
        for c in 0..xd.c {
            let src = x.plane(n, c);
            let ker = kernel.plane(c, 0);
            let dst = out.plane_mut(n, c);
            for i in 0..xd.h {
                for j in 0..xd.w {
                    let v = src[i * xd.w + j];
                    for ti in 0..k {
                        // full-output row f·i + ti, trimmed by `trim`
                        let Some(u) = (factor * i + ti).checked_sub(trim) else { continue };
                        if u >= od.h {
                            continue;
                        }
                        for tj in 0..k {
                            let Some(w) = (factor * j + tj).checked_sub(trim) else { continue };
                            if w >= od.w {
                                continue;
                            }
                            dst[u * od.w + w] += ker[ti * k + tj] * v;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

pub(crate) fn upsample_backward_raw(
    x: &Tensor,
    kernel: &Tensor,
    factor: usize,
    grad_out: &Tensor,
    want_kernel: bool,
) -> Result<(Tensor, Option<Tensor>)> {
    let xd = x.dims();
    let kd = kernel.dims();
    let trim = check_upsample(xd, kd, factor)?;
    let k = kd.h;
    let od = xd.with_hw(xd.h * factor, xd.w * factor);
    if grad_out.dims() != od {
        return Err(Error::Shape(format!(
            "output gradient {} does not match upsampled extent {od}",
            grad_out.dims()
        )));
    }
    let mut gx = Tensor::zeros(xd)?;
    let mut gk = if want_kernel { Some(Tensor::zeros(kd)?) } else { None };
    for n in 0..xd.n {
        for c in 0..xd.c {
            let src = x.plane(n, c);
            let g = grad_out.plane(n, c);
            let ker = kernel.plane(c, 0).to_vec();
            let mut gx_plane = vec![0.0; xd.plane()];
            let mut gk_plane = vec![0.0; k * k];
            for i in 0..xd.h {
                for j in 0..xd.w {
                    let v = src[i * xd.w + j];
                    let mut acc = 0.0;
                    for ti in 0..k {
                        let Some(u) = (factor * i + ti).checked_sub(trim) else { continue };
                        if u >= od.h {
                            continue;
                        }
                        for tj in 0..k {
                            let Some(w) = (factor * j + tj).checked_sub(trim) else { continue };
                            if w >= od.w {
                                continue;
                            }
                            let gv = g[u * od.w + w];
                            acc += ker[ti * k + tj] * gv;
                            gk_plane[ti * k + tj] += v * gv;
                        }
                    }
                    gx_plane[i * xd.w + j] = acc;
                }
            }
            gx.plane_mut(n, c).copy_from_slice(&gx_plane);
            if let Some(gk) = gk.as_mut() {
                for (a, b) in gk.plane_mut(c, 0).iter_mut().zip(&gk_plane) {
                    *a += b;
                }
            }
        }
    }
    Ok((gx, gk))
}

/// Integer total stride of a graph's output, or an error if it is fractional.
fn integer_stride(g: &Graph) -> Result<usize> {
    let fields = field::graph_fields(g)?;
    let f = fields[g.output_id()?].eff_stride;
    if !f.is_integer() || *f.numer() < 1 {
        return Err(Error::InvalidInput(format!("graph output stride {f} is not a positive integer")));
    }
    Ok(*f.numer() as usize)
}

/// Copy of `x` translated so that `out[i][j] = x[i + dy][j + dx]`, zero-filled.
fn shift_input(x: &Tensor, dy: usize, dx: usize) -> Tensor {
    let d = x.dims();
    let mut out = Tensor::zeros(d).expect("dims already valid");
    for n in 0..d.n {
        for c in 0..d.c {
            let src = x.plane(n, c);
            let dst = out.plane_mut(n, c);
            for i in 0..d.h.saturating_sub(dy) {
                let from = (i + dy) * d.w + dx;
                let len = d.w.saturating_sub(dx);
                dst[i * d.w..i * d.w + len].copy_from_slice(&src[from..from + len]);
            }
        }
    }
    out
}

/// Dense output by running the net on all `f²` shifted inputs and interlacing:
/// `out[f·i + dy][f·j + dx] = forward(shift(x, dy, dx))[i][j]`.
///
/// This is the slow reference; [`dilate_graph`] computes the same map directly.
pub fn shift_and_stitch(g: &mut Graph, x: &Tensor) -> Result<Tensor> {
    let f = integer_stride(g)?;
    shift_and_stitch_with_stride(g, x, f)
}

/// As [`shift_and_stitch`], checking the graph's stride against `expected`.
pub fn shift_and_stitch_with_stride(g: &mut Graph, x: &Tensor, expected: usize) -> Result<Tensor> {
    let f = integer_stride(g)?;
    if f != expected {
        return Err(Error::InvalidInput(format!(
            "graph stride {f} does not match requested factor {expected}"
        )));
    }
    let mut dense: Option<Tensor> = None;
    for dy in 0..f {
        for dx in 0..f {
            let y = g.forward_single(&shift_input(x, dy, dx))?;
            let yd = y.dims();
            let out = dense.get_or_insert_with(|| Tensor::zeros(yd.with_hw(yd.h * f, yd.w * f)).expect("valid dims"));
            let od = out.dims();
            for n in 0..yd.n {
                for c in 0..yd.c {
                    let src = y.plane(n, c);
                    let dst = out.plane_mut(n, c);
                    for i in 0..yd.h {
                        for j in 0..yd.w {
                            dst[(f * i + dy) * od.w + f * j + dx] = src[i * yd.w + j];
                        }
                    }
                }
            }
        }
    }
    dense.ok_or_else(|| Error::InvalidInput("graph produced no output".into()))
}

/// Stride-1 version of a line graph: every subsampling layer gets stride 1 and
/// every later filter is rarefied by the stride accumulated so far.
///
/// Convolution kernels are rarefied explicitly with [`dilate_filter`]; pooling
/// windows use the dilation parameter (zeros would take part in a max).
pub fn dilate_graph(g: &Graph) -> Result<Graph> {
    let mut out = Graph::new();
    let mut map = vec![usize::MAX; g.nodes().len()];
    let mut spacing = vec![1usize; g.nodes().len()];
    for (id, node) in g.nodes().iter().enumerate() {
        let m = node.inputs.first().map_or(1, |&i| spacing[i]);
        let inputs: Vec<usize> = node.inputs.iter().map(|&i| map[i]).collect();
        let (new_id, new_spacing) = match &node.op {
            Op::Input => (out.input(&node.name)?, 1),
            Op::Conv { weight, bias, geometry } => {
                let w = &g.params()[*weight].value;
                let b = g.params()[*bias].value.data().to_vec();
                let rarefied = dilate_filter(w, geometry.dilation * m)?;
                let p = ConvParams::new(rarefied, b, 1, geometry.pad * m, 1)?;
                (out.conv(&node.name, inputs[0], p)?, m * geometry.stride)
            }
            Op::Pool(p) => {
                let dense = PoolParams {
                    stride: 1,
                    pad: p.pad * m,
                    dilation: p.dilation * m,
                    ..*p
                };
                (out.pool(&node.name, inputs[0], dense)?, m * p.stride)
            }
            Op::Relu => (out.relu(&node.name, inputs[0])?, m),
            Op::Scale { factor } => (out.scale(&node.name, inputs[0], g.params()[*factor].value.data()[0])?, m),
            Op::SubtractMean { mean } => (out.subtract_mean(&node.name, inputs[0], g.params()[*mean].value.data())?, m),
            Op::Dropout { .. } | Op::Upsample { .. } | Op::Crop { .. } | Op::Add => {
                return Err(Error::InvalidInput(format!(
                    "cannot dilate `{}` ({}): only conv/pool/relu line graphs are supported",
                    node.name,
                    node.op.kind()
                )))
            }
        };
        map[id] = new_id;
        spacing[id] = new_spacing;
    }
    out.set_output(map[g.output_id()?])?;
    Ok(out)
}
