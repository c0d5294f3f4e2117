//! Receptive-field arithmetic.
//!
//! A layer with kernel `k`, stride `s` applied after a stack whose output has
//! receptive field `r`, stride `S` and offset `o` yields
//! `r + (k_eff − 1)·S`, `s·S` and `o + ((k_eff − 1)/2 − pad)·S`, with
//! `k_eff = (k − 1)·dilation + 1`. Pixel centres sit at integer coordinates, so
//! the offset is the input coordinate of output pixel 0's field centre.
//! Interpolation layers have fractional stride, so everything is kept as exact
//! rationals and converted to integers only when a crop is needed.

use num_rational::Rational64;

use crate::error::{Error, Result};
use crate::graph::{Graph, Op};
use crate::tensor::{Dims, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FieldDescriptor {
    /// Convolution or pooling window.
    Window {
        kernel: usize,
        stride: usize,
        pad_before: usize,
        dilation: usize,
    },
    /// Integer-factor upsampling with the symmetric-trim convention of
    /// [`crate::resampling`]: output `u` sits at input `(u + ½)/f − ½`.
    Interp { factor: usize },
}

impl FieldDescriptor {
    pub fn window(kernel: usize, stride: usize, pad_before: usize, dilation: usize) -> Self {
        FieldDescriptor::Window {
            kernel,
            stride,
            pad_before,
            dilation,
        }
    }

    fn validate(&self) -> Result<()> {
        match *self {
            FieldDescriptor::Window { kernel, stride, dilation, .. } if kernel == 0 || stride == 0 || dilation == 0 => Err(
                Error::InvalidParameter(format!("descriptor {self:?} needs kernel, stride and dilation ≥ 1")),
            ),
            FieldDescriptor::Interp { factor: 0 } => Err(Error::InvalidParameter("interpolation factor 0".into())),
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ComposedField {
    pub rf_size: Rational64,
    pub eff_stride: Rational64,
    pub offset: Rational64,
}

impl ComposedField {
    pub const IDENTITY: ComposedField = ComposedField {
        rf_size: Rational64::new_raw(1, 1),
        eff_stride: Rational64::new_raw(1, 1),
        offset: Rational64::new_raw(0, 1),
    };

    pub fn new(rf_size: i64, eff_stride: i64, offset: Rational64) -> Self {
        ComposedField {
            rf_size: Rational64::from_integer(rf_size),
            eff_stride: Rational64::from_integer(eff_stride),
            offset,
        }
    }
}

impl std::fmt::Display for ComposedField {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "rf {} stride {} offset {}", self.rf_size, self.eff_stride, self.offset)
    }
}

fn r(v: usize) -> Rational64 {
    Rational64::from_integer(v as i64)
}

/// Applies `outer` on top of the stack summarised by `inner`.
pub fn compose(outer: FieldDescriptor, inner: ComposedField) -> ComposedField {
    let s = inner.eff_stride;
    match outer {
        FieldDescriptor::Window {
            kernel,
            stride,
            pad_before,
            dilation,
        } => {
            let k_eff = r((kernel - 1) * dilation + 1);
            ComposedField {
                rf_size: inner.rf_size + (k_eff - 1) * s,
                eff_stride: r(stride) * s,
                offset: inner.offset + ((k_eff - 1) / 2 - r(pad_before)) * s,
            }
        }
        FieldDescriptor::Interp { factor } => {
            let f = r(factor);
            // Each output mixes at most two neighbouring inputs.
            let extra = if factor > 1 { s } else { r(0) };
            ComposedField {
                rf_size: inner.rf_size + extra,
                eff_stride: s / f,
                offset: inner.offset + (r(1) - f) / (r(2) * f) * s,
            }
        }
    }
}

/// Left fold of [`compose`] from the identity field.
pub fn chain(descriptors: &[FieldDescriptor]) -> Result<ComposedField> {
    if descriptors.is_empty() {
        return Err(Error::InvalidInput("cannot chain an empty descriptor list".into()));
    }
    chain_from(ComposedField::IDENTITY, descriptors)
}

pub fn chain_from(start: ComposedField, descriptors: &[FieldDescriptor]) -> Result<ComposedField> {
    let mut acc = start;
    for d in descriptors {
        d.validate()?;
        acc = compose(*d, acc);
    }
    Ok(acc)
}

/// Integer crop, in the shared output grid, that aligns stream `a` onto
/// stream `b`: pixel `c` of `a` has the same centre as pixel 0 of `b`.
pub fn field_crop(a: &ComposedField, b: &ComposedField) -> Result<i64> {
    if a.eff_stride != b.eff_stride {
        return Err(Error::Alignment(format!(
            "streams end at different strides {} and {}",
            a.eff_stride, b.eff_stride
        )));
    }
    let c = (b.offset - a.offset) / a.eff_stride;
    if !c.is_integer() {
        return Err(Error::Alignment(format!(
            "required crop {c} is not an integer (offsets {} and {}, stride {})",
            a.offset, b.offset, a.eff_stride
        )));
    }
    Ok(c.to_integer())
}

/// Crop for two descriptor paths from the same input; equal along both axes.
pub fn crop_offset(path_a: &[FieldDescriptor], path_b: &[FieldDescriptor]) -> Result<(i64, i64)> {
    let c = field_crop(&chain_from(ComposedField::IDENTITY, path_a)?, &chain_from(ComposedField::IDENTITY, path_b)?)?;
    Ok((c, c))
}

/// Field of every node of a graph relative to its input(s).
///
/// Crop nodes shift the field by their offset; add nodes require all operands
/// to share stride and offset and take the largest receptive field. Kernels
/// must be square.
pub fn graph_fields(g: &Graph) -> Result<Vec<ComposedField>> {
    let mut out: Vec<ComposedField> = Vec::with_capacity(g.nodes().len());
    for node in g.nodes() {
        let src = node.inputs.first().map(|&i| out[i]);
        let field = match &node.op {
            Op::Input => ComposedField::IDENTITY,
            Op::Conv { weight, geometry, .. } => {
                let d = g.params()[*weight].value.dims();
                if d.h != d.w {
                    return Err(Error::InvalidInput(format!("`{}` has a non-square kernel", node.name)));
                }
                let desc = FieldDescriptor::window(d.h, geometry.stride, geometry.pad, geometry.dilation);
                compose(desc, src.expect("conv has an input"))
            }
            Op::Pool(p) => compose(
                FieldDescriptor::window(p.kernel, p.stride, p.pad, p.dilation),
                src.expect("pool has an input"),
            ),
            Op::Upsample { factor, .. } => {
                compose(FieldDescriptor::Interp { factor: *factor }, src.expect("upsample has an input"))
            }
            Op::Crop { offset_h, .. } => {
                let f = src.expect("crop has an input");
                ComposedField {
                    offset: f.offset + r(*offset_h) * f.eff_stride,
                    ..f
                }
            }
            Op::Add => {
                let first = src.expect("add has an input");
                let mut acc = first;
                for &i in &node.inputs[1..] {
                    let f = out[i];
                    if f.eff_stride != first.eff_stride || f.offset != first.offset {
                        return Err(Error::Alignment(format!(
                            "`{}` sums misaligned streams ({first} vs {f})",
                            node.name
                        )));
                    }
                    acc.rf_size = acc.rf_size.max(f.rf_size);
                }
                acc
            }
            Op::Relu | Op::Dropout { .. } | Op::Scale { .. } | Op::SubtractMean { .. } => {
                src.expect("elementwise op has an input")
            }
        };
        out.push(field);
    }
    Ok(out)
}

/// Inclusive input rectangle that influences one output pixel.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ProbeRect {
    pub top: usize,
    pub left: usize,
    pub bottom: usize,
    pub right: usize,
}

impl ProbeRect {
    pub fn height(&self) -> usize {
        self.bottom - self.top + 1
    }

    pub fn width(&self) -> usize {
        self.right - self.left + 1
    }

    /// Centre row and column.
    pub fn center(&self) -> (Rational64, Rational64) {
        (
            Rational64::new((self.top + self.bottom) as i64, 2),
            Rational64::new((self.left + self.right) as i64, 2),
        )
    }
}

/// Perturbation added during probing; large enough to win any max window.
pub const PROBE_DELTA: f64 = 1.0e3;

/// Brute-force field of output pixel `(i, j)` of `g` evaluated at `x`.
///
/// Every input row (then column) is raised by [`PROBE_DELTA`] in all channels
/// and the output pixel is compared against the unperturbed value. Fields are
/// rectangles, so the rows and columns that matter bound the rectangle. The
/// graph should be monotone in its input (positive weights) so that no
/// perturbation cancels out.
pub fn probe_field(g: &mut Graph, x: &Tensor, output_pixel: (usize, usize)) -> Result<ProbeRect> {
    let base = g.forward_single(x)?;
    let bd = base.dims();
    let (oi, oj) = output_pixel;
    if oi >= bd.h || oj >= bd.w {
        return Err(Error::InvalidInput(format!(
            "output pixel ({oi}, {oj}) outside output {bd}"
        )));
    }
    let xd = x.dims();
    let sensitive = |g: &mut Graph, rows: bool, k: usize| -> Result<bool> {
        let mut y = x.clone();
        for n in 0..xd.n {
            for c in 0..xd.c {
                let plane = y.plane_mut(n, c);
                if rows {
                    plane[k * xd.w..(k + 1) * xd.w].iter_mut().for_each(|v| *v += PROBE_DELTA);
                } else {
                    (0..xd.h).for_each(|i| plane[i * xd.w + k] += PROBE_DELTA);
                }
            }
        }
        let out = g.forward_single(&y)?;
        Ok((0..bd.n).any(|n| (0..bd.c).any(|c| out.at(n, c, oi, oj) != base.at(n, c, oi, oj))))
    };
    let mut rows = Vec::new();
    for k in 0..xd.h {
        if sensitive(g, true, k)? {
            rows.push(k);
        }
    }
    let mut cols = Vec::new();
    for k in 0..xd.w {
        if sensitive(g, false, k)? {
            cols.push(k);
        }
    }
    match (rows.first(), rows.last(), cols.first(), cols.last()) {
        (Some(&top), Some(&bottom), Some(&left), Some(&right)) => Ok(ProbeRect { top, left, bottom, right }),
        _ => Err(Error::InvalidInput(format!(
            "output pixel ({oi}, {oj}) is insensitive to every input pixel"
        ))),
    }
}

/// Measured field along the vertical axis: receptive field of output `(i, j)`,
/// stride between the centres of `(i, j)` and `(i + 1, j)`, and the offset
/// extrapolated back to output row 0.
///
/// The probed fields must lie inside the input for the numbers to be exact.
pub fn measure_field(g: &mut Graph, x: &Tensor, output_pixel: (usize, usize)) -> Result<ComposedField> {
    let (i, j) = output_pixel;
    let a = probe_field(g, x, (i, j))?;
    let b = probe_field(g, x, (i + 1, j))?;
    let stride = b.center().0 - a.center().0;
    Ok(ComposedField {
        rf_size: r(a.height()),
        eff_stride: stride,
        offset: a.center().0 - r(i) * stride,
    })
}

/// Strictly positive input for probing monotone graphs.
pub fn probe_input(dims: Dims) -> Result<Tensor> {
    Tensor::from_fn(dims, |n, c, i, j| 1.0 + ((n * 7 + c * 5 + i * 3 + j) % 11) as f64 / 11.0)
}
