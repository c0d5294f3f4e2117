//! Dense 4-D arrays in row-major (n, c, h, w) order, plus integer label maps.

use std::fmt;

use crate::error::{Error, Result};

/// Label value excluded from losses and metrics.
pub const IGNORE: u8 = 255;

/// Extents of a 4-D tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Dims {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Dims {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Dims { n, c, h, w }
    }

    /// Number of elements, or an error if a dim is zero or the product overflows.
    pub fn checked_len(&self) -> Result<usize> {
        if self.n == 0 || self.c == 0 || self.h == 0 || self.w == 0 {
            return Err(Error::InvalidShape(format!("zero dimension in {self}")));
        }
        self.n
            .checked_mul(self.c)
            .and_then(|v| v.checked_mul(self.h))
            .and_then(|v| v.checked_mul(self.w))
            .ok_or_else(|| Error::InvalidShape(format!("element count of {self} overflows")))
    }

    pub fn len(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn with_c(self, c: usize) -> Self {
        Dims { c, ..self }
    }

    pub fn with_hw(self, h: usize, w: usize) -> Self {
        Dims { h, w, ..self }
    }
}

impl fmt::Display for Dims {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {})", self.n, self.c, self.h, self.w)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    dims: Dims,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new_filled(dims: Dims, value: f64) -> Result<Self> {
        let len = dims.checked_len()?;
        Ok(Tensor {
            dims,
            data: vec![value; len],
        })
    }

    pub fn zeros(dims: Dims) -> Result<Self> {
        Self::new_filled(dims, 0.0)
    }

    pub fn from_vec(dims: Dims, data: Vec<f64>) -> Result<Self> {
        let len = dims.checked_len()?;
        if data.len() != len {
            return Err(Error::InvalidShape(format!(
                "{} values supplied for dims {dims}",
                data.len()
            )));
        }
        Ok(Tensor { dims, data })
    }

    /// Builds a tensor by evaluating `f(n, c, i, j)` at every index.
    pub fn from_fn(dims: Dims, mut f: impl FnMut(usize, usize, usize, usize) -> f64) -> Result<Self> {
        let len = dims.checked_len()?;
        let mut data = Vec::with_capacity(len);
        for n in 0..dims.n {
            for c in 0..dims.c {
                for i in 0..dims.h {
                    for j in 0..dims.w {
                        data.push(f(n, c, i, j));
                    }
                }
            }
        }
        Ok(Tensor { dims, data })
    }

    /// Internal constructor for buffers whose length is already known to match.
    pub(crate) fn from_parts(dims: Dims, data: Vec<f64>) -> Self {
        debug_assert_eq!(dims.len(), data.len());
        Tensor { dims, data }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, i: usize, j: usize) -> usize {
        ((n * self.dims.c + c) * self.dims.h + i) * self.dims.w + j
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, i: usize, j: usize) -> f64 {
        self.data[self.index(n, c, i, j)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, i: usize, j: usize, v: f64) {
        let k = self.index(n, c, i, j);
        self.data[k] = v;
    }

    /// The (n, c) spatial plane as a slice.
    pub fn plane(&self, n: usize, c: usize) -> &[f64] {
        let p = self.dims.plane();
        let start = (n * self.dims.c + c) * p;
        &self.data[start..start + p]
    }

    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [f64] {
        let p = self.dims.plane();
        let start = (n * self.dims.c + c) * p;
        &mut self.data[start..start + p]
    }

    pub fn elementwise_add(&self, other: &Tensor) -> Result<Tensor> {
        if self.dims != other.dims {
            return Err(Error::Shape(format!(
                "cannot add {} and {}",
                self.dims, other.dims
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Ok(Tensor::from_parts(self.dims, data))
    }

    /// In-place `self += other`.
    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::Shape(format!(
                "cannot accumulate {} into {}",
                other.dims, self.dims
            )));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&self, factor: f64) -> Tensor {
        Tensor::from_parts(self.dims, self.data.iter().map(|v| v * factor).collect())
    }

    pub fn fill(&mut self, value: f64) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        if self.dims != other.dims {
            return Err(Error::Shape(format!(
                "inner product of {} and {}",
                self.dims, other.dims
            )));
        }
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Spatial window `[offset_h, offset_h + out_h) × [offset_w, offset_w + out_w)`.
    pub fn crop(&self, offset_h: usize, offset_w: usize, out_h: usize, out_w: usize) -> Result<Tensor> {
        let d = self.dims;
        if out_h == 0 || out_w == 0 || offset_h + out_h > d.h || offset_w + out_w > d.w {
            return Err(Error::Shape(format!(
                "crop at ({offset_h}, {offset_w}) of extent {out_h}×{out_w} exceeds {d}"
            )));
        }
        let od = d.with_hw(out_h, out_w);
        let mut data = Vec::with_capacity(od.len());
        for n in 0..d.n {
            for c in 0..d.c {
                let plane = self.plane(n, c);
                for i in 0..out_h {
                    let row = (offset_h + i) * d.w + offset_w;
                    data.extend_from_slice(&plane[row..row + out_w]);
                }
            }
        }
        Ok(Tensor::from_parts(od, data))
    }

    /// Concatenates tensors of equal `(c, h, w)` along the batch axis.
    pub fn stack(items: &[&Tensor]) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| Error::InvalidShape("cannot stack zero tensors".into()))?
            .dims;
        let mut data = Vec::with_capacity(first.len() * items.len());
        for t in items {
            if (t.dims.c, t.dims.h, t.dims.w) != (first.c, first.h, first.w) {
                return Err(Error::Shape(format!("cannot stack {} with {first}", t.dims)));
            }
            data.extend_from_slice(&t.data);
        }
        let n = data.len() / (first.c * first.h * first.w);
        Ok(Tensor::from_parts(Dims::new(n, first.c, first.h, first.w), data))
    }

    /// Adds `grad` (shaped like a crop of `self`) back into the window it was cut from.
    pub(crate) fn uncrop_add(&mut self, offset_h: usize, offset_w: usize, grad: &Tensor) {
        let d = self.dims;
        let g = grad.dims;
        for n in 0..d.n {
            for c in 0..d.c {
                let src = grad.plane(n, c);
                let dst = self.plane_mut(n, c);
                for i in 0..g.h {
                    let row = (offset_h + i) * d.w + offset_w;
                    for (a, b) in dst[row..row + g.w].iter_mut().zip(&src[i * g.w..(i + 1) * g.w]) {
                        *a += b;
                    }
                }
            }
        }
    }

    /// Per-pixel index of the largest channel; ties go to the lowest index.
    pub fn channel_argmax(&self) -> LabelMap {
        let d = self.dims;
        let mut labels = Vec::with_capacity(d.n * d.plane());
        for n in 0..d.n {
            for p in 0..d.plane() {
                let mut best = 0usize;
                let mut best_v = self.data[(n * d.c) * d.plane() + p];
                for c in 1..d.c {
                    let v = self.data[(n * d.c + c) * d.plane() + p];
                    if v > best_v {
                        best = c;
                        best_v = v;
                    }
                }
                labels.push(best.min(u8::MAX as usize - 1) as u8);
            }
        }
        LabelMap {
            n: d.n,
            h: d.h,
            w: d.w,
            data: labels,
        }
    }
}

/// Integer class map of extent (n, h, w); [`IGNORE`] marks excluded pixels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<u8>,
}

impl LabelMap {
    pub fn new_filled(n: usize, h: usize, w: usize, value: u8) -> Result<Self> {
        Dims::new(n, 1, h, w).checked_len()?;
        Ok(LabelMap {
            n,
            h,
            w,
            data: vec![value; n * h * w],
        })
    }

    pub fn from_vec(n: usize, h: usize, w: usize, data: Vec<u8>) -> Result<Self> {
        let len = Dims::new(n, 1, h, w).checked_len()?;
        if data.len() != len {
            return Err(Error::InvalidShape(format!(
                "{} labels supplied for ({n}, {h}, {w})",
                data.len()
            )));
        }
        Ok(LabelMap { n, h, w, data })
    }

    #[inline]
    pub fn index(&self, n: usize, i: usize, j: usize) -> usize {
        (n * self.h + i) * self.w + j
    }

    #[inline]
    pub fn at(&self, n: usize, i: usize, j: usize) -> u8 {
        self.data[self.index(n, i, j)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, i: usize, j: usize, v: u8) {
        let k = self.index(n, i, j);
        self.data[k] = v;
    }

    /// Checks every non-ignore label is below `n_classes`.
    pub fn validate(&self, n_classes: usize) -> Result<()> {
        match self
            .data
            .iter()
            .find(|&&v| v != IGNORE && v as usize >= n_classes)
        {
            Some(&label) => Err(Error::InvalidLabel { label, n_classes }),
            None => Ok(()),
        }
    }

    /// Spatial extent as `(h, w)`.
    pub fn extent(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    /// Concatenates maps of equal extent along the batch axis.
    pub fn stack(items: &[&LabelMap]) -> Result<LabelMap> {
        let first = items
            .first()
            .ok_or_else(|| Error::InvalidShape("cannot stack zero label maps".into()))?;
        let mut data = Vec::new();
        let mut n = 0;
        for m in items {
            if (m.h, m.w) != (first.h, first.w) {
                return Err(Error::Shape(format!(
                    "cannot stack {}×{} with {}×{} labels",
                    m.h, m.w, first.h, first.w
                )));
            }
            data.extend_from_slice(&m.data);
            n += m.n;
        }
        LabelMap::from_vec(n, first.h, first.w, data)
    }

    /// Single image `n` as its own map.
    pub fn image(&self, n: usize) -> LabelMap {
        let p = self.h * self.w;
        LabelMap {
            n: 1,
            h: self.h,
            w: self.w,
            data: self.data[n * p..(n + 1) * p].to_vec(),
        }
    }
}
