//! Synthetic shapes dataset, input masking, augmentation and image I/O.
//!
//! Images hold coloured disks, squares, triangles and rings on a dark noisy
//! background. Pixel values are quantised to multiples of 1/255 so saving and
//! reloading a dataset is exact.

use std::fs;
use std::io::{BufRead, Cursor};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng::{rng_for, stream};
use crate::tensor::{Dims, LabelMap, Tensor, IGNORE};

pub const BACKGROUND: u8 = 0;
pub const CLASS_NAMES: [&str; 5] = ["background", "disk", "square", "triangle", "ring"];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Disk,
    Square,
    Triangle,
    Ring,
}

impl ShapeKind {
    pub fn class(self) -> u8 {
        match self {
            ShapeKind::Disk => 1,
            ShapeKind::Square => 2,
            ShapeKind::Triangle => 3,
            ShapeKind::Ring => 4,
        }
    }

    fn from_class(c: u8) -> Self {
        match c {
            1 => ShapeKind::Disk,
            2 => ShapeKind::Square,
            3 => ShapeKind::Triangle,
            _ => ShapeKind::Ring,
        }
    }

    fn base_color(self) -> [f64; 3] {
        match self {
            ShapeKind::Disk => [0.85, 0.30, 0.25],
            ShapeKind::Square => [0.30, 0.80, 0.35],
            ShapeKind::Triangle => [0.30, 0.40, 0.90],
            ShapeKind::Ring => [0.85, 0.80, 0.30],
        }
    }
}

/// A placed shape; `radius` is the half-extent of its bounding square.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Shape {
    pub kind: ShapeKind,
    pub cy: f64,
    pub cx: f64,
    pub radius: f64,
}

impl Shape {
    /// Whether the pixel centred at `(y, x)` lies inside the shape.
    pub fn contains(&self, y: f64, x: f64) -> bool {
        let dy = y - self.cy;
        let dx = x - self.cx;
        let r = self.radius;
        match self.kind {
            ShapeKind::Disk => dy * dy + dx * dx <= r * r,
            ShapeKind::Square => {
                let h = 0.8 * r;
                dy.abs() <= h && dx.abs() <= h
            }
            ShapeKind::Triangle => {
                // Apex up at (−r, 0), base along dy = r.
                dy <= r && dy >= -r && dx.abs() <= (dy + r) / 2.0
            }
            ShapeKind::Ring => {
                let d2 = dy * dy + dx * dx;
                d2 <= r * r && d2 >= (0.5 * r) * (0.5 * r)
            }
        }
    }

    fn overlaps(&self, other: &Shape) -> bool {
        (self.cy - other.cy).abs() <= self.radius + other.radius + 1.0
            && (self.cx - other.cx).abs() <= self.radius + other.radius + 1.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShapesConfig {
    /// Square canvas side.
    pub size: usize,
    /// Background plus up to four shape classes.
    pub n_classes: usize,
    pub shapes_min: usize,
    pub shapes_max: usize,
    pub radius_min: f64,
    pub radius_max: f64,
    pub overlap: bool,
    pub noise_sigma: f64,
    /// Per-channel colour jitter half-width.
    pub color_jitter: f64,
    pub seed: u64,
}

impl Default for ShapesConfig {
    fn default() -> Self {
        ShapesConfig {
            size: 32,
            n_classes: 5,
            shapes_min: 2,
            shapes_max: 4,
            radius_min: 4.5,
            radius_max: 8.0,
            overlap: true,
            noise_sigma: 0.06,
            color_jitter: 0.12,
            seed: 0,
        }
    }
}

impl ShapesConfig {
    pub fn validate(&self) -> Result<()> {
        if !(2..=5).contains(&self.n_classes) {
            return Err(Error::Generation(format!("n_classes {} outside 2..=5", self.n_classes)));
        }
        if self.shapes_min > self.shapes_max || self.radius_min <= 0.0 || self.radius_min > self.radius_max {
            return Err(Error::Generation("empty shape count or radius range".into()));
        }
        if 2.0 * self.radius_max + 1.0 > self.size as f64 {
            return Err(Error::Generation(format!(
                "shapes of radius {} cannot fit a {}-pixel canvas",
                self.radius_max, self.size
            )));
        }
        if !(self.noise_sigma >= 0.0) || !(self.color_jitter >= 0.0) {
            return Err(Error::Generation("noise and jitter must be ≥ 0".into()));
        }
        Ok(())
    }
}

/// One image, its labels, and the shapes that generated it.
#[derive(Clone, Debug, PartialEq)]
pub struct SegSample {
    /// `(1, c, h, w)` with values in `[0, 1]`.
    pub image: Tensor,
    /// `(1, h, w)`.
    pub label: LabelMap,
    pub shapes: Vec<Shape>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub samples: Vec<SegSample>,
    pub n_classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.samples.first().map_or(3, |s| s.image.dims().c)
    }

    /// Per-channel mean over every pixel of every image.
    pub fn channel_mean(&self) -> Vec<f64> {
        let c = self.channels();
        let mut sum = vec![0.0; c];
        let mut count = 0usize;
        for s in &self.samples {
            for (ch, acc) in sum.iter_mut().enumerate() {
                *acc += s.image.plane(0, ch).iter().sum::<f64>();
            }
            count += s.image.dims().plane();
        }
        sum.iter().map(|v| if count > 0 { v / count as f64 } else { 0.0 }).collect()
    }

    /// Fraction of non-ignored pixels labelled background.
    pub fn background_fraction(&self) -> f64 {
        let (mut bg, mut all) = (0usize, 0usize);
        for s in &self.samples {
            for &v in &s.label.data {
                if v != IGNORE {
                    all += 1;
                    bg += usize::from(v == BACKGROUND);
                }
            }
        }
        bg as f64 / all.max(1) as f64
    }

    pub fn labels(&self) -> Vec<LabelMap> {
        self.samples.iter().map(|s| s.label.clone()).collect()
    }

    pub fn map(&self, f: impl Fn(&SegSample) -> SegSample) -> Dataset {
        Dataset {
            samples: self.samples.iter().map(f).collect(),
            n_classes: self.n_classes,
        }
    }
}

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

fn place_shapes(cfg: &ShapesConfig, rng: &mut ChaCha8Rng) -> Result<Vec<Shape>> {
    let count = rng.gen_range(cfg.shapes_min..=cfg.shapes_max);
    let mut shapes: Vec<Shape> = Vec::with_capacity(count);
    let mut attempts = 0;
    while shapes.len() < count {
        attempts += 1;
        if attempts > 1000 {
            return Err(Error::Generation(format!(
                "could not place {count} non-overlapping shapes on a {}-pixel canvas",
                cfg.size
            )));
        }
        let class = rng.gen_range(1..cfg.n_classes as u8);
        let radius = rng.gen_range(cfg.radius_min..=cfg.radius_max);
        let lo = radius;
        let hi = cfg.size as f64 - 1.0 - radius;
        let s = Shape {
            kind: ShapeKind::from_class(class),
            cy: rng.gen_range(lo..=hi),
            cx: rng.gen_range(lo..=hi),
            radius,
        };
        if !cfg.overlap && shapes.iter().any(|o| o.overlaps(&s)) {
            continue;
        }
        shapes.push(s);
    }
    Ok(shapes)
}

/// Renders one sample from its own seed.
pub fn render_sample(cfg: &ShapesConfig, seed: u64) -> Result<SegSample> {
    cfg.validate()?;
    let mut rng = rng_for(seed, 0, 0);
    let shapes = place_shapes(cfg, &mut rng)?;
    let n = cfg.size;
    let mut label = LabelMap::new_filled(1, n, n, BACKGROUND)?;
    let bg_level: f64 = rng.gen_range(0.05..0.25);
    let mut rgb = vec![[bg_level; 3]; n * n];
    // Drawn back to front: later shapes cover earlier ones.
    for s in &shapes {
        let base = s.kind.base_color();
        let mut color = [0.0; 3];
        for (c, b) in color.iter_mut().zip(base) {
            *c = b + rng.gen_range(-cfg.color_jitter..=cfg.color_jitter);
        }
        for i in 0..n {
            for j in 0..n {
                if s.contains(i as f64, j as f64) {
                    label.set(0, i, j, s.kind.class());
                    rgb[i * n + j] = color;
                }
            }
        }
    }
    let noise = Normal::new(0.0, cfg.noise_sigma).map_err(|e| Error::Generation(e.to_string()))?;
    let mut image = Tensor::zeros(Dims::new(1, 3, n, n))?;
    for (p, px) in rgb.iter().enumerate() {
        for (c, v) in px.iter().enumerate() {
            image.data_mut()[c * n * n + p] = quantize(v + noise.sample(&mut rng));
        }
    }
    Ok(SegSample { image, label, shapes })
}

/// `count` samples; sample `i` is rendered from `derive_seed(cfg.seed, stream_id, i)`.
pub fn generate_stream(cfg: &ShapesConfig, count: usize, stream_id: u64) -> Result<Dataset> {
    cfg.validate()?;
    let samples = (0..count)
        .map(|i| render_sample(cfg, crate::rng::derive_seed(cfg.seed, stream_id, i as u64)))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        samples,
        n_classes: cfg.n_classes,
    })
}

pub fn generate(cfg: &ShapesConfig, count: usize) -> Result<Dataset> {
    generate_stream(cfg, count, stream::DATA_TRAIN)
}

#[derive(Clone, Debug)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

pub const DEFAULT_SPLITS: (usize, usize, usize) = (800, 100, 100);

/// Train, validation and test sets drawn from separate seed streams.
pub fn generate_splits(cfg: &ShapesConfig, sizes: (usize, usize, usize)) -> Result<Splits> {
    Ok(Splits {
        train: generate_stream(cfg, sizes.0, stream::DATA_TRAIN)?,
        val: generate_stream(cfg, sizes.1, stream::DATA_VAL)?,
        test: generate_stream(cfg, sizes.2, stream::DATA_TEST)?,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskMode {
    None,
    /// Background pixels set to zero.
    FgOnly,
    /// Foreground pixels set to zero.
    BgOnly,
    /// Input replaced by the binary foreground mask in every channel.
    ShapeOnly,
}

impl std::str::FromStr for MaskMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(MaskMode::None),
            "fg_only" => Ok(MaskMode::FgOnly),
            "bg_only" => Ok(MaskMode::BgOnly),
            "shape_only" => Ok(MaskMode::ShapeOnly),
            _ => Err(Error::InvalidParameter(format!(
                "unknown mask mode `{s}` (none, fg_only, bg_only, shape_only)"
            ))),
        }
    }
}

/// Masks the input with the ground truth; masked regions are zero-filled and
/// the labels are untouched. Ignored pixels count as non-foreground.
pub fn apply_mask(sample: &SegSample, m: MaskMode) -> SegSample {
    if m == MaskMode::None {
        return sample.clone();
    }
    let mut out = sample.clone();
    let d = sample.image.dims();
    for c in 0..d.c {
        let plane = out.image.plane_mut(0, c);
        for (v, &l) in plane.iter_mut().zip(&sample.label.data) {
            let fg = l != BACKGROUND && l != IGNORE;
            match m {
                MaskMode::FgOnly if !fg => *v = 0.0,
                MaskMode::BgOnly if fg => *v = 0.0,
                MaskMode::ShapeOnly => *v = if fg { 1.0 } else { 0.0 },
                _ => {}
            }
        }
    }
    out
}

/// Mirrors (if `flip`) and then translates by `(dy, dx)` with zero image
/// fill and [`IGNORE`] label fill: `out[i][j] = in[i − dy][j − dx]`.
pub fn transform(sample: &SegSample, flip: bool, dy: i64, dx: i64) -> SegSample {
    let d = sample.image.dims();
    let (h, w) = (d.h as i64, d.w as i64);
    let mut image = Tensor::zeros(d).expect("dims already valid");
    let mut label = LabelMap::new_filled(1, d.h, d.w, IGNORE).expect("dims already valid");
    for i in 0..h {
        for j in 0..w {
            let si = i - dy;
            let sj0 = j - dx;
            if !(0..h).contains(&si) || !(0..w).contains(&sj0) {
                continue;
            }
            let sj = if flip { w - 1 - sj0 } else { sj0 };
            let (si, sj, i, j) = (si as usize, sj as usize, i as usize, j as usize);
            for c in 0..d.c {
                image.set(0, c, i, j, sample.image.at(0, c, si, sj));
            }
            label.set(0, i, j, sample.label.at(0, si, sj));
        }
    }
    SegSample {
        image,
        label,
        shapes: Vec::new(),
    }
}

/// Random mirror (probability ½ when enabled) and translation uniform in
/// `[−jitter, jitter]²`.
pub fn augment(sample: &SegSample, mirror: bool, jitter: usize, seed: u64) -> SegSample {
    let mut rng = rng_for(seed, stream::AUGMENT, 0);
    let flip = mirror && rng.gen_bool(0.5);
    let j = jitter as i64;
    let dy = rng.gen_range(-j..=j);
    let dx = rng.gen_range(-j..=j);
    if !flip && dy == 0 && dx == 0 {
        return sample.clone();
    }
    transform(sample, flip, dy, dx)
}

/// Raw 8-bit raster: `channels` is 1 (grey) or 3 (RGB), interleaved.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

impl Raster {
    pub fn from_image(image: &Tensor) -> Result<Self> {
        let d = image.dims();
        if d.n != 1 || !(d.c == 1 || d.c == 3) {
            return Err(Error::Shape(format!("cannot rasterise {d}; need one grey or RGB image")));
        }
        let mut data = vec![0u8; d.c * d.h * d.w];
        for c in 0..d.c {
            for (p, v) in image.plane(0, c).iter().enumerate() {
                data[p * d.c + c] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
        Ok(Raster {
            width: d.w,
            height: d.h,
            channels: d.c,
            data,
        })
    }

    pub fn to_image(&self) -> Result<Tensor> {
        let d = Dims::new(1, self.channels, self.height, self.width);
        Tensor::from_fn(d, |_, c, i, j| self.data[(i * self.width + j) * self.channels + c] as f64 / 255.0)
    }

    pub fn from_labels(label: &LabelMap) -> Self {
        Raster {
            width: label.w,
            height: label.h,
            channels: 1,
            data: label.data[..label.h * label.w].to_vec(),
        }
    }

    pub fn to_labels(&self) -> Result<LabelMap> {
        if self.channels != 1 {
            return Err(Error::InvalidInput("label maps must be single-channel".into()));
        }
        LabelMap::from_vec(1, self.height, self.width, self.data.clone())
    }
}

fn parse_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        offset,
        message: message.into(),
    }
}

/// Next decimal header field, skipping whitespace and `#` comments.
fn pnm_field(bytes: &[u8], pos: &mut usize, name: &str) -> Result<usize> {
    loop {
        match bytes.get(*pos) {
            Some(b'#') => {
                while bytes.get(*pos).is_some_and(|&b| b != b'\n') {
                    *pos += 1;
                }
            }
            Some(b) if b.is_ascii_whitespace() => *pos += 1,
            _ => break,
        }
    }
    let start = *pos;
    while bytes.get(*pos).is_some_and(u8::is_ascii_digit) {
        *pos += 1;
    }
    if start == *pos {
        return Err(parse_err(*pos, format!("expected {name}")));
    }
    std::str::from_utf8(&bytes[start..*pos])
        .expect("ascii digits")
        .parse()
        .map_err(|_| parse_err(start, format!("{name} out of range")))
}

/// Parses binary PGM (`P5`) or PPM (`P6`) with maxval ≤ 255.
pub fn parse_pnm(bytes: &[u8]) -> Result<Raster> {
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err(parse_err(0, "expected magic `P5` or `P6`")),
    };
    let mut pos = 2;
    let width = pnm_field(bytes, &mut pos, "width")?;
    let height = pnm_field(bytes, &mut pos, "height")?;
    let maxval_at = pos;
    let maxval = pnm_field(bytes, &mut pos, "maxval")?;
    if maxval == 0 || maxval > 255 {
        return Err(parse_err(maxval_at, format!("unsupported maxval {maxval}")));
    }
    if width == 0 || height == 0 {
        return Err(parse_err(maxval_at, "zero image dimension"));
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(parse_err(pos, "expected whitespace before pixel data"));
    }
    pos += 1;
    let len = width
        .checked_mul(height)
        .and_then(|v| v.checked_mul(channels))
        .ok_or_else(|| parse_err(0, "image dimensions overflow"))?;
    if bytes.len() < pos + len {
        return Err(parse_err(
            bytes.len(),
            format!("truncated pixel data: {} of {len} bytes", bytes.len() - pos),
        ));
    }
    let mut data = bytes[pos..pos + len].to_vec();
    if maxval != 255 {
        data.iter_mut().for_each(|v| *v = ((*v as usize * 255 + maxval / 2) / maxval) as u8);
    }
    Ok(Raster {
        width,
        height,
        channels,
        data,
    })
}

pub fn encode_pnm(r: &Raster) -> Vec<u8> {
    let magic = if r.channels == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{} {}\n255\n", r.width, r.height).into_bytes();
    out.extend_from_slice(&r.data);
    out
}

pub fn encode_png(r: &Raster) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, r.width as u32, r.height as u32);
        enc.set_color(if r.channels == 1 { png::ColorType::Grayscale } else { png::ColorType::Rgb });
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc
            .write_header()
            .map_err(|e| Error::InvalidInput(format!("png encoding: {e}")))?;
        w.write_image_data(&r.data)
            .map_err(|e| Error::InvalidInput(format!("png encoding: {e}")))?;
    }
    Ok(out)
}

pub fn parse_png(bytes: &[u8]) -> Result<Raster> {
    let decoder = png::Decoder::new(Cursor::new(bytes));
    let mut reader = decoder.read_info().map_err(|e| parse_err(0, format!("png: {e}")))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| parse_err(0, "png image too large"))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(|e| parse_err(0, format!("png: {e}")))?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(parse_err(0, format!("unsupported png bit depth {:?}", info.bit_depth)));
    }
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::Rgb => 3,
        other => return Err(parse_err(0, format!("unsupported png colour type {other:?}"))),
    };
    buf.truncate(info.buffer_size());
    Ok(Raster {
        width: info.width as usize,
        height: info.height as usize,
        channels,
        data: buf,
    })
}

/// Reads a raster, choosing the format from the file's magic bytes.
pub fn load_raster(path: impl AsRef<Path>) -> Result<Raster> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(b"\x89PNG") {
        parse_png(&bytes)
    } else {
        parse_pnm(&bytes)
    }
}

/// Writes a raster as PNG or PNM depending on the extension (`.png`, `.pgm`, `.ppm`).
pub fn save_raster(path: impl AsRef<Path>, r: &Raster) -> Result<()> {
    let path = path.as_ref();
    let bytes = match path.extension().and_then(|e| e.to_str()) {
        Some("pgm") | Some("ppm") | Some("pnm") => encode_pnm(r),
        _ => encode_png(r)?,
    };
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_image(path: impl AsRef<Path>) -> Result<Tensor> {
    load_raster(path)?.to_image()
}

pub fn load_labels(path: impl AsRef<Path>) -> Result<LabelMap> {
    load_raster(path)?.to_labels()
}

/// Writes `images/NNNN.png`, `labels/NNNN.png` and `manifest.txt` under `dir`.
pub fn save_dataset(dir: impl AsRef<Path>, ds: &Dataset) -> Result<()> {
    let dir = dir.as_ref();
    for sub in ["images", "labels"] {
        fs::create_dir_all(dir.join(sub)).map_err(|e| Error::io(dir.join(sub), e))?;
    }
    let mut manifest = String::new();
    for (i, s) in ds.samples.iter().enumerate() {
        let id = format!("{i:04}");
        save_raster(dir.join("images").join(format!("{id}.png")), &Raster::from_image(&s.image)?)?;
        save_raster(dir.join("labels").join(format!("{id}.png")), &Raster::from_labels(&s.label))?;
        manifest.push_str(&id);
        manifest.push('\n');
    }
    let path = dir.join("manifest.txt");
    fs::write(&path, manifest).map_err(|e| Error::io(&path, e))
}

/// Loads a dataset directory. Images may be `.png`, `.ppm` or `.pgm`.
pub fn load_dataset(dir: impl AsRef<Path>, n_classes: usize) -> Result<Dataset> {
    let dir = dir.as_ref();
    let path = dir.join("manifest.txt");
    let manifest = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let mut samples = Vec::new();
    for line in Cursor::new(manifest).lines() {
        let line = line.map_err(|e| Error::io(&path, e))?;
        let id = line.trim();
        if id.is_empty() {
            continue;
        }
        let image_path = ["png", "ppm", "pgm"]
            .iter()
            .map(|ext| dir.join("images").join(format!("{id}.{ext}")))
            .find(|p| p.exists())
            .ok_or_else(|| Error::InvalidInput(format!("no image for id `{id}` in {}", dir.display())))?;
        let label_path = ["png", "pgm"]
            .iter()
            .map(|ext| dir.join("labels").join(format!("{id}.{ext}")))
            .find(|p| p.exists())
            .ok_or_else(|| Error::InvalidInput(format!("no label map for id `{id}` in {}", dir.display())))?;
        let image = load_image(&image_path)?;
        let label = load_labels(&label_path)?;
        label.validate(n_classes)?;
        if (label.h, label.w) != (image.dims().h, image.dims().w) {
            return Err(Error::Shape(format!("image and labels of `{id}` differ in size")));
        }
        samples.push(SegSample {
            image,
            label,
            shapes: Vec::new(),
        });
    }
    Ok(Dataset { samples, n_classes })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_and_deterministic() {
        let cfg = ShapesConfig::default();
        assert!(generate(&cfg, 0).unwrap().is_empty());
        assert_eq!(generate(&cfg, 5).unwrap(), generate(&cfg, 5).unwrap());
        let other = ShapesConfig { seed: 1, ..cfg.clone() };
        assert_ne!(generate(&cfg, 5).unwrap(), generate(&other, 5).unwrap());
    }

    #[test]
    fn about_three_quarters_background() {
        let ds = generate(&ShapesConfig::default(), 1000).unwrap();
        let f = ds.background_fraction();
        assert!((0.70..=0.80).contains(&f), "background fraction {f}");
    }

    #[test]
    fn shapes_must_fit() {
        let cfg = ShapesConfig {
            size: 8,
            ..Default::default()
        };
        assert!(matches!(generate(&cfg, 1), Err(Error::Generation(_))));
        let crowded = ShapesConfig {
            shapes_min: 40,
            shapes_max: 40,
            overlap: false,
            ..Default::default()
        };
        assert!(matches!(generate(&crowded, 1), Err(Error::Generation(_))));
    }

    #[test]
    fn labels_match_geometry() {
        let ds = generate(&ShapesConfig::default(), 20).unwrap();
        for s in &ds.samples {
            for i in 0..32 {
                for j in 0..32 {
                    let l = s.label.at(0, i, j);
                    let top = s.shapes.iter().rev().find(|sh| sh.contains(i as f64, j as f64));
                    assert_eq!(l, top.map_or(BACKGROUND, |sh| sh.kind.class()));
                }
            }
            assert!(s.image.data().iter().all(|v| (v * 255.0).round() == v * 255.0));
        }
    }

    #[test]
    fn masks() {
        let s = &generate(&ShapesConfig::default(), 1).unwrap().samples[0];
        assert_eq!(&apply_mask(s, MaskMode::None), s);
        let both = apply_mask(&apply_mask(s, MaskMode::FgOnly), MaskMode::BgOnly);
        assert!(both.image.data().iter().all(|&v| v == 0.0));
        let shape = apply_mask(s, MaskMode::ShapeOnly);
        let mut vals: Vec<f64> = shape.image.data().to_vec();
        vals.sort_by(f64::total_cmp);
        vals.dedup();
        assert_eq!(vals, vec![0.0, 1.0]);
        assert_eq!(shape.label, s.label);
    }

    #[test]
    fn transforms() {
        let s = &generate(&ShapesConfig::default(), 1).unwrap().samples[0];
        assert_eq!(&augment(s, false, 0, 3), s);
        let twice = transform(&transform(s, true, 0, 0), true, 0, 0);
        assert_eq!(twice.image, s.image);
        assert_eq!(twice.label, s.label);
        let t = transform(s, false, 2, -3);
        for i in 0..32usize {
            for j in 0..32usize {
                let (si, sj) = (i as i64 - 2, j as i64 + 3);
                let expect = if (0..32).contains(&si) && (0..32).contains(&sj) {
                    s.label.at(0, si as usize, sj as usize)
                } else {
                    IGNORE
                };
                assert_eq!(t.label.at(0, i, j), expect);
            }
        }
    }

    #[test]
    fn pnm_parsing() {
        let mut bytes = b"P5\n4 4\n255\n".to_vec();
        bytes.extend(0..16u8);
        let r = parse_pnm(&bytes).unwrap();
        assert_eq!((r.width, r.height, r.channels), (4, 4, 1));
        assert_eq!(r.to_labels().unwrap().data, (0..16).collect::<Vec<u8>>());
        let truncated = &bytes[..bytes.len() - 3];
        match parse_pnm(truncated) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, truncated.len()),
            other => panic!("expected parse error, got {other:?}"),
        }
        assert!(matches!(parse_pnm(b"P7\n"), Err(Error::Parse { offset: 0, .. })));
        assert!(matches!(parse_pnm(b"P5 # c\n4 x"), Err(Error::Parse { offset: 9, .. })));
        assert_eq!(parse_pnm(&encode_pnm(&r)).unwrap(), r);
    }

    #[test]
    fn dataset_round_trip() {
        let ds = generate(&ShapesConfig::default(), 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(dir.path(), &ds).unwrap();
        let back = load_dataset(dir.path(), 5).unwrap();
        for (a, b) in ds.samples.iter().zip(&back.samples) {
            assert_eq!(a.image, b.image);
            assert_eq!(a.label, b.label);
        }
        let ppm = dir.path().join("x.ppm");
        let r = Raster::from_image(&ds.samples[0].image).unwrap();
        save_raster(&ppm, &r).unwrap();
        assert_eq!(load_raster(&ppm).unwrap(), r);
    }
}
