//! Single-stream and skip architectures over a pooled backbone.
//!
//! The backbone's deepest features are scored by a zero-initialised 1×1
//! convolution. That coarse score map then climbs a fixed "spine": one
//! learnable, bilinear-initialised upsampling per fusion level (the last two
//! tapped pools before the deepest layer), each cropped into exact alignment
//! with the tap, and a final upsampling to input resolution whose weights stay
//! bilinear. A skip scales a tap by a constant, scores it with its own
//! zero-initialised 1×1 convolution and adds the result into the spine at that
//! tap. Because the spine is the same with or without skips, adding a skip to
//! a trained net leaves its output bitwise unchanged.
//!
//! Net description files hold one layer per line,
//! `name kind k s pad dilation channels [tap]`, with kind `conv` (followed by
//! ReLU), `linear` (no ReLU), `max` or `avg`; `skip tap scale factor` lines;
//! an optional `input C` line; and `#` comments.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use num_rational::Rational64;

use crate::error::{Error, Result};
use crate::field::{self, ComposedField, FieldDescriptor};
use crate::graph::{Graph, NodeId};
use crate::layers::{ConvParams, PoolKind, PoolParams};
use crate::resampling::bilinear_kernel;
use crate::rng::{derive_seed, stream};
use crate::tensor::{Dims, Tensor};
use crate::training::{fanin_uniform, OptimConfig};

/// At most this many pools above the deepest layer are fused.
pub const MAX_FUSION_LEVELS: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Conv,
    Linear,
    Max,
    Avg,
}

impl LayerKind {
    fn keyword(self) -> &'static str {
        match self {
            LayerKind::Conv => "conv",
            LayerKind::Linear => "linear",
            LayerKind::Max => "max",
            LayerKind::Avg => "avg",
        }
    }

    pub fn is_pool(self) -> bool {
        matches!(self, LayerKind::Max | LayerKind::Avg)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub dilation: usize,
    /// Output channels; unused by pooling.
    pub channels: usize,
    pub tap: bool,
}

impl LayerSpec {
    pub fn descriptor(&self) -> FieldDescriptor {
        FieldDescriptor::window(self.kernel, self.stride, self.pad, self.dilation)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneSpec {
    pub input_channels: usize,
    pub layers: Vec<LayerSpec>,
}

impl BackboneSpec {
    /// Stages of `(conv count, channels, pool)`: 3×3 padded convolutions,
    /// optionally followed by a tapped 2×2 stride-2 max pool.
    pub fn from_stages(input_channels: usize, stages: &[(usize, usize, bool)]) -> Self {
        let mut layers = Vec::new();
        for (si, &(convs, channels, pool)) in stages.iter().enumerate() {
            for ci in 0..convs {
                layers.push(LayerSpec {
                    name: format!("conv{}_{}", si + 1, ci + 1),
                    kind: LayerKind::Conv,
                    kernel: 3,
                    stride: 1,
                    pad: 1,
                    dilation: 1,
                    channels,
                    tap: false,
                });
            }
            if pool {
                layers.push(LayerSpec {
                    name: format!("pool{}", si + 1),
                    kind: LayerKind::Max,
                    kernel: 2,
                    stride: 2,
                    pad: 0,
                    dilation: 1,
                    channels: 0,
                    tap: true,
                });
            }
        }
        BackboneSpec { input_channels, layers }
    }

    /// Three stages of two convolutions with 16, 32 and 64 channels, total stride 8.
    pub fn desk() -> Self {
        Self::from_stages(3, &[(2, 16, true), (2, 32, true), (2, 64, true)])
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::InvalidSpec("backbone has no layers".into()));
        }
        if self.input_channels == 0 {
            return Err(Error::InvalidSpec("input needs at least one channel".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for l in &self.layers {
            if !seen.insert(l.name.as_str()) {
                return Err(Error::InvalidSpec(format!("duplicate layer name `{}`", l.name)));
            }
            if l.kernel == 0 || l.stride == 0 || l.dilation == 0 {
                return Err(Error::InvalidSpec(format!("layer `{}` needs kernel, stride, dilation ≥ 1", l.name)));
            }
            if !l.kind.is_pool() && l.channels == 0 {
                return Err(Error::InvalidSpec(format!("layer `{}` has no output channels", l.name)));
            }
        }
        Ok(())
    }

    pub fn layer_index(&self, name: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.name == name)
    }

    pub fn taps(&self) -> Vec<&str> {
        self.layers.iter().filter(|l| l.tap).map(|l| l.name.as_str()).collect()
    }

    /// Descriptors from the input up to and including layer `name`.
    pub fn descriptors_to(&self, name: &str) -> Result<Vec<FieldDescriptor>> {
        let i = self
            .layer_index(name)
            .ok_or_else(|| Error::InvalidSpec(format!("no layer named `{name}`")))?;
        Ok(self.layers[..=i].iter().map(LayerSpec::descriptor).collect())
    }

    pub fn descriptors(&self) -> Vec<FieldDescriptor> {
        self.layers.iter().map(LayerSpec::descriptor).collect()
    }

    /// Backbone cut after layer `name`, which becomes the deepest layer.
    pub fn truncated(&self, name: &str) -> Result<BackboneSpec> {
        let i = self
            .layer_index(name)
            .ok_or_else(|| Error::InvalidSpec(format!("no layer named `{name}` to truncate at")))?;
        Ok(BackboneSpec {
            input_channels: self.input_channels,
            layers: self.layers[..=i].to_vec(),
        })
    }

    /// Total stride, the product of all layer strides.
    pub fn total_stride(&self) -> usize {
        self.layers.iter().map(|l| l.stride).product()
    }

    /// Tapped layers above the deepest layer that the spine visits, deepest
    /// first, with the integer upsampling factor of each spine step.
    pub fn fusion_levels(&self) -> Result<Vec<(String, usize)>> {
        let deepest = self.layers.last().expect("validated").name.clone();
        let mut stride_of = HashMap::new();
        let mut s = 1;
        for l in &self.layers {
            s *= l.stride;
            stride_of.insert(l.name.clone(), s);
        }
        let mut levels = Vec::new();
        let mut current = stride_of[&deepest];
        for l in self.layers.iter().rev().skip(1).filter(|l| l.tap) {
            if levels.len() == MAX_FUSION_LEVELS {
                break;
            }
            let ts = stride_of[&l.name];
            if ts >= current {
                continue;
            }
            if current % ts != 0 {
                return Err(Error::InvalidSpec(format!(
                    "tap `{}` stride {ts} does not divide {current}",
                    l.name
                )));
            }
            levels.push((l.name.clone(), current / ts));
            current = ts;
        }
        Ok(levels)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SkipSpec {
    pub tap: String,
    /// Constant multiplier applied to the tap before scoring.
    pub scale: f64,
    /// Upsampling factor that brings the coarser stream onto this tap.
    pub factor: usize,
}

impl SkipSpec {
    pub fn new(tap: &str, factor: usize) -> Self {
        SkipSpec {
            tap: tap.to_string(),
            scale: 1.0,
            factor,
        }
    }
}

/// Parsed net description file.
#[derive(Clone, Debug, PartialEq)]
pub struct NetDescription {
    pub backbone: BackboneSpec,
    pub skips: Vec<SkipSpec>,
}

fn line_err(line_no: usize, offset: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        offset,
        message: format!("line {}: {}", line_no + 1, msg.into()),
    }
}

impl NetDescription {
    pub fn parse(text: &str) -> Result<Self> {
        let mut input_channels = 3;
        let mut layers = Vec::new();
        let mut skips = Vec::new();
        let mut offset = 0;
        for (no, raw) in text.split_inclusive('\n').enumerate() {
            let start = offset;
            offset += raw.len();
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let tok: Vec<&str> = line.split_whitespace().collect();
            let num = |i: usize, what: &str| -> Result<usize> {
                tok.get(i)
                    .ok_or_else(|| line_err(no, start, format!("missing {what}")))?
                    .parse()
                    .map_err(|_| line_err(no, start, format!("bad {what} `{}`", tok[i])))
            };
            match tok[0] {
                "input" => input_channels = num(1, "channel count")?,
                "skip" => {
                    if tok.len() != 4 {
                        return Err(line_err(no, start, "expected `skip tap scale factor`"));
                    }
                    let scale: f64 = tok[2]
                        .parse()
                        .map_err(|_| line_err(no, start, format!("bad scale `{}`", tok[2])))?;
                    if !(scale > 0.0) || !scale.is_finite() {
                        return Err(line_err(no, start, "stream scale must be positive"));
                    }
                    skips.push(SkipSpec {
                        tap: tok[1].to_string(),
                        scale,
                        factor: num(3, "factor")?,
                    });
                }
                name => {
                    if !(7..=8).contains(&tok.len()) {
                        return Err(line_err(
                            no,
                            start,
                            "expected `name kind k s pad dilation channels [tap]`",
                        ));
                    }
                    let kind = match tok[1] {
                        "conv" => LayerKind::Conv,
                        "linear" => LayerKind::Linear,
                        "max" => LayerKind::Max,
                        "avg" => LayerKind::Avg,
                        other => return Err(line_err(no, start, format!("unknown layer kind `{other}`"))),
                    };
                    let channels = if kind.is_pool() && tok[6] == "-" { 0 } else { num(6, "channels")? };
                    let tap = match tok.get(7) {
                        None => false,
                        Some(&"tap") => true,
                        Some(other) => return Err(line_err(no, start, format!("unexpected `{other}`"))),
                    };
                    layers.push(LayerSpec {
                        name: name.to_string(),
                        kind,
                        kernel: num(2, "kernel")?,
                        stride: num(3, "stride")?,
                        pad: num(4, "pad")?,
                        dilation: num(5, "dilation")?,
                        channels,
                        tap,
                    });
                }
            }
        }
        let backbone = BackboneSpec { input_channels, layers };
        backbone.validate()?;
        Ok(NetDescription { backbone, skips })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}

impl fmt::Display for NetDescription {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "input {}", self.backbone.input_channels)?;
        for l in &self.backbone.layers {
            let ch = if l.kind.is_pool() { "-".to_string() } else { l.channels.to_string() };
            write!(
                f,
                "{} {} {} {} {} {} {}",
                l.name,
                l.kind.keyword(),
                l.kernel,
                l.stride,
                l.pad,
                l.dilation,
                ch
            )?;
            if l.tap {
                write!(f, " tap")?;
            }
            writeln!(f)?;
        }
        for s in &self.skips {
            writeln!(f, "skip {} {} {}", s.tap, s.scale, s.factor)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BuildOptions {
    pub n_classes: usize,
    /// Per-channel input mean subtracted by the first node; zeros when empty.
    pub mean: Vec<f64>,
    pub seed: u64,
    /// Dropout after every ReLU'd layer deeper than the last pool, if set.
    pub dropout: Option<f64>,
    /// Score the backbone at this layer instead of its deepest one.
    pub truncate_at: Option<String>,
}

impl Default for BuildOptions {
    fn default() -> Self {
        BuildOptions {
            n_classes: 5,
            mean: Vec::new(),
            seed: 0,
            dropout: None,
            truncate_at: None,
        }
    }
}

/// A built network together with the description it came from.
#[derive(Clone, Debug)]
pub struct SkipNet {
    pub backbone: BackboneSpec,
    pub skips: Vec<SkipSpec>,
    pub options: BuildOptions,
    pub graph: Graph,
}

impl SkipNet {
    /// Stride of the finest scored stream.
    pub fn prediction_stride(&self) -> Result<Rational64> {
        let fields = field::graph_fields(&self.graph)?;
        let mut best: Option<Rational64> = None;
        for (id, node) in self.graph.nodes().iter().enumerate() {
            if node.name == "score" || node.name.starts_with("score_") {
                let s = fields[id].eff_stride;
                best = Some(best.map_or(s, |b: Rational64| b.min(s)));
            }
        }
        best.ok_or_else(|| Error::InvalidSpec("net has no score layer".into()))
    }

    /// Name of the node holding the deepest backbone features.
    pub fn deepest_feature(&self) -> &str {
        let score = self.graph.node_id("score").expect("built nets have a score node");
        let src = self.graph.nodes()[score].inputs[0];
        &self.graph.nodes()[src].name
    }
}

fn zero_score(n_classes: usize, in_c: usize) -> Result<ConvParams> {
    ConvParams::new(Tensor::zeros(Dims::new(n_classes, in_c, 1, 1))?, vec![0.0; n_classes], 1, 0, 1)
}

fn node_field(g: &Graph, id: NodeId) -> Result<ComposedField> {
    Ok(field::graph_fields(g)?[id])
}

fn checked_crop(from: &ComposedField, onto: &ComposedField, what: &str) -> Result<usize> {
    let c = field::field_crop(from, onto)?;
    usize::try_from(c).map_err(|_| {
        Error::Alignment(format!("{what} would need a negative crop ({c}); the finer stream extends further"))
    })
}

/// Builds the network for `backbone` with `skips`.
pub fn build(backbone: &BackboneSpec, skips: &[SkipSpec], opts: &BuildOptions) -> Result<SkipNet> {
    backbone.validate()?;
    if opts.n_classes == 0 {
        return Err(Error::InvalidSpec("need at least one class".into()));
    }
    let spec = match &opts.truncate_at {
        Some(name) => backbone.truncated(name)?,
        None => backbone.clone(),
    };
    let levels = spec.fusion_levels()?;
    let mut seen = std::collections::HashSet::new();
    for s in skips {
        if !seen.insert(s.tap.as_str()) {
            return Err(Error::InvalidSpec(format!("duplicate skip from `{}`", s.tap)));
        }
        match levels.iter().find(|(t, _)| *t == s.tap) {
            None => {
                return Err(Error::InvalidSpec(format!(
                    "`{}` is not a fusion tap (available: {})",
                    s.tap,
                    levels.iter().map(|(t, _)| t.as_str()).collect::<Vec<_>>().join(", ")
                )))
            }
            Some((_, f)) if *f != s.factor => {
                return Err(Error::InvalidSpec(format!(
                    "skip from `{}` has factor {}, but the stream above it is {}× coarser",
                    s.tap, s.factor, f
                )))
            }
            _ => {}
        }
        if !(s.scale > 0.0) || !s.scale.is_finite() {
            return Err(Error::InvalidSpec(format!("skip from `{}` needs a positive scale", s.tap)));
        }
    }

    let mut g = Graph::new();
    let input = g.input("data")?;
    let mean = if opts.mean.is_empty() {
        vec![0.0; spec.input_channels]
    } else if opts.mean.len() == spec.input_channels {
        opts.mean.clone()
    } else {
        return Err(Error::InvalidSpec(format!(
            "mean has {} entries for {} input channels",
            opts.mean.len(),
            spec.input_channels
        )));
    };
    let mut cur = g.subtract_mean("norm", input, &mean)?;
    let mut channels = spec.input_channels;
    let mut tap_nodes: HashMap<String, (NodeId, usize)> = HashMap::new();
    let last_pool = spec.layers.iter().rposition(|l| l.kind.is_pool());
    for (li, l) in spec.layers.iter().enumerate() {
        match l.kind {
            LayerKind::Conv | LayerKind::Linear => {
                let w = fanin_uniform(
                    Dims::new(l.channels, channels, l.kernel, l.kernel),
                    derive_seed(opts.seed, stream::INIT, li as u64),
                )?;
                let p = ConvParams::new(w, vec![0.0; l.channels], l.stride, l.pad, l.dilation)?;
                cur = g.conv(&l.name, cur, p)?;
                channels = l.channels;
                if l.kind == LayerKind::Conv {
                    cur = g.relu(&format!("{}_relu", l.name), cur)?;
                    if let Some(rate) = opts.dropout {
                        if last_pool.is_some_and(|lp| li > lp) {
                            cur = g.dropout(&format!("{}_drop", l.name), cur, rate, li as u64)?;
                        }
                    }
                }
            }
            LayerKind::Max | LayerKind::Avg => {
                let p = PoolParams {
                    kind: if l.kind == LayerKind::Max { PoolKind::Max } else { PoolKind::Average },
                    kernel: l.kernel,
                    stride: l.stride,
                    pad: l.pad,
                    dilation: l.dilation,
                };
                cur = g.pool(&l.name, cur, p)?;
            }
        }
        if l.tap {
            tap_nodes.insert(l.name.clone(), (cur, channels));
        }
    }
    let mut spine = g.conv("score", cur, zero_score(opts.n_classes, channels)?)?;

    for (tap, factor) in &levels {
        let (tap_node, tap_c) = tap_nodes[tap];
        let up = g.upsample(&format!("up_{tap}"), spine, bilinear_kernel(*factor, opts.n_classes)?)?;
        let c = checked_crop(&node_field(&g, up)?, &node_field(&g, tap_node)?, tap)?;
        spine = g.crop(&format!("crop_{tap}"), up, tap_node, c, c)?;
        if let Some(s) = skips.iter().find(|s| &s.tap == tap) {
            let scaled = g.scale(&format!("scale_{tap}"), tap_node, s.scale)?;
            let score = g.conv(&format!("score_{tap}"), scaled, zero_score(opts.n_classes, tap_c)?)?;
            spine = g.add(&format!("fuse_{tap}"), &[spine, score])?;
        }
    }

    let stride = node_field(&g, spine)?.eff_stride;
    if !stride.is_integer() {
        return Err(Error::InvalidSpec(format!("final stream stride {stride} is fractional")));
    }
    let f = stride.to_integer() as usize;
    let out = if f > 1 {
        let mut k = bilinear_kernel(f, opts.n_classes)?;
        k.learnable = false;
        let up = g.upsample("upsample", spine, k)?;
        let c = checked_crop(&node_field(&g, up)?, &node_field(&g, input)?, "output")?;
        g.crop("output", up, input, c, c)?
    } else {
        spine
    };
    g.set_output(out)?;
    field::graph_fields(&g)?;
    Ok(SkipNet {
        backbone: backbone.clone(),
        skips: skips.to_vec(),
        options: opts.clone(),
        graph: g,
    })
}

pub fn build_from_description(desc: &NetDescription, opts: &BuildOptions) -> Result<SkipNet> {
    build(&desc.backbone, &desc.skips, opts)
}

/// Adds `new_skip` to a built net. Every existing parameter is carried over;
/// the new score layer starts at zero, so outputs are unchanged. The learning
/// rate of stages from `at_update` on is multiplied by `lr_drop`.
pub fn upgrade(net: &SkipNet, new_skip: SkipSpec, lr_drop: f64, optim: &mut OptimConfig, at_update: usize) -> Result<SkipNet> {
    if net.skips.iter().any(|s| s.tap == new_skip.tap) {
        return Err(Error::InvalidSpec(format!("net already has a skip from `{}`", new_skip.tap)));
    }
    let mut skips = net.skips.clone();
    skips.push(new_skip);
    let mut up = build(&net.backbone, &skips, &net.options)?;
    for p in net.graph.params() {
        up.graph.set_param(&p.name, p.value.clone())?;
    }
    optim.push_stage(at_update, lr_drop);
    Ok(up)
}

/// Skips that turn the desk backbone into its stride-8, 4 and 2 variants
/// (`level` 0, 1, 2).
pub fn desk_skips(level: usize) -> Vec<SkipSpec> {
    [SkipSpec::new("pool2", 2), SkipSpec::new("pool1", 2)]
        .into_iter()
        .take(level)
        .collect()
}

/// Root mean square over every element of the tensors.
pub fn rms(tensors: &[&Tensor]) -> f64 {
    let (sum, count) = tensors.iter().fold((0.0, 0usize), |(s, n), t| {
        (s + t.data().iter().map(|v| v * v).sum::<f64>(), n + t.data().len())
    });
    (sum / count.max(1) as f64).sqrt()
}

/// Minimum batch size for stream-scale calibration.
pub const MIN_CALIBRATION_IMAGES: usize = 8;

/// Scale for every fusion tap: RMS of the deepest features divided by the RMS
/// of the tap, both measured over the calibration images.
pub fn calibrate_stream_scales(net: &SkipNet, images: &[&Tensor]) -> Result<Vec<(String, f64)>> {
    if images.len() < MIN_CALIBRATION_IMAGES {
        return Err(Error::Calibration(format!(
            "need at least {MIN_CALIBRATION_IMAGES} calibration images, got {}",
            images.len()
        )));
    }
    let spec = match &net.options.truncate_at {
        Some(name) => net.backbone.truncated(name)?,
        None => net.backbone.clone(),
    };
    let levels = spec.fusion_levels()?;
    let deep_name = net.deepest_feature().to_string();
    let tap_names: Vec<String> = levels
        .iter()
        .map(|(tap, _)| tap_output_name(&spec, tap))
        .collect();
    let mut g = net.graph.clone();
    g.set_training(false);
    let mut deep = Vec::new();
    let mut taps: Vec<Vec<Tensor>> = vec![Vec::new(); levels.len()];
    for x in images {
        g.forward_single(x)?;
        deep.push(g.node_output(&deep_name).expect("forward ran").clone());
        for (k, name) in tap_names.iter().enumerate() {
            taps[k].push(g.node_output(name).expect("forward ran").clone());
        }
    }
    let deep_rms = rms(&deep.iter().collect::<Vec<_>>());
    if deep_rms == 0.0 {
        return Err(Error::Calibration(format!("`{deep_name}` is zero on every calibration image")));
    }
    levels
        .iter()
        .zip(&taps)
        .map(|((tap, _), ts)| {
            let r = rms(&ts.iter().collect::<Vec<_>>());
            if r == 0.0 {
                Err(Error::Calibration(format!("tap `{tap}` is zero on every calibration image")))
            } else {
                Ok((tap.clone(), deep_rms / r))
            }
        })
        .collect()
}

/// Graph node holding a layer's output (after its ReLU for `conv` layers).
fn tap_output_name(spec: &BackboneSpec, layer: &str) -> String {
    match spec.layers.iter().find(|l| l.name == layer) {
        Some(l) if l.kind == LayerKind::Conv => format!("{layer}_relu"),
        _ => layer.to_string(),
    }
}

/// Node names, op kinds, inputs and parameter shapes; equal for
/// isomorphic graphs built in the same order.
pub fn topology_signature(g: &Graph) -> Vec<String> {
    let nodes = g.nodes().iter().map(|n| {
        let inputs: Vec<&str> = n.inputs.iter().map(|&i| g.nodes()[i].name.as_str()).collect();
        format!("{} {} [{}]", n.name, n.op.kind(), inputs.join(","))
    });
    let params = g
        .params()
        .iter()
        .map(|p| format!("param {} {} {}", p.name, p.value.dims(), p.learnable));
    nodes.chain(params).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::training::Regime;

    fn random_input(h: usize, w: usize, seed: u64) -> Tensor {
        fanin_uniform(Dims::new(1, 3, h, w), seed).unwrap()
    }

    #[test]
    fn desk_geometry() {
        let b = BackboneSpec::desk();
        assert_eq!(b.total_stride(), 8);
        assert_eq!(b.taps(), vec!["pool1", "pool2", "pool3"]);
        assert_eq!(b.fusion_levels().unwrap(), vec![("pool2".to_string(), 2), ("pool1".to_string(), 2)]);
        let f = field::chain(&b.descriptors()).unwrap();
        assert_eq!(f.rf_size, Rational64::from_integer(36));
        assert_eq!(f.offset, Rational64::new(7, 2));
    }

    #[test]
    fn strides_and_output_extent() {
        let b = BackboneSpec::desk();
        for level in 0..3 {
            let mut net = build(&b, &desk_skips(level), &BuildOptions::default()).unwrap();
            let expect = [8, 4, 2][level];
            assert_eq!(net.prediction_stride().unwrap(), Rational64::from_integer(expect));
            let y = net.graph.forward_single(&random_input(32, 24, 1)).unwrap();
            assert_eq!(y.dims(), Dims::new(1, 5, 32, 24));
        }
    }

    #[test]
    fn no_taps_means_one_fixed_upsample() {
        let text = "input 1\nc1 conv 3 1 1 1 4\np1 max 2 2 0 1 -\nc2 conv 3 1 1 1 4\np2 max 2 2 0 1 -\n";
        let desc = NetDescription::parse(text).unwrap();
        let net = build_from_description(&desc, &BuildOptions { n_classes: 2, ..Default::default() }).unwrap();
        let ups: Vec<_> = net.graph.nodes().iter().filter(|n| n.op.kind() == "upsample").collect();
        assert_eq!(ups.len(), 1);
        assert!(!net.graph.param("upsample.k").unwrap().learnable);
        assert_eq!(net.graph.param("upsample.k").unwrap().value.dims().h, 8);
    }

    #[test]
    fn skip_errors() {
        let b = BackboneSpec::desk();
        let o = BuildOptions::default();
        assert!(matches!(build(&b, &[SkipSpec::new("pool3", 2)], &o), Err(Error::InvalidSpec(_))));
        assert!(matches!(build(&b, &[SkipSpec::new("pool2", 4)], &o), Err(Error::InvalidSpec(_))));
        let dup = [SkipSpec::new("pool2", 2), SkipSpec::new("pool2", 2)];
        assert!(matches!(build(&b, &dup, &o), Err(Error::InvalidSpec(_))));
        let net = build(&b, &desk_skips(1), &o).unwrap();
        let mut optim = Regime::Heavy.optim(1e-3);
        assert!(matches!(
            upgrade(&net, SkipSpec::new("pool2", 2), 0.01, &mut optim, 10),
            Err(Error::InvalidSpec(_))
        ));
    }

    #[test]
    fn upgrade_is_non_interfering() {
        let b = BackboneSpec::desk();
        let o = BuildOptions { seed: 4, ..Default::default() };
        let mut net = build(&b, &[], &o).unwrap();
        // Give the score layer and spine non-trivial values.
        for (i, name) in ["score.w", "score.b", "up_pool2.k", "up_pool1.k"].iter().enumerate() {
            let d = net.graph.param(name).unwrap().value.dims();
            net.graph.set_param(name, fanin_uniform(d, 50 + i as u64).unwrap()).unwrap();
        }
        let x = random_input(32, 32, 9);
        let before = net.graph.forward_single(&x).unwrap();
        let mut optim = Regime::Heavy.optim(1e-3);
        let mut up = upgrade(&net, SkipSpec::new("pool2", 2), 0.01, &mut optim, 100).unwrap();
        assert_eq!(up.graph.forward_single(&x).unwrap(), before);
        let mut up2 = upgrade(&up, SkipSpec::new("pool1", 2), 0.01, &mut optim, 200).unwrap();
        assert_eq!(up2.graph.forward_single(&x).unwrap(), before);
        assert_eq!(optim.lr_schedule, vec![(100, 0.01), (200, 0.01 * 0.01)]);
        let direct = build(&b, &desk_skips(2), &o).unwrap();
        assert_eq!(topology_signature(&up2.graph), topology_signature(&direct.graph));
    }

    #[test]
    fn description_round_trip() {
        let mut desc = NetDescription {
            backbone: BackboneSpec::desk(),
            skips: desk_skips(2),
        };
        desc.skips[0].scale = 0.25;
        let text = desc.to_string();
        assert_eq!(NetDescription::parse(&text).unwrap(), desc);
        match NetDescription::parse("input 3\nc1 conv 3 1 1 1 8\nc2 bogus 3 1 1 1 8\n") {
            Err(Error::Parse { offset, message }) => {
                assert_eq!(offset, 26);
                assert!(message.contains("line 3"), "{message}");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn calibration_rules() {
        let net = build(&BackboneSpec::desk(), &[], &BuildOptions::default()).unwrap();
        let imgs: Vec<Tensor> = (0..8).map(|i| random_input(16, 16, i)).collect();
        let refs: Vec<&Tensor> = imgs.iter().collect();
        let scales = calibrate_stream_scales(&net, &refs).unwrap();
        assert_eq!(scales.len(), 2);
        assert!(scales.iter().all(|(_, s)| *s > 0.0));
        assert!(matches!(calibrate_stream_scales(&net, &refs[..7]), Err(Error::Calibration(_))));
        let a = random_input(4, 4, 3);
        let b = a.scale(10.0);
        assert!((rms(&[&a]) / rms(&[&b]) - 0.1).abs() < 1e-12);
    }

    #[test]
    fn truncated_baseline() {
        let o = BuildOptions {
            truncate_at: Some("pool2".into()),
            ..Default::default()
        };
        let mut net = build(&BackboneSpec::desk(), &[], &o).unwrap();
        assert_eq!(net.prediction_stride().unwrap(), Rational64::from_integer(4));
        assert!(net.graph.node_id("conv3_1").is_none());
        let y = net.graph.forward_single(&random_input(16, 16, 2)).unwrap();
        assert_eq!(y.dims(), Dims::new(1, 5, 16, 16));
    }
}
