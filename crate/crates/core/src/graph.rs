//! Directed acyclic networks of layer nodes with a named parameter store.
//!
//! Nodes are appended in topological order (a node may only consume nodes
//! created before it), and execution always follows that order. Shapes are
//! recomputed on every forward call, so one graph runs on inputs of any size.
//! Parameter gradients accumulate across backward calls until
//! [`Graph::zero_grads`] is called.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::layers::{
    self, ConvGeometry, ConvParams, DropoutMask, DropoutMode, DropoutParams, PoolParams, PoolSwitches,
};
use crate::resampling::{self, UpsampleParams};
use crate::tensor::{Dims, Tensor};

pub type NodeId = usize;
pub type ParamId = usize;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamRole {
    Weight,
    Bias,
    Upsample,
    /// Fixed configuration values (stream scales, input means); never learned.
    Constant,
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub role: ParamRole,
    pub learnable: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    Input,
    Conv {
        weight: ParamId,
        bias: ParamId,
        geometry: ConvGeometry,
    },
    Pool(PoolParams),
    Relu,
    Dropout {
        rate: f64,
        seed: u64,
    },
    Upsample {
        kernel: ParamId,
        factor: usize,
    },
    /// Crops input 0 to the spatial extent of input 1 starting at the offset.
    Crop {
        offset_h: usize,
        offset_w: usize,
    },
    Add,
    /// Multiplies by the scalar held in a constant parameter.
    Scale {
        factor: ParamId,
    },
    /// Subtracts a per-channel constant held in a `(1, c, 1, 1)` parameter.
    SubtractMean {
        mean: ParamId,
    },
}

impl Op {
    pub fn kind(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Conv { .. } => "conv",
            Op::Pool(_) => "pool",
            Op::Relu => "relu",
            Op::Dropout { .. } => "dropout",
            Op::Upsample { .. } => "upsample",
            Op::Crop { .. } => "crop",
            Op::Add => "add",
            Op::Scale { .. } => "scale",
            Op::SubtractMean { .. } => "subtract_mean",
        }
    }
}

#[derive(Clone, Debug)]
pub struct Node {
    pub name: String,
    pub op: Op,
    pub inputs: Vec<NodeId>,
}

#[derive(Clone, Debug)]
enum Aux {
    None,
    Pool(PoolSwitches),
    Dropout(DropoutMask),
}

#[derive(Clone, Debug)]
struct Cache {
    outputs: Vec<Tensor>,
    aux: Vec<Aux>,
}

#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    node_index: HashMap<String, NodeId>,
    params: Vec<Param>,
    param_index: HashMap<String, ParamId>,
    output: Option<NodeId>,
    training: bool,
    dropout_seed: u64,
    cache: Option<Cache>,
    input_grads: HashMap<NodeId, Tensor>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push_node(&mut self, name: &str, op: Op, inputs: Vec<NodeId>) -> Result<NodeId> {
        if self.node_index.contains_key(name) {
            return Err(Error::InvalidSpec(format!("duplicate node name `{name}`")));
        }
        if let Some(&bad) = inputs.iter().find(|&&i| i >= self.nodes.len()) {
            return Err(Error::InvalidSpec(format!(
                "node `{name}` consumes unknown node {bad}"
            )));
        }
        let id = self.nodes.len();
        self.nodes.push(Node {
            name: name.to_string(),
            op,
            inputs,
        });
        self.node_index.insert(name.to_string(), id);
        self.cache = None;
        Ok(id)
    }

    fn push_param(&mut self, name: String, value: Tensor, role: ParamRole, learnable: bool) -> Result<ParamId> {
        if self.param_index.contains_key(&name) {
            return Err(Error::InvalidSpec(format!("duplicate parameter `{name}`")));
        }
        let id = self.params.len();
        let grad = Tensor::zeros(value.dims())?;
        self.param_index.insert(name.clone(), id);
        self.params.push(Param {
            name,
            value,
            grad,
            role,
            learnable: learnable && role != ParamRole::Constant,
        });
        Ok(id)
    }

    pub fn input(&mut self, name: &str) -> Result<NodeId> {
        self.push_node(name, Op::Input, vec![])
    }

    /// Adds a convolution whose weights and bias are stored as `{name}.w` and `{name}.b`.
    pub fn conv(&mut self, name: &str, input: NodeId, p: ConvParams) -> Result<NodeId> {
        let geometry = p.geometry();
        let out_c = p.weights.dims().n;
        let weight = self.push_param(format!("{name}.w"), p.weights, ParamRole::Weight, true)?;
        let bias = self.push_param(
            format!("{name}.b"),
            Tensor::from_vec(Dims::new(1, out_c, 1, 1), p.bias)?,
            ParamRole::Bias,
            true,
        )?;
        self.push_node(name, Op::Conv { weight, bias, geometry }, vec![input])
    }

    pub fn pool(&mut self, name: &str, input: NodeId, p: PoolParams) -> Result<NodeId> {
        self.push_node(name, Op::Pool(p), vec![input])
    }

    pub fn relu(&mut self, name: &str, input: NodeId) -> Result<NodeId> {
        self.push_node(name, Op::Relu, vec![input])
    }

    pub fn dropout(&mut self, name: &str, input: NodeId, rate: f64, seed: u64) -> Result<NodeId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidParameter(format!("dropout rate {rate} outside [0, 1)")));
        }
        self.push_node(name, Op::Dropout { rate, seed }, vec![input])
    }

    /// Adds an upsampling (transposed convolution) node with kernel `{name}.k`.
    pub fn upsample(&mut self, name: &str, input: NodeId, p: UpsampleParams) -> Result<NodeId> {
        p.validate()?;
        let factor = p.factor;
        let kernel = self.push_param(format!("{name}.k"), p.kernel, ParamRole::Upsample, p.learnable)?;
        self.push_node(name, Op::Upsample { kernel, factor }, vec![input])
    }

    pub fn crop(&mut self, name: &str, input: NodeId, reference: NodeId, offset_h: usize, offset_w: usize) -> Result<NodeId> {
        self.push_node(name, Op::Crop { offset_h, offset_w }, vec![input, reference])
    }

    pub fn add(&mut self, name: &str, inputs: &[NodeId]) -> Result<NodeId> {
        if inputs.is_empty() {
            return Err(Error::InvalidSpec(format!("add node `{name}` has no inputs")));
        }
        self.push_node(name, Op::Add, inputs.to_vec())
    }

    /// Adds a fixed scalar multiplier stored as `{name}.scale`.
    pub fn scale(&mut self, name: &str, input: NodeId, factor: f64) -> Result<NodeId> {
        let factor = self.push_param(
            format!("{name}.scale"),
            Tensor::new_filled(Dims::new(1, 1, 1, 1), factor)?,
            ParamRole::Constant,
            false,
        )?;
        self.push_node(name, Op::Scale { factor }, vec![input])
    }

    /// Adds a per-channel mean subtraction stored as `{name}.mean`.
    pub fn subtract_mean(&mut self, name: &str, input: NodeId, mean: &[f64]) -> Result<NodeId> {
        let mean = self.push_param(
            format!("{name}.mean"),
            Tensor::from_vec(Dims::new(1, mean.len(), 1, 1), mean.to_vec())?,
            ParamRole::Constant,
            false,
        )?;
        self.push_node(name, Op::SubtractMean { mean }, vec![input])
    }

    pub fn set_output(&mut self, id: NodeId) -> Result<()> {
        if id >= self.nodes.len() {
            return Err(Error::InvalidSpec(format!("unknown output node {id}")));
        }
        self.output = Some(id);
        Ok(())
    }

    pub fn output_id(&self) -> Result<NodeId> {
        self.output
            .ok_or_else(|| Error::InvalidSpec("graph has no designated output".into()))
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node_id(&self, name: &str) -> Option<NodeId> {
        self.node_index.get(name).copied()
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn param_id(&self, name: &str) -> Option<ParamId> {
        self.param_index.get(name).copied()
    }

    pub fn param(&self, name: &str) -> Option<&Param> {
        self.param_id(name).map(|id| &self.params[id])
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.param_id(name).map(move |id| &mut self.params[id])
    }

    /// Overwrites a parameter value, keeping its dims.
    pub fn set_param(&mut self, name: &str, value: Tensor) -> Result<()> {
        let p = self
            .param_mut(name)
            .ok_or_else(|| Error::InvalidInput(format!("unknown parameter `{name}`")))?;
        if p.value.dims() != value.dims() {
            return Err(Error::Shape(format!(
                "parameter `{name}` has dims {}, got {}",
                p.value.dims(),
                value.dims()
            )));
        }
        p.value = value;
        Ok(())
    }

    pub fn input_names(&self) -> Vec<&str> {
        self.nodes
            .iter()
            .filter(|n| n.op == Op::Input)
            .map(|n| n.name.as_str())
            .collect()
    }

    /// Enables dropout (training) or makes it the identity (inference).
    pub fn set_training(&mut self, training: bool) {
        self.training = training;
    }

    /// Seed mixed into every dropout node's own seed on the next forward passes.
    pub fn set_dropout_seed(&mut self, seed: u64) {
        self.dropout_seed = seed;
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    /// Output of a named node from the most recent forward pass.
    pub fn node_output(&self, name: &str) -> Option<&Tensor> {
        let id = self.node_id(name)?;
        self.cache.as_ref().map(|c| &c.outputs[id])
    }

    /// Gradient with respect to a named input from the most recent backward pass.
    pub fn input_grad(&self, name: &str) -> Option<&Tensor> {
        self.input_grads.get(&self.node_id(name)?)
    }

    /// Forward pass for a graph with exactly one input node.
    pub fn forward_single(&mut self, x: &Tensor) -> Result<Tensor> {
        let names = self.input_names();
        if names.len() != 1 {
            return Err(Error::InvalidInput(format!(
                "graph has {} inputs, expected exactly one",
                names.len()
            )));
        }
        let name = names[0].to_string();
        self.forward(&[(name.as_str(), x)])
    }

    pub fn forward(&mut self, inputs: &[(&str, &Tensor)]) -> Result<Tensor> {
        let out_id = self.output_id()?;
        let mut outputs: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        let mut aux = Vec::with_capacity(self.nodes.len());
        for (id, node) in self.nodes.iter().enumerate() {
            let (y, a) = self
                .eval_node(id, node, &outputs, inputs)
                .map_err(|e| e.at_node(&node.name))?;
            outputs.push(y);
            aux.push(a);
        }
        let y = outputs[out_id].clone();
        self.cache = Some(Cache { outputs, aux });
        self.input_grads.clear();
        Ok(y)
    }

    fn eval_node(&self, id: NodeId, node: &Node, outputs: &[Tensor], inputs: &[(&str, &Tensor)]) -> Result<(Tensor, Aux)> {
        let arg = |k: usize| &outputs[node.inputs[k]];
        Ok(match &node.op {
            Op::Input => {
                let x = inputs
                    .iter()
                    .find(|(n, _)| *n == node.name)
                    .ok_or_else(|| Error::InvalidInput(format!("no tensor supplied for input `{}`", node.name)))?
                    .1;
                ((*x).clone(), Aux::None)
            }
            Op::Conv { weight, bias, geometry } => {
                let y = layers::conv2d_forward_raw(arg(0), &self.params[*weight].value, self.params[*bias].value.data(), *geometry)?;
                (y, Aux::None)
            }
            Op::Pool(p) => {
                let (y, sw) = layers::pool_forward(arg(0), p)?;
                (y, Aux::Pool(sw))
            }
            Op::Relu => (layers::relu_forward(arg(0)), Aux::None),
            Op::Dropout { rate, seed } => {
                let mode = if self.training { DropoutMode::Train } else { DropoutMode::Test };
                let seed = crate::rng::derive_seed(self.dropout_seed, *seed, id as u64);
                let (y, m) = layers::dropout_forward(arg(0), &DropoutParams { rate: *rate, mode }, seed)?;
                (y, Aux::Dropout(m))
            }
            Op::Upsample { kernel, factor } => {
                let y = resampling::upsample_forward_raw(arg(0), &self.params[*kernel].value, *factor)?;
                (y, Aux::None)
            }
            Op::Crop { offset_h, offset_w } => {
                let r = arg(1).dims();
                (arg(0).crop(*offset_h, *offset_w, r.h, r.w)?, Aux::None)
            }
            Op::Add => {
                let mut acc = arg(0).clone();
                for k in 1..node.inputs.len() {
                    acc.add_assign(arg(k))?;
                }
                (acc, Aux::None)
            }
            Op::Scale { factor } => (arg(0).scale(self.params[*factor].value.data()[0]), Aux::None),
            Op::SubtractMean { mean } => {
                let x = arg(0);
                let m = &self.params[*mean].value;
                if m.dims().c != x.dims().c {
                    return Err(Error::Shape(format!(
                        "mean has {} channels, input {} has {}",
                        m.dims().c,
                        x.dims(),
                        x.dims().c
                    )));
                }
                let mut y = x.clone();
                let d = x.dims();
                for n in 0..d.n {
                    for c in 0..d.c {
                        let mv = m.data()[c];
                        y.plane_mut(n, c).iter_mut().for_each(|v| *v -= mv);
                    }
                }
                (y, Aux::None)
            }
        })
    }

    /// Reverse-mode pass from `grad_at_output`; parameter gradients accumulate.
    pub fn backward(&mut self, grad_at_output: &Tensor) -> Result<()> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| Error::State("backward called without a preceding forward".into()))?;
        let result = self.backward_with(&cache, grad_at_output);
        self.cache = Some(cache);
        result
    }

    fn backward_with(&mut self, cache: &Cache, grad_at_output: &Tensor) -> Result<()> {
        let out_id = self.output_id()?;
        if grad_at_output.dims() != cache.outputs[out_id].dims() {
            return Err(Error::Shape(format!(
                "output gradient {} does not match output {}",
                grad_at_output.dims(),
                cache.outputs[out_id].dims()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[out_id] = Some(grad_at_output.clone());
        let mut input_grads = HashMap::new();
        for id in (0..self.nodes.len()).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = self.nodes[id].clone();
            let contributions = self
                .backward_node(&node, cache, id, &g)
                .map_err(|e| e.at_node(&node.name))?;
            if node.op == Op::Input {
                input_grads.insert(id, g);
                continue;
            }
            for (k, contribution) in contributions {
                let src = node.inputs[k];
                match &mut grads[src] {
                    Some(acc) => acc.add_assign(&contribution)?,
                    slot @ None => *slot = Some(contribution),
                }
            }
        }
        self.input_grads = input_grads;
        Ok(())
    }

    /// Gradients for each consumed input (by input position); accumulates parameter grads.
    fn backward_node(&mut self, node: &Node, cache: &Cache, id: NodeId, g: &Tensor) -> Result<Vec<(usize, Tensor)>> {
        let arg = |k: usize| &cache.outputs[node.inputs[k]];
        Ok(match &node.op {
            Op::Input => vec![],
            Op::Conv { weight, bias, geometry } => {
                let grads = layers::conv2d_backward_raw(arg(0), &self.params[*weight].value, *geometry, g)?;
                if self.params[*weight].learnable {
                    self.params[*weight].grad.add_assign(&grads.w)?;
                }
                if self.params[*bias].learnable {
                    for (a, b) in self.params[*bias].grad.data_mut().iter_mut().zip(&grads.b) {
                        *a += b;
                    }
                }
                vec![(0, grads.x)]
            }
            Op::Pool(_) => match &cache.aux[id] {
                Aux::Pool(sw) => vec![(0, layers::pool_backward(sw, g)?)],
                _ => return Err(Error::State("missing pooling switches".into())),
            },
            Op::Relu => vec![(0, layers::relu_backward(arg(0), g)?)],
            Op::Dropout { .. } => match &cache.aux[id] {
                Aux::Dropout(m) => vec![(0, layers::dropout_backward(m, g)?)],
                _ => return Err(Error::State("missing dropout mask".into())),
            },
            Op::Upsample { kernel, factor } => {
                let learn = self.params[*kernel].learnable;
                let (gx, gk) = resampling::upsample_backward_raw(arg(0), &self.params[*kernel].value, *factor, g, learn)?;
                if let Some(gk) = gk {
                    self.params[*kernel].grad.add_assign(&gk)?;
                }
                vec![(0, gx)]
            }
            Op::Crop { offset_h, offset_w } => {
                let mut gx = Tensor::zeros(arg(0).dims())?;
                gx.uncrop_add(*offset_h, *offset_w, g);
                vec![(0, gx)]
            }
            Op::Add => (0..node.inputs.len()).map(|k| (k, g.clone())).collect(),
            Op::Scale { factor } => vec![(0, g.scale(self.params[*factor].value.data()[0]))],
            Op::SubtractMean { .. } => vec![(0, g.clone())],
        })
    }

    /// Copies of every parameter value, in store order.
    pub fn param_values(&self) -> Vec<Tensor> {
        self.params.iter().map(|p| p.value.clone()).collect()
    }

    pub fn set_param_values(&mut self, values: &[Tensor]) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(Error::Shape(format!(
                "{} parameter values for {} parameters",
                values.len(),
                self.params.len()
            )));
        }
        for (p, v) in self.params.iter_mut().zip(values) {
            if p.value.dims() != v.dims() {
                return Err(Error::Shape(format!("parameter `{}` dims differ", p.name)));
            }
            p.value = v.clone();
        }
        Ok(())
    }

    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &self.params).expect("writing to memory");
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn load_checkpoint(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let entries = read_checkpoint(&bytes)?;
        self.assign_checkpoint(entries)
    }

    /// Replaces parameter values from checkpoint entries; names and dims must match exactly.
    pub fn assign_checkpoint(&mut self, entries: Vec<(String, Tensor)>) -> Result<()> {
        if entries.len() != self.params.len() {
            return Err(Error::InvalidInput(format!(
                "checkpoint holds {} parameters, graph has {}",
                entries.len(),
                self.params.len()
            )));
        }
        for (name, value) in entries {
            self.set_param(&name, value)?;
        }
        Ok(())
    }
}

/// Checkpoint magic bytes.
pub const CHECKPOINT_MAGIC: &[u8; 8] = b"FCNPARAM";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Writes the flat little-endian checkpoint layout:
/// magic, `u32` version, `u32` count, then per parameter `u32` name length,
/// UTF-8 name, four `u64` dims `(n, c, h, w)` and the `f64` values.
pub fn write_checkpoint(out: &mut impl Write, params: &[Param]) -> std::io::Result<()> {
    out.write_all(CHECKPOINT_MAGIC)?;
    out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    out.write_all(&(params.len() as u32).to_le_bytes())?;
    for p in params {
        out.write_all(&(p.name.len() as u32).to_le_bytes())?;
        out.write_all(p.name.as_bytes())?;
        let d = p.value.dims();
        for v in [d.n, d.c, d.h, d.w] {
            out.write_all(&(v as u64).to_le_bytes())?;
        }
        for v in p.value.data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = ByteReader { bytes, pos: 0 };
    let magic = r.take(8)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::Parse {
            offset: 0,
            message: "bad checkpoint magic".into(),
        });
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Parse {
            offset: 8,
            message: format!("unsupported checkpoint version {version}"),
        });
    }
    let count = r.u32()? as usize;
    let mut entries = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let at = r.pos;
        let name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|_| Error::Parse {
            offset: at,
            message: "parameter name is not UTF-8".into(),
        })?;
        let at = r.pos;
        let mut d = [0usize; 4];
        for v in &mut d {
            *v = r.u64()? as usize;
        }
        let dims = Dims::new(d[0], d[1], d[2], d[3]);
        let len = dims.checked_len().map_err(|e| Error::Parse {
            offset: at,
            message: e.to_string(),
        })?;
        let raw = r.take(len.checked_mul(8).ok_or_else(|| Error::Parse {
            offset: at,
            message: "parameter too large".into(),
        })?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        entries.push((name, Tensor::from_parts(dims, data)));
    }
    if r.pos != bytes.len() {
        return Err(Error::Parse {
            offset: r.pos,
            message: "trailing bytes after last parameter".into(),
        });
    }
    Ok(entries)
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Parse {
                offset: self.bytes.len(),
                message: format!("truncated: needed {n} bytes at offset {}", self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
