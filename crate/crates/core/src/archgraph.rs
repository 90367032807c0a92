//! Compilation of decoded genomes into shape-checked encoder-decoder graphs.
//!
//! The chain is `E_1 -> .. -> E_N -> D_N -> .. -> D_1 -> head`. A bypassed
//! stage becomes an `Identity` node. Each open skip gate adds a 1x1
//! projection from an encoder output, resized bilinearly to the resolution
//! of the receiving decoder input and concatenated onto it.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::genome::UnitParams;

/// Default activation-memory budget for a single candidate.
pub const DEFAULT_MEMORY_BUDGET: u64 = 512 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape {
    pub const fn new(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
        }
    }

    pub fn numel(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn same_plane(&self, other: &Shape) -> bool {
        self.height == other.height && self.width == other.width
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.channels, self.height, self.width)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    /// The fixed noise field.
    Input,
    /// Stride-2 convolution.
    ConvDown,
    /// Bilinear x2 upsample followed by a stride-1 convolution.
    ConvUp,
    /// 1x1 projection of an encoder output, resized to its consumer.
    SkipProject,
    Concat,
    /// A bypassed stage.
    Identity,
    /// 1x1 convolution to image channels followed by the logistic function.
    OutputHead,
}

impl LayerKind {
    pub fn has_conv(self) -> bool {
        matches!(
            self,
            LayerKind::ConvDown | LayerKind::ConvUp | LayerKind::SkipProject | LayerKind::OutputHead
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    None,
    LeakyRelu,
    Sigmoid,
}

/// Slope of the leaky rectifier on negative inputs.
pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    /// Square filter size; only meaningful for convolutional kinds.
    pub filter_size: usize,
    pub out_channels: usize,
    pub normalize: bool,
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Node {
    pub id: usize,
    pub label: String,
    pub spec: LayerSpec,
    pub inputs: Vec<usize>,
    /// Output shape.
    pub shape: Shape,
    /// Unit this node realizes, if any.
    pub unit: Option<usize>,
}

impl Node {
    /// Channels entering the node's convolution (after any concat).
    pub fn in_channels(&self, graph: &ArchitectureGraph) -> usize {
        self.inputs
            .iter()
            .map(|&i| graph.nodes[i].shape.channels)
            .sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Edge {
    pub from: usize,
    pub to: usize,
}

/// A valid, shape-checked network. Node ids are indices into `nodes` and
/// every node's inputs precede it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchitectureGraph {
    pub nodes: Vec<Node>,
    pub edges: Vec<Edge>,
    pub input_shape: Shape,
    pub output_shape: Shape,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "reason", rename_all = "snake_case")]
pub enum InvalidReason {
    NoActiveStages,
    Unbalanced { down: usize, up: usize },
    ShapeMismatch { node: usize, detail: String },
    MemoryBudget { estimated: u64, budget: u64 },
    ComputeBudget { estimated: u64, budget: u64 },
}

impl fmt::Display for InvalidReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            InvalidReason::NoActiveStages => write!(f, "no active stages"),
            InvalidReason::Unbalanced { down, up } => {
                write!(f, "{down} downsampling stages vs {up} upsampling stages")
            }
            InvalidReason::ShapeMismatch { node, detail } => {
                write!(f, "shape mismatch at node {node}: {detail}")
            }
            InvalidReason::MemoryBudget { estimated, budget } => write!(
                f,
                "activation memory {estimated} bytes exceeds budget {budget}"
            ),
            InvalidReason::ComputeBudget { estimated, budget } => write!(
                f,
                "forward cost {estimated} multiply-adds exceeds budget {budget}"
            ),
        }
    }
}

/// Result of compiling a genome: a usable graph or the reason it is not.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Compiled {
    Valid(ArchitectureGraph),
    Invalid(InvalidReason),
}

impl Compiled {
    pub fn is_valid(&self) -> bool {
        matches!(self, Compiled::Valid(_))
    }

    pub fn graph(&self) -> Option<&ArchitectureGraph> {
        match self {
            Compiled::Valid(g) => Some(g),
            Compiled::Invalid(_) => None,
        }
    }

    pub fn invalid_reason(&self) -> Option<&InvalidReason> {
        match self {
            Compiled::Valid(_) => None,
            Compiled::Invalid(r) => Some(r),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct CompileOptions {
    /// Insert per-channel normalization after every stage convolution.
    pub normalize: bool,
    pub max_activation_bytes: u64,
    /// Optional cap on forward multiply-adds.
    pub max_macs: Option<u64>,
}

impl Default for CompileOptions {
    fn default() -> Self {
        Self {
            normalize: true,
            max_activation_bytes: DEFAULT_MEMORY_BUDGET,
            max_macs: None,
        }
    }
}

fn conv_out(len: usize, stride: usize) -> usize {
    len.div_ceil(stride)
}

struct Builder {
    nodes: Vec<Node>,
}

impl Builder {
    fn push(
        &mut self,
        label: String,
        spec: LayerSpec,
        inputs: Vec<usize>,
        shape: Shape,
        unit: Option<usize>,
    ) -> usize {
        let id = self.nodes.len();
        self.nodes.push(Node {
            id,
            label,
            spec,
            inputs,
            shape,
            unit,
        });
        id
    }

    fn identity(&mut self, label: String, from: usize, unit: usize) -> usize {
        let shape = self.nodes[from].shape;
        self.push(
            label,
            LayerSpec {
                kind: LayerKind::Identity,
                filter_size: 0,
                out_channels: shape.channels,
                normalize: false,
                activation: Activation::None,
            },
            vec![from],
            shape,
            Some(unit),
        )
    }
}

/// Compiles decoded units into a graph mapping `input` (the noise field) to
/// an image of shape `target`.
pub fn compile(
    units: &[UnitParams],
    input: Shape,
    target: Shape,
    opts: &CompileOptions,
) -> Compiled {
    let n = units.len();
    let down = units.iter().filter(|u| !u.enc_skip).count();
    let up = units.iter().filter(|u| !u.dec_skip).count();
    if down + up == 0 {
        return Compiled::Invalid(InvalidReason::NoActiveStages);
    }
    if down != up {
        return Compiled::Invalid(InvalidReason::Unbalanced { down, up });
    }

    let mut b = Builder { nodes: Vec::new() };
    let stage = |kind, filter_size, out_channels| LayerSpec {
        kind,
        filter_size,
        out_channels,
        normalize: opts.normalize,
        activation: Activation::LeakyRelu,
    };
    let mut cur = b.push(
        "input".into(),
        LayerSpec {
            kind: LayerKind::Input,
            filter_size: 0,
            out_channels: input.channels,
            normalize: false,
            activation: Activation::None,
        },
        vec![],
        input,
        None,
    );

    let mut enc_out = Vec::with_capacity(n);
    for (u, p) in units.iter().enumerate() {
        let label = format!("E{}", u + 1);
        cur = if p.enc_skip {
            b.identity(label, cur, u)
        } else {
            let s = b.nodes[cur].shape;
            let shape = Shape::new(p.enc_channels(), conv_out(s.height, 2), conv_out(s.width, 2));
            b.push(
                label,
                stage(LayerKind::ConvDown, p.enc_filter_size(), p.enc_channels()),
                vec![cur],
                shape,
                Some(u),
            )
        };
        enc_out.push(cur);
    }

    for i in (0..n).rev() {
        let p = &units[i];
        let here = b.nodes[cur].shape;
        let mut inputs = vec![cur];
        for (src_unit, src) in units.iter().enumerate() {
            let width = src.skip_gates[i] as usize;
            if width == 0 {
                continue;
            }
            let id = b.push(
                format!("R{}_{}", src_unit + 1, i + 1),
                LayerSpec {
                    kind: LayerKind::SkipProject,
                    filter_size: 1,
                    out_channels: width,
                    normalize: opts.normalize,
                    activation: Activation::LeakyRelu,
                },
                vec![enc_out[src_unit]],
                Shape::new(width, here.height, here.width),
                Some(src_unit),
            );
            inputs.push(id);
        }
        if inputs.len() > 1 {
            let channels = inputs.iter().map(|&k| b.nodes[k].shape.channels).sum();
            cur = b.push(
                format!("cat{}", i + 1),
                LayerSpec {
                    kind: LayerKind::Concat,
                    filter_size: 0,
                    out_channels: channels,
                    normalize: false,
                    activation: Activation::None,
                },
                inputs,
                Shape::new(channels, here.height, here.width),
                Some(i),
            );
        }
        let label = format!("D{}", i + 1);
        cur = if p.dec_skip {
            b.identity(label, cur, i)
        } else {
            let s = b.nodes[cur].shape;
            b.push(
                label,
                stage(LayerKind::ConvUp, p.dec_filter_size(), p.dec_channels()),
                vec![cur],
                Shape::new(p.dec_channels(), s.height * 2, s.width * 2),
                Some(i),
            )
        };
    }

    let s = b.nodes[cur].shape;
    let head = b.push(
        "head".into(),
        LayerSpec {
            kind: LayerKind::OutputHead,
            filter_size: 1,
            out_channels: target.channels,
            normalize: false,
            activation: Activation::Sigmoid,
        },
        vec![cur],
        Shape::new(target.channels, s.height, s.width),
        None,
    );
    let output = b.nodes[head].shape;
    if output != target {
        return Compiled::Invalid(InvalidReason::ShapeMismatch {
            node: head,
            detail: format!("output {output} but target is {target}"),
        });
    }

    let edges = b
        .nodes
        .iter()
        .flat_map(|node| node.inputs.iter().map(move |&from| Edge { from, to: node.id }))
        .collect();
    let graph = ArchitectureGraph {
        nodes: b.nodes,
        edges,
        input_shape: input,
        output_shape: target,
    };

    let bytes = graph.activation_bytes();
    if bytes > opts.max_activation_bytes {
        return Compiled::Invalid(InvalidReason::MemoryBudget {
            estimated: bytes,
            budget: opts.max_activation_bytes,
        });
    }
    if let Some(budget) = opts.max_macs {
        let macs = graph.macs();
        if macs > budget {
            return Compiled::Invalid(InvalidReason::ComputeBudget {
                estimated: macs,
                budget,
            });
        }
    }
    debug_assert!(infer_shapes(&graph, input).is_ok());
    Compiled::Valid(graph)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShapeError {
    pub node: usize,
    pub detail: String,
}

impl From<ShapeError> for InvalidReason {
    fn from(e: ShapeError) -> Self {
        InvalidReason::ShapeMismatch {
            node: e.node,
            detail: e.detail,
        }
    }
}

/// Recomputes every node's shape from `input` and checks it against the
/// recorded one. Reports the first disagreement.
pub fn infer_shapes(graph: &ArchitectureGraph, input: Shape) -> Result<Vec<Shape>, ShapeError> {
    let mut shapes: Vec<Shape> = Vec::with_capacity(graph.nodes.len());
    for node in &graph.nodes {
        let err = |detail: String| ShapeError {
            node: node.id,
            detail,
        };
        if node.inputs.iter().any(|&i| i >= shapes.len()) {
            return Err(err("input does not precede node".into()));
        }
        let ins: Vec<Shape> = node.inputs.iter().map(|&i| shapes[i]).collect();
        let single = || -> Result<Shape, ShapeError> {
            match ins.as_slice() {
                [s] => Ok(*s),
                _ => Err(err(format!("expected one input, got {}", ins.len()))),
            }
        };
        let spec = &node.spec;
        let shape = match spec.kind {
            LayerKind::Input => {
                if !ins.is_empty() {
                    return Err(err("input node has predecessors".into()));
                }
                input
            }
            LayerKind::ConvDown => {
                let s = single()?;
                Shape::new(spec.out_channels, conv_out(s.height, 2), conv_out(s.width, 2))
            }
            LayerKind::ConvUp => {
                let s = single()?;
                Shape::new(spec.out_channels, s.height * 2, s.width * 2)
            }
            LayerKind::SkipProject => {
                single()?;
                // resized to the consumer; the consumer's plane is checked at the concat
                Shape::new(spec.out_channels, node.shape.height, node.shape.width)
            }
            LayerKind::Identity => single()?,
            LayerKind::OutputHead => {
                let s = single()?;
                Shape::new(spec.out_channels, s.height, s.width)
            }
            LayerKind::Concat => {
                let first = *ins.first().ok_or_else(|| err("empty concat".into()))?;
                if let Some(bad) = ins.iter().find(|s| !s.same_plane(&first)) {
                    return Err(err(format!("concat of {first} with {bad}")));
                }
                Shape::new(
                    ins.iter().map(|s| s.channels).sum(),
                    first.height,
                    first.width,
                )
            }
        };
        if spec.kind.has_conv() && spec.filter_size % 2 == 0 {
            return Err(err(format!("even filter size {}", spec.filter_size)));
        }
        if shape != node.shape {
            return Err(err(format!("inferred {shape}, recorded {}", node.shape)));
        }
        shapes.push(shape);
    }
    match shapes.last() {
        Some(&last) if last == graph.output_shape => Ok(shapes),
        Some(&last) => Err(ShapeError {
            node: graph.nodes.len() - 1,
            detail: format!("sink {last} differs from output {}", graph.output_shape),
        }),
        None => Err(ShapeError {
            node: 0,
            detail: "empty graph".into(),
        }),
    }
}

impl ArchitectureGraph {
    /// Number of convolution weights and biases: `(f*f*c_in + 1) * c_out`
    /// summed over every convolution.
    pub fn param_count(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| n.spec.kind.has_conv())
            .map(|n| {
                let f = n.spec.filter_size;
                (f * f * n.in_channels(self) + 1) * n.spec.out_channels
            })
            .sum()
    }

    /// Forward multiply-adds of all convolutions.
    pub fn macs(&self) -> u64 {
        self.nodes
            .iter()
            .filter(|n| n.spec.kind.has_conv())
            .map(|n| {
                let f = n.spec.filter_size as u64;
                let plane = match n.spec.kind {
                    // projections run at the source resolution
                    LayerKind::SkipProject => {
                        let src = self.nodes[n.inputs[0]].shape;
                        (src.height * src.width) as u64
                    }
                    _ => (n.shape.height * n.shape.width) as u64,
                };
                plane * f * f * n.in_channels(self) as u64 * n.spec.out_channels as u64
            })
            .sum()
    }

    /// Estimated bytes of activations and their gradients kept during one
    /// training step, at 32-bit precision.
    pub fn activation_bytes(&self) -> u64 {
        let floats: u64 = self
            .nodes
            .iter()
            .map(|n| {
                let out = n.shape.numel() as u64;
                let extra = n.spec.normalize as u64 + (n.spec.activation != Activation::None) as u64;
                match n.spec.kind {
                    LayerKind::ConvUp => {
                        let src = self.nodes[n.inputs[0]].shape.numel() as u64;
                        4 * src + out * (1 + extra)
                    }
                    LayerKind::SkipProject => {
                        let src = self.nodes[n.inputs[0]].shape;
                        let at_src = (src.height * src.width * n.spec.out_channels) as u64;
                        at_src * (1 + extra) + out
                    }
                    LayerKind::Identity => 0,
                    _ => out * (1 + extra),
                }
            })
            .sum();
        floats * 4 * 2
    }

    pub fn stage_count(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| matches!(n.spec.kind, LayerKind::ConvDown | LayerKind::ConvUp))
            .count()
    }

    pub fn skip_count(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| n.spec.kind == LayerKind::SkipProject)
            .count()
    }

    pub fn to_json(&self) -> serde_json::Value {
        let nodes: Vec<_> = self
            .nodes
            .iter()
            .map(|n| {
                serde_json::json!({
                    "id": n.id,
                    "label": n.label,
                    "kind": n.spec.kind,
                    "filter_size": n.spec.filter_size,
                    "out_channels": n.spec.out_channels,
                    "normalize": n.spec.normalize,
                    "activation": n.spec.activation,
                    "inputs": n.inputs,
                    "shape": [n.shape.channels, n.shape.height, n.shape.width],
                    "params": self.node_params(n),
                })
            })
            .collect();
        let edges: Vec<_> = self.edges.iter().map(|e| [e.from, e.to]).collect();
        serde_json::json!({
            "input_shape": [self.input_shape.channels, self.input_shape.height, self.input_shape.width],
            "output_shape": [self.output_shape.channels, self.output_shape.height, self.output_shape.width],
            "param_count": self.param_count(),
            "macs": self.macs(),
            "nodes": nodes,
            "edges": edges,
        })
    }

    fn node_params(&self, n: &Node) -> usize {
        if !n.spec.kind.has_conv() {
            return 0;
        }
        let f = n.spec.filter_size;
        (f * f * n.in_channels(self) + 1) * n.spec.out_channels
    }
}

impl fmt::Display for ArchitectureGraph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:>3}  {:<8} {:<13} {:>6} {:>9}  {:<12} {}",
            "id", "label", "kind", "filter", "params", "shape", "inputs"
        )?;
        for n in &self.nodes {
            let kind = format!("{:?}", n.spec.kind);
            let filter = if n.spec.kind.has_conv() {
                format!("{0}x{0}", n.spec.filter_size)
            } else {
                "-".into()
            };
            let inputs: Vec<String> = n.inputs.iter().map(|i| i.to_string()).collect();
            writeln!(
                f,
                "{:>3}  {:<8} {:<13} {:>6} {:>9}  {:<12} {}",
                n.id,
                n.label,
                kind,
                filter,
                self.node_params(n),
                n.shape.to_string(),
                inputs.join(",")
            )?;
        }
        write!(
            f,
            "parameters: {}  multiply-adds: {}",
            self.param_count(),
            self.macs()
        )
    }
}
