use thiserror::Error;

use super::ops::{self, NormCache};
use super::params::ParamStore;
use super::tensor::{Real, Tensor};
use crate::archgraph::{Activation, ArchitectureGraph, LayerKind, Node, Shape, LEAKY_SLOPE};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ExecError {
    #[error("input shape {actual} does not match graph input {expected}")]
    InputShape { expected: Shape, actual: Shape },
    #[error("gradient shape {actual} does not match graph output {expected}")]
    GradShape { expected: Shape, actual: Shape },
    #[error("parameter store was built for a different graph")]
    ParamMismatch,
    #[error("tape does not belong to this graph")]
    TapeMismatch,
}

#[derive(Debug, Clone, Default)]
struct NodeTape<T> {
    /// Upsampled input of a ConvUp stage.
    upsampled: Option<Tensor<T>>,
    /// Activation of a SkipProject before resizing.
    projected: Option<Tensor<T>>,
    norm: Option<NormCache<T>>,
}

/// Everything backward needs from one forward pass.
#[derive(Debug, Clone)]
pub struct Tape<T> {
    values: Vec<Tensor<T>>,
    nodes: Vec<NodeTape<T>>,
}

impl<T: Real> Tape<T> {
    /// Output of node `id`.
    pub fn value(&self, id: usize) -> &Tensor<T> {
        &self.values[id]
    }

    pub fn output(&self) -> &Tensor<T> {
        self.values.last().expect("non-empty tape")
    }

    pub fn into_output(mut self) -> Tensor<T> {
        self.values.pop().expect("non-empty tape")
    }
}

/// conv -> [norm] -> activation. Returns the activation and the norm cache.
fn stage_forward<T: Real>(
    node: &Node,
    params: &ParamStore<T>,
    x: &Tensor<T>,
    stride: usize,
) -> (Tensor<T>, Option<NormCache<T>>) {
    let slot = params.slots[node.id].expect("conv node has parameters");
    let spec = &node.spec;
    let mut z = ops::conv2d(
        x,
        &params.params[slot.weight].value,
        &params.params[slot.bias].value,
        spec.out_channels,
        spec.filter_size,
        stride,
    );
    let mut cache = None;
    if let Some((g, b)) = slot.norm {
        let (y, c) = ops::norm_forward(&z, &params.params[g].value, &params.params[b].value);
        z = y;
        cache = Some(c);
    }
    match spec.activation {
        Activation::LeakyRelu => ops::leaky_relu(&mut z, LEAKY_SLOPE),
        Activation::Sigmoid => ops::sigmoid(&mut z),
        Activation::None => {}
    }
    (z, cache)
}

/// Reverse of [`stage_forward`]. `y` is the stage activation, `x` the conv
/// input; returns the gradient with respect to `x` when requested.
#[allow(clippy::too_many_arguments)]
fn stage_backward<T: Real>(
    node: &Node,
    params: &mut ParamStore<T>,
    x: &Tensor<T>,
    y: &Tensor<T>,
    cache: Option<&NormCache<T>>,
    stride: usize,
    mut dy: Tensor<T>,
    want_dx: bool,
) -> Option<Tensor<T>> {
    let slot = params.slots[node.id].expect("conv node has parameters");
    match node.spec.activation {
        Activation::LeakyRelu => ops::leaky_relu_backward(y, &mut dy.data, LEAKY_SLOPE),
        Activation::Sigmoid => ops::sigmoid_backward(y, &mut dy.data),
        Activation::None => {}
    }
    if let (Some((g, b)), Some(cache)) = (slot.norm, cache) {
        let mut dz = vec![T::zero(); dy.data.len()];
        let gamma = params.params[g].value.clone();
        let mut dgamma = std::mem::take(&mut params.params[g].grad);
        let mut dbeta = std::mem::take(&mut params.params[b].grad);
        ops::norm_backward(cache, &gamma, &dy, &mut dz, &mut dgamma, &mut dbeta);
        params.params[g].grad = dgamma;
        params.params[b].grad = dbeta;
        dy.data = dz;
    }
    let mut dx = want_dx.then(|| vec![T::zero(); x.data.len()]);
    let weight = std::mem::take(&mut params.params[slot.weight].value);
    let mut dw = std::mem::take(&mut params.params[slot.weight].grad);
    let mut db = std::mem::take(&mut params.params[slot.bias].grad);
    ops::conv2d_backward(
        x,
        &weight,
        node.spec.filter_size,
        stride,
        &dy,
        dx.as_deref_mut(),
        &mut dw,
        &mut db,
    );
    params.params[slot.weight].value = weight;
    params.params[slot.weight].grad = dw;
    params.params[slot.bias].grad = db;
    dx.map(|d| Tensor::from_vec(x.shape, d))
}

fn check_params<T>(graph: &ArchitectureGraph, params: &ParamStore<T>) -> Result<(), ExecError> {
    let ok = params.slots.len() == graph.nodes.len()
        && graph
            .nodes
            .iter()
            .zip(&params.slots)
            .all(|(n, s)| n.spec.kind.has_conv() == s.is_some());
    if ok {
        Ok(())
    } else {
        Err(ExecError::ParamMismatch)
    }
}

/// Runs the network on `input`, recording a tape for [`backward`].
pub fn forward<T: Real>(
    graph: &ArchitectureGraph,
    params: &ParamStore<T>,
    input: &Tensor<T>,
) -> Result<(Tensor<T>, Tape<T>), ExecError> {
    if input.shape != graph.input_shape {
        return Err(ExecError::InputShape {
            expected: graph.input_shape,
            actual: input.shape,
        });
    }
    check_params(graph, params)?;
    let mut values: Vec<Tensor<T>> = Vec::with_capacity(graph.nodes.len());
    let mut tapes = Vec::with_capacity(graph.nodes.len());
    for node in &graph.nodes {
        let mut tape = NodeTape::default();
        let value = match node.spec.kind {
            LayerKind::Input => input.clone(),
            LayerKind::Identity => values[node.inputs[0]].clone(),
            LayerKind::Concat => {
                let parts: Vec<&Tensor<T>> = node.inputs.iter().map(|&i| &values[i]).collect();
                ops::concat(&parts)
            }
            LayerKind::ConvDown => {
                let (y, c) = stage_forward(node, params, &values[node.inputs[0]], 2);
                tape.norm = c;
                y
            }
            LayerKind::ConvUp | LayerKind::OutputHead => {
                let x = &values[node.inputs[0]];
                if node.spec.kind == LayerKind::ConvUp {
                    let up = ops::resize_bilinear(x, x.shape.height * 2, x.shape.width * 2);
                    let (y, c) = stage_forward(node, params, &up, 1);
                    tape.upsampled = Some(up);
                    tape.norm = c;
                    y
                } else {
                    let (y, c) = stage_forward(node, params, x, 1);
                    tape.norm = c;
                    y
                }
            }
            LayerKind::SkipProject => {
                let (p, c) = stage_forward(node, params, &values[node.inputs[0]], 1);
                let y = ops::resize_bilinear(&p, node.shape.height, node.shape.width);
                tape.projected = Some(p);
                tape.norm = c;
                y
            }
        };
        debug_assert_eq!(value.shape, node.shape, "node {}", node.label);
        values.push(value);
        tapes.push(tape);
    }
    let out = values.last().expect("graph has a head").clone();
    Ok((out, Tape {
        values,
        nodes: tapes,
    }))
}

fn accumulate<T: Real>(slot: &mut Option<Vec<T>>, g: &[T]) {
    match slot {
        Some(acc) => {
            for (a, &v) in acc.iter_mut().zip(g) {
                *a = *a + v;
            }
        }
        None => *slot = Some(g.to_vec()),
    }
}

/// Back-propagates `loss_grad` (gradient of the loss with respect to the
/// network output) and accumulates parameter gradients into `params`.
pub fn backward<T: Real>(
    graph: &ArchitectureGraph,
    params: &mut ParamStore<T>,
    tape: &Tape<T>,
    loss_grad: &Tensor<T>,
) -> Result<(), ExecError> {
    check_params(graph, params)?;
    if tape.values.len() != graph.nodes.len() {
        return Err(ExecError::TapeMismatch);
    }
    if loss_grad.shape != graph.output_shape {
        return Err(ExecError::GradShape {
            expected: graph.output_shape,
            actual: loss_grad.shape,
        });
    }
    let mut grads: Vec<Option<Vec<T>>> = vec![None; graph.nodes.len()];
    grads[graph.nodes.len() - 1] = Some(loss_grad.data.clone());

    for node in graph.nodes.iter().rev() {
        let Some(g) = grads[node.id].take() else {
            continue;
        };
        let dy = Tensor::from_vec(node.shape, g);
        let y = &tape.values[node.id];
        let nt = &tape.nodes[node.id];
        match node.spec.kind {
            LayerKind::Input => {}
            LayerKind::Identity => accumulate(&mut grads[node.inputs[0]], &dy.data),
            LayerKind::Concat => {
                let shapes: Vec<Shape> = node.inputs.iter().map(|&i| graph.nodes[i].shape).collect();
                for (&i, part) in node.inputs.iter().zip(ops::concat_backward(&dy, &shapes)) {
                    accumulate(&mut grads[i], &part.data);
                }
            }
            LayerKind::ConvDown | LayerKind::OutputHead => {
                let src = node.inputs[0];
                let stride = if node.spec.kind == LayerKind::ConvDown { 2 } else { 1 };
                let want = graph.nodes[src].spec.kind != LayerKind::Input;
                let dx = stage_backward(
                    node,
                    params,
                    &tape.values[src],
                    y,
                    nt.norm.as_ref(),
                    stride,
                    dy,
                    want,
                );
                if let Some(dx) = dx {
                    accumulate(&mut grads[src], &dx.data);
                }
            }
            LayerKind::ConvUp => {
                let src = node.inputs[0];
                let up = nt.upsampled.as_ref().ok_or(ExecError::TapeMismatch)?;
                let want = graph.nodes[src].spec.kind != LayerKind::Input;
                let dup = stage_backward(node, params, up, y, nt.norm.as_ref(), 1, dy, want);
                if let Some(dup) = dup {
                    let dx = ops::resize_bilinear_backward(&dup, graph.nodes[src].shape);
                    accumulate(&mut grads[src], &dx.data);
                }
            }
            LayerKind::SkipProject => {
                let src = node.inputs[0];
                let p = nt.projected.as_ref().ok_or(ExecError::TapeMismatch)?;
                let dp = ops::resize_bilinear_backward(&dy, p.shape);
                let want = graph.nodes[src].spec.kind != LayerKind::Input;
                let dx = stage_backward(
                    node,
                    params,
                    &tape.values[src],
                    p,
                    nt.norm.as_ref(),
                    1,
                    dp,
                    want,
                );
                if let Some(dx) = dx {
                    accumulate(&mut grads[src], &dx.data);
                }
            }
        }
    }
    Ok(())
}
