//! Graph execution on top of the autodiff tape.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use super::{is_trainable, Activation, Graph, NodeId, NodeKind, PortRef};
use crate::autodiff::{ParamId, Tape, Var};
use crate::error::{Error, Result};
use crate::fakequant::QuantPhase;
use crate::tensor::Tensor;

/// How batchnorm nodes normalize.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    /// Batch statistics (training, calibration).
    Batch,
    /// Stored running statistics (evaluation).
    Running,
}

/// Everything recorded by one forward pass.
#[derive(Debug)]
pub struct Execution {
    pub tape: Tape,
    /// Value of each requested output, by output name.
    pub outputs: BTreeMap<String, Var>,
    pub ports: BTreeMap<PortRef, Var>,
    /// Trainable parameter leaves; index `i` holds `ParamId(i)`.
    pub params: Vec<(NodeId, String)>,
    /// Biased batch mean and variance per batchnorm node (batch mode only).
    pub bn_stats: BTreeMap<NodeId, (Vec<f32>, Vec<f32>)>,
    /// Inputs seen by fake-quant nodes in the observe phase.
    pub observed: BTreeMap<NodeId, Var>,
}

impl Execution {
    pub fn output(&self, name: &str) -> Result<&Tensor> {
        self.outputs
            .get(name)
            .map(|v| self.tape.value(*v))
            .ok_or_else(|| Error::invalid(format!("output `{name}` was not computed")))
    }
}

/// Deterministic enumeration of trainable parameters: node id order, then
/// parameter name order. `ParamId(i)` refers to entry `i`.
pub fn param_index(graph: &Graph) -> Vec<(NodeId, String)> {
    graph
        .nodes()
        .flat_map(|n| {
            n.params
                .keys()
                .filter(|k| is_trainable(k))
                .map(move |k| (n.id, k.clone()))
        })
        .collect()
}

fn ancestors(graph: &Graph, roots: &[NodeId]) -> Result<BTreeSet<NodeId>> {
    let mut seen = BTreeSet::new();
    let mut stack: Vec<NodeId> = roots.to_vec();
    while let Some(id) = stack.pop() {
        if seen.insert(id) {
            stack.extend(graph.node(id)?.inputs.iter().map(|p| p.node));
        }
    }
    Ok(seen)
}

/// Run the graph on an NCHW batch. `outputs = None` computes every output;
/// otherwise only ancestors of the named outputs are evaluated.
pub fn execute(graph: &Graph, input: &Tensor, bn: BnMode, outputs: Option<&[&str]>) -> Result<Execution> {
    let (c, _, _) = graph.input_chw()?;
    let (_, ic, _, _) = input.dims4("execute")?;
    if ic != c {
        return Err(Error::shape("execute", format!("input has {ic} channels, graph expects {c}")));
    }
    let roots: Vec<NodeId> = match outputs {
        None => graph.output_nodes().map(|n| n.id).collect(),
        Some(names) => names
            .iter()
            .map(|nm| {
                graph
                    .output_by_name(nm)
                    .map(|n| n.id)
                    .ok_or_else(|| Error::invalid(format!("graph has no output `{nm}`")))
            })
            .collect::<Result<_>>()?,
    };
    let needed = ancestors(graph, &roots)?;
    let params = param_index(graph);
    let pid: BTreeMap<(NodeId, &str), ParamId> = params
        .iter()
        .enumerate()
        .map(|(i, (n, k))| ((*n, k.as_str()), ParamId(i as u32)))
        .collect();

    let mut ex = Execution {
        tape: Tape::new(),
        outputs: BTreeMap::new(),
        ports: BTreeMap::new(),
        params: params.clone(),
        bn_stats: BTreeMap::new(),
        observed: BTreeMap::new(),
    };

    for id in graph.topo_order()? {
        if !needed.contains(&id) {
            continue;
        }
        let node = graph.node(id)?;
        let ins: Vec<Var> = node.inputs.iter().map(|p| ex.ports[p]).collect();
        let tape = &mut ex.tape;
        let mut leaf = |name: &str| -> Result<Var> {
            let t = node.param(name)?.clone();
            Ok(match pid.get(&(id, name)) {
                Some(p) => tape.param(*p, t),
                None => tape.constant(t),
            })
        };
        let out: Vec<Var> = match &node.kind {
            NodeKind::Input { .. } => alloc::vec![leaf_input(tape, input)],
            NodeKind::Output { name } => {
                ex.outputs.insert(name.clone(), ins[0]);
                continue;
            }
            NodeKind::Conv { stride, padding } => {
                let w = leaf("weight")?;
                let b = leaf("bias")?;
                alloc::vec![tape.conv2d(ins[0], w, Some(b), (*stride, *stride), (*padding, *padding))?]
            }
            NodeKind::BatchNorm { eps } => {
                let g = leaf("gamma")?;
                let b = leaf("beta")?;
                match bn {
                    BnMode::Batch => {
                        let (y, m, v) = tape.batchnorm_train(ins[0], g, b, *eps)?;
                        ex.bn_stats.insert(id, (m, v));
                        alloc::vec![y]
                    }
                    BnMode::Running => {
                        let m = node.param("running_mean")?;
                        let v = node.param("running_var")?;
                        alloc::vec![tape.batchnorm_infer(ins[0], g, b, m, v, *eps)?]
                    }
                }
            }
            NodeKind::Act(Activation::Silu) => alloc::vec![tape.silu(ins[0])],
            NodeKind::Act(Activation::Sigmoid) => alloc::vec![tape.sigmoid(ins[0])],
            NodeKind::MaxPool {
                kernel,
                stride,
                padding,
            } => alloc::vec![tape.maxpool2d(ins[0], *kernel, *stride, *padding)?],
            NodeKind::Concat => alloc::vec![tape.concat(&ins)?],
            NodeKind::Add => alloc::vec![tape.add(ins[0], ins[1])?],
            NodeKind::Split { sizes } => tape.split(ins[0], sizes)?,
            NodeKind::Scale => {
                let s = leaf("scale")?;
                alloc::vec![tape.scale_channels(ins[0], s)?]
            }
            NodeKind::Modulate => alloc::vec![tape.modulate(ins[0], ins[1])?],
            NodeKind::GlobalAvgPool => alloc::vec![tape.global_avg_pool(ins[0])?],
            NodeKind::Linear => {
                let w = leaf("weight")?;
                let b = leaf("bias")?;
                alloc::vec![tape.linear(ins[0], w, Some(b))?]
            }
            NodeKind::FakeQuant(q) => match q.phase {
                QuantPhase::Disabled => alloc::vec![ins[0]],
                QuantPhase::Observe => {
                    ex.observed.insert(id, ins[0]);
                    alloc::vec![ins[0]]
                }
                QuantPhase::Active => alloc::vec![tape
                    .fakequant(ins[0], q.scale)
                    .map_err(|e| Error::graph(id.0, format!("{e}")))?],
            },
        };
        for (p, v) in out.into_iter().enumerate() {
            ex.ports.insert(PortRef::new(id, p as u16), v);
        }
    }
    Ok(ex)
}

fn leaf_input(tape: &mut Tape, input: &Tensor) -> Var {
    tape.constant(input.clone())
}

/// Inference forward returning every named output.
pub fn forward(graph: &Graph, input: &Tensor, bn: BnMode) -> Result<BTreeMap<String, Tensor>> {
    let ex = execute(graph, input, bn, None)?;
    Ok(ex
        .outputs
        .iter()
        .map(|(k, v)| (k.clone(), ex.tape.value(*v).clone()))
        .collect())
}

/// Inference forward for a single named output.
pub fn forward_output(graph: &Graph, input: &Tensor, bn: BnMode, name: &str) -> Result<Tensor> {
    let ex = execute(graph, input, bn, Some(&[name]))?;
    Ok(ex.output(name)?.clone())
}

/// Fold batch statistics into the running estimates:
/// `running = (1 - momentum) * running + momentum * batch`, with the
/// variance unbiased by `n / (n - 1)` over `count` elements per channel.
pub fn update_running_stats(
    graph: &mut Graph,
    stats: &BTreeMap<NodeId, (Vec<f32>, Vec<f32>)>,
    count: usize,
    momentum: f32,
) -> Result<()> {
    let unbias = if count > 1 { count as f32 / (count - 1) as f32 } else { 1.0 };
    for (id, (m, v)) in stats {
        let node = graph.node_mut(*id)?;
        for (key, src, k) in [("running_mean", m, 1.0f32), ("running_var", v, unbias)] {
            let t = node
                .params
                .get_mut(key)
                .ok_or_else(|| Error::graph(id.0, format!("missing parameter `{key}`")))?;
            if t.len() != src.len() {
                return Err(Error::graph(id.0, "batch statistics length differs from running statistics"));
            }
            for (r, s) in t.data_mut().iter_mut().zip(src) {
                *r = (1.0 - momentum) * *r + momentum * s * k;
            }
        }
    }
    Ok(())
}
