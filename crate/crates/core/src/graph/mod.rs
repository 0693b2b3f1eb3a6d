//! Typed computation graph.
//!
//! Nodes own their parameters and list their inputs as `(producer, port)`
//! references, so edges are stored on the consumer side. Node ids are stable
//! across transformations; the execution order is a Kahn topological sort that
//! always releases the smallest ready id first.

pub mod builder;
pub mod exec;
pub mod presets;
mod shape;

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

pub use builder::GraphBuilder;
pub use presets::{build_mini_net, Preset};
pub use shape::{infer_shapes, ShapeMap};

use crate::error::{Error, Result};
use crate::fakequant::QuantState;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(pub u32);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Output port of a node.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PortRef {
    pub node: NodeId,
    pub port: u16,
}

impl PortRef {
    pub fn new(node: NodeId, port: u16) -> Self {
        PortRef { node, port }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Silu,
    Sigmoid,
}

#[derive(Clone, Debug, PartialEq)]
pub enum NodeKind {
    /// Network input with declared (channels, height, width).
    Input { channels: usize, height: usize, width: usize },
    /// Named network output.
    Output { name: String },
    /// Square-kernel convolution with bias; kernel size comes from the weight.
    Conv { stride: usize, padding: usize },
    BatchNorm { eps: f32 },
    Act(Activation),
    MaxPool { kernel: usize, stride: usize, padding: usize },
    Concat,
    Add,
    Split { sizes: Vec<usize> },
    /// Per-channel learned scale (`scale` param).
    Scale,
    /// `x * (sigmoid(a) - 0.5) + x` with inputs `[x, a]`.
    Modulate,
    GlobalAvgPool,
    Linear,
    FakeQuant(QuantState),
}

impl NodeKind {
    pub fn tag(&self) -> &'static str {
        match self {
            NodeKind::Input { .. } => "input",
            NodeKind::Output { .. } => "output",
            NodeKind::Conv { .. } => "conv",
            NodeKind::BatchNorm { .. } => "batchnorm",
            NodeKind::Act(Activation::Silu) => "silu",
            NodeKind::Act(Activation::Sigmoid) => "sigmoid",
            NodeKind::MaxPool { .. } => "maxpool",
            NodeKind::Concat => "concat",
            NodeKind::Add => "add",
            NodeKind::Split { .. } => "split",
            NodeKind::Scale => "scale",
            NodeKind::Modulate => "modulate",
            NodeKind::GlobalAvgPool => "gap",
            NodeKind::Linear => "linear",
            NodeKind::FakeQuant(_) => "fakequant",
        }
    }

    /// `(min, max)` number of inputs.
    fn arity(&self) -> (usize, usize) {
        match self {
            NodeKind::Input { .. } => (0, 0),
            NodeKind::Concat => (1, usize::MAX),
            NodeKind::Add | NodeKind::Modulate => (2, 2),
            _ => (1, 1),
        }
    }

    pub fn num_outputs(&self) -> usize {
        match self {
            NodeKind::Output { .. } => 0,
            NodeKind::Split { sizes } => sizes.len(),
            _ => 1,
        }
    }

    fn required_params(&self) -> &'static [&'static str] {
        match self {
            NodeKind::Conv { .. } | NodeKind::Linear => &["weight", "bias"],
            NodeKind::BatchNorm { .. } => &["gamma", "beta", "running_mean", "running_var"],
            NodeKind::Scale => &["scale"],
            _ => &[],
        }
    }
}

/// Parameters that are not updated by gradient descent.
pub fn is_trainable(param: &str) -> bool {
    !matches!(param, "running_mean" | "running_var")
}

#[derive(Clone, Debug, PartialEq)]
pub struct Node {
    pub id: NodeId,
    /// Dotted module path, e.g. `sppf.cv1.conv`.
    pub name: String,
    pub kind: NodeKind,
    pub inputs: Vec<PortRef>,
    pub params: BTreeMap<String, Tensor>,
    /// Never pruned (Detect head).
    pub protected: bool,
}

impl Node {
    pub fn param(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::graph(self.id.0, format!("missing parameter `{name}`")))
    }

    pub fn trainable_count(&self) -> u64 {
        self.params
            .iter()
            .filter(|(k, _)| is_trainable(k))
            .map(|(_, t)| t.len() as u64)
            .sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Graph {
    name: String,
    nodes: BTreeMap<NodeId, Node>,
    next_id: u32,
}

impl Graph {
    pub fn new(name: impl Into<String>) -> Self {
        Graph {
            name: name.into(),
            nodes: BTreeMap::new(),
            next_id: 0,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn set_name(&mut self, name: impl Into<String>) {
        self.name = name.into();
    }

    /// Id the next pushed node receives.
    pub fn next_id(&self) -> u32 {
        self.next_id
    }

    /// Raise the next id (ids of removed nodes are never reused).
    pub fn reserve_ids(&mut self, next: u32) {
        self.next_id = self.next_id.max(next);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Append a node; returns its id. Validation happens in [`Graph::validate`].
    pub fn push(
        &mut self,
        name: impl Into<String>,
        kind: NodeKind,
        inputs: Vec<PortRef>,
        params: BTreeMap<String, Tensor>,
        protected: bool,
    ) -> NodeId {
        let id = NodeId(self.next_id);
        self.insert(Node {
            id,
            name: name.into(),
            kind,
            inputs,
            params,
            protected,
        });
        id
    }

    /// Insert a node with an explicit id (used by deserialization).
    pub fn insert(&mut self, node: Node) {
        self.next_id = self.next_id.max(node.id.0 + 1);
        self.nodes.insert(node.id, node);
    }

    pub fn remove(&mut self, id: NodeId) -> Option<Node> {
        self.nodes.remove(&id)
    }

    pub fn node(&self, id: NodeId) -> Result<&Node> {
        self.nodes
            .get(&id)
            .ok_or_else(|| Error::graph(id.0, "no such node"))
    }

    pub fn node_mut(&mut self, id: NodeId) -> Result<&mut Node> {
        self.nodes
            .get_mut(&id)
            .ok_or_else(|| Error::graph(id.0, "no such node"))
    }

    /// Nodes in id order.
    pub fn nodes(&self) -> impl Iterator<Item = &Node> {
        self.nodes.values()
    }

    pub fn nodes_mut(&mut self) -> impl Iterator<Item = &mut Node> {
        self.nodes.values_mut()
    }

    pub fn input_node(&self) -> Result<&Node> {
        let mut it = self.nodes().filter(|n| matches!(n.kind, NodeKind::Input { .. }));
        match (it.next(), it.next()) {
            (Some(n), None) => Ok(n),
            (None, _) => Err(Error::invalid("graph has no input node")),
            (Some(_), Some(n)) => Err(Error::graph(n.id.0, "second input node")),
        }
    }

    /// Declared (channels, height, width) of the input node.
    pub fn input_chw(&self) -> Result<(usize, usize, usize)> {
        match self.input_node()?.kind {
            NodeKind::Input {
                channels,
                height,
                width,
            } => Ok((channels, height, width)),
            _ => unreachable!(),
        }
    }

    pub fn output_nodes(&self) -> impl Iterator<Item = &Node> {
        self.nodes().filter(|n| matches!(n.kind, NodeKind::Output { .. }))
    }

    pub fn output_by_name(&self, name: &str) -> Option<&Node> {
        self.output_nodes()
            .find(|n| matches!(&n.kind, NodeKind::Output { name: nm } if nm == name))
    }

    /// Every `(consumer, input index)` reading `port`, in id order.
    pub fn consumers(&self, port: PortRef) -> Vec<(NodeId, usize)> {
        let mut out = Vec::new();
        for n in self.nodes() {
            for (i, p) in n.inputs.iter().enumerate() {
                if *p == port {
                    out.push((n.id, i));
                }
            }
        }
        out
    }

    /// Deterministic topological order (smallest ready id first).
    pub fn topo_order(&self) -> Result<Vec<NodeId>> {
        let mut indeg: BTreeMap<NodeId, usize> = BTreeMap::new();
        let mut succ: BTreeMap<NodeId, Vec<NodeId>> = BTreeMap::new();
        for n in self.nodes() {
            indeg.entry(n.id).or_insert(0);
            for p in &n.inputs {
                if !self.nodes.contains_key(&p.node) {
                    return Err(Error::graph(n.id.0, format!("input references missing node {}", p.node)));
                }
                *indeg.entry(n.id).or_insert(0) += 1;
                succ.entry(p.node).or_default().push(n.id);
            }
        }
        let mut ready: BTreeSet<NodeId> = indeg.iter().filter(|(_, &d)| d == 0).map(|(&k, _)| k).collect();
        let mut order = Vec::with_capacity(self.nodes.len());
        while let Some(id) = ready.pop_first() {
            order.push(id);
            if let Some(next) = succ.get(&id) {
                for s in next {
                    let d = indeg.get_mut(s).expect("known node");
                    *d -= 1;
                    if *d == 0 {
                        ready.insert(*s);
                    }
                }
            }
        }
        if order.len() != self.nodes.len() {
            return Err(Error::Cycle);
        }
        Ok(order)
    }

    /// Structural checks: arities, port ranges, parameter presence and ranks,
    /// exactly one input, at least one output, acyclic.
    pub fn validate(&self) -> Result<()> {
        self.input_node()?;
        if self.output_nodes().next().is_none() {
            return Err(Error::invalid("graph has no output node"));
        }
        for n in self.nodes() {
            let (lo, hi) = n.kind.arity();
            if n.inputs.len() < lo || n.inputs.len() > hi {
                return Err(Error::graph(
                    n.id.0,
                    format!("{} takes {lo}..={hi} inputs, has {}", n.kind.tag(), n.inputs.len()),
                ));
            }
            for p in &n.inputs {
                let prod = self.node(p.node)?;
                if usize::from(p.port) >= prod.kind.num_outputs() {
                    return Err(Error::Edge {
                        producer: p.node.0,
                        port: p.port,
                        consumer: n.id.0,
                        detail: format!("{} has no output port {}", prod.kind.tag(), p.port),
                    });
                }
            }
            for req in n.kind.required_params() {
                n.param(req)?;
            }
            match &n.kind {
                NodeKind::Conv { stride, .. } => {
                    if n.param("weight")?.rank() != 4 {
                        return Err(Error::graph(n.id.0, "conv weight must be rank 4"));
                    }
                    if *stride == 0 {
                        return Err(Error::graph(n.id.0, "conv stride must be positive"));
                    }
                }
                NodeKind::Linear => {
                    if n.param("weight")?.rank() != 2 {
                        return Err(Error::graph(n.id.0, "linear weight must be rank 2"));
                    }
                }
                NodeKind::BatchNorm { .. } => {
                    let c = n.param("gamma")?.len();
                    for p in ["beta", "running_mean", "running_var"] {
                        if n.param(p)?.len() != c {
                            return Err(Error::graph(n.id.0, format!("batchnorm `{p}` length differs from gamma")));
                        }
                    }
                }
                NodeKind::Split { sizes } => {
                    if sizes.is_empty() || sizes.contains(&0) {
                        return Err(Error::graph(n.id.0, "split sizes must be positive"));
                    }
                }
                _ => {}
            }
        }
        self.topo_order()?;
        Ok(())
    }

    pub fn has_fakequant(&self) -> bool {
        self.nodes().any(|n| matches!(n.kind, NodeKind::FakeQuant(_)))
    }

    /// Copy of the graph with every fake-quant node bypassed and removed.
    pub fn strip_fakequant(&self) -> Graph {
        let mut g = self.clone();
        let fq: BTreeMap<NodeId, PortRef> = self
            .nodes()
            .filter(|n| matches!(n.kind, NodeKind::FakeQuant(_)))
            .map(|n| (n.id, n.inputs[0]))
            .collect();
        let resolve = |mut p: PortRef| {
            while let Some(src) = fq.get(&p.node) {
                p = *src;
            }
            p
        };
        for n in g.nodes.values_mut() {
            for p in &mut n.inputs {
                *p = resolve(*p);
            }
        }
        for id in fq.keys() {
            g.nodes.remove(id);
        }
        g
    }
}

/// Closed-form trainable parameter count of one node from its tensor shapes.
pub fn node_trainable_formula(node: &Node) -> Result<u64> {
    Ok(match &node.kind {
        NodeKind::Conv { .. } => {
            let w = node.param("weight")?.shape();
            (w[0] * w[1] * w[2] * w[3] + w[0]) as u64
        }
        NodeKind::Linear => {
            let w = node.param("weight")?.shape();
            (w[0] * w[1] + w[0]) as u64
        }
        NodeKind::BatchNorm { .. } => 2 * node.param("gamma")?.len() as u64,
        NodeKind::Scale => node.param("scale")?.len() as u64,
        _ => 0,
    })
}
