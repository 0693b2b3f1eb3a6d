//! Coupled-channel groups.
//!
//! Every channel in the graph is traced back to the node that created it
//! (input, conv or linear). Channel-transparent nodes forward that identity,
//! concat/split rearrange it, and add/modulate declare that two channels must
//! be pruned together. Producer channel ranges are then cut at every boundary
//! any port sees (propagated across couplings until stable), giving atoms; a
//! group is a union-find class of atoms. Every port segment is one whole atom,
//! so group index `j` is the same channel in every slot of the group.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt::{self, Write as _};

use crate::error::{Error, Result};
use crate::graph::{infer_shapes, Graph, NodeId, NodeKind, PortRef, ShapeMap};

/// Which side of a node a slot sits on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SlotPort {
    In(u16),
    Out(u16),
}

impl fmt::Display for SlotPort {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SlotPort::In(k) => write!(f, "in{k}"),
            SlotPort::Out(p) => write!(f, "out{p}"),
        }
    }
}

/// Segment `[offset, offset + len)` of a port's channel axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct ChannelSlot {
    pub node: NodeId,
    pub port: SlotPort,
    pub offset: usize,
    pub len: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GroupKind {
    Plain,
    Residual,
    ConcatSegment,
    SplitHalf,
    SppfReplicated,
}

impl GroupKind {
    pub fn as_str(self) -> &'static str {
        match self {
            GroupKind::Plain => "plain",
            GroupKind::Residual => "residual",
            GroupKind::ConcatSegment => "concat-segment",
            GroupKind::SplitHalf => "split-half",
            GroupKind::SppfReplicated => "sppf-replicated",
        }
    }
}

/// A producer channel range `[start, start + len)` of `node`'s output.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct Atom {
    pub node: NodeId,
    pub start: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChannelGroup {
    pub id: usize,
    pub len: usize,
    pub kind: GroupKind,
    pub protected: bool,
    /// Producer ranges unified in this group, sorted.
    pub atoms: Vec<Atom>,
    /// Sorted slots; each has length `len`.
    pub slots: Vec<ChannelSlot>,
}

/// All groups of a graph plus the per-port slot layout.
#[derive(Clone, Debug, PartialEq)]
pub struct Groups {
    pub groups: Vec<ChannelGroup>,
    /// For each port, `(group id, offset)` of its consecutive segments.
    layout: BTreeMap<(NodeId, SlotPort), Vec<(usize, usize)>>,
}

impl Groups {
    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn get(&self, id: usize) -> Result<&ChannelGroup> {
        self.groups.get(id).ok_or_else(|| Error::Group {
            group: id,
            detail: format!("no such group (graph has {})", self.groups.len()),
        })
    }

    /// Segments of one port in channel order; empty for ports without channels.
    pub fn port_layout(&self, node: NodeId, port: SlotPort) -> &[(usize, usize)] {
        self.layout.get(&(node, port)).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn ports(&self) -> impl Iterator<Item = (&(NodeId, SlotPort), &Vec<(usize, usize)>)> {
        self.layout.iter()
    }

    /// Group id and in-group index of channel `c` of a port.
    pub fn locate(&self, node: NodeId, port: SlotPort, c: usize) -> Option<(usize, usize)> {
        self.port_layout(node, port)
            .iter()
            .find(|(g, off)| c >= *off && c < off + self.groups[*g].len)
            .map(|(g, off)| (*g, c - off))
    }

    /// Textual listing used for debugging and golden comparisons.
    pub fn dump(&self, graph: &Graph) -> String {
        let mut s = String::new();
        for g in &self.groups {
            let cost = group_cost(graph, g).ok();
            let _ = write!(
                s,
                "group {} kind={} len={} protected={}",
                g.id,
                g.kind.as_str(),
                g.len,
                g.protected
            );
            if let Some(c) = cost {
                let _ = write!(s, " cost_params={} cost_flops={}", c.params, c.flops);
            }
            s.push('\n');
            for slot in &g.slots {
                let name = graph.node(slot.node).map(|n| n.name.as_str()).unwrap_or("?");
                let _ = writeln!(s, "  {}:{} [{}..{}) {}", slot.node, slot.port, slot.offset, slot.offset + slot.len, name);
            }
        }
        s
    }
}

type Elem = (NodeId, usize);

struct Dsu {
    parent: Vec<usize>,
}

impl Dsu {
    fn new(n: usize) -> Self {
        Dsu {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi] = lo;
        }
    }
}

fn channels_of(shape: &[usize]) -> usize {
    if shape.len() >= 2 {
        shape[1]
    } else {
        0
    }
}

/// Channel identity of every output port.
fn trace(graph: &Graph, shapes: &ShapeMap) -> Result<(BTreeMap<PortRef, Vec<Elem>>, Vec<(Vec<Elem>, Vec<Elem>)>, BTreeMap<NodeId, usize>)> {
    let mut out: BTreeMap<PortRef, Vec<Elem>> = BTreeMap::new();
    let mut relations = Vec::new();
    let mut origins = BTreeMap::new();
    for id in graph.topo_order()? {
        let node = graph.node(id)?;
        let ins: Vec<&Vec<Elem>> = node
            .inputs
            .iter()
            .enumerate()
            .map(|(k, p)| {
                out.get(p).ok_or(Error::UnresolvedSlot {
                    node: id.0,
                    port: format!("in{k}"),
                })
            })
            .collect::<Result<_>>()?;
        let fresh = |c: usize| -> Vec<Elem> { (0..c).map(|i| (id, i)).collect() };
        let produced: Vec<Vec<Elem>> = match &node.kind {
            NodeKind::Output { .. } => Vec::new(),
            NodeKind::Input { .. } | NodeKind::Conv { .. } | NodeKind::Linear => {
                let shape = shapes.get(&PortRef::new(id, 0)).ok_or(Error::UnresolvedSlot {
                    node: id.0,
                    port: String::from("out0"),
                })?;
                let c = channels_of(shape);
                origins.insert(id, c);
                alloc::vec![fresh(c)]
            }
            NodeKind::BatchNorm { .. }
            | NodeKind::Act(_)
            | NodeKind::MaxPool { .. }
            | NodeKind::Scale
            | NodeKind::FakeQuant(_)
            | NodeKind::GlobalAvgPool => alloc::vec![ins[0].clone()],
            NodeKind::Concat => alloc::vec![ins.iter().flat_map(|v| v.iter().copied()).collect()],
            NodeKind::Split { sizes } => {
                let mut off = 0;
                sizes
                    .iter()
                    .map(|s| {
                        let v = ins[0][off..off + s].to_vec();
                        off += s;
                        v
                    })
                    .collect()
            }
            NodeKind::Add | NodeKind::Modulate => {
                if ins[0].len() != ins[1].len() {
                    return Err(Error::graph(id.0, "coupled operands have different channel counts"));
                }
                relations.push((ins[0].clone(), ins[1].clone()));
                alloc::vec![ins[0].clone()]
            }
        };
        for (p, v) in produced.into_iter().enumerate() {
            let port = PortRef::new(id, p as u16);
            let expect = shapes.get(&port).map(|s| channels_of(s)).unwrap_or(usize::MAX);
            if v.len() != expect {
                return Err(Error::UnresolvedSlot {
                    node: id.0,
                    port: format!("out{p}"),
                });
            }
            out.insert(port, v);
        }
    }
    Ok((out, relations, origins))
}

fn add_run_cuts(v: &[Elem], cuts: &mut BTreeMap<NodeId, BTreeSet<usize>>) {
    for (i, e) in v.iter().enumerate() {
        let starts = i == 0 || v[i - 1] != (e.0, e.1.wrapping_sub(1));
        let ends = i + 1 == v.len() || v[i + 1] != (e.0, e.1 + 1);
        let set = cuts.entry(e.0).or_default();
        if starts {
            set.insert(e.1);
        }
        if ends {
            set.insert(e.1 + 1);
        }
    }
}

/// Resolve every channel slot of the graph into coupled groups.
pub fn resolve_groups(graph: &Graph) -> Result<Groups> {
    graph.validate()?;
    let (c, h, w) = graph.input_chw()?;
    let shapes = infer_shapes(graph, [1, c, h, w])?;
    let (ports, relations, origins) = trace(graph, &shapes)?;

    let mut cuts: BTreeMap<NodeId, BTreeSet<usize>> = BTreeMap::new();
    for (o, n) in &origins {
        let set = cuts.entry(*o).or_default();
        set.insert(0);
        set.insert(*n);
    }
    for v in ports.values() {
        add_run_cuts(v, &mut cuts);
    }
    // coupled channels must see identical boundaries
    loop {
        let mut changed = false;
        for (a, b) in &relations {
            for (x, y) in a.iter().zip(b).flat_map(|(x, y)| [(x, y), (y, x)]) {
                for d in [0, 1] {
                    if cuts[&x.0].contains(&(x.1 + d)) && cuts.get_mut(&y.0).expect("origin").insert(y.1 + d) {
                        changed = true;
                    }
                }
            }
        }
        if !changed {
            break;
        }
    }

    let mut atoms: Vec<(Atom, usize)> = Vec::new();
    let mut atom_index: BTreeMap<Atom, usize> = BTreeMap::new();
    for (o, set) in &cuts {
        let pts: Vec<usize> = set.iter().copied().collect();
        for win in pts.windows(2) {
            let a = Atom {
                node: *o,
                start: win[0],
            };
            atom_index.insert(a, atoms.len());
            atoms.push((a, win[1] - win[0]));
        }
    }
    let atom_of = |e: Elem| -> usize {
        let set = &cuts[&e.0];
        let start = *set.range(..=e.1).next_back().expect("0 is always a cut");
        atom_index[&Atom { node: e.0, start }]
    };

    let mut dsu = Dsu::new(atoms.len());
    for (a, b) in &relations {
        for (x, y) in a.iter().zip(b) {
            let (ax, ay) = (atom_of(*x), atom_of(*y));
            if x.1 - atoms[ax].0.start != y.1 - atoms[ay].0.start || atoms[ax].1 != atoms[ay].1 {
                return Err(Error::graph(
                    x.0 .0,
                    format!("channel coupling with node {} is misaligned", y.0),
                ));
            }
            dsu.union(ax, ay);
        }
    }

    // slots, group ids by first appearance in topological port order
    let mut class_to_group: BTreeMap<usize, usize> = BTreeMap::new();
    let mut layout: BTreeMap<(NodeId, SlotPort), Vec<(usize, usize)>> = BTreeMap::new();
    let mut slots: Vec<Vec<ChannelSlot>> = Vec::new();
    for id in graph.topo_order()? {
        let node = graph.node(id)?;
        let mut port_vecs: Vec<(SlotPort, &Vec<Elem>)> = Vec::new();
        for (k, p) in node.inputs.iter().enumerate() {
            port_vecs.push((SlotPort::In(k as u16), &ports[p]));
        }
        for p in 0..node.kind.num_outputs() {
            port_vecs.push((SlotPort::Out(p as u16), &ports[&PortRef::new(id, p as u16)]));
        }
        for (sp, v) in port_vecs {
            let mut i = 0;
            let mut segs = Vec::new();
            while i < v.len() {
                let a = atom_of(v[i]);
                let (atom, len) = atoms[a];
                if v[i].1 != atom.start || i + len > v.len() || (0..len).any(|j| v[i + j] != (atom.node, atom.start + j)) {
                    return Err(Error::UnresolvedSlot {
                        node: id.0,
                        port: format!("{sp}"),
                    });
                }
                let root = dsu.find(a);
                let next = class_to_group.len();
                let g = *class_to_group.entry(root).or_insert(next);
                if g == slots.len() {
                    slots.push(Vec::new());
                }
                slots[g].push(ChannelSlot {
                    node: id,
                    port: sp,
                    offset: i,
                    len,
                });
                segs.push((g, i));
                i += len;
            }
            if !segs.is_empty() {
                layout.insert((id, sp), segs);
            }
        }
    }

    let mut group_atoms: Vec<Vec<Atom>> = alloc::vec![Vec::new(); slots.len()];
    for (i, (a, _)) in atoms.iter().enumerate() {
        if let Some(g) = class_to_group.get(&dsu.find(i)) {
            group_atoms[*g].push(*a);
        }
    }

    let mut groups = Vec::with_capacity(slots.len());
    for (gid, mut gslots) in slots.into_iter().enumerate() {
        gslots.sort();
        let len = gslots[0].len;
        if gslots.iter().any(|s| s.len != len) {
            return Err(Error::Group {
                group: gid,
                detail: String::from("slots of unequal length"),
            });
        }
        let gatoms = core::mem::take(&mut group_atoms[gid]);
        let mut protected = false;
        for a in &gatoms {
            if matches!(graph.node(a.node)?.kind, NodeKind::Input { .. }) {
                protected = true;
            }
        }
        for s in &gslots {
            let n = graph.node(s.node)?;
            if n.protected || matches!(n.kind, NodeKind::Output { .. }) {
                protected = true;
            }
        }
        let replicated = gslots
            .windows(2)
            .any(|w| w[0].node == w[1].node && w[0].port == w[1].port);
        let sub_range = gatoms.iter().any(|a| origins[&a.node] != len);
        let concat_seg = gslots.iter().any(|s| {
            matches!(graph.node(s.node).map(|n| &n.kind), Ok(NodeKind::Concat))
                && s.port == SlotPort::Out(0)
                && layout[&(s.node, s.port)].len() > 1
        });
        let kind = if replicated {
            GroupKind::SppfReplicated
        } else if gatoms.len() > 1 {
            GroupKind::Residual
        } else if sub_range {
            GroupKind::SplitHalf
        } else if concat_seg {
            GroupKind::ConcatSegment
        } else {
            GroupKind::Plain
        };
        groups.push(ChannelGroup {
            id: gid,
            len,
            kind,
            protected,
            atoms: gatoms,
            slots: gslots,
        });
    }
    Ok(Groups { groups, layout })
}

/// Cost of removing a single channel from a group at the graph's current
/// widths, per sample at the declared input size.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct GroupCost {
    pub params: u64,
    pub flops: u64,
}

/// Per-element FLOPs of channel-wise nodes (see `metrics` for the full table).
pub(crate) fn elementwise_flops(kind: &NodeKind) -> u64 {
    match kind {
        NodeKind::BatchNorm { .. } => 2,
        NodeKind::Act(crate::graph::Activation::Silu) => 4,
        NodeKind::Act(crate::graph::Activation::Sigmoid) => 3,
        NodeKind::Add | NodeKind::Scale => 1,
        NodeKind::Modulate => 4,
        NodeKind::FakeQuant(_) => 4,
        NodeKind::MaxPool { .. } => 1,
        _ => 0,
    }
}

fn spatial(shape: &[usize]) -> u64 {
    shape.iter().skip(2).product::<usize>() as u64
}

/// Parameters and FLOPs attributable to one channel of `group`: producer
/// filter rows and biases, normalization and scale entries, every consumer's
/// input columns (counted once per slot, so replicated segments multiply),
/// and channel-wise elementwise work.
pub fn group_cost(graph: &Graph, group: &ChannelGroup) -> Result<GroupCost> {
    let (c, h, w) = graph.input_chw()?;
    let shapes = infer_shapes(graph, [1, c, h, w])?;
    group_cost_with(graph, &shapes, group)
}

pub(crate) fn group_cost_with(graph: &Graph, shapes: &ShapeMap, group: &ChannelGroup) -> Result<GroupCost> {
    let mut cost = GroupCost::default();
    for s in &group.slots {
        let n = graph.node(s.node)?;
        let out_shape = shapes.get(&PortRef::new(n.id, 0));
        match (&n.kind, s.port) {
            (NodeKind::Conv { .. }, port) => {
                let wt = n.param("weight")?.shape();
                let k2 = (wt[2] * wt[3]) as u64;
                let hw = spatial(out_shape.expect("conv output shape"));
                if let SlotPort::Out(_) = port {
                    cost.params += wt[1] as u64 * k2 + 1;
                    cost.flops += (2 * wt[1] as u64 * k2 + 1) * hw;
                } else {
                    cost.params += wt[0] as u64 * k2;
                    cost.flops += 2 * wt[0] as u64 * k2 * hw;
                }
            }
            (NodeKind::Linear, port) => {
                let wt = n.param("weight")?.shape();
                if let SlotPort::Out(_) = port {
                    cost.params += wt[1] as u64 + 1;
                    cost.flops += 2 * wt[1] as u64 + 1;
                } else {
                    cost.params += wt[0] as u64;
                    cost.flops += 2 * wt[0] as u64;
                }
            }
            (NodeKind::BatchNorm { .. }, SlotPort::Out(_)) => {
                cost.params += 2;
                cost.flops += 2 * spatial(out_shape.expect("bn output shape"));
            }
            (NodeKind::Scale, SlotPort::Out(_)) => {
                cost.params += 1;
                cost.flops += spatial(out_shape.expect("scale output shape"));
            }
            (NodeKind::GlobalAvgPool, SlotPort::In(k)) => {
                let src = n.inputs[k as usize];
                cost.flops += spatial(&shapes[&src]);
            }
            (kind, SlotPort::Out(_)) => {
                if let Some(sh) = out_shape {
                    cost.flops += elementwise_flops(kind) * spatial(sh);
                }
            }
            _ => {}
        }
    }
    Ok(cost)
}

/// Trainable parameters of `node` when each port segment of group `g` has
/// width `width[g]`.
fn node_params_at(graph: &Graph, groups: &Groups, id: NodeId, width: &[usize]) -> Result<u64> {
    let n = graph.node(id)?;
    let sum = |port: SlotPort| -> usize { groups.port_layout(id, port).iter().map(|(g, _)| width[*g]).sum() };
    Ok(match &n.kind {
        NodeKind::Conv { .. } => {
            let wt = n.param("weight")?.shape();
            let (cout, cin) = (sum(SlotPort::Out(0)), sum(SlotPort::In(0)));
            (cout * cin * wt[2] * wt[3] + cout) as u64
        }
        NodeKind::Linear => {
            let (out, inp) = (sum(SlotPort::Out(0)), sum(SlotPort::In(0)));
            (out * inp + out) as u64
        }
        NodeKind::BatchNorm { .. } => 2 * sum(SlotPort::Out(0)) as u64,
        NodeKind::Scale => sum(SlotPort::Out(0)) as u64,
        _ => 0,
    })
}

/// Parameters removed by each group's removal count, attributed in group-id
/// order at the widths left by earlier groups. Because each step is an exact
/// closed-form difference, the total equals dense minus slim parameters even
/// when a layer loses both input and output channels.
pub fn predict_removed_params(
    graph: &Graph,
    groups: &Groups,
    removal_counts: &BTreeMap<usize, usize>,
) -> Result<BTreeMap<usize, u64>> {
    let mut width: Vec<usize> = groups.groups.iter().map(|g| g.len).collect();
    let mut out = BTreeMap::new();
    for (&gid, &r) in removal_counts {
        let g = groups.get(gid)?;
        if r > g.len {
            return Err(Error::Group {
                group: gid,
                detail: format!("cannot remove {r} of {} channels", g.len),
            });
        }
        let touched: BTreeSet<NodeId> = g.slots.iter().map(|s| s.node).collect();
        let mut before = 0;
        for id in &touched {
            before += node_params_at(graph, groups, *id, &width)?;
        }
        width[gid] -= r;
        let mut after = 0;
        for id in &touched {
            after += node_params_at(graph, groups, *id, &width)?;
        }
        out.insert(gid, before - after);
    }
    Ok(out)
}
