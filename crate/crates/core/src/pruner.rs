//! l1 channel scoring, removal selection, slim rebuild, and the zero-embedding
//! oracle used to check the rebuild.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::depgraph::{resolve_groups, ChannelGroup, Groups, SlotPort};
use crate::error::{Error, Result};
use crate::graph::{infer_shapes, Graph, NodeId, NodeKind};

/// Channels every group keeps at minimum.
pub const MIN_KEEP: usize = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PrunePlan {
    /// Group id -> sorted channel indices to remove. Groups without removals
    /// are omitted.
    pub removals: BTreeMap<usize, Vec<usize>>,
    pub channel_fraction: f64,
    /// Training epoch at which the plan is applied, if scheduled.
    pub epoch_trigger: Option<usize>,
}

impl PrunePlan {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn removal_counts(&self) -> BTreeMap<usize, usize> {
        self.removals.iter().map(|(g, v)| (*g, v.len())).collect()
    }

    pub fn total_removed(&self) -> usize {
        self.removals.values().map(Vec::len).sum()
    }
}

/// Per-channel `sum |W[c, ..]|` over every conv that produces part of the
/// group; producers coupled by residual adds contribute elementwise.
pub fn l1_importance(graph: &Graph, group: &ChannelGroup) -> Result<Vec<f64>> {
    let mut scores = alloc::vec![0.0f64; group.len];
    let mut found = false;
    for atom in &group.atoms {
        let n = graph.node(atom.node)?;
        if !matches!(n.kind, NodeKind::Conv { .. }) {
            continue;
        }
        found = true;
        let w = n.param("weight")?;
        let row = w.len() / w.shape()[0];
        for (j, s) in scores.iter_mut().enumerate() {
            let r = atom.start + j;
            *s += w.data()[r * row..(r + 1) * row].iter().map(|v| v.abs() as f64).sum::<f64>();
        }
    }
    if !found {
        return Err(Error::Group {
            group: group.id,
            detail: String::from("no conv produces this group; it cannot be scored"),
        });
    }
    Ok(scores)
}

/// Lowest-scoring `floor(fraction * L)` indices (capped at `L - min_keep`),
/// ties removing the higher index first. Returned sorted ascending.
pub fn select_channels(scores: &[f64], fraction: f64, min_keep: usize) -> Result<Vec<usize>> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::invalid(format!("channel fraction must be in [0, 1), got {fraction}")));
    }
    let l = scores.len();
    // the epsilon absorbs products like 0.3 * 10 = 2.9999.. style representation error
    let want = libm::floor(fraction * l as f64 + 1e-9) as usize;
    let n = want.min(l.saturating_sub(min_keep));
    let mut idx: Vec<usize> = (0..l).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(b.cmp(&a)));
    let mut out: Vec<usize> = idx.into_iter().take(n).collect();
    out.sort_unstable();
    Ok(out)
}

/// Uniform-fraction plan over every unprotected group.
pub fn build_plan(graph: &Graph, groups: &Groups, fraction: f64, epoch_trigger: Option<usize>) -> Result<PrunePlan> {
    let mut plan = PrunePlan {
        removals: BTreeMap::new(),
        channel_fraction: fraction,
        epoch_trigger,
    };
    for g in &groups.groups {
        if g.protected {
            continue;
        }
        let scores = l1_importance(graph, g)?;
        let rm = select_channels(&scores, fraction, MIN_KEEP)?;
        if !rm.is_empty() {
            plan.removals.insert(g.id, rm);
        }
    }
    Ok(plan)
}

/// Check a plan against resolved groups; errors name the offending group.
pub fn validate_plan(groups: &Groups, plan: &PrunePlan) -> Result<()> {
    for (&gid, rm) in &plan.removals {
        let g = groups.get(gid)?;
        let err = |detail: String| Error::Group { group: gid, detail };
        if g.protected && !rm.is_empty() {
            return Err(err(String::from("group is protected and admits no removals")));
        }
        if rm.windows(2).any(|w| w[0] >= w[1]) {
            return Err(err(String::from("removal indices must be strictly increasing")));
        }
        if let Some(&bad) = rm.iter().find(|&&i| i >= g.len) {
            return Err(err(format!("removal index {bad} out of range for length {}", g.len)));
        }
        if rm.len() + MIN_KEEP > g.len {
            return Err(err(format!("removing {} of {} channels leaves fewer than {MIN_KEEP}", rm.len(), g.len)));
        }
    }
    Ok(())
}

/// Surviving channel indices of one port under `plan`.
pub fn port_keep(groups: &Groups, plan: &PrunePlan, node: NodeId, port: SlotPort) -> Vec<usize> {
    let mut keep = Vec::new();
    for &(g, off) in groups.port_layout(node, port) {
        let rm: BTreeSet<usize> = plan.removals.get(&g).map(|v| v.iter().copied().collect()).unwrap_or_default();
        keep.extend((0..groups.groups[g].len).filter(|j| !rm.contains(j)).map(|j| off + j));
    }
    keep
}

/// Removed channel indices of one port under `plan`.
pub fn port_removed(groups: &Groups, plan: &PrunePlan, node: NodeId, port: SlotPort) -> Vec<usize> {
    let mut out = Vec::new();
    for &(g, off) in groups.port_layout(node, port) {
        if let Some(rm) = plan.removals.get(&g) {
            out.extend(rm.iter().map(|j| off + j));
        }
    }
    out
}

/// Rebuild the graph with the planned channels deleted everywhere they
/// appear. Surviving values are copied bit-exactly.
pub fn apply_prune(graph: &Graph, plan: &PrunePlan) -> Result<Graph> {
    let groups = resolve_groups(graph)?;
    apply_prune_with(graph, &groups, plan)
}

pub fn apply_prune_with(graph: &Graph, groups: &Groups, plan: &PrunePlan) -> Result<Graph> {
    validate_plan(groups, plan)?;
    let mut g = graph.clone();
    let ids: Vec<NodeId> = graph.nodes().map(|n| n.id).collect();
    for id in ids {
        let keep_out = port_keep(groups, plan, id, SlotPort::Out(0));
        let keep_in = port_keep(groups, plan, id, SlotPort::In(0));
        let node = g.node_mut(id)?;
        match &mut node.kind {
            NodeKind::Conv { .. } | NodeKind::Linear => {
                let w = node.param("weight")?.select(0, &keep_out)?.select(1, &keep_in)?;
                let b = node.param("bias")?.select(0, &keep_out)?;
                node.params.insert("weight".into(), w);
                node.params.insert("bias".into(), b);
            }
            NodeKind::BatchNorm { .. } | NodeKind::Scale => {
                for t in node.params.values_mut() {
                    *t = t.select(0, &keep_out)?;
                }
            }
            NodeKind::Split { sizes } => {
                for (p, s) in sizes.iter_mut().enumerate() {
                    *s = port_keep(groups, plan, id, SlotPort::Out(p as u16)).len();
                }
            }
            NodeKind::Input { channels, .. } => {
                if keep_out.len() != *channels {
                    return Err(Error::graph(id.0, "input channels cannot be pruned"));
                }
            }
            _ => {}
        }
    }
    let (c, h, w) = g.input_chw()?;
    infer_shapes(&g, [1, c, h, w]).map_err(|e| Error::invalid(format!("slim graph failed shape inference: {e}")))?;
    Ok(g)
}

/// Same-shape graph in which every consumer's input columns for removed
/// channels are zeroed, so removed channels can no longer influence any
/// surviving value. Its outputs match [`apply_prune`]'s.
pub fn zero_embed_oracle(graph: &Graph, plan: &PrunePlan) -> Result<Graph> {
    let groups = resolve_groups(graph)?;
    validate_plan(&groups, plan)?;
    let mut g = graph.clone();
    let ids: Vec<NodeId> = graph.nodes().map(|n| n.id).collect();
    for id in ids {
        let node = g.node_mut(id)?;
        if matches!(node.kind, NodeKind::Conv { .. } | NodeKind::Linear) {
            let rm = port_removed(&groups, plan, id, SlotPort::In(0));
            if let Some(w) = node.params.get_mut("weight") {
                w.zero_along(1, &rm);
            }
        }
    }
    Ok(g)
}

/// `1 - slim / dense`.
pub fn achieved_ratio(dense_params: u64, slim_params: u64) -> Result<f64> {
    if dense_params == 0 || slim_params == 0 {
        return Err(Error::invalid("parameter counts must be positive"));
    }
    if slim_params > dense_params {
        return Err(Error::invalid(format!(
            "slim model ({slim_params}) is larger than dense model ({dense_params})"
        )));
    }
    Ok(1.0 - slim_params as f64 / dense_params as f64)
}

/// [`achieved_ratio`] as a percentage rounded to one decimal.
pub fn achieved_ratio_percent(dense_params: u64, slim_params: u64) -> Result<f64> {
    let r = achieved_ratio(dense_params, slim_params)?;
    Ok(libm::round(r * 1000.0) / 10.0)
}
