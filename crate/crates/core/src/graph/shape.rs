use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use super::{Graph, NodeKind, PortRef};
use crate::error::{Error, Result};
use crate::ops::window_out;

/// Inferred shape of every output port.
pub type ShapeMap = BTreeMap<PortRef, Vec<usize>>;

fn edge_err(p: PortRef, consumer: u32, detail: String) -> Error {
    Error::Edge {
        producer: p.node.0,
        port: p.port,
        consumer,
        detail,
    }
}

/// Propagate `input_shape` (N, C, H, W) through the graph in topological
/// order. The first inconsistent edge is reported.
pub fn infer_shapes(graph: &Graph, input_shape: [usize; 4]) -> Result<ShapeMap> {
    let mut shapes: ShapeMap = BTreeMap::new();
    for id in graph.topo_order()? {
        let node = graph.node(id)?;
        let ins: Vec<&Vec<usize>> = node
            .inputs
            .iter()
            .map(|p| {
                shapes
                    .get(p)
                    .ok_or_else(|| edge_err(*p, id.0, String::from("producer port has no inferred shape")))
            })
            .collect::<Result<_>>()?;
        let rank4 = |i: usize| -> Result<[usize; 4]> {
            match ins[i].as_slice() {
                &[n, c, h, w] => Ok([n, c, h, w]),
                s => Err(edge_err(node.inputs[i], id.0, format!("{} expects NCHW, got {s:?}", node.kind.tag()))),
            }
        };
        let out: Vec<Vec<usize>> = match &node.kind {
            NodeKind::Input { channels, .. } => {
                if input_shape[1] != *channels || input_shape.contains(&0) {
                    return Err(Error::graph(
                        id.0,
                        format!("input shape {input_shape:?} incompatible with {channels} declared channels"),
                    ));
                }
                vec![input_shape.to_vec()]
            }
            NodeKind::Output { .. } => vec![],
            NodeKind::Conv { stride, padding } => {
                let [n, c, h, w] = rank4(0)?;
                let wt = node.param("weight")?.shape();
                if wt[1] != c {
                    return Err(edge_err(
                        node.inputs[0],
                        id.0,
                        format!("conv `{}` expects {} input channels, producer gives {c}", node.name, wt[1]),
                    ));
                }
                let ho = window_out(h, wt[2], *stride, *padding);
                let wo = window_out(w, wt[3], *stride, *padding);
                match (ho, wo) {
                    (Some(ho), Some(wo)) => vec![vec![n, wt[0], ho, wo]],
                    _ => {
                        return Err(edge_err(
                            node.inputs[0],
                            id.0,
                            format!("spatial {h}x{w} too small for conv `{}`", node.name),
                        ))
                    }
                }
            }
            NodeKind::BatchNorm { .. } | NodeKind::Scale => {
                let s = rank4(0)?;
                let pname = if matches!(node.kind, NodeKind::Scale) { "scale" } else { "gamma" };
                let len = node.param(pname)?.len();
                if len != s[1] {
                    return Err(edge_err(
                        node.inputs[0],
                        id.0,
                        format!("`{}` has {len} channel params, producer gives {} channels", node.name, s[1]),
                    ));
                }
                vec![s.to_vec()]
            }
            NodeKind::Act(_) | NodeKind::FakeQuant(_) => vec![ins[0].clone()],
            NodeKind::MaxPool {
                kernel,
                stride,
                padding,
            } => {
                let [n, c, h, w] = rank4(0)?;
                match (window_out(h, *kernel, *stride, *padding), window_out(w, *kernel, *stride, *padding)) {
                    (Some(ho), Some(wo)) => vec![vec![n, c, ho, wo]],
                    _ => return Err(edge_err(node.inputs[0], id.0, String::from("spatial dims too small for pool"))),
                }
            }
            NodeKind::Concat => {
                let first = rank4(0)?;
                let mut c = 0;
                for i in 0..ins.len() {
                    let s = rank4(i)?;
                    if (s[0], s[2], s[3]) != (first[0], first[2], first[3]) {
                        return Err(edge_err(
                            node.inputs[i],
                            id.0,
                            format!("concat input {i} has dims {s:?}, first input {first:?}"),
                        ));
                    }
                    c += s[1];
                }
                vec![vec![first[0], c, first[2], first[3]]]
            }
            NodeKind::Add | NodeKind::Modulate => {
                if ins[0] != ins[1] {
                    return Err(Error::graph(
                        id.0,
                        format!(
                            "{} operands differ: node {} gives {:?}, node {} gives {:?}",
                            node.kind.tag(),
                            node.inputs[0].node,
                            ins[0],
                            node.inputs[1].node,
                            ins[1]
                        ),
                    ));
                }
                vec![ins[0].clone()]
            }
            NodeKind::Split { sizes } => {
                let [n, c, h, w] = rank4(0)?;
                if sizes.iter().sum::<usize>() != c {
                    return Err(edge_err(
                        node.inputs[0],
                        id.0,
                        format!("split sizes {sizes:?} do not sum to {c} channels"),
                    ));
                }
                sizes.iter().map(|&s| vec![n, s, h, w]).collect()
            }
            NodeKind::GlobalAvgPool => {
                let [n, c, _, _] = rank4(0)?;
                vec![vec![n, c]]
            }
            NodeKind::Linear => {
                let wt = node.param("weight")?.shape();
                match ins[0].as_slice() {
                    &[n, f] if f == wt[1] => vec![vec![n, wt[0]]],
                    s => {
                        return Err(edge_err(
                            node.inputs[0],
                            id.0,
                            format!("linear `{}` expects [N, {}], got {s:?}", node.name, wt[1]),
                        ))
                    }
                }
            }
        };
        for (p, s) in out.into_iter().enumerate() {
            shapes.insert(PortRef::new(id, p as u16), s);
        }
    }
    Ok(shapes)
}
