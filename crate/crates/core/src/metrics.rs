//! Parameter, FLOP and memory accounting, and report tables.
//!
//! FLOP table (per sample, at the given input size):
//!
//! | node        | FLOPs                                   |
//! |-------------|-----------------------------------------|
//! | conv        | `2*Cout*Cin*Kh*Kw*Ho*Wo` + `Cout*Ho*Wo` bias adds |
//! | linear      | `2*out*in` + `out` bias adds            |
//! | batchnorm   | 2 per output element                    |
//! | silu        | 4 per output element                    |
//! | sigmoid     | 3 per output element                    |
//! | add, scale  | 1 per output element                    |
//! | modulate    | 4 per output element                    |
//! | fakequant   | 4 per output element                    |
//! | maxpool     | 1 per output element                    |
//! | global pool | 1 per input element                     |
//! | concat, split, input, output | 0                      |
//!
//! FLOPs are twice the multiply-accumulate count; totals scale with batch.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt::Write as _;

use crate::depgraph::elementwise_flops;
use crate::error::{Error, Result};
use crate::graph::{infer_shapes, node_trainable_formula, Graph, NodeId, NodeKind, PortRef};
use crate::pruner::achieved_ratio_percent;

pub const FLOP_CONVENTION: &str = "FLOPs = 2 x multiply-accumulates (+ bias adds and elementwise ops)";

/// Trainable parameters: conv/linear weights and biases, batchnorm gamma and
/// beta, per-channel scales. Running statistics are excluded.
pub fn count_params(graph: &Graph) -> u64 {
    graph.nodes().map(|n| node_trainable_formula(n).unwrap_or(0)).sum()
}

/// All stored parameter elements, including running statistics.
pub fn count_stored_elements(graph: &Graph) -> u64 {
    graph.nodes().flat_map(|n| n.params.values()).map(|t| t.len() as u64).sum()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct FlopCount {
    /// `2 * MACs` of conv and linear layers.
    pub mac_flops: u64,
    pub bias_flops: u64,
    /// Normalization, activation, pooling, add, scale, fake-quant.
    pub elementwise_flops: u64,
}

impl FlopCount {
    pub fn total(&self) -> u64 {
        self.mac_flops + self.bias_flops + self.elementwise_flops
    }

    pub fn gflops(&self) -> f64 {
        self.total() as f64 / 1e9
    }
}

/// FLOPs of one forward pass at `input_shape` (NCHW).
pub fn count_flops(graph: &Graph, input_shape: [usize; 4]) -> Result<FlopCount> {
    let shapes = infer_shapes(graph, input_shape)?;
    let mut f = FlopCount::default();
    for n in graph.nodes() {
        let out = shapes.get(&PortRef::new(n.id, 0));
        let elems = |s: &[usize]| s.iter().product::<usize>() as u64;
        match &n.kind {
            NodeKind::Conv { .. } => {
                let w = n.param("weight")?.shape();
                let o = out.expect("conv output");
                let spatial_out = (o[0] * o[2] * o[3]) as u64;
                f.mac_flops += 2 * (w[0] * w[1] * w[2] * w[3]) as u64 * spatial_out;
                f.bias_flops += w[0] as u64 * spatial_out;
            }
            NodeKind::Linear => {
                let w = n.param("weight")?.shape();
                let batch = out.expect("linear output")[0] as u64;
                f.mac_flops += 2 * (w[0] * w[1]) as u64 * batch;
                f.bias_flops += w[0] as u64 * batch;
            }
            NodeKind::GlobalAvgPool => {
                f.elementwise_flops += elems(&shapes[&n.inputs[0]]);
            }
            kind => {
                if let Some(o) = out {
                    f.elementwise_flops += elementwise_flops(kind) * elems(o);
                }
            }
        }
    }
    Ok(f)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MemoryEstimate {
    /// Every stored parameter element at the given precision.
    pub weight_bytes: u64,
    /// Peak simultaneously-live activation bytes over the topological
    /// schedule.
    pub scratch_bytes: u64,
}

fn in_place(kind: &NodeKind) -> bool {
    matches!(
        kind,
        NodeKind::BatchNorm { .. } | NodeKind::Act(_) | NodeKind::FakeQuant(_) | NodeKind::Scale
    )
}

/// Weight and activation memory at `precision_bits` (32 or 16).
///
/// The liveness walk keeps a tensor alive from its producer until its last
/// consumer runs (graph outputs stay alive). Unary channel-wise nodes
/// overwrite their input when they are its last reader.
pub fn estimate_memory(graph: &Graph, precision_bits: u32, input_shape: [usize; 4]) -> Result<MemoryEstimate> {
    if precision_bits != 32 && precision_bits != 16 {
        return Err(Error::invalid(format!("precision must be 32 or 16 bits, got {precision_bits}")));
    }
    let bpe = (precision_bits / 8) as u64;
    let shapes = infer_shapes(graph, input_shape)?;
    let order = graph.topo_order()?;
    let pos: BTreeMap<NodeId, usize> = order.iter().enumerate().map(|(i, id)| (*id, i)).collect();

    // buffer per port; in-place nodes alias their input's buffer
    let mut buffer_of: BTreeMap<PortRef, usize> = BTreeMap::new();
    let mut buffers: Vec<(u64, usize)> = Vec::new(); // (bytes, last use step)
    let mut peak = 0u64;
    let mut live: Vec<usize> = Vec::new();
    for (step, id) in order.iter().enumerate() {
        let n = graph.node(*id)?;
        for (p, _) in (0..n.kind.num_outputs()).enumerate() {
            let port = PortRef::new(*id, p as u16);
            let last = graph
                .consumers(port)
                .iter()
                .map(|(c, _)| {
                    let cn = graph.node(*c).expect("consumer exists");
                    if matches!(cn.kind, NodeKind::Output { .. }) {
                        usize::MAX
                    } else {
                        pos[c]
                    }
                })
                .max()
                .unwrap_or(step);
            let reuse = if in_place(&n.kind) {
                let src = buffer_of[&n.inputs[0]];
                (buffers[src].1 == step).then_some(src)
            } else {
                None
            };
            let b = match reuse {
                Some(src) => {
                    buffers[src].1 = last;
                    src
                }
                None => {
                    let bytes = shapes[&port].iter().product::<usize>() as u64 * bpe;
                    buffers.push((bytes, last));
                    live.push(buffers.len() - 1);
                    buffers.len() - 1
                }
            };
            buffer_of.insert(port, b);
        }
        let now: u64 = live.iter().map(|b| buffers[*b].0).sum();
        peak = peak.max(now);
        live.retain(|b| buffers[*b].1 > step);
    }
    Ok(MemoryEstimate {
        weight_bytes: count_stored_elements(graph) * bpe,
        scratch_bytes: peak,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Dense,
    Pruned,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Dense => "dense",
            Stage::Pruned => "pruned",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompressionReport {
    pub model: String,
    pub stage: Stage,
    pub precision_bits: u32,
    pub channel_fraction: f64,
    /// Parameters of the dense model this row is compared against.
    pub dense_params: u64,
    pub params: u64,
    pub flops: u64,
    pub input_shape: [usize; 4],
    pub weight_bytes: u64,
    pub engine_bytes: u64,
    pub val_acc: Option<f64>,
}

impl CompressionReport {
    /// Report for `graph`; `engine_bytes` is the exact serialized size at
    /// this precision, supplied by the caller.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        model: &str,
        graph: &Graph,
        stage: Stage,
        precision_bits: u32,
        channel_fraction: f64,
        dense_params: u64,
        input_shape: [usize; 4],
        engine_bytes: u64,
        val_acc: Option<f64>,
    ) -> Result<Self> {
        let mem = estimate_memory(graph, precision_bits, input_shape)?;
        Ok(CompressionReport {
            model: model.into(),
            stage,
            precision_bits,
            channel_fraction,
            dense_params,
            params: count_params(graph),
            flops: count_flops(graph, input_shape)?.total(),
            input_shape,
            weight_bytes: mem.weight_bytes,
            engine_bytes,
            val_acc,
        })
    }

    pub fn ratio_percent(&self) -> Result<f64> {
        achieved_ratio_percent(self.dense_params, self.params)
    }

    pub fn gflops(&self) -> f64 {
        self.flops as f64 / 1e9
    }
}

const COLUMNS: [&str; 12] = [
    "model",
    "stage",
    "precision",
    "channel_fraction",
    "pruning_ratio_pct",
    "params",
    "gflops",
    "mflops",
    "weight_bytes",
    "engine_bytes",
    "engine_mb",
    "val_acc",
];

fn header_line(r: &CompressionReport) -> String {
    let [n, c, h, w] = r.input_shape;
    format!("# {FLOP_CONVENTION}; input {n}x{c}x{h}x{w}")
}

fn row(r: &CompressionReport) -> Result<Vec<String>> {
    Ok(alloc::vec![
        r.model.clone(),
        r.stage.as_str().into(),
        format!("fp{}", r.precision_bits),
        format!("{:.2}", r.channel_fraction),
        format!("{:.1}", r.ratio_percent()?),
        format!("{}", r.params),
        format!("{:.2}", r.gflops()),
        format!("{:.2}", r.flops as f64 / 1e6),
        format!("{}", r.weight_bytes),
        format!("{}", r.engine_bytes),
        format!("{:.3}", r.engine_bytes as f64 / 1e6),
        match r.val_acc {
            Some(a) => format!("{a:.4}"),
            None => "-".into(),
        },
    ])
}

/// Comma-separated and aligned-text renderings of the reports. Both start
/// with a header line giving the FLOP convention and input size.
pub fn emit_report(reports: &[CompressionReport]) -> Result<(String, String)> {
    let first = reports.first().ok_or_else(|| Error::invalid("no reports to emit"))?;
    let rows: Vec<Vec<String>> = reports.iter().map(row).collect::<Result<_>>()?;
    let header = header_line(first);

    let mut csv = String::new();
    let _ = writeln!(csv, "{header}");
    let _ = writeln!(csv, "{}", COLUMNS.join(","));
    for r in &rows {
        let _ = writeln!(csv, "{}", r.join(","));
    }

    let mut widths: Vec<usize> = COLUMNS.iter().map(|c| c.len()).collect();
    for r in &rows {
        for (w, cell) in widths.iter_mut().zip(r) {
            *w = (*w).max(cell.len());
        }
    }
    let mut text = String::new();
    let _ = writeln!(text, "{header}");
    let line = |cells: &[&str], out: &mut String| {
        let parts: Vec<String> = cells
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(i, (c, w))| if i < 3 { format!("{c:<w$}") } else { format!("{c:>w$}") })
            .collect();
        let _ = writeln!(out, "{}", parts.join("  ").trim_end());
    };
    line(&COLUMNS, &mut text);
    for r in &rows {
        let cells: Vec<&str> = r.iter().map(String::as_str).collect();
        line(&cells, &mut text);
    }
    Ok((csv, text))
}
