//! `.twnm` model container.
//!
//! Layout (all integers little-endian):
//!
//! | bytes            | content                                   |
//! |------------------|-------------------------------------------|
//! | 0..4             | magic `TWNM`                              |
//! | 4..8             | version, `u32` = 1                        |
//! | 8..16            | topology length `T`, `u64`                |
//! | 16..16+T         | topology document (JSON, sorted keys)     |
//! | ..len-4          | weight blob (f32 or binary16 elements)    |
//! | len-4..len       | CRC32 of the blob                         |
//!
//! Tensor directory offsets and lengths count *elements* of the entry's
//! dtype, so the topology of a model is the same size at both precisions and
//! an fp16 file is exactly half a blob smaller than its fp32 twin.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use slimgraph_core::fakequant::{Histogram, QuantPhase, QuantState, HIST_BINS};
use slimgraph_core::fp16::{f16_bits_to_f32, f32_to_f16_bits, F16_MAX};
use slimgraph_core::graph::{infer_shapes, Activation, Graph, Node, NodeId, NodeKind, PortRef};
use slimgraph_core::Tensor;
use thiserror::Error;

pub const MAGIC: [u8; 4] = *b"TWNM";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 16;
const CRC_LEN: usize = 4;

#[derive(Debug, Error)]
pub enum ModelIoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("bad magic {0:02x?}, expected \"TWNM\"")]
    BadMagic([u8; 4]),

    #[error("unsupported format version {found} (this build reads version {expected})")]
    UnsupportedVersion { found: u32, expected: u32 },

    #[error("file truncated: {0}")]
    Truncated(String),

    #[error("weight blob checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    Checksum { stored: u32, computed: u32 },

    #[error("topology document: {0}")]
    Topology(String),

    #[error("precision must be 32 or 16 bits, got {0}")]
    Precision(u32),

    #[error(transparent)]
    Core(#[from] slimgraph_core::Error),
}

pub type Result<T, E = ModelIoError> = std::result::Result<T, E>;

fn topo_err(detail: impl Into<String>) -> ModelIoError {
    ModelIoError::Topology(detail.into())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    node: u32,
    param: String,
    dtype: String,
    shape: Vec<usize>,
    /// In elements from the start of the blob.
    offset: u64,
    /// In elements.
    length: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct NodeDoc {
    id: u32,
    name: String,
    op: String,
    attrs: Map<String, Value>,
    /// `[producer, port]` pairs.
    inputs: Vec<[u32; 2]>,
    protected: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TopologyDoc {
    graph: String,
    next_id: u32,
    precision: u32,
    nodes: Vec<NodeDoc>,
    tensors: Vec<TensorEntry>,
}

fn dtype(precision: u32) -> Result<&'static str> {
    match precision {
        32 => Ok("f32"),
        16 => Ok("f16"),
        p => Err(ModelIoError::Precision(p)),
    }
}

fn kind_attrs(kind: &NodeKind) -> Map<String, Value> {
    let v = match kind {
        NodeKind::Input {
            channels,
            height,
            width,
        } => json!({"channels": channels, "height": height, "width": width}),
        NodeKind::Output { name } => json!({ "name": name }),
        NodeKind::Conv { stride, padding } => json!({"stride": stride, "padding": padding}),
        NodeKind::BatchNorm { eps } => json!({ "eps": eps }),
        NodeKind::MaxPool {
            kernel,
            stride,
            padding,
        } => json!({"kernel": kernel, "stride": stride, "padding": padding}),
        NodeKind::Split { sizes } => json!({ "sizes": sizes }),
        NodeKind::FakeQuant(q) => {
            // sparse histogram: [bin, count] for nonzero bins
            let bins: Vec<[u64; 2]> = q
                .histogram
                .counts()
                .iter()
                .enumerate()
                .filter(|(_, c)| **c > 0)
                .map(|(i, c)| [i as u64, *c])
                .collect();
            json!({
                "phase": q.phase.as_str(),
                "amax": q.amax,
                "scale": q.scale,
                "hist_range": q.histogram.range(),
                "hist_max": q.histogram.max(),
                "hist_bins": bins,
            })
        }
        _ => json!({}),
    };
    match v {
        Value::Object(m) => m,
        _ => unreachable!("attrs are built as objects"),
    }
}

fn get<'a, T: Deserialize<'a>>(attrs: &'a Map<String, Value>, key: &str, op: &str) -> Result<T> {
    let v = attrs
        .get(key)
        .ok_or_else(|| topo_err(format!("{op} node lacks attribute `{key}`")))?;
    T::deserialize(v).map_err(|e| topo_err(format!("{op} attribute `{key}`: {e}")))
}

fn kind_from_doc(op: &str, a: &Map<String, Value>) -> Result<NodeKind> {
    Ok(match op {
        "input" => NodeKind::Input {
            channels: get(a, "channels", op)?,
            height: get(a, "height", op)?,
            width: get(a, "width", op)?,
        },
        "output" => NodeKind::Output { name: get(a, "name", op)? },
        "conv" => NodeKind::Conv {
            stride: get(a, "stride", op)?,
            padding: get(a, "padding", op)?,
        },
        "batchnorm" => NodeKind::BatchNorm { eps: get(a, "eps", op)? },
        "silu" => NodeKind::Act(Activation::Silu),
        "sigmoid" => NodeKind::Act(Activation::Sigmoid),
        "maxpool" => NodeKind::MaxPool {
            kernel: get(a, "kernel", op)?,
            stride: get(a, "stride", op)?,
            padding: get(a, "padding", op)?,
        },
        "concat" => NodeKind::Concat,
        "add" => NodeKind::Add,
        "split" => NodeKind::Split { sizes: get(a, "sizes", op)? },
        "scale" => NodeKind::Scale,
        "modulate" => NodeKind::Modulate,
        "gap" => NodeKind::GlobalAvgPool,
        "linear" => NodeKind::Linear,
        "fakequant" => {
            let phase: String = get(a, "phase", op)?;
            let phase = QuantPhase::parse(&phase).ok_or_else(|| topo_err(format!("unknown quantizer phase `{phase}`")))?;
            let bins: Vec<[u64; 2]> = get(a, "hist_bins", op)?;
            let mut counts = vec![0u64; HIST_BINS];
            for [i, c] in bins {
                let slot = counts
                    .get_mut(i as usize)
                    .ok_or_else(|| topo_err(format!("histogram bin {i} out of range")))?;
                *slot = c;
            }
            let histogram = Histogram::from_parts(counts, get(a, "hist_range", op)?, get(a, "hist_max", op)?)?;
            NodeKind::FakeQuant(QuantState {
                phase,
                histogram,
                amax: get(a, "amax", op)?,
                scale: get(a, "scale", op)?,
            })
        }
        other => return Err(topo_err(format!("unknown op `{other}`"))),
    })
}

/// Serialize `graph` with weights stored at `precision` (32 or 16) bits.
pub fn encode(graph: &Graph, precision: u32) -> Result<Vec<u8>> {
    let dt = dtype(precision)?;
    graph.validate()?;
    let mut nodes = Vec::with_capacity(graph.len());
    let mut tensors = Vec::new();
    let mut blob: Vec<u8> = Vec::new();
    let mut offset = 0u64;
    for n in graph.nodes() {
        nodes.push(NodeDoc {
            id: n.id.0,
            name: n.name.clone(),
            op: n.kind.tag().into(),
            attrs: kind_attrs(&n.kind),
            inputs: n.inputs.iter().map(|p| [p.node.0, p.port as u32]).collect(),
            protected: n.protected,
        });
        for (pname, t) in &n.params {
            for &v in t.data() {
                if precision == 16 {
                    if !v.is_finite() || v.abs() > F16_MAX {
                        return Err(slimgraph_core::Error::HalfOverflow {
                            name: format!("{}:{pname}", n.name),
                            value: v,
                        }
                        .into());
                    }
                    blob.extend_from_slice(&f32_to_f16_bits(v).to_le_bytes());
                } else {
                    blob.extend_from_slice(&v.to_le_bytes());
                }
            }
            tensors.push(TensorEntry {
                node: n.id.0,
                param: pname.clone(),
                dtype: dt.into(),
                shape: t.shape().to_vec(),
                offset,
                length: t.len() as u64,
            });
            offset += t.len() as u64;
        }
    }
    let doc = TopologyDoc {
        graph: graph.name().into(),
        next_id: graph.next_id(),
        precision,
        nodes,
        tensors,
    };
    // going through Value sorts every object's keys
    let value = serde_json::to_value(&doc).map_err(|e| topo_err(e.to_string()))?;
    let topo = serde_json::to_string_pretty(&value).map_err(|e| topo_err(e.to_string()))?;

    let mut out = Vec::with_capacity(HEADER_LEN + topo.len() + blob.len() + CRC_LEN);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(topo.len() as u64).to_le_bytes());
    out.extend_from_slice(topo.as_bytes());
    out.extend_from_slice(&blob);
    out.extend_from_slice(&crc32fast::hash(&blob).to_le_bytes());
    Ok(out)
}

/// Exact size of [`encode`]'s output.
pub fn encoded_len(graph: &Graph, precision: u32) -> Result<u64> {
    Ok(encode(graph, precision)?.len() as u64)
}

fn element_size(dt: &str) -> Result<usize> {
    match dt {
        "f32" => Ok(4),
        "f16" => Ok(2),
        other => Err(topo_err(format!("unknown dtype `{other}`"))),
    }
}

/// Parse a container; fp16 weights are widened to f32. The graph is
/// validated and shape-checked at its declared input size.
pub fn decode(bytes: &[u8]) -> Result<(Graph, u32)> {
    if bytes.len() < HEADER_LEN + CRC_LEN {
        return Err(ModelIoError::Truncated(format!(
            "{} bytes is shorter than the fixed header and checksum",
            bytes.len()
        )));
    }
    let magic: [u8; 4] = bytes[0..4].try_into().expect("4 bytes");
    if magic != MAGIC {
        return Err(ModelIoError::BadMagic(magic));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(ModelIoError::UnsupportedVersion {
            found: version,
            expected: VERSION,
        });
    }
    let topo_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let avail = (bytes.len() - HEADER_LEN - CRC_LEN) as u64;
    if topo_len > avail {
        return Err(ModelIoError::Truncated(format!(
            "topology claims {topo_len} bytes but only {avail} remain"
        )));
    }
    let topo_end = HEADER_LEN + topo_len as usize;
    let blob = &bytes[topo_end..bytes.len() - CRC_LEN];
    let stored = u32::from_le_bytes(bytes[bytes.len() - CRC_LEN..].try_into().expect("4 bytes"));
    let doc: TopologyDoc =
        serde_json::from_slice(&bytes[HEADER_LEN..topo_end]).map_err(|e| topo_err(e.to_string()))?;
    let computed = crc32fast::hash(blob);
    if stored != computed {
        return Err(ModelIoError::Checksum { stored, computed });
    }
    let dt = dtype(doc.precision)?;
    let esize = element_size(dt)?;

    // directory: in bounds, consistent, non-overlapping
    let blob_elems = (blob.len() / esize) as u64;
    if blob.len() % esize != 0 {
        return Err(topo_err(format!("blob length {} is not a multiple of {esize}", blob.len())));
    }
    let mut spans: Vec<(u64, u64, usize)> = Vec::with_capacity(doc.tensors.len());
    for (i, e) in doc.tensors.iter().enumerate() {
        if e.dtype != dt {
            return Err(topo_err(format!(
                "tensor {}:{} has dtype {} in a {}-bit file",
                e.node, e.param, e.dtype, doc.precision
            )));
        }
        let n: u64 = e.shape.iter().map(|d| *d as u64).product();
        if n != e.length {
            return Err(topo_err(format!(
                "tensor {}:{} shape {:?} holds {n} elements, directory says {}",
                e.node, e.param, e.shape, e.length
            )));
        }
        let end = e.offset.checked_add(e.length).filter(|end| *end <= blob_elems).ok_or_else(|| {
            ModelIoError::Truncated(format!(
                "tensor {}:{} [{}, +{}) lies outside the {blob_elems}-element blob",
                e.node, e.param, e.offset, e.length
            ))
        })?;
        spans.push((e.offset, end, i));
    }
    spans.sort_unstable();
    for w in spans.windows(2) {
        if w[1].0 < w[0].1 {
            let (a, b) = (&doc.tensors[w[0].2], &doc.tensors[w[1].2]);
            return Err(topo_err(format!(
                "tensors {}:{} and {}:{} overlap",
                a.node, a.param, b.node, b.param
            )));
        }
    }

    let mut params: BTreeMap<u32, BTreeMap<String, Tensor>> = BTreeMap::new();
    for e in &doc.tensors {
        let start = e.offset as usize * esize;
        let raw = &blob[start..start + e.length as usize * esize];
        let data: Vec<f32> = if esize == 4 {
            raw.chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect()
        } else {
            raw.chunks_exact(2)
                .map(|c| f16_bits_to_f32(u16::from_le_bytes(c.try_into().expect("2 bytes"))))
                .collect()
        };
        let t = Tensor::new(e.shape.clone(), data)?;
        if params.entry(e.node).or_default().insert(e.param.clone(), t).is_some() {
            return Err(topo_err(format!("tensor {}:{} listed twice", e.node, e.param)));
        }
    }

    let mut graph = Graph::new(doc.graph);
    for nd in doc.nodes {
        if graph.node(NodeId(nd.id)).is_ok() {
            return Err(topo_err(format!("node id {} appears twice", nd.id)));
        }
        let inputs = nd
            .inputs
            .iter()
            .map(|[n, p]| {
                u16::try_from(*p)
                    .map(|p| PortRef::new(NodeId(*n), p))
                    .map_err(|_| topo_err(format!("port {p} out of range on node {}", nd.id)))
            })
            .collect::<Result<Vec<_>>>()?;
        graph.insert(Node {
            id: NodeId(nd.id),
            name: nd.name,
            kind: kind_from_doc(&nd.op, &nd.attrs)?,
            inputs,
            params: params.remove(&nd.id).unwrap_or_default(),
            protected: nd.protected,
        });
    }
    if let Some(orphan) = params.keys().next() {
        return Err(topo_err(format!("tensors reference missing node {orphan}")));
    }
    graph.reserve_ids(doc.next_id);
    graph.validate()?;
    let (c, h, w) = graph.input_chw()?;
    infer_shapes(&graph, [1, c, h, w])?;
    Ok((graph, doc.precision))
}

/// Write atomically (temp file in the same directory, then rename).
/// Returns the number of bytes written.
pub fn save(graph: &Graph, precision: u32, path: &Path) -> Result<u64> {
    let bytes = encode(graph, precision)?;
    write_atomic(path, &bytes)?;
    Ok(bytes.len() as u64)
}

pub fn load(path: &Path) -> Result<(Graph, u32)> {
    let bytes = fs::read(path).map_err(|source| ModelIoError::Io {
        path: path.into(),
        source,
    })?;
    decode(&bytes)
}

/// Replace `path` with `bytes` so readers see either the old or the new file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let io = |source| ModelIoError::Io {
        path: path.into(),
        source,
    };
    let file_name = path
        .file_name()
        .ok_or_else(|| io(std::io::Error::new(std::io::ErrorKind::InvalidInput, "path has no file name")))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(file_name);
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result.map_err(io)
}
