//! Simulated signed 8-bit activation quantization.
//!
//! Quantizers sit on the input edge of every non-protected conv. They start
//! disabled (identity), collect a histogram of `|x|` while observing (still
//! identity), and quantize-dequantize once active.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::graph::exec::{execute, BnMode};
use crate::graph::{Graph, NodeId, NodeKind, PortRef};
use crate::tensor::Tensor;

pub const QMIN: i32 = -128;
pub const QMAX: i32 = 127;
pub const HIST_BINS: usize = 2048;
/// Fraction of observed mass (in 1/10000) that amax must cover.
pub const PERCENTILE_BP: u64 = 9999;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QuantPhase {
    Disabled,
    Observe,
    Active,
}

impl QuantPhase {
    pub fn as_str(self) -> &'static str {
        match self {
            QuantPhase::Disabled => "disabled",
            QuantPhase::Observe => "observe",
            QuantPhase::Active => "active",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "disabled" => Some(QuantPhase::Disabled),
            "observe" => Some(QuantPhase::Observe),
            "active" => Some(QuantPhase::Active),
            _ => None,
        }
    }
}

/// Uniform histogram of `|x|` over `[0, range]`. The range starts at the
/// first nonzero batch maximum and doubles (merging adjacent bins) whenever a
/// larger value arrives, so earlier counts are never re-binned inexactly.
#[derive(Clone, Debug, PartialEq)]
pub struct Histogram {
    counts: Vec<u64>,
    range: f32,
    max: f32,
    total: u64,
}

impl Default for Histogram {
    fn default() -> Self {
        Self::new()
    }
}

impl Histogram {
    pub fn new() -> Self {
        Histogram {
            counts: vec![0; HIST_BINS],
            range: 0.0,
            max: 0.0,
            total: 0,
        }
    }

    /// Rebuild a histogram from stored state (used when loading models).
    pub fn from_parts(counts: Vec<u64>, range: f32, max: f32) -> Result<Self> {
        if counts.len() != HIST_BINS {
            return Err(Error::invalid(format!("histogram needs {HIST_BINS} bins, got {}", counts.len())));
        }
        if !(range.is_finite() && max.is_finite() && range >= 0.0 && max >= 0.0 && max <= range) {
            return Err(Error::invalid(format!("histogram range {range} / max {max} are inconsistent")));
        }
        let total = counts.iter().sum();
        Ok(Histogram {
            counts,
            range,
            max,
            total,
        })
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn max(&self) -> f32 {
        self.max
    }

    pub fn range(&self) -> f32 {
        self.range
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn observe(&mut self, data: &[f32]) {
        let batch_max = data.iter().fold(0.0f32, |m, v| m.max(v.abs()));
        if self.range == 0.0 && batch_max > 0.0 {
            self.range = batch_max;
        }
        while batch_max > self.range {
            for i in 0..HIST_BINS / 2 {
                self.counts[i] = self.counts[2 * i] + self.counts[2 * i + 1];
            }
            self.counts[HIST_BINS / 2..].fill(0);
            self.range *= 2.0;
        }
        self.max = self.max.max(batch_max);
        self.total += data.len() as u64;
        if self.range == 0.0 {
            // all zeros so far: they belong in bin 0 whatever the range becomes
            self.counts[0] += data.len() as u64;
            return;
        }
        let inv = HIST_BINS as f64 / self.range as f64;
        for v in data {
            let b = ((v.abs() as f64) * inv) as usize;
            self.counts[b.min(HIST_BINS - 1)] += 1;
        }
    }

    /// Upper edge of bin `i`; the last edge is exactly the range.
    pub fn edge(&self, i: usize) -> f32 {
        if i + 1 >= HIST_BINS {
            self.range
        } else {
            ((i + 1) as f64 * self.range as f64 / HIST_BINS as f64) as f32
        }
    }

    /// Smallest bin edge whose cumulative count covers the percentile,
    /// clipped to the observed maximum. `None` when nothing nonzero was seen.
    pub fn percentile_amax(&self) -> Option<f32> {
        if self.max == 0.0 || self.total == 0 {
            return None;
        }
        let need = self.total as u128 * PERCENTILE_BP as u128;
        let mut cum: u128 = 0;
        for (i, c) in self.counts.iter().enumerate() {
            cum += *c as u128;
            if cum * 10_000 >= need {
                return Some(self.edge(i).min(self.max));
            }
        }
        Some(self.max)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuantState {
    pub phase: QuantPhase,
    pub histogram: Histogram,
    /// Calibrated absolute maximum; 0 before calibration.
    pub amax: f32,
    /// `amax / 127`; 0 before calibration.
    pub scale: f32,
}

impl Default for QuantState {
    fn default() -> Self {
        Self::new()
    }
}

impl QuantState {
    pub fn new() -> Self {
        QuantState {
            phase: QuantPhase::Disabled,
            histogram: Histogram::new(),
            amax: 0.0,
            scale: 0.0,
        }
    }

    /// Enter the observe phase with an empty histogram. Allowed from any
    /// phase: recalibration restarts observation.
    pub fn begin_observe(&mut self) {
        self.histogram = Histogram::new();
        self.phase = QuantPhase::Observe;
    }

    pub fn observe(&mut self, data: &[f32]) {
        if self.phase == QuantPhase::Observe {
            self.histogram.observe(data);
        }
    }

    /// Fix amax and scale from the histogram and switch to active.
    pub fn finalize(&mut self, node: NodeId) -> Result<()> {
        if self.phase != QuantPhase::Observe {
            return Err(Error::Calibration {
                node: node.0,
                detail: format!("cannot finalize from phase {}", self.phase.as_str()),
            });
        }
        let amax = self.histogram.percentile_amax().ok_or_else(|| Error::Calibration {
            node: node.0,
            detail: String::from("observed activations are all zero; amax is undefined"),
        })?;
        self.amax = amax;
        self.scale = amax / QMAX as f32;
        self.phase = QuantPhase::Active;
        Ok(())
    }
}

/// Integer code of `x` at step `scale`: round half to even, then clamp.
pub fn quantize(x: f32, scale: f32) -> i32 {
    let q = libm::rint(x as f64 / scale as f64);
    q.clamp(QMIN as f64, QMAX as f64) as i32
}

pub fn qdq_scalar(x: f32, scale: f32) -> f32 {
    quantize(x, scale) as f32 * scale
}

pub fn qdq(x: &Tensor, scale: f32) -> Tensor {
    x.map(|v| qdq_scalar(v, scale))
}

/// Clipped straight-through gradient.
pub fn qdq_backward(upstream: &Tensor, x: &Tensor, scale: f32) -> Tensor {
    let lo = QMIN as f64 * scale as f64;
    let hi = QMAX as f64 * scale as f64;
    let data = upstream
        .data()
        .iter()
        .zip(x.data())
        .map(|(g, v)| {
            let v = *v as f64;
            if v >= lo && v <= hi {
                *g
            } else {
                0.0
            }
        })
        .collect();
    Tensor::new(upstream.shape().to_vec(), data).expect("shape copied from upstream")
}

/// Insert a disabled quantizer on the input edge of every non-protected conv.
pub fn insert_fakequant(graph: &Graph) -> Result<Graph> {
    if graph.has_fakequant() {
        return Err(Error::invalid("graph is already instrumented with fake-quant nodes"));
    }
    let mut g = graph.clone();
    let convs: Vec<(NodeId, String, PortRef)> = graph
        .nodes()
        .filter(|n| matches!(n.kind, NodeKind::Conv { .. }) && !n.protected)
        .map(|n| (n.id, n.name.clone(), n.inputs[0]))
        .collect();
    for (conv, name, src) in convs {
        let fq_name = match name.rsplit_once('.') {
            Some((prefix, _)) => format!("{prefix}.fq"),
            None => String::from("fq"),
        };
        let fq = g.push(fq_name, NodeKind::FakeQuant(QuantState::new()), vec![src], BTreeMap::new(), false);
        g.node_mut(conv)?.inputs[0] = PortRef::new(fq, 0);
    }
    Ok(g)
}

/// Set every quantizer to `phase` without touching calibration data.
pub fn set_phase(graph: &mut Graph, phase: QuantPhase) {
    for n in graph.nodes_mut() {
        if let NodeKind::FakeQuant(q) = &mut n.kind {
            q.phase = phase;
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CalibEntry {
    pub node: NodeId,
    pub amax: f32,
    pub scale: f32,
    pub samples: u64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CalibrationReport {
    pub entries: Vec<CalibEntry>,
}

/// Observe all batches with batch-statistics normalization, then fix every
/// quantizer's amax/scale and activate it.
pub fn calibrate(graph: &Graph, batches: &[Tensor]) -> Result<(Graph, CalibrationReport)> {
    if batches.is_empty() {
        return Err(Error::invalid("calibration needs at least one batch"));
    }
    if !graph.has_fakequant() {
        return Err(Error::invalid("graph has no fake-quant nodes to calibrate"));
    }
    let mut g = graph.clone();
    for n in g.nodes_mut() {
        if let NodeKind::FakeQuant(q) = &mut n.kind {
            q.begin_observe();
        }
    }
    for batch in batches {
        let ex = execute(&g, batch, BnMode::Batch, None)?;
        for (id, v) in &ex.observed {
            if let NodeKind::FakeQuant(q) = &mut g.node_mut(*id)?.kind {
                q.observe(ex.tape.value(*v).data());
            }
        }
    }
    let mut report = CalibrationReport::default();
    for n in g.nodes_mut() {
        if let NodeKind::FakeQuant(q) = &mut n.kind {
            q.finalize(n.id)?;
            report.entries.push(CalibEntry {
                node: n.id,
                amax: q.amax,
                scale: q.scale,
                samples: q.histogram.total(),
            });
        }
    }
    Ok((g, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_examples() {
        assert_eq!(qdq_scalar(0.0, 0.1), 0.0);
        assert_eq!(quantize(0.26, 0.1), 3);
        assert!((qdq_scalar(0.26, 0.1) - 0.3).abs() < 1e-6);
        assert_eq!(quantize(20.0, 0.1), 127);
        assert!((qdq_scalar(20.0, 0.1) - 12.7).abs() < 1e-5);
        assert_eq!(quantize(-1000.0, 0.1), -128);
    }

    #[test]
    fn ties_round_to_even() {
        assert_eq!(quantize(0.5, 1.0), 0);
        assert_eq!(quantize(1.5, 1.0), 2);
        assert_eq!(quantize(2.5, 1.0), 2);
        assert_eq!(quantize(-2.5, 1.0), -2);
    }

    #[test]
    fn ste_clips_outside_range() {
        let x = Tensor::new(vec![3], vec![0.5, 1000.0, -12.8]).unwrap();
        let g = Tensor::full(&[3], 2.0);
        assert_eq!(qdq_backward(&g, &x, 0.1).data(), &[2.0, 0.0, 2.0]);
    }

    #[test]
    fn constant_activation_gives_exact_amax() {
        let mut q = QuantState::new();
        q.begin_observe();
        q.observe(&[-3.25; 100]);
        q.observe(&[3.25; 7]);
        q.finalize(NodeId(4)).unwrap();
        assert_eq!(q.amax, 3.25);
        assert_eq!(q.scale, 3.25 / 127.0);
        assert_eq!(q.phase, QuantPhase::Active);
    }

    #[test]
    fn zeros_before_range_are_kept() {
        let mut h = Histogram::new();
        h.observe(&[0.0; 10]);
        h.observe(&[1.0]);
        assert_eq!(h.total(), 11);
        assert_eq!(h.counts()[0], 10);
        assert_eq!(h.counts()[HIST_BINS - 1], 1);
    }

    #[test]
    fn range_doubling_merges_bins() {
        let mut h = Histogram::new();
        h.observe(&[1.0, 0.25]);
        h.observe(&[3.0]);
        assert_eq!(h.range(), 4.0);
        assert_eq!(h.counts().iter().sum::<u64>(), 3);
        assert_eq!(h.counts()[(0.25f64 / 4.0 * 2048.0) as usize], 1);
    }

    #[test]
    fn all_zero_names_node() {
        let mut q = QuantState::new();
        q.begin_observe();
        q.observe(&[0.0; 4]);
        match q.finalize(NodeId(9)) {
            Err(Error::Calibration { node, .. }) => assert_eq!(node, 9),
            other => panic!("unexpected {other:?}"),
        }
    }
}
