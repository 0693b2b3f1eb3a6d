//! IEEE binary16 conversion and half-precision weight export simulation.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};

/// Largest finite binary16 value.
pub const F16_MAX: f32 = 65504.0;

/// Round-to-nearest-even conversion, with subnormals and overflow to ±inf.
pub fn f32_to_f16_bits(x: f32) -> u16 {
    let b = x.to_bits();
    let sign = ((b >> 16) & 0x8000) as u16;
    let exp = ((b >> 23) & 0xff) as i32;
    let man = b & 0x007f_ffff;
    if exp == 0xff {
        let nan = if man != 0 { 0x0200 | (man >> 13) as u16 } else { 0 };
        return sign | 0x7c00 | nan;
    }
    let e = exp - 127 + 15;
    if e >= 0x1f {
        return sign | 0x7c00;
    }
    if e <= 0 {
        if e < -10 {
            return sign;
        }
        let m = man | 0x0080_0000;
        let shift = (14 - e) as u32;
        let half = 1u32 << (shift - 1);
        let rem = m & ((1u32 << shift) - 1);
        let mut r = m >> shift;
        if rem > half || (rem == half && r & 1 == 1) {
            r += 1;
        }
        return sign | r as u16;
    }
    let mut r = ((e as u32) << 10) | (man >> 13);
    let rem = man & 0x1fff;
    // a carry out of the mantissa correctly bumps the exponent (up to inf)
    if rem > 0x1000 || (rem == 0x1000 && r & 1 == 1) {
        r += 1;
    }
    sign | r as u16
}

pub fn f16_bits_to_f32(h: u16) -> f32 {
    let sign = ((h & 0x8000) as u32) << 16;
    let exp = ((h >> 10) & 0x1f) as u32;
    let man = (h & 0x03ff) as u32;
    let bits = match (exp, man) {
        (0, 0) => sign,
        (0, m) => {
            // subnormal: value = m * 2^-24
            let v = m as f32 * (1.0 / 16_777_216.0);
            return if sign != 0 { -v } else { v };
        }
        (0x1f, 0) => sign | 0x7f80_0000,
        (0x1f, m) => sign | 0x7fc0_0000 | (m << 13),
        (e, m) => sign | ((e + 127 - 15) << 23) | (m << 13),
    };
    f32::from_bits(bits)
}

/// Value after a round trip through binary16.
pub fn round_f16(x: f32) -> f32 {
    f16_bits_to_f32(f32_to_f16_bits(x))
}

#[derive(Clone, Debug, PartialEq)]
pub struct CastEntry {
    pub node: NodeId,
    pub param: String,
    pub elements: usize,
    pub max_abs_err: f32,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CastReport {
    pub entries: Vec<CastEntry>,
}

impl CastReport {
    pub fn max_abs_err(&self) -> f32 {
        self.entries.iter().fold(0.0, |m, e| m.max(e.max_abs_err))
    }
}

/// Copy of `graph` with every parameter rounded through binary16, plus the
/// per-tensor cast error. Magnitudes beyond [`F16_MAX`] are an error rather
/// than a silent infinity.
pub fn to_half_precision(graph: &Graph) -> Result<(Graph, CastReport)> {
    let mut g = graph.clone();
    let mut report = CastReport::default();
    for n in g.nodes_mut() {
        for (name, t) in n.params.iter_mut() {
            let mut max_err = 0.0f32;
            for v in t.data_mut() {
                if !v.is_finite() || v.abs() > F16_MAX {
                    return Err(Error::HalfOverflow {
                        name: format!("{}:{}", n.name, name),
                        value: *v,
                    });
                }
                let r = round_f16(*v);
                max_err = max_err.max((r - *v).abs());
                *v = r;
            }
            report.entries.push(CastEntry {
                node: n.id,
                param: name.clone(),
                elements: t.len(),
                max_abs_err: max_err,
            });
        }
    }
    Ok((g, report))
}
