//! Line-oriented plan and calibration sidecars.
//!
//! Plan:
//!
//! ```text
//! # prune plan
//! channel_fraction 0.3
//! epoch_trigger 150
//! group 4 remove 0,3,7
//! ```
//!
//! Calibration (one `pass` header per calibration run):
//!
//! ```text
//! # calibration
//! pass 0
//! node 57 backbone.stem.fq amax 2.5 scale 0.019685 samples 131072
//! ```
//!
//! Blank lines and `#` comments are ignored. Floats are written in their
//! shortest round-tripping form.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use slimgraph_core::fakequant::{CalibEntry, CalibrationReport};
use slimgraph_core::graph::NodeId;
use slimgraph_core::pruner::PrunePlan;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
#[error("line {line}: {detail}")]
pub struct SidecarError {
    pub line: usize,
    pub detail: String,
}

fn err(line: usize, detail: impl Into<String>) -> SidecarError {
    SidecarError {
        line,
        detail: detail.into(),
    }
}

fn parse<T: FromStr>(line: usize, what: &str, s: &str) -> Result<T, SidecarError> {
    s.parse().map_err(|_| err(line, format!("bad {what} `{s}`")))
}

/// Non-comment lines with 1-based numbers.
fn lines(text: &str) -> impl Iterator<Item = (usize, Vec<&str>)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
        .map(|(i, l)| (i, l.split_whitespace().collect()))
}

pub fn write_plan(plan: &PrunePlan) -> String {
    let mut s = String::from("# prune plan\n");
    let _ = writeln!(s, "channel_fraction {}", plan.channel_fraction);
    match plan.epoch_trigger {
        Some(e) => {
            let _ = writeln!(s, "epoch_trigger {e}");
        }
        None => s.push_str("epoch_trigger none\n"),
    }
    for (g, rm) in &plan.removals {
        let idx: Vec<String> = rm.iter().map(|i| i.to_string()).collect();
        let _ = writeln!(s, "group {g} remove {}", idx.join(","));
    }
    s
}

/// Parse a plan. Structure is checked here; whether the indices fit a
/// graph is left to `pruner::validate_plan`.
pub fn read_plan(text: &str) -> Result<PrunePlan, SidecarError> {
    let mut plan = PrunePlan::empty();
    for (n, f) in lines(text) {
        match f.as_slice() {
            ["channel_fraction", v] => plan.channel_fraction = parse(n, "fraction", v)?,
            ["epoch_trigger", "none"] => plan.epoch_trigger = None,
            ["epoch_trigger", v] => plan.epoch_trigger = Some(parse(n, "epoch", v)?),
            ["group", g, "remove", idx] => {
                let g: usize = parse(n, "group id", g)?;
                let rm = idx
                    .split(',')
                    .map(|i| parse(n, "channel index", i))
                    .collect::<Result<Vec<usize>, _>>()?;
                if plan.removals.insert(g, rm).is_some() {
                    return Err(err(n, format!("group {g} listed twice")));
                }
            }
            _ => return Err(err(n, format!("unrecognized plan line `{}`", f.join(" ")))),
        }
    }
    Ok(plan)
}

/// Calibration entry with the quantizer's node name for readability.
#[derive(Clone, Debug, PartialEq)]
pub struct NamedCalib {
    pub name: String,
    pub entry: CalibEntry,
}

pub fn write_calib(passes: &[Vec<NamedCalib>]) -> String {
    let mut s = String::from("# calibration\n");
    for (p, entries) in passes.iter().enumerate() {
        let _ = writeln!(s, "pass {p}");
        for c in entries {
            let e = &c.entry;
            let _ = writeln!(
                s,
                "node {} {} amax {} scale {} samples {}",
                e.node.0, c.name, e.amax, e.scale, e.samples
            );
        }
    }
    s
}

pub fn read_calib(text: &str) -> Result<Vec<Vec<NamedCalib>>, SidecarError> {
    let mut passes: Vec<Vec<NamedCalib>> = Vec::new();
    for (n, f) in lines(text) {
        match f.as_slice() {
            ["pass", p] => {
                let p: usize = parse(n, "pass index", p)?;
                if p != passes.len() {
                    return Err(err(n, format!("expected pass {}, found {p}", passes.len())));
                }
                passes.push(Vec::new());
            }
            ["node", id, name, "amax", amax, "scale", scale, "samples", samples] => {
                let pass = passes.last_mut().ok_or_else(|| err(n, "entry before the first pass header"))?;
                pass.push(NamedCalib {
                    name: (*name).into(),
                    entry: CalibEntry {
                        node: NodeId(parse(n, "node id", id)?),
                        amax: parse(n, "amax", amax)?,
                        scale: parse(n, "scale", scale)?,
                        samples: parse(n, "sample count", samples)?,
                    },
                });
            }
            _ => return Err(err(n, format!("unrecognized calibration line `{}`", f.join(" ")))),
        }
    }
    Ok(passes)
}

/// Attach node names from `names` (node id -> name) to a report.
pub fn name_report(report: &CalibrationReport, names: &BTreeMap<NodeId, String>) -> Vec<NamedCalib> {
    report
        .entries
        .iter()
        .map(|e| NamedCalib {
            name: names.get(&e.node).cloned().unwrap_or_else(|| format!("node{}", e.node.0)),
            entry: e.clone(),
        })
        .collect()
}
