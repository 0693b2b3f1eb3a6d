//! Desk-scale networks assembled from the module zoo.

use alloc::format;
use core::fmt;
use core::str::FromStr;

use super::{Graph, GraphBuilder, PortRef};
use crate::error::{Error, Result};

/// Total downsampling factor of every preset backbone.
pub const TOTAL_STRIDE: usize = 32;

/// Name of the auxiliary classification output.
pub const CLS_OUTPUT: &str = "cls";

/// Names of the three detection outputs (strides 8, 16, 32).
pub const DETECT_OUTPUTS: [&str; 3] = ["det_p3", "det_p4", "det_p5"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Preset {
    /// Adds an SPAB block at the stride-16 stage.
    EcoweedMini,
    /// Plain C3K2 / SPPF / C2PSA backbone.
    Y11Mini,
    /// Replaces the stride-16 C3K2 with a residual A2C2f.
    Y12Mini,
}

impl Preset {
    pub const ALL: [Preset; 3] = [Preset::EcoweedMini, Preset::Y11Mini, Preset::Y12Mini];

    pub fn as_str(self) -> &'static str {
        match self {
            Preset::EcoweedMini => "ecoweed_mini",
            Preset::Y11Mini => "y11_mini",
            Preset::Y12Mini => "y12_mini",
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown preset `{s}` (expected ecoweed_mini, y11_mini or y12_mini)")))
    }
}

/// Build a preset for `(channels, height, width)` inputs with a three-scale
/// detect head and an auxiliary `gap -> linear` classifier named [`CLS_OUTPUT`].
pub fn build_mini_net(preset: Preset, input_chw: (usize, usize, usize), n_classes: usize, seed: u64) -> Result<Graph> {
    let (_, h, w) = input_chw;
    if h % TOTAL_STRIDE != 0 || w % TOTAL_STRIDE != 0 || h == 0 || w == 0 {
        return Err(Error::invalid(format!(
            "input {h}x{w} is not divisible by the total stride {TOTAL_STRIDE}"
        )));
    }
    if n_classes < 2 {
        return Err(Error::invalid(format!("need at least 2 classes, got {n_classes}")));
    }
    let (mut b, x) = GraphBuilder::new(preset.as_str(), input_chw, seed)?;

    let x = b.scoped("stem", |b| b.conv_block(x, 8, 3, 2))?;
    let x = b.scoped("down1", |b| b.conv_block(x, 16, 3, 2))?;
    let x = b.c3k2(x, 16, 1, true)?;
    let x = b.scoped("down2", |b| b.conv_block(x, 24, 3, 2))?;
    let p3 = b.c3k2(x, 24, 1, true)?;
    let x = b.scoped("down3", |b| b.conv_block(p3, 32, 3, 2))?;
    let p4 = match preset {
        Preset::EcoweedMini => {
            let y = b.c3k2(x, 32, 1, true)?;
            b.spab(y)?
        }
        Preset::Y11Mini => b.c3k2(x, 32, 1, true)?,
        Preset::Y12Mini => b.a2c2f(x, 32, 2, true)?,
    };
    let x = b.scoped("down4", |b| b.conv_block(p4, 48, 3, 2))?;
    let x = b.sppf(x, 48, 5)?;
    let p5 = b.c2psa(x, 48, 1)?;

    let neck: [PortRef; 3] = {
        let mut out = [p3; 3];
        for (i, p) in [p3, p4, p5].into_iter().enumerate() {
            let c = b.channels(p);
            out[i] = b.scoped(&format!("neck{i}"), |b| b.conv_block(p, c, 1, 1))?;
        }
        out
    };
    let heads = b.detect_head(&neck, n_classes)?;
    for (o, name) in heads.into_iter().zip(DETECT_OUTPUTS) {
        b.output(o, name);
    }

    let logits = b.scoped("aux", |b| {
        let g = b.global_avg_pool(p5);
        b.linear(g, n_classes)
    })?;
    b.output(logits, CLS_OUTPUT);
    b.finish()
}
