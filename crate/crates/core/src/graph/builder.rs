use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{infer_shapes, Activation, Graph, NodeId, NodeKind, PortRef};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Incremental graph construction with seeded initialization and a scope
/// stack for readable node names.
pub struct GraphBuilder {
    graph: Graph,
    rng: ChaCha8Rng,
    channels: BTreeMap<PortRef, usize>,
    scope: Vec<String>,
    protect: bool,
    counters: BTreeMap<String, usize>,
}

impl GraphBuilder {
    /// Start a graph with an input node of `(channels, height, width)`.
    pub fn new(name: &str, chw: (usize, usize, usize), seed: u64) -> Result<(Self, PortRef)> {
        let (c, h, w) = chw;
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::invalid(format!("input dims must be positive, got {chw:?}")));
        }
        let mut b = GraphBuilder {
            graph: Graph::new(name),
            rng: ChaCha8Rng::seed_from_u64(seed),
            channels: BTreeMap::new(),
            scope: Vec::new(),
            protect: false,
            counters: BTreeMap::new(),
        };
        let x = b.push(
            "input",
            NodeKind::Input {
                channels: c,
                height: h,
                width: w,
            },
            vec![],
            BTreeMap::new(),
            c,
        );
        Ok((b, x))
    }

    pub fn channels(&self, p: PortRef) -> usize {
        self.channels[&p]
    }

    fn path(&mut self, leaf: &str) -> String {
        let mut s = self.scope.join(".");
        if !s.is_empty() {
            s.push('.');
        }
        s.push_str(leaf);
        let n = self.counters.entry(s.clone()).or_insert(0);
        *n += 1;
        if *n > 1 {
            s = format!("{s}{}", *n - 1);
        }
        s
    }

    fn push(
        &mut self,
        leaf: &str,
        kind: NodeKind,
        inputs: Vec<PortRef>,
        params: BTreeMap<String, Tensor>,
        out_channels: usize,
    ) -> PortRef {
        let name = self.path(leaf);
        let id = self.graph.push(name, kind, inputs, params, self.protect);
        let p = PortRef::new(id, 0);
        self.channels.insert(p, out_channels);
        p
    }

    /// Run `f` with `name` appended to the naming scope.
    pub fn scoped<T>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> Result<T>) -> Result<T> {
        let unique = {
            let full = self.path(name);
            full.rsplit('.').next().unwrap_or(name).to_string()
        };
        self.scope.push(unique);
        let r = f(self);
        self.scope.pop();
        r
    }

    fn uniform(&mut self, shape: &[usize], bound: f32) -> Tensor {
        let rng = &mut self.rng;
        Tensor::from_fn(shape, |_| rng.gen_range(-bound..=bound))
    }

    pub fn conv(&mut self, x: PortRef, cout: usize, k: usize, stride: usize) -> Result<PortRef> {
        let cin = self.channels(x);
        if cout == 0 || k == 0 || stride == 0 {
            return Err(Error::invalid(format!("conv needs positive cout/k/stride, got {cout}/{k}/{stride}")));
        }
        let bound = libm::sqrtf(1.0 / (cin * k * k) as f32);
        let mut params = BTreeMap::new();
        params.insert("weight".into(), self.uniform(&[cout, cin, k, k], bound));
        params.insert("bias".into(), self.uniform(&[cout], bound));
        Ok(self.push(
            "conv",
            NodeKind::Conv {
                stride,
                padding: k / 2,
            },
            vec![x],
            params,
            cout,
        ))
    }

    pub fn batchnorm(&mut self, x: PortRef) -> PortRef {
        let c = self.channels(x);
        let mut params = BTreeMap::new();
        params.insert("gamma".into(), Tensor::full(&[c], 1.0));
        params.insert("beta".into(), Tensor::zeros(&[c]));
        params.insert("running_mean".into(), Tensor::zeros(&[c]));
        params.insert("running_var".into(), Tensor::full(&[c], 1.0));
        self.push("bn", NodeKind::BatchNorm { eps: 1e-5 }, vec![x], params, c)
    }

    pub fn act(&mut self, x: PortRef, a: Activation) -> PortRef {
        let c = self.channels(x);
        let leaf = match a {
            Activation::Silu => "silu",
            Activation::Sigmoid => "sigmoid",
        };
        self.push(leaf, NodeKind::Act(a), vec![x], BTreeMap::new(), c)
    }

    pub fn maxpool(&mut self, x: PortRef, kernel: usize, stride: usize, padding: usize) -> PortRef {
        let c = self.channels(x);
        self.push(
            "pool",
            NodeKind::MaxPool {
                kernel,
                stride,
                padding,
            },
            vec![x],
            BTreeMap::new(),
            c,
        )
    }

    pub fn concat(&mut self, xs: &[PortRef]) -> PortRef {
        let c = xs.iter().map(|p| self.channels(*p)).sum();
        self.push("concat", NodeKind::Concat, xs.to_vec(), BTreeMap::new(), c)
    }

    pub fn add(&mut self, a: PortRef, b: PortRef) -> Result<PortRef> {
        let (ca, cb) = (self.channels(a), self.channels(b));
        if ca != cb {
            return Err(Error::invalid(format!(
                "residual add needs equal channels: node {} has {ca}, node {} has {cb}",
                a.node, b.node
            )));
        }
        Ok(self.push("add", NodeKind::Add, vec![a, b], BTreeMap::new(), ca))
    }

    pub fn split(&mut self, x: PortRef, sizes: &[usize]) -> Result<Vec<PortRef>> {
        let c = self.channels(x);
        if sizes.iter().sum::<usize>() != c || sizes.contains(&0) {
            return Err(Error::invalid(format!("split sizes {sizes:?} do not partition {c}")));
        }
        let p = self.push(
            "split",
            NodeKind::Split { sizes: sizes.to_vec() },
            vec![x],
            BTreeMap::new(),
            sizes[0],
        );
        let mut outs = vec![p];
        for (i, &s) in sizes.iter().enumerate().skip(1) {
            let q = PortRef::new(p.node, i as u16);
            self.channels.insert(q, s);
            outs.push(q);
        }
        Ok(outs)
    }

    pub fn scale(&mut self, x: PortRef, init: f32) -> PortRef {
        let c = self.channels(x);
        let mut params = BTreeMap::new();
        params.insert("scale".into(), Tensor::full(&[c], init));
        self.push("scale", NodeKind::Scale, vec![x], params, c)
    }

    pub fn modulate(&mut self, x: PortRef, gate: PortRef) -> Result<PortRef> {
        let c = self.channels(x);
        if self.channels(gate) != c {
            return Err(Error::invalid("modulation gate must match the block input channels"));
        }
        Ok(self.push("modulate", NodeKind::Modulate, vec![x, gate], BTreeMap::new(), c))
    }

    pub fn global_avg_pool(&mut self, x: PortRef) -> PortRef {
        let c = self.channels(x);
        self.push("gap", NodeKind::GlobalAvgPool, vec![x], BTreeMap::new(), c)
    }

    pub fn linear(&mut self, x: PortRef, out: usize) -> Result<PortRef> {
        let fin = self.channels(x);
        if out == 0 {
            return Err(Error::invalid("linear needs at least one output"));
        }
        let bound = libm::sqrtf(1.0 / fin as f32);
        let mut params = BTreeMap::new();
        params.insert("weight".into(), self.uniform(&[out, fin], bound));
        params.insert("bias".into(), self.uniform(&[out], bound));
        Ok(self.push("linear", NodeKind::Linear, vec![x], params, out))
    }

    pub fn output(&mut self, x: PortRef, name: &str) -> NodeId {
        let p = self.push(
            name,
            NodeKind::Output { name: name.into() },
            vec![x],
            BTreeMap::new(),
            0,
        );
        self.channels.remove(&p);
        p.node
    }

    /// Validate and shape-check at the declared input size (batch 1).
    pub fn finish(self) -> Result<Graph> {
        let g = self.graph;
        g.validate()?;
        let (c, h, w) = g.input_chw()?;
        infer_shapes(&g, [1, c, h, w])?;
        Ok(g)
    }

    // ---- module zoo ----

    /// conv -> batchnorm -> SiLU, padding `k / 2`.
    pub fn conv_block(&mut self, x: PortRef, cout: usize, k: usize, stride: usize) -> Result<PortRef> {
        self.scoped("cb", |b| {
            let c = b.conv(x, cout, k, stride)?;
            let n = b.batchnorm(c);
            Ok(b.act(n, Activation::Silu))
        })
    }

    fn bottleneck(&mut self, x: PortRef, shortcut: bool) -> Result<PortRef> {
        let h = self.channels(x);
        self.scoped("m", |b| {
            let y = b.conv_block(x, h, 3, 1)?;
            let y = b.conv_block(y, h, 3, 1)?;
            if shortcut {
                b.add(x, y)
            } else {
                Ok(y)
            }
        })
    }

    /// CSP block: cv1 projection split into a passthrough half and a half
    /// through `n` bottlenecks, concatenated and aggregated by cv2.
    pub fn c3k2(&mut self, x: PortRef, cout: usize, n: usize, shortcut: bool) -> Result<PortRef> {
        if cout % 2 != 0 || cout == 0 {
            return Err(Error::invalid(format!("c3k2 output channels must be even, got {cout}")));
        }
        let h = cout / 2;
        self.scoped("c3k2", |b| {
            let y = b.scoped("cv1", |b| b.conv_block(x, 2 * h, 1, 1))?;
            let halves = b.split(y, &[h, h])?;
            let mut m = halves[1];
            for _ in 0..n {
                m = b.bottleneck(m, shortcut)?;
            }
            let cat = b.concat(&[halves[0], m]);
            b.scoped("cv2", |b| b.conv_block(cat, cout, 1, 1))
        })
    }

    /// Attention stand-in: per-channel content scale, 1x1 feed-forward conv,
    /// residual add. Input and output channel counts are equal.
    pub fn attention_stub(&mut self, x: PortRef) -> Result<PortRef> {
        let c = self.channels(x);
        self.scoped("attn", |b| {
            let s = b.scale(x, 1.0);
            let f = b.conv(s, c, 1, 1)?;
            b.add(x, f)
        })
    }

    pub fn c2psa(&mut self, x: PortRef, cout: usize, n: usize) -> Result<PortRef> {
        if cout % 2 != 0 || cout == 0 {
            return Err(Error::invalid(format!("c2psa output channels must be even, got {cout}")));
        }
        let h = cout / 2;
        self.scoped("c2psa", |b| {
            let y = b.scoped("cv1", |b| b.conv_block(x, 2 * h, 1, 1))?;
            let halves = b.split(y, &[h, h])?;
            let mut m = halves[1];
            for _ in 0..n {
                m = b.attention_stub(m)?;
            }
            let cat = b.concat(&[halves[0], m]);
            b.scoped("cv2", |b| b.conv_block(cat, cout, 1, 1))
        })
    }

    /// cv1 (cin -> cin/2), three chained stride-1 pools, 4-way concat, cv2.
    pub fn sppf(&mut self, x: PortRef, cout: usize, pool_k: usize) -> Result<PortRef> {
        if pool_k % 2 == 0 {
            return Err(Error::invalid(format!("sppf pool kernel must be odd, got {pool_k}")));
        }
        let h = (self.channels(x) / 2).max(1);
        self.scoped("sppf", |b| {
            let y = b.scoped("cv1", |b| b.conv_block(x, h, 1, 1))?;
            let p1 = b.maxpool(y, pool_k, 1, pool_k / 2);
            let p2 = b.maxpool(p1, pool_k, 1, pool_k / 2);
            let p3 = b.maxpool(p2, pool_k, 1, pool_k / 2);
            let cat = b.concat(&[y, p1, p2, p3]);
            b.scoped("cv2", |b| b.conv_block(cat, cout, 1, 1))
        })
    }

    /// Three conv blocks whose output gates the block input:
    /// `x * (sigmoid(out3) - 0.5) + x`.
    pub fn spab(&mut self, x: PortRef) -> Result<PortRef> {
        let c = self.channels(x);
        self.scoped("spab", |b| {
            let o1 = b.scoped("c1_r", |b| b.conv_block(x, c, 3, 1))?;
            let o2 = b.scoped("c2_r", |b| b.conv_block(o1, c, 3, 1))?;
            let o3 = b.scoped("c3_r", |b| b.conv_block(o2, c, 3, 1))?;
            if b.channels(o3) != c {
                return Err(Error::invalid("spab c3_r must return the block input width"));
            }
            b.modulate(x, o3)
        })
    }

    /// cv1 -> `n` attention stubs -> cv2, optionally `x + gamma * cv2(..)` with
    /// gamma initialized to zero.
    pub fn a2c2f(&mut self, x: PortRef, cout: usize, n: usize, residual: bool) -> Result<PortRef> {
        let cin = self.channels(x);
        if residual && cin != cout {
            return Err(Error::invalid(format!("a2c2f residual needs cin == cout, got {cin} vs {cout}")));
        }
        let hidden = (cout / 2).max(1);
        self.scoped("a2c2f", |b| {
            let mut y = b.scoped("cv1", |b| b.conv_block(x, hidden, 1, 1))?;
            for _ in 0..n {
                y = b.attention_stub(y)?;
            }
            let y = b.scoped("cv2", |b| b.conv_block(y, cout, 1, 1))?;
            if residual {
                let g = b.scoped("gamma", |b| Ok(b.scale(y, 0.0)))?;
                b.add(x, g)
            } else {
                Ok(y)
            }
        })
    }

    /// Per-scale box (4) and class (`n_classes`) branches concatenated into a
    /// `4 + n_classes` map. Every node built here is protected.
    pub fn detect_head(&mut self, inputs: &[PortRef], n_classes: usize) -> Result<Vec<PortRef>> {
        if inputs.is_empty() {
            return Err(Error::invalid("detect head needs at least one scale"));
        }
        if n_classes == 0 {
            return Err(Error::invalid("detect head needs at least one class"));
        }
        let was = core::mem::replace(&mut self.protect, true);
        let r = self.scoped("detect", |b| {
            let mut outs = Vec::with_capacity(inputs.len());
            for (i, &x) in inputs.iter().enumerate() {
                let o = b.scoped(&format!("s{i}"), |b| {
                    let bx = b.scoped("box", |b| {
                        let y = b.conv_block(x, 8, 3, 1)?;
                        b.conv(y, 4, 1, 1)
                    })?;
                    let cl = b.scoped("cls", |b| {
                        let y = b.conv_block(x, 8, 3, 1)?;
                        b.conv(y, n_classes, 1, 1)
                    })?;
                    Ok(b.concat(&[bx, cl]))
                })?;
                outs.push(o);
            }
            Ok(outs)
        });
        self.protect = was;
        r
    }
}

/// Standalone graph `input -> f(..) -> output` used for module-level tests and
/// the `build_*` entry points.
pub fn fragment(
    name: &str,
    chw: (usize, usize, usize),
    seed: u64,
    f: impl FnOnce(&mut GraphBuilder, PortRef) -> Result<PortRef>,
) -> Result<Graph> {
    let (mut b, x) = GraphBuilder::new(name, chw, seed)?;
    let y = f(&mut b, x)?;
    b.output(y, "out");
    b.finish()
}

const FRAGMENT_HW: usize = 16;

pub fn build_conv_block(cin: usize, cout: usize, k: usize, stride: usize) -> Result<Graph> {
    if cin == 0 || cout == 0 {
        return Err(Error::invalid("conv block channels must be positive"));
    }
    fragment("conv_block", (cin, FRAGMENT_HW, FRAGMENT_HW), 0, |b, x| b.conv_block(x, cout, k, stride))
}

pub fn build_c3k2(cin: usize, cout: usize, n: usize, shortcut: bool) -> Result<Graph> {
    fragment("c3k2", (cin, FRAGMENT_HW, FRAGMENT_HW), 0, |b, x| b.c3k2(x, cout, n, shortcut))
}

pub fn build_c2psa(cin: usize, cout: usize, n: usize) -> Result<Graph> {
    fragment("c2psa", (cin, FRAGMENT_HW, FRAGMENT_HW), 0, |b, x| b.c2psa(x, cout, n))
}

pub fn build_sppf(cin: usize, cout: usize, pool_k: usize) -> Result<Graph> {
    fragment("sppf", (cin, FRAGMENT_HW, FRAGMENT_HW), 0, |b, x| b.sppf(x, cout, pool_k))
}

pub fn build_spab(c: usize) -> Result<Graph> {
    if c == 0 {
        return Err(Error::invalid("spab channels must be positive"));
    }
    fragment("spab", (c, FRAGMENT_HW, FRAGMENT_HW), 0, |b, x| b.spab(x))
}

pub fn build_a2c2f(cin: usize, cout: usize, n: usize, residual: bool) -> Result<Graph> {
    fragment("a2c2f", (cin, FRAGMENT_HW, FRAGMENT_HW), 0, |b, x| b.a2c2f(x, cout, n, residual))
}

/// Detect head over one input per scale; scale `i` has `cin_list[i]`
/// channels at spatial size `16 >> i`.
pub fn build_detect_head(cin_list: &[usize], n_classes: usize) -> Result<Graph> {
    if cin_list.is_empty() {
        return Err(Error::invalid("detect head needs at least one scale"));
    }
    let (mut b, x) = GraphBuilder::new("detect", (cin_list[0], FRAGMENT_HW, FRAGMENT_HW), 0)?;
    let mut feats = vec![x];
    let mut cur = x;
    for &c in &cin_list[1..] {
        cur = b.conv_block(cur, c, 3, 2)?;
        feats.push(cur);
    }
    let outs = b.detect_head(&feats, n_classes)?;
    for (i, o) in outs.into_iter().enumerate() {
        b.output(o, &format!("det{i}"));
    }
    b.finish()
}
