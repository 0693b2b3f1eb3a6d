use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::toytask::{Dataset, ToyTask};
use crate::depgraph::resolve_groups;
use crate::error::{Error, Result};
use crate::fakequant::{calibrate, insert_fakequant, CalibrationReport};
use crate::graph::exec::{execute, update_running_stats, BnMode};
use crate::graph::presets::CLS_OUTPUT;
use crate::graph::{Graph, NodeId};
use crate::metrics::count_params;
use crate::ops::argmax_rows;
use crate::pruner::{apply_prune_with, build_plan, PrunePlan};
use crate::tensor::Tensor;

pub const BN_MOMENTUM: f32 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub prune_epoch: Option<usize>,
    pub channel_fraction: f64,
    pub qat_enabled: bool,
    pub calibration_batches: usize,
    pub lr: f32,
    pub momentum: f32,
    pub batch_size: usize,
    pub seed: u64,
    /// Evaluate every `eval_every` epochs (and always at the last one);
    /// 0 evaluates only at the end.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 250,
            prune_epoch: None,
            channel_fraction: 0.0,
            qat_enabled: false,
            calibration_batches: 2,
            lr: 0.01,
            momentum: 0.9,
            batch_size: 16,
            seed: 0,
            eval_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if let Some(p) = self.prune_epoch {
            if p >= self.epochs {
                return Err(Error::invalid(format!(
                    "prune epoch {p} must be before the last epoch ({})",
                    self.epochs
                )));
            }
        }
        if !(0.0..1.0).contains(&self.channel_fraction) {
            return Err(Error::invalid(format!(
                "channel fraction must be in [0, 1), got {}",
                self.channel_fraction
            )));
        }
        if self.qat_enabled && self.calibration_batches == 0 {
            return Err(Error::invalid("QAT needs at least one calibration batch"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        if !self.lr.is_finite() || self.lr < 0.0 || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid(format!(
                "learning rate {} / momentum {} out of range",
                self.lr, self.momentum
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Dense,
    Pruned,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Dense => "dense",
            Phase::Pruned => "pruned",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLog {
    /// 1-based count of completed epochs.
    pub epoch: usize,
    pub train_loss: f64,
    /// NaN when the epoch was not evaluated.
    pub val_acc: f64,
    pub phase: Phase,
}

/// Outcome of pruning a trainer's graph.
#[derive(Clone, Debug, PartialEq)]
pub struct PruneOutcome {
    pub plan: PrunePlan,
    pub dense_params: u64,
    pub slim_params: u64,
    pub calibration: Option<CalibrationReport>,
}

/// Momentum SGD on the auxiliary classifier. Cloning a trainer forks the
/// run: graph, optimizer state and shuffling stream are all copied.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub graph: Graph,
    pub lr: f32,
    pub momentum: f32,
    pub batch_size: usize,
    pub epoch: usize,
    pub phase: Phase,
    pub log: Vec<EpochLog>,
    velocity: BTreeMap<(NodeId, String), Tensor>,
    rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(graph: Graph, config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        if graph.output_by_name(CLS_OUTPUT).is_none() {
            return Err(Error::invalid(format!("graph has no `{CLS_OUTPUT}` output to train")));
        }
        Ok(Trainer {
            graph,
            lr: config.lr,
            momentum: config.momentum,
            batch_size: config.batch_size,
            epoch: 0,
            phase: Phase::Dense,
            log: Vec::new(),
            velocity: BTreeMap::new(),
            rng: ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_0f_7a11),
        })
    }

    /// One gradient step; returns the batch loss.
    pub fn step(&mut self, x: &Tensor, labels: &[usize]) -> Result<f32> {
        let mut ex = execute(&self.graph, x, BnMode::Batch, Some(&[CLS_OUTPUT]))?;
        let logits = ex.outputs[CLS_OUTPUT];
        let loss = ex.tape.softmax_cross_entropy(logits, labels)?;
        let lv = ex.tape.value(loss).data()[0];
        if !lv.is_finite() {
            return Err(Error::Divergence {
                epoch: self.epoch,
                loss: lv,
            });
        }
        let grads = ex.tape.backward(loss)?;
        let stats = core::mem::take(&mut ex.bn_stats);
        for (id, st) in stats {
            let port = self.graph.node(id)?.inputs[0];
            let count = ex.tape.value(ex.ports[&port]).len() / st.0.len();
            update_running_stats(&mut self.graph, &BTreeMap::from([(id, st)]), count, BN_MOMENTUM)?;
        }
        for (pid, g) in grads.into_params() {
            let (node, name) = ex.params[pid.0 as usize].clone();
            let v = self
                .velocity
                .entry((node, name.clone()))
                .or_insert_with(|| Tensor::zeros(g.shape()));
            for (vv, gv) in v.data_mut().iter_mut().zip(g.data()) {
                *vv = self.momentum * *vv + gv;
            }
            let p = self
                .graph
                .node_mut(node)?
                .params
                .get_mut(&name)
                .expect("parameter registered by the executor");
            for (pv, vv) in p.data_mut().iter_mut().zip(v.data()) {
                *pv -= self.lr * vv;
            }
        }
        Ok(lv)
    }

    /// One shuffled pass over the training set; returns the mean batch loss.
    pub fn train_epoch(&mut self, data: &Dataset) -> Result<f64> {
        let mut idx: Vec<usize> = (0..data.len()).collect();
        idx.shuffle(&mut self.rng);
        let mut total = 0.0f64;
        let mut batches = 0;
        for chunk in idx.chunks(self.batch_size) {
            let (x, y) = data.batch(chunk)?;
            total += self.step(&x, &y)? as f64;
            batches += 1;
        }
        self.epoch += 1;
        Ok(total / batches.max(1) as f64)
    }

    pub fn evaluate(&self, data: &Dataset) -> Result<f64> {
        evaluate(&self.graph, data, self.batch_size)
    }

    /// Train `n` epochs, evaluating every `eval_every` epochs (0: only the
    /// last), and append to the log.
    pub fn run(&mut self, task: &ToyTask, n: usize, eval_every: usize) -> Result<()> {
        for i in 0..n {
            let loss = self.train_epoch(&task.train)?;
            let last = i + 1 == n;
            let due = eval_every > 0 && self.epoch % eval_every == 0;
            let val_acc = if last || due { self.evaluate(&task.val)? } else { f64::NAN };
            self.log.push(EpochLog {
                epoch: self.epoch,
                train_loss: loss,
                val_acc,
                phase: self.phase,
            });
        }
        Ok(())
    }

    /// Prune the current graph by `fraction` per unprotected group. If the
    /// graph is instrumented, quantizers are stripped for the rebuild, then
    /// re-inserted and recalibrated on `calib`. Optimizer state restarts.
    pub fn prune(&mut self, fraction: f64, calib: &[Tensor]) -> Result<PruneOutcome> {
        let quantized = self.graph.has_fakequant();
        let base = self.graph.strip_fakequant();
        let groups = resolve_groups(&base)?;
        let plan = build_plan(&base, &groups, fraction, Some(self.epoch))?;
        let slim = apply_prune_with(&base, &groups, &plan)?;
        let dense_params = count_params(&base);
        let slim_params = count_params(&slim);
        let calibration = if quantized {
            let (g, rep) = calibrate(&insert_fakequant(&slim)?, calib)?;
            self.graph = g;
            Some(rep)
        } else {
            self.graph = slim;
            None
        };
        self.velocity.clear();
        self.phase = Phase::Pruned;
        Ok(PruneOutcome {
            plan,
            dense_params,
            slim_params,
            calibration,
        })
    }
}

/// Top-1 accuracy of the auxiliary head with running batchnorm statistics.
pub fn evaluate(graph: &Graph, data: &Dataset, batch_size: usize) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::invalid("cannot evaluate on an empty dataset"));
    }
    let mut correct = 0usize;
    for (x, y) in data.batches(batch_size)? {
        let ex = execute(graph, &x, BnMode::Running, Some(&[CLS_OUTPUT]))?;
        let pred = argmax_rows(ex.output(CLS_OUTPUT)?)?;
        correct += pred.iter().zip(&y).filter(|(p, l)| p == l).count();
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Plain training of `graph` for `config.epochs` epochs (quantizers, if
/// present, run in whatever phase they are in).
pub fn train(graph: &Graph, task: &ToyTask, config: &TrainConfig) -> Result<(Graph, Vec<EpochLog>)> {
    let mut t = Trainer::new(graph.clone(), config)?;
    t.run(task, config.epochs, config.eval_every)?;
    Ok((t.graph, t.log))
}
