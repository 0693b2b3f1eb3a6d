//! Training orchestration: the synthetic task, momentum SGD, and the
//! integrated schedule (instrument, calibrate, train, prune, recalibrate,
//! fine-tune, export).

pub mod toytask;
pub mod train;

use alloc::vec::Vec;

pub use toytask::{Dataset, Shape, ToyTask, DEFAULT_TRAIN, DEFAULT_VAL, IMAGE_SIDE};
pub use train::{evaluate, train, EpochLog, Phase, PruneOutcome, TrainConfig, Trainer};

use crate::error::{Error, Result};
use crate::fakequant::{calibrate, insert_fakequant, CalibrationReport};
use crate::fp16::{to_half_precision, CastReport};
use crate::graph::{build_mini_net, Graph, Preset};
use crate::metrics::{count_params, CompressionReport, Stage};
use crate::pruner::PrunePlan;
use crate::tensor::Tensor;

/// Everything a pipeline run produces.
#[derive(Clone, Debug)]
pub struct PipelineResult {
    /// Graph just before pruning (or the final graph when no prune ran).
    pub dense_graph: Graph,
    /// Fine-tuned graph, still instrumented when QAT is on.
    pub final_graph: Graph,
    /// `final_graph` with every parameter rounded through binary16.
    pub half_graph: Graph,
    pub plan: PrunePlan,
    pub calibrations: Vec<CalibrationReport>,
    pub cast: CastReport,
    pub log: Vec<EpochLog>,
    pub dense_acc: f64,
    pub final_acc: f64,
    pub half_acc: f64,
    /// Dense fp32, final fp32 and final fp16 rows.
    pub reports: Vec<CompressionReport>,
}

/// The first `n` training batches, used for calibration.
pub fn calibration_batches(task: &ToyTask, config: &TrainConfig) -> Result<Vec<Tensor>> {
    let all = task.train.batches(config.batch_size)?;
    if all.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    Ok(all.into_iter().take(config.calibration_batches.max(1)).map(|(x, _)| x).collect())
}

/// Run the full schedule on a freshly built preset. `engine_bytes` returns
/// the serialized size of a graph at a precision (supplied by the IO layer).
pub fn run_compression_pipeline(
    preset: Preset,
    task: &ToyTask,
    config: &TrainConfig,
    engine_bytes: &dyn Fn(&Graph, u32) -> Result<u64>,
) -> Result<PipelineResult> {
    config.validate().map_err(|e| e.at_stage("config"))?;
    let hw = task.train.hw;
    let graph = build_mini_net(preset, (3, hw, hw), task.n_classes, config.seed).map_err(|e| e.at_stage("build"))?;
    let calib = calibration_batches(task, config).map_err(|e| e.at_stage("calibrate"))?;

    let mut calibrations = Vec::new();
    let graph = if config.qat_enabled {
        let g = insert_fakequant(&graph).map_err(|e| e.at_stage("instrument"))?;
        let (g, rep) = calibrate(&g, &calib).map_err(|e| e.at_stage("calibrate"))?;
        calibrations.push(rep);
        g
    } else {
        graph
    };

    let mut trainer = Trainer::new(graph, config).map_err(|e| e.at_stage("train"))?;
    let first = config.prune_epoch.unwrap_or(config.epochs);
    trainer.run(task, first, config.eval_every).map_err(|e| e.at_stage("train"))?;
    let dense_graph = trainer.graph.clone();
    let dense_acc = trainer.log.last().map(|l| l.val_acc).unwrap_or(f64::NAN);

    let mut plan = PrunePlan::empty();
    if config.prune_epoch.is_some() {
        let out = trainer
            .prune(config.channel_fraction, &calib)
            .map_err(|e| e.at_stage("prune"))?;
        plan = out.plan;
        calibrations.extend(out.calibration);
        trainer
            .run(task, config.epochs - first, config.eval_every)
            .map_err(|e| e.at_stage("finetune"))?;
    }
    let final_graph = trainer.graph.clone();
    let final_acc = trainer.log.last().map(|l| l.val_acc).unwrap_or(f64::NAN);

    let (half_graph, cast) = to_half_precision(&final_graph).map_err(|e| e.at_stage("export"))?;
    let half_acc = evaluate(&half_graph, &task.val, config.batch_size).map_err(|e| e.at_stage("export"))?;

    let input = [1, 3, hw, hw];
    let dense_params = count_params(&dense_graph);
    let name = preset.as_str();
    let report = |g: &Graph, stage, bits, acc| -> Result<CompressionReport> {
        let bytes = engine_bytes(g, bits)?;
        CompressionReport::new(name, g, stage, bits, config.channel_fraction, dense_params, input, bytes, Some(acc))
    };
    let final_stage = if config.prune_epoch.is_some() { Stage::Pruned } else { Stage::Dense };
    let reports = alloc::vec![
        report(&dense_graph, Stage::Dense, 32, dense_acc).map_err(|e| e.at_stage("report"))?,
        report(&final_graph, final_stage, 32, final_acc).map_err(|e| e.at_stage("report"))?,
        report(&final_graph, final_stage, 16, half_acc).map_err(|e| e.at_stage("report"))?,
    ];

    Ok(PipelineResult {
        dense_graph,
        final_graph,
        half_graph,
        plan,
        calibrations,
        cast,
        log: trainer.log,
        dense_acc,
        final_acc,
        half_acc,
        reports,
    })
}
