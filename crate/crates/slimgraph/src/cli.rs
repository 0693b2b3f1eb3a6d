//! Subcommand driver. Exit codes: 0 success, 1 usage error, 2 validation or
//! verification failure, 3 I/O or format error.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use slimgraph_core::depgraph::resolve_groups;
use slimgraph_core::fakequant::{calibrate, insert_fakequant, CalibrationReport};
use slimgraph_core::graph::exec::{forward, BnMode};
use slimgraph_core::graph::presets::CLS_OUTPUT;
use slimgraph_core::graph::{build_mini_net, Graph, NodeId, NodeKind, Preset};
use slimgraph_core::metrics::{count_flops, count_params, emit_report, CompressionReport, Stage};
use slimgraph_core::pipeline::{
    calibration_batches, run_compression_pipeline, EpochLog, ToyTask, TrainConfig, Trainer, DEFAULT_TRAIN,
    DEFAULT_VAL, IMAGE_SIDE,
};
use slimgraph_core::pruner::{apply_prune_with, build_plan, validate_plan, zero_embed_oracle, PrunePlan};
use slimgraph_core::Tensor;

use crate::modelio::{self, ModelIoError};
use crate::sidecar::{self, NamedCalib};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_INVALID: i32 = 2;
pub const EXIT_IO: i32 = 3;

/// Fixed artifact names written by `pipeline`.
pub const MODEL_FP32: &str = "model_fp32.twnm";
pub const MODEL_FP16: &str = "model_fp16.twnm";
pub const PLAN_FILE: &str = "plan.txt";
pub const CALIB_FILE: &str = "calib.txt";
pub const METRICS_FILE: &str = "metrics.csv";
pub const REPORT_CSV: &str = "report.csv";
pub const REPORT_TXT: &str = "report.txt";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Invalid(String),
    #[error("{0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Invalid(_) => EXIT_INVALID,
            CliError::Io(_) => EXIT_IO,
        }
    }
}

impl From<slimgraph_core::Error> for CliError {
    fn from(e: slimgraph_core::Error) -> Self {
        CliError::Invalid(e.to_string())
    }
}

/// Loading and parsing failures are format errors; a core error raised while
/// encoding (e.g. a value that overflows binary16) is a validation failure.
impl From<ModelIoError> for CliError {
    fn from(e: ModelIoError) -> Self {
        match e {
            ModelIoError::Core(c) => CliError::Invalid(c.to_string()),
            other => CliError::Io(other.to_string()),
        }
    }
}

type CliResult<T> = Result<T, CliError>;

fn as_display<T: std::fmt::Display, S: serde::Serializer>(v: &T, s: S) -> Result<S::Ok, S::Error> {
    s.collect_str(v)
}

#[derive(Debug, Parser, Serialize)]
#[command(name = "slimgraph", version, about = "Channel pruning and simulated 8-bit quantization for mini detection nets")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(tag = "command", rename_all = "snake_case")]
pub enum Command {
    /// Build a freshly initialized preset.
    Build(BuildArgs),
    /// Train a model's classification head on the synthetic task.
    Train(TrainArgs),
    /// Prune every unprotected channel group by a uniform fraction.
    Prune(PruneArgs),
    /// Insert quantizers (if missing) and calibrate them.
    Calibrate(CalibrateArgs),
    /// Quantization-aware training (instruments and calibrates first if needed).
    Qat(QatArgs),
    /// Full schedule: QAT, prune at an epoch, fine-tune, export, report.
    Pipeline(PipelineArgs),
    /// Check a slim model against the zero-embedded dense model.
    Verify(VerifyArgs),
    /// Report table for models; the first is the dense reference.
    Report(ReportArgs),
    /// Print a model summary and its channel groups.
    Inspect(InspectArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct TaskArgs {
    /// Seed for initialization, data and shuffling.
    #[arg(long, env = "SLIMGRAPH_SEED", default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = DEFAULT_TRAIN)]
    pub train_size: usize,
    #[arg(long, default_value_t = DEFAULT_VAL)]
    pub val_size: usize,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0.01)]
    pub lr: f32,
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f32,
    /// Evaluate every N epochs (the last epoch is always evaluated).
    #[arg(long, default_value_t = 1)]
    pub eval_every: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct BuildArgs {
    #[arg(long)]
    #[serde(serialize_with = "as_display")]
    pub preset: Preset,
    #[arg(long, default_value_t = 3)]
    pub classes: usize,
    /// Square input side.
    #[arg(long, default_value_t = IMAGE_SIDE)]
    pub input: usize,
    #[arg(long, env = "SLIMGRAPH_SEED", default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub epochs: usize,
    /// Per-epoch metric log (CSV).
    #[arg(long)]
    pub log: PathBuf,
    /// Output model; defaults to overwriting `--model`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub task: TaskArgs,
}

#[derive(Debug, Args, Serialize)]
pub struct PruneArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub fraction: f64,
    #[arg(long)]
    pub plan_out: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Calibration batches used to recalibrate an instrumented model.
    #[arg(long, default_value_t = 2)]
    pub batches: usize,
    #[command(flatten)]
    pub task: TaskArgs,
}

#[derive(Debug, Args, Serialize)]
pub struct CalibrateArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value_t = 2)]
    pub batches: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// Optional calibration sidecar.
    #[arg(long)]
    pub calib_out: Option<PathBuf>,
    #[command(flatten)]
    pub task: TaskArgs,
}

#[derive(Debug, Args, Serialize)]
pub struct QatArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub epochs: usize,
    #[arg(long, default_value_t = 2)]
    pub batches: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[command(flatten)]
    pub task: TaskArgs,
}

#[derive(Debug, Args, Serialize)]
pub struct PipelineArgs {
    #[arg(long)]
    #[serde(serialize_with = "as_display")]
    pub preset: Preset,
    #[arg(long, default_value_t = 3)]
    pub classes: usize,
    #[arg(long, default_value_t = 0.0)]
    pub fraction: f64,
    #[arg(long)]
    pub prune_epoch: Option<usize>,
    #[arg(long, default_value_t = 250)]
    pub epochs: usize,
    #[arg(long)]
    pub qat: bool,
    #[arg(long, default_value_t = 2)]
    pub batches: usize,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[command(flatten)]
    pub task: TaskArgs,
}

#[derive(Debug, Args, Serialize)]
pub struct VerifyArgs {
    #[arg(long)]
    pub dense: PathBuf,
    #[arg(long)]
    pub slim: PathBuf,
    #[arg(long)]
    pub plan: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub trials: usize,
    /// Maximum relative error per output.
    #[arg(long, default_value_t = 1e-5)]
    pub tol: f64,
    #[arg(long, env = "SLIMGRAPH_SEED", default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args, Serialize)]
pub struct ReportArgs {
    #[arg(long, num_args = 1.., required = true)]
    pub models: Vec<PathBuf>,
    #[arg(long)]
    pub csv: Option<PathBuf>,
    #[arg(long)]
    pub txt: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct InspectArgs {
    #[arg(long)]
    pub model: PathBuf,
}

/// Parse `argv` (program name first), run, and return the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match serde_json::to_string(&cli.command) {
        Ok(cfg) => println!("config {cfg}"),
        Err(e) => eprintln!("warning: cannot echo config: {e}"),
    }
    match dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cmd: Command) -> CliResult<()> {
    match cmd {
        Command::Build(a) => build(a),
        Command::Train(a) => train(a),
        Command::Prune(a) => prune(a),
        Command::Calibrate(a) => calibrate_cmd(a),
        Command::Qat(a) => qat(a),
        Command::Pipeline(a) => pipeline(a),
        Command::Verify(a) => verify(a),
        Command::Report(a) => report(a),
        Command::Inspect(a) => inspect(a),
    }
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    modelio::write_atomic(path, text.as_bytes())?;
    Ok(())
}

fn read_text(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn load(path: &Path) -> CliResult<(Graph, u32)> {
    modelio::load(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn save(graph: &Graph, precision: u32, path: &Path) -> CliResult<()> {
    let n = modelio::save(graph, precision, path)?;
    println!("wrote {} ({n} bytes)", path.display());
    Ok(())
}

/// Classes predicted by the classification head.
fn n_classes(graph: &Graph) -> CliResult<usize> {
    let out = graph
        .output_by_name(CLS_OUTPUT)
        .ok_or_else(|| CliError::Invalid(format!("model has no `{CLS_OUTPUT}` output")))?;
    let head = graph.node(out.inputs[0].node)?;
    match head.kind {
        NodeKind::Linear => Ok(head.param("weight")?.shape()[0]),
        _ => Err(CliError::Invalid(format!(
            "`{CLS_OUTPUT}` is fed by node {} ({}), not a linear layer",
            head.id,
            head.kind.tag()
        ))),
    }
}

fn task_for(graph: &Graph, t: &TaskArgs) -> CliResult<ToyTask> {
    let (c, h, w) = graph.input_chw()?;
    if c != 3 || h != w {
        return Err(CliError::Invalid(format!(
            "synthetic task needs a square 3-channel input, model declares {c}x{h}x{w}"
        )));
    }
    Ok(ToyTask::generate(t.seed, n_classes(graph)?, t.train_size, t.val_size, h)?)
}

fn config_for(t: &TaskArgs, epochs: usize, qat: bool, batches: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        qat_enabled: qat,
        calibration_batches: batches,
        lr: t.lr,
        momentum: t.momentum,
        batch_size: t.batch_size,
        seed: t.seed,
        eval_every: t.eval_every,
        ..TrainConfig::default()
    }
}

fn metrics_csv(log: &[EpochLog]) -> String {
    let mut s = String::from("epoch,train_loss,val_acc,phase\n");
    for l in log {
        let acc = if l.val_acc.is_nan() {
            String::new()
        } else {
            format!("{:.4}", l.val_acc)
        };
        s.push_str(&format!("{},{:.6},{acc},{}\n", l.epoch, l.train_loss, l.phase.as_str()));
    }
    s
}

fn print_progress(log: &[EpochLog]) {
    for l in log.iter().filter(|l| !l.val_acc.is_nan()) {
        println!(
            "epoch {:>4} [{}] loss {:.4} val_acc {:.4}",
            l.epoch,
            l.phase.as_str(),
            l.train_loss,
            l.val_acc
        );
    }
}

fn node_names(graphs: &[&Graph]) -> BTreeMap<NodeId, String> {
    graphs
        .iter()
        .flat_map(|g| g.nodes().map(|n| (n.id, n.name.clone())))
        .collect()
}

fn build(a: BuildArgs) -> CliResult<()> {
    let g = build_mini_net(a.preset, (3, a.input, a.input), a.classes, a.seed)?;
    println!("{}: {} nodes, {} params", a.preset, g.len(), count_params(&g));
    save(&g, 32, &a.out)
}

fn train(a: TrainArgs) -> CliResult<()> {
    let (g, precision) = load(&a.model)?;
    let task = task_for(&g, &a.task)?;
    let cfg = config_for(&a.task, a.epochs, false, 2);
    let mut t = Trainer::new(g, &cfg)?;
    t.run(&task, a.epochs, a.task.eval_every)?;
    print_progress(&t.log);
    write_text(&a.log, &metrics_csv(&t.log))?;
    save(&t.graph, precision, a.out.as_deref().unwrap_or(&a.model))
}

/// Instrument (if needed) and calibrate on the task's first batches.
fn instrument(g: &Graph, task: &ToyTask, cfg: &TrainConfig) -> CliResult<(Graph, CalibrationReport)> {
    let g = if g.has_fakequant() { g.clone() } else { insert_fakequant(g)? };
    let batches = calibration_batches(task, cfg)?;
    Ok(calibrate(&g, &batches)?)
}

fn prune(a: PruneArgs) -> CliResult<()> {
    let (g, precision) = load(&a.model)?;
    let quantized = g.has_fakequant();
    let base = g.strip_fakequant();
    let groups = resolve_groups(&base)?;
    let plan = build_plan(&base, &groups, a.fraction, None)?;
    let slim = apply_prune_with(&base, &groups, &plan)?;
    let (dense_p, slim_p) = (count_params(&base), count_params(&slim));
    println!(
        "groups {} pruned {} channels removed {}; params {dense_p} -> {slim_p}",
        groups.len(),
        plan.removals.len(),
        plan.total_removed()
    );
    let slim = if quantized {
        let task = task_for(&slim, &a.task)?;
        let cfg = config_for(&a.task, 1, true, a.batches);
        instrument(&slim, &task, &cfg)?.0
    } else {
        slim
    };
    write_text(&a.plan_out, &sidecar::write_plan(&plan))?;
    save(&slim, precision, &a.out)
}

fn calibrate_cmd(a: CalibrateArgs) -> CliResult<()> {
    let (g, precision) = load(&a.model)?;
    let task = task_for(&g, &a.task)?;
    let cfg = config_for(&a.task, 1, true, a.batches);
    let (g, rep) = instrument(&g, &task, &cfg)?;
    println!("calibrated {} quantizers on {} batches", rep.entries.len(), a.batches.max(1));
    if let Some(p) = &a.calib_out {
        write_text(p, &sidecar::write_calib(&[sidecar::name_report(&rep, &node_names(&[&g]))]))?;
    }
    save(&g, precision, &a.out)
}

fn qat(a: QatArgs) -> CliResult<()> {
    let (g, precision) = load(&a.model)?;
    let task = task_for(&g, &a.task)?;
    let cfg = config_for(&a.task, a.epochs, true, a.batches);
    let (g, _) = instrument(&g, &task, &cfg)?;
    let mut t = Trainer::new(g, &cfg)?;
    t.run(&task, a.epochs, a.task.eval_every)?;
    print_progress(&t.log);
    if let Some(l) = &a.log {
        write_text(l, &metrics_csv(&t.log))?;
    }
    save(&t.graph, precision, &a.out)
}

fn pipeline(a: PipelineArgs) -> CliResult<()> {
    let task = ToyTask::generate(a.task.seed, a.classes, a.task.train_size, a.task.val_size, IMAGE_SIDE)?;
    let mut cfg = config_for(&a.task, a.epochs, a.qat, a.batches);
    cfg.prune_epoch = a.prune_epoch;
    cfg.channel_fraction = a.fraction;
    let engine = |g: &Graph, bits: u32| {
        modelio::encoded_len(g, bits).map_err(|e| slimgraph_core::Error::InvalidArgument(e.to_string()))
    };
    let r = run_compression_pipeline(a.preset, &task, &cfg, &engine)?;
    print_progress(&r.log);
    fs::create_dir_all(&a.out_dir).map_err(|e| CliError::Io(format!("{}: {e}", a.out_dir.display())))?;
    let d = &a.out_dir;
    save(&r.final_graph, 32, &d.join(MODEL_FP32))?;
    save(&r.final_graph, 16, &d.join(MODEL_FP16))?;
    write_text(&d.join(PLAN_FILE), &sidecar::write_plan(&r.plan))?;
    let names = node_names(&[&r.dense_graph, &r.final_graph]);
    let passes: Vec<Vec<NamedCalib>> = r.calibrations.iter().map(|c| sidecar::name_report(c, &names)).collect();
    write_text(&d.join(CALIB_FILE), &sidecar::write_calib(&passes))?;
    write_text(&d.join(METRICS_FILE), &metrics_csv(&r.log))?;
    let (csv, txt) = emit_report(&r.reports)?;
    write_text(&d.join(REPORT_CSV), &csv)?;
    write_text(&d.join(REPORT_TXT), &txt)?;
    print!("{txt}");
    println!(
        "dense acc {:.4}, final acc {:.4}, fp16 acc {:.4}",
        r.dense_acc, r.final_acc, r.half_acc
    );
    Ok(())
}

/// Largest absolute difference over the largest reference magnitude.
pub fn relative_error(got: &Tensor, want: &Tensor) -> f64 {
    let diff = got
        .data()
        .iter()
        .zip(want.data())
        .fold(0.0f64, |m, (a, b)| m.max((*a as f64 - *b as f64).abs()));
    let scale = want.data().iter().fold(0.0f64, |m, v| m.max((*v as f64).abs()));
    if diff == 0.0 {
        0.0
    } else {
        diff / scale.max(f64::MIN_POSITIVE)
    }
}

fn verify(a: VerifyArgs) -> CliResult<()> {
    let (dense, _) = load(&a.dense)?;
    let (slim, _) = load(&a.slim)?;
    let plan: PrunePlan = sidecar::read_plan(&read_text(&a.plan)?)
        .map_err(|e| CliError::Io(format!("{}: {e}", a.plan.display())))?;
    // quantizer scales of a slim model are recalibrated, so compare the
    // float graphs
    let dense = dense.strip_fakequant();
    let slim = slim.strip_fakequant();
    let groups = resolve_groups(&dense)?;
    validate_plan(&groups, &plan)?;
    let expected = apply_prune_with(&dense, &groups, &plan)?;
    for n in expected.nodes() {
        let s = slim
            .node(n.id)
            .map_err(|_| CliError::Invalid(format!("slim model lacks node {} ({})", n.id, n.name)))?;
        for (p, t) in &n.params {
            let got = s.param(p)?;
            if got.shape() != t.shape() {
                return Err(CliError::Invalid(format!(
                    "node {} ({}) `{p}` has shape {:?}, the plan implies {:?}",
                    n.id,
                    n.name,
                    got.shape(),
                    t.shape()
                )));
            }
        }
    }
    let oracle = zero_embed_oracle(&dense, &plan)?;
    let (c, h, w) = dense.input_chw()?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let mut failures = 0;
    for trial in 0..a.trials {
        let x = Tensor::from_fn(&[2, c, h, w], |_| rng.gen_range(-1.0f32..1.0));
        let want = forward(&oracle, &x, BnMode::Running)?;
        let got = forward(&slim, &x, BnMode::Running)?;
        let mut worst = 0.0f64;
        for (name, wv) in &want {
            let gv = got
                .get(name)
                .ok_or_else(|| CliError::Invalid(format!("slim model lacks output `{name}`")))?;
            if gv.shape() != wv.shape() {
                return Err(CliError::Invalid(format!(
                    "output `{name}` has shape {:?}, expected {:?}",
                    gv.shape(),
                    wv.shape()
                )));
            }
            worst = worst.max(relative_error(gv, wv));
        }
        let ok = worst <= a.tol;
        failures += usize::from(!ok);
        println!("trial {trial}: max relative error {worst:.3e} {}", if ok { "ok" } else { "FAIL" });
    }
    if failures > 0 {
        return Err(CliError::Invalid(format!("{failures} of {} trials exceeded tolerance {}", a.trials, a.tol)));
    }
    println!("verified {} trials", a.trials);
    Ok(())
}

fn report(a: ReportArgs) -> CliResult<()> {
    let mut rows = Vec::new();
    let mut dense_params = None;
    for path in &a.models {
        let (g, precision) = load(path)?;
        let params = count_params(&g);
        let dense = *dense_params.get_or_insert(params);
        let stage = if params < dense { Stage::Pruned } else { Stage::Dense };
        let bytes = fs::metadata(path)
            .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?
            .len();
        let (c, h, w) = g.input_chw()?;
        let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        rows.push(CompressionReport::new(
            &name,
            &g,
            stage,
            precision,
            0.0,
            dense,
            [1, c, h, w],
            bytes,
            None,
        )?);
    }
    let (csv, txt) = emit_report(&rows)?;
    if let Some(p) = &a.csv {
        write_text(p, &csv)?;
    }
    if let Some(p) = &a.txt {
        write_text(p, &txt)?;
    }
    print!("{txt}");
    Ok(())
}

fn inspect(a: InspectArgs) -> CliResult<()> {
    let (g, precision) = load(&a.model)?;
    let (c, h, w) = g.input_chw()?;
    let flops = count_flops(&g, [1, c, h, w])?;
    println!("graph {} precision fp{precision}", g.name());
    println!("nodes {} params {}", g.len(), count_params(&g));
    println!("flops {} at input 1x{c}x{h}x{w}", flops.total());
    println!("quantizers {}", g.nodes().filter(|n| matches!(n.kind, NodeKind::FakeQuant(_))).count());
    let base = g.strip_fakequant();
    let groups = resolve_groups(&base)?;
    print!("{}", groups.dump(&base));
    Ok(())
}
