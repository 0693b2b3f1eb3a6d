use slimgraph_core::graph::{build_mini_net, is_trainable, Graph, Preset};
use slimgraph_core::metrics::Stage;
use slimgraph_core::pipeline::{run_compression_pipeline, ToyTask, TrainConfig, Trainer};
use slimgraph_core::Result;

fn small_task(seed: u64) -> ToyTask {
    ToyTask::generate(seed, 3, 32, 16, 64).unwrap()
}

fn cfg(epochs: usize) -> TrainConfig {
    TrainConfig { epochs, batch_size: 8, seed: 4, ..TrainConfig::default() }
}

fn trainable(g: &Graph) -> Vec<u32> {
    g.nodes()
        .flat_map(|n| n.params.iter().filter(|(k, _)| is_trainable(k)).flat_map(|(_, t)| t.data().iter().map(|v| v.to_bits())))
        .collect()
}

fn engine(g: &Graph, bits: u32) -> Result<u64> {
    Ok(slimgraph_core::metrics::count_params(g) * bits as u64 / 8)
}

#[test]
fn zero_learning_rate_freezes_weights() {
    let task = small_task(1);
    let g = build_mini_net(Preset::EcoweedMini, (3, 64, 64), 3, 0).unwrap();
    let c = TrainConfig { lr: 0.0, ..cfg(2) };
    let mut t = Trainer::new(g.clone(), &c).unwrap();
    t.run(&task, 2, 0).unwrap();
    assert_eq!(trainable(&t.graph), trainable(&g));
    assert_eq!(t.log.len(), 2);
}

#[test]
fn training_is_seed_deterministic_and_moves_weights() {
    let task = small_task(2);
    let run = || {
        let g = build_mini_net(Preset::Y11Mini, (3, 64, 64), 3, 4).unwrap();
        let mut t = Trainer::new(g, &cfg(2)).unwrap();
        t.run(&task, 2, 1).unwrap();
        t
    };
    let (a, b) = (run(), run());
    assert_eq!(a.graph, b.graph);
    assert_eq!(a.log, b.log);
    assert_ne!(trainable(&a.graph), trainable(&build_mini_net(Preset::Y11Mini, (3, 64, 64), 3, 4).unwrap()));
    assert!(a.log.iter().all(|l| l.train_loss.is_finite()));
}

#[test]
fn dense_only_pipeline_reports_no_reduction() {
    let task = small_task(3);
    let r = run_compression_pipeline(Preset::EcoweedMini, &task, &cfg(1), &engine).unwrap();
    assert!(r.plan.removals.is_empty());
    assert_eq!(r.dense_graph, r.final_graph);
    let dense = r.reports.iter().find(|x| x.stage == Stage::Dense).unwrap();
    for rep in &r.reports {
        assert_eq!(rep.params, dense.params);
        assert_eq!(rep.ratio_percent().unwrap(), 0.0);
    }
}

#[test]
fn pruning_pipeline_shrinks_and_stays_consistent() {
    let task = small_task(5);
    let c = TrainConfig { prune_epoch: Some(1), channel_fraction: 0.3, qat_enabled: true, ..cfg(2) };
    let r = run_compression_pipeline(Preset::Y12Mini, &task, &c, &engine).unwrap();
    let params: Vec<u64> = r.reports.iter().map(|x| x.params).collect();
    assert!(params[1] < params[0]);
    assert_eq!(params[1], params[2]);
    assert_eq!(r.calibrations.len(), 2, "calibrated before training and after pruning");
    assert!(r.reports[2].engine_bytes * 2 == r.reports[1].engine_bytes);
    assert!((0.0..=1.0).contains(&r.final_acc) && (0.0..=1.0).contains(&r.half_acc));
}

#[test]
fn config_validation() {
    let ok = cfg(3);
    assert!(ok.validate().is_ok());
    let bad = [
        TrainConfig { prune_epoch: Some(3), ..ok.clone() },
        TrainConfig { channel_fraction: 1.0, ..ok.clone() },
        TrainConfig { channel_fraction: -0.1, ..ok.clone() },
        TrainConfig { batch_size: 0, ..ok.clone() },
        TrainConfig { lr: f32::NAN, ..ok.clone() },
        TrainConfig { momentum: 1.0, ..ok.clone() },
        TrainConfig { qat_enabled: true, calibration_batches: 0, ..ok.clone() },
    ];
    for c in bad {
        assert!(c.validate().is_err(), "{c:?}");
        assert!(run_compression_pipeline(Preset::EcoweedMini, &small_task(0), &c, &engine).is_err());
    }
}
