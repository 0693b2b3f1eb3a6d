use slimgraph_core::depgraph::{resolve_groups, SlotPort};
use slimgraph_core::graph::builder::{build_conv_block, fragment, GraphBuilder};
use slimgraph_core::graph::{build_mini_net, Activation, Graph, Preset};
use slimgraph_core::metrics::{
    count_flops, count_params, emit_report, estimate_memory, CompressionReport, Stage, FLOP_CONVENTION,
};
use slimgraph_core::pruner::{apply_prune, build_plan, PrunePlan};

fn report(model: &str, stage: Stage, dense: u64, params: u64) -> CompressionReport {
    CompressionReport {
        model: model.into(),
        stage,
        precision_bits: 32,
        channel_fraction: 0.0,
        dense_params: dense,
        params,
        flops: 0,
        input_shape: [1, 3, 64, 64],
        weight_bytes: 4 * params,
        engine_bytes: 4 * params,
        val_acc: None,
    }
}

#[test]
fn param_counts() {
    assert_eq!(count_params(&build_conv_block(3, 16, 3, 1).unwrap()), 480);
    assert_eq!(count_params(&fragment("id", (3, 4, 4), 0, |_, x| Ok(x)).unwrap()), 0);
    let g = build_mini_net(Preset::EcoweedMini, (3, 64, 64), 3, 0).unwrap();
    assert_eq!(count_params(&apply_prune(&g, &PrunePlan::empty()).unwrap()), count_params(&g));
}

#[test]
fn single_pixel_conv_flops() {
    let g = fragment("c", (1, 4, 4), 0, |b, x| b.conv(x, 1, 1, 1)).unwrap();
    let f = count_flops(&g, [1, 1, 4, 4]).unwrap();
    assert_eq!((f.mac_flops, f.bias_flops, f.elementwise_flops), (32, 16, 0));
}

#[test]
fn conv_flops_scale_with_area() {
    let g = build_conv_block(3, 16, 3, 1).unwrap();
    let a = count_flops(&g, [1, 3, 16, 16]).unwrap();
    let b = count_flops(&g, [1, 3, 32, 32]).unwrap();
    assert_eq!(b.mac_flops, 4 * a.mac_flops);
    assert_eq!(b.total(), 4 * a.total());
    assert_eq!(count_flops(&g, [2, 3, 16, 16]).unwrap().total(), 2 * a.total());
}

#[test]
fn pruned_chain_flops_match_closed_form() {
    let (mut b, x) = GraphBuilder::new("chain", (3, 8, 8), 0).unwrap();
    let c1 = b.conv(x, 8, 3, 1).unwrap();
    let bn = b.batchnorm(c1);
    let a = b.act(bn, Activation::Silu);
    let c2 = b.conv(a, 4, 3, 1).unwrap();
    b.output(c2, "out");
    let g = b.finish().unwrap();
    let groups = resolve_groups(&g).unwrap();
    let (mid, _) = groups.locate(c1.node, SlotPort::Out(0), 0).unwrap();
    let mut plan = PrunePlan::empty();
    plan.removals.insert(mid, vec![1, 6]);
    let slim = apply_prune(&g, &plan).unwrap();
    let hw = 64;
    let mac = |m: u64| 2 * m * 27 * hw + 2 * 4 * m * 9 * hw;
    assert_eq!(count_flops(&g, [1, 3, 8, 8]).unwrap().mac_flops, mac(8));
    assert_eq!(count_flops(&slim, [1, 3, 8, 8]).unwrap().mac_flops, mac(6));
}

#[test]
fn pruning_never_adds_flops() {
    for p in Preset::ALL {
        let g = build_mini_net(p, (3, 64, 64), 3, 0).unwrap();
        let groups = resolve_groups(&g).unwrap();
        let mut last = count_flops(&g, [1, 3, 64, 64]).unwrap().total();
        for f in [0.1, 0.3, 0.5] {
            let slim = apply_prune(&g, &build_plan(&g, &groups, f, None).unwrap()).unwrap();
            let now = count_flops(&slim, [1, 3, 64, 64]).unwrap().total();
            assert!(now <= last, "{p} at {f}");
            last = now;
        }
    }
}

#[test]
fn memory_estimates() {
    for p in Preset::ALL {
        let g: Graph = build_mini_net(p, (3, 64, 64), 3, 0).unwrap();
        let m32 = estimate_memory(&g, 32, [1, 3, 64, 64]).unwrap();
        let m16 = estimate_memory(&g, 16, [1, 3, 64, 64]).unwrap();
        assert_eq!(m32.weight_bytes, 2 * m16.weight_bytes);
        assert_eq!(m32.scratch_bytes, 2 * m16.scratch_bytes);
    }
    // input and conv output are both live while the conv runs; bn and silu
    // work in place
    let g = build_conv_block(3, 16, 3, 1).unwrap();
    let m = estimate_memory(&g, 32, [1, 3, 16, 16]).unwrap();
    assert_eq!(m.scratch_bytes, 4 * (3 * 256 + 16 * 256));
    assert!(estimate_memory(&g, 8, [1, 3, 16, 16]).is_err());
}

#[test]
fn report_rows() {
    let rows = [
        report("dense", Stage::Dense, 2_780_000, 2_780_000),
        report("p1", Stage::Pruned, 2_780_000, 2_459_176),
        report("p6", Stage::Pruned, 2_780_000, 876_859),
    ];
    let (csv, txt) = emit_report(&rows).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert!(lines[0].contains(FLOP_CONVENTION) && lines[0].contains("1x3x64x64"));
    let col = lines[1].split(',').position(|c| c == "pruning_ratio_pct").unwrap();
    let ratios: Vec<&str> = lines[2..].iter().map(|l| l.split(',').nth(col).unwrap()).collect();
    assert_eq!(ratios, ["0.0", "11.5", "68.5"]);
    assert!(txt.lines().next().unwrap().starts_with("# "));
    assert_eq!(txt.lines().count(), 5);
    assert!(emit_report(&[]).is_err());
}
