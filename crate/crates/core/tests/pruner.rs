use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use slimgraph_core::depgraph::{predict_removed_params, resolve_groups, SlotPort};
use slimgraph_core::graph::builder::{build_sppf, GraphBuilder};
use slimgraph_core::graph::exec::{forward, forward_output, BnMode};
use slimgraph_core::graph::{build_mini_net, infer_shapes, Activation, Graph, NodeKind, Preset};
use slimgraph_core::metrics::count_params;
use slimgraph_core::pruner::{
    achieved_ratio, achieved_ratio_percent, apply_prune, apply_prune_with, build_plan, l1_importance,
    select_channels, validate_plan, zero_embed_oracle, PrunePlan, MIN_KEEP,
};
use slimgraph_core::{Error, Tensor};

fn rel(a: &Tensor, b: &Tensor) -> f64 {
    let d = a.data().iter().zip(b.data()).fold(0.0f64, |m, (x, y)| m.max((*x as f64 - *y as f64).abs()));
    d / b.max_abs().max(f32::MIN_POSITIVE) as f64
}

#[test]
fn l1_scores_match_hand_sums() {
    let (mut b, x) = GraphBuilder::new("l1", (1, 4, 4), 0).unwrap();
    let c = b.conv(x, 2, 2, 1).unwrap();
    let d = b.conv(c, 1, 1, 1).unwrap();
    b.output(d, "out");
    let mut g = b.finish().unwrap();
    let w = Tensor::new(vec![2, 1, 2, 2], vec![1.0, -1.0, 2.0, -2.0, 0.5, 0.5, 0.5, 0.5]).unwrap();
    g.node_mut(c.node).unwrap().params.insert("weight".into(), w);
    let groups = resolve_groups(&g).unwrap();
    let (gid, _) = groups.locate(c.node, SlotPort::Out(0), 0).unwrap();
    let scores = l1_importance(&g, &groups.groups[gid]).unwrap();
    assert_eq!(scores, vec![6.0, 2.0]);
    assert_eq!(select_channels(&scores, 0.5, MIN_KEEP).unwrap(), vec![1]);
}

#[test]
fn residual_scores_add_elementwise() {
    let (mut b, x) = GraphBuilder::new("res", (1, 4, 4), 0).unwrap();
    let p = b.conv(x, 2, 1, 1).unwrap();
    let f = b.conv(p, 2, 1, 1).unwrap();
    let s = b.add(p, f).unwrap();
    let y = b.conv(s, 1, 1, 1).unwrap();
    b.output(y, "out");
    let mut g = b.finish().unwrap();
    g.node_mut(p.node).unwrap().params.insert("weight".into(), Tensor::new(vec![2, 1, 1, 1], vec![1.0, -3.0]).unwrap());
    g.node_mut(f.node)
        .unwrap()
        .params
        .insert("weight".into(), Tensor::new(vec![2, 2, 1, 1], vec![0.5, -0.5, 2.0, 0.0]).unwrap());
    let groups = resolve_groups(&g).unwrap();
    let (gid, _) = groups.locate(p.node, SlotPort::Out(0), 0).unwrap();
    assert_eq!(l1_importance(&g, &groups.groups[gid]).unwrap(), vec![1.0 + 1.0, 3.0 + 2.0]);
}

#[test]
fn selection_rules() {
    assert_eq!(select_channels(&[6.0, 2.0], 0.0, 1).unwrap(), Vec::<usize>::new());
    assert_eq!(select_channels(&[3.0; 4], 0.5, 1).unwrap(), vec![2, 3]);
    assert_eq!(select_channels(&[0.0, 5.0, 1.0], 0.34, 1).unwrap(), vec![0]);
    // 0.3 * 10 is 2.9999999999999996 in binary
    assert_eq!(select_channels(&[1.0; 10], 0.3, 1).unwrap().len(), 3);
    // min_keep caps the removal count
    assert_eq!(select_channels(&[1.0, 2.0], 0.99, 1).unwrap(), vec![0]);
    assert_eq!(select_channels(&[1.0], 0.9, 1).unwrap(), Vec::<usize>::new());
    assert!(select_channels(&[1.0], 1.0, 1).is_err());
    assert!(select_channels(&[1.0], -0.1, 1).is_err());
}

proptest! {
    #[test]
    fn selection_is_optimal(scores in prop::collection::vec(0u8..6, 1..=10), fraction in 0.0f64..0.99) {
        let scores: Vec<f64> = scores.into_iter().map(f64::from).collect();
        let got = select_channels(&scores, fraction, 1).unwrap();
        let l = scores.len();
        let k = ((fraction * l as f64 + 1e-9).floor() as usize).min(l - 1);
        prop_assert_eq!(got.len(), k);
        let cost = |set: &[usize]| set.iter().map(|&i| scores[i]).sum::<f64>();
        let best = (0u32..1 << l)
            .filter(|m| m.count_ones() as usize == k)
            .map(|m| cost(&(0..l).filter(|i| m >> i & 1 == 1).collect::<Vec<_>>()))
            .fold(f64::INFINITY, f64::min);
        prop_assert_eq!(cost(&got), best);
    }

    #[test]
    fn slim_matches_oracle_on_random_fragments(seed in 0u64..10_000, fraction in prop::sample::select(vec![0.1, 0.3, 0.5])) {
        let g = build_mini_net(Preset::ALL[(seed % 3) as usize], (3, 32, 32), 2, seed).unwrap();
        let groups = resolve_groups(&g).unwrap();
        let plan = build_plan(&g, &groups, fraction, None).unwrap();
        let slim = apply_prune_with(&g, &groups, &plan).unwrap();
        let oracle = zero_embed_oracle(&g, &plan).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::from_fn(&[1, 3, 32, 32], |_| rng.gen_range(-1.0f32..1.0));
        let a = forward(&slim, &x, BnMode::Running).unwrap();
        let b = forward(&oracle, &x, BnMode::Running).unwrap();
        for (k, v) in &b {
            prop_assert!(rel(&a[k], v) <= 1e-5, "{k}");
        }
        let pred: u64 = predict_removed_params(&g, &groups, &plan.removal_counts()).unwrap().values().sum();
        prop_assert_eq!(count_params(&g) - pred, count_params(&slim));
    }
}

#[test]
fn empty_plan_is_identity() {
    let g = build_mini_net(Preset::Y11Mini, (3, 64, 64), 3, 0).unwrap();
    assert_eq!(apply_prune(&g, &PrunePlan::empty()).unwrap(), g);
    assert_eq!(zero_embed_oracle(&g, &PrunePlan::empty()).unwrap(), g);
}

#[test]
fn ecoweed_prune_accounts_exactly() {
    let g = build_mini_net(Preset::EcoweedMini, (3, 64, 64), 3, 0).unwrap();
    let groups = resolve_groups(&g).unwrap();
    let plan = build_plan(&g, &groups, 0.3, Some(150)).unwrap();
    let slim = apply_prune(&g, &plan).unwrap();
    infer_shapes(&slim, [1, 3, 64, 64]).unwrap();
    let pred: u64 = predict_removed_params(&g, &groups, &plan.removal_counts()).unwrap().values().sum();
    assert!(pred > 0);
    assert_eq!(count_params(&g) - pred, count_params(&slim));
    assert!(plan.removals.keys().all(|gid| !groups.groups[*gid].protected));
    for n in g.nodes().filter(|n| n.protected) {
        assert_eq!(slim.node(n.id).unwrap().params, n.params, "{}", n.name);
    }
}

#[test]
fn chain_oracle_zeroes_one_column() {
    let (mut b, x) = GraphBuilder::new("chain", (3, 8, 8), 3).unwrap();
    let c1 = b.conv(x, 8, 3, 1).unwrap();
    let bn = b.batchnorm(c1);
    let a = b.act(bn, Activation::Silu);
    let c2 = b.conv(a, 4, 3, 1).unwrap();
    b.output(c2, "out");
    let g = b.finish().unwrap();
    let groups = resolve_groups(&g).unwrap();
    let (mid, _) = groups.locate(c1.node, SlotPort::Out(0), 0).unwrap();
    let mut plan = PrunePlan::empty();
    plan.removals.insert(mid, vec![5]);

    let oracle = zero_embed_oracle(&g, &plan).unwrap();
    let w = oracle.node(c2.node).unwrap().param("weight").unwrap();
    let dense_w = g.node(c2.node).unwrap().param("weight").unwrap();
    for o in 0..4 {
        for i in 0..8 {
            for k in 0..9 {
                let idx = (o * 8 + i) * 9 + k;
                let want = if i == 5 { 0.0 } else { dense_w.data()[idx] };
                assert_eq!(w.data()[idx], want);
            }
        }
    }
    let slim = apply_prune(&g, &plan).unwrap();
    assert_eq!(slim.node(c1.node).unwrap().param("weight").unwrap().shape(), &[7, 3, 3, 3]);
    assert_eq!(slim.node(c2.node).unwrap().param("weight").unwrap().shape(), &[4, 7, 3, 3]);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..20 {
        let x = Tensor::from_fn(&[1, 3, 8, 8], |_| rng.gen_range(-1.0f32..1.0));
        let a = forward_output(&slim, &x, BnMode::Running, "out").unwrap();
        let b = forward_output(&oracle, &x, BnMode::Running, "out").unwrap();
        assert!(rel(&a, &b) <= 1e-5);
    }
}

#[test]
fn sppf_oracle_zeroes_replicated_columns() {
    let g = build_sppf(8, 8, 5).unwrap();
    let groups = resolve_groups(&g).unwrap();
    let cv1 = g.nodes().find(|n| n.name == "sppf.cv1.cb.conv").unwrap().id;
    let cv2 = g.nodes().find(|n| n.name == "sppf.cv2.cb.conv").unwrap().id;
    let (gid, _) = groups.locate(cv1, SlotPort::Out(0), 0).unwrap();
    let h = 4;
    let j = 1;
    let mut plan = PrunePlan::empty();
    plan.removals.insert(gid, vec![j]);
    let oracle = zero_embed_oracle(&g, &plan).unwrap();
    let w = oracle.node(cv2).unwrap().param("weight").unwrap();
    let cin = 4 * h;
    for o in 0..8 {
        for i in 0..cin {
            let zero = w.data()[o * cin + i] == 0.0;
            assert_eq!(zero, [j, h + j, 2 * h + j, 3 * h + j].contains(&i), "column {i}");
        }
    }
    let slim = apply_prune(&g, &plan).unwrap();
    assert_eq!(slim.node(cv2).unwrap().param("weight").unwrap().shape(), &[8, 12, 1, 1]);
    let x = Tensor::from_fn(&[2, 8, 16, 16], |i| ((i * 31) % 17) as f32 / 8.0 - 1.0);
    let a = forward_output(&slim, &x, BnMode::Running, "out").unwrap();
    let b = forward_output(&oracle, &x, BnMode::Running, "out").unwrap();
    assert!(rel(&a, &b) <= 1e-5);
}

#[test]
fn invalid_plans_name_the_group() {
    let g = build_mini_net(Preset::EcoweedMini, (3, 64, 64), 3, 0).unwrap();
    let groups = resolve_groups(&g).unwrap();
    let free = groups.groups.iter().find(|g| !g.protected && g.len > 2).unwrap();
    let prot = groups.groups.iter().find(|g| g.protected).unwrap();
    let cases: Vec<(usize, Vec<usize>)> = vec![
        (free.id, vec![free.len]),
        (free.id, vec![1, 0]),
        (free.id, (0..free.len).collect()),
        (prot.id, vec![0]),
    ];
    for (gid, rm) in cases {
        let mut plan = PrunePlan::empty();
        plan.removals.insert(gid, rm.clone());
        let err = validate_plan(&groups, &plan).unwrap_err();
        assert!(matches!(err, Error::Group { group, .. } if group == gid), "{rm:?}: {err}");
        assert!(apply_prune(&g, &plan).is_err());
    }
}

#[test]
fn ratio_examples() {
    assert_eq!(achieved_ratio_percent(2_780_000, 2_459_176).unwrap(), 11.5);
    assert_eq!(achieved_ratio_percent(2_780_000, 1_683_879).unwrap(), 39.4);
    assert_eq!(achieved_ratio_percent(2_780_000, 876_859).unwrap(), 68.5);
    assert_eq!(achieved_ratio(100, 100).unwrap(), 0.0);
    assert!(achieved_ratio(100, 101).is_err());
    assert!(achieved_ratio(0, 0).is_err());
}

#[test]
fn ratio_grows_with_fraction() {
    for p in Preset::ALL {
        let g = build_mini_net(p, (3, 64, 64), 3, 1).unwrap();
        let groups = resolve_groups(&g).unwrap();
        let mut last = -1.0;
        for f in [0.0, 0.1, 0.2, 0.3, 0.5, 0.7, 0.9] {
            let slim = apply_prune_with(&g, &groups, &build_plan(&g, &groups, f, None).unwrap()).unwrap();
            let r = achieved_ratio(count_params(&g), count_params(&slim)).unwrap();
            assert!(r >= last, "{p}: ratio fell at fraction {f}");
            last = r;
        }
        assert!(g.nodes().any(|n| matches!(n.kind, NodeKind::Conv { .. })));
    }
}

#[test]
fn pruning_is_deterministic() {
    let g: Graph = build_mini_net(Preset::Y12Mini, (3, 64, 64), 3, 4).unwrap();
    let a = apply_prune(&g, &build_plan(&g, &resolve_groups(&g).unwrap(), 0.5, None).unwrap()).unwrap();
    let b = apply_prune(&g, &build_plan(&g, &resolve_groups(&g).unwrap(), 0.5, None).unwrap()).unwrap();
    assert_eq!(a, b);
}
