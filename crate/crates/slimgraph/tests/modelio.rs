use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use slimgraph::modelio::{self, ModelIoError, MAGIC, VERSION};
use slimgraph_core::fakequant::{calibrate, insert_fakequant, QuantPhase};
use slimgraph_core::fp16::to_half_precision;
use slimgraph_core::graph::exec::{forward, BnMode};
use slimgraph_core::graph::{build_mini_net, Graph, NodeKind, Preset};
use slimgraph_core::Tensor;

fn net(preset: Preset) -> Graph {
    build_mini_net(preset, (3, 32, 32), 3, 21).unwrap()
}

fn quantized(preset: Preset) -> Graph {
    let g = insert_fakequant(&net(preset)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let batch = Tensor::from_fn(&[2, 3, 32, 32], |_| rng.gen_range(-1.0f32..1.0));
    calibrate(&g, &[batch]).unwrap().0
}

fn topo_len(bytes: &[u8]) -> usize {
    u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize
}

#[test]
fn fp32_round_trip_is_exact_for_every_preset() {
    for p in Preset::ALL {
        let g = net(p);
        let bytes = modelio::encode(&g, 32).unwrap();
        let (back, bits) = modelio::decode(&bytes).unwrap();
        assert_eq!(bits, 32);
        assert_eq!(back, g, "{p}");
        assert_eq!(modelio::encode(&back, 32).unwrap(), bytes);
    }
}

#[test]
fn quantizer_state_survives_round_trip() {
    let g = quantized(Preset::Y12Mini);
    let (back, _) = modelio::decode(&modelio::encode(&g, 32).unwrap()).unwrap();
    assert_eq!(back, g);
    let q = back
        .nodes()
        .find_map(|n| match &n.kind {
            NodeKind::FakeQuant(q) => Some(q),
            _ => None,
        })
        .unwrap();
    assert_eq!(q.phase, QuantPhase::Active);
    assert!(q.histogram.total() > 0);
    let x = Tensor::full(&[1, 3, 32, 32], 0.25);
    let a = forward(&g, &x, BnMode::Running).unwrap();
    let b = forward(&back, &x, BnMode::Running).unwrap();
    assert!(a.iter().all(|(k, v)| b[k].bit_eq(v)));
}

#[test]
fn header_layout() {
    let bytes = modelio::encode(&net(Preset::EcoweedMini), 32).unwrap();
    assert_eq!(&bytes[0..4], &MAGIC);
    assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), VERSION);
    let t = topo_len(&bytes);
    let doc: serde_json::Value = serde_json::from_slice(&bytes[16..16 + t]).unwrap();
    assert_eq!(doc["precision"], 32);
    let blob = &bytes[16 + t..bytes.len() - 4];
    let crc = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
    assert_eq!(crc, crc32fast::hash(blob));
}

#[test]
fn fp16_file_is_half_a_blob_smaller() {
    let g = net(Preset::Y11Mini);
    let b32 = modelio::encode(&g, 32).unwrap();
    let b16 = modelio::encode(&g, 16).unwrap();
    let blob32 = b32.len() - 20 - topo_len(&b32);
    let blob16 = b16.len() - 20 - topo_len(&b16);
    assert_eq!(blob32, 2 * blob16);
    assert_eq!(topo_len(&b32), topo_len(&b16));
    let (back, bits) = modelio::decode(&b16).unwrap();
    assert_eq!(bits, 16);
    assert_eq!(back, to_half_precision(&g).unwrap().0);
}

#[test]
fn engine_size_ratio_per_preset() {
    for p in Preset::ALL {
        let g = build_mini_net(p, (3, 64, 64), 3, 0).unwrap();
        let r = modelio::encoded_len(&g, 32).unwrap() as f64 / modelio::encoded_len(&g, 16).unwrap() as f64;
        assert!(r >= 1.4, "{p}: fp32/fp16 engine ratio {r:.3}");
        assert_eq!(modelio::encoded_len(&g, 16).unwrap(), modelio::encode(&g, 16).unwrap().len() as u64);
    }
}

#[test]
fn fp16_rejects_out_of_range_weights() {
    let mut g = net(Preset::EcoweedMini);
    let n = g.nodes_mut().find(|n| !n.params.is_empty()).unwrap();
    n.params.values_mut().next().unwrap().data_mut()[0] = 70000.0;
    let err = modelio::encode(&g, 16).unwrap_err();
    assert!(matches!(err, ModelIoError::Core(slimgraph_core::Error::HalfOverflow { .. })), "{err}");
    assert!(modelio::encode(&g, 32).is_ok());
}

#[test]
fn unsupported_precision() {
    assert!(matches!(modelio::encode(&net(Preset::EcoweedMini), 8), Err(ModelIoError::Precision(8))));
}

#[test]
fn encoding_is_deterministic() {
    let a = modelio::encode(&quantized(Preset::Y11Mini), 32).unwrap();
    let b = modelio::encode(&quantized(Preset::Y11Mini), 32).unwrap();
    assert_eq!(a, b);
    assert_eq!(modelio::encoded_len(&quantized(Preset::Y11Mini), 32).unwrap(), a.len() as u64);
}

#[test]
fn corruption_is_detected() {
    let bytes = modelio::encode(&net(Preset::EcoweedMini), 32).unwrap();
    let t = topo_len(&bytes);

    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(modelio::decode(&bad), Err(ModelIoError::BadMagic(_))));

    let mut bad = bytes.clone();
    bad[4..8].copy_from_slice(&7u32.to_le_bytes());
    assert!(matches!(
        modelio::decode(&bad),
        Err(ModelIoError::UnsupportedVersion { found: 7, expected: VERSION })
    ));

    let mut bad = bytes.clone();
    bad[16 + t + 5] ^= 1;
    assert!(matches!(modelio::decode(&bad), Err(ModelIoError::Checksum { .. })));

    let mut bad = bytes.clone();
    let n = bad.len();
    bad[n - 1] ^= 0x80;
    assert!(matches!(modelio::decode(&bad), Err(ModelIoError::Checksum { .. })));

    let mut bad = bytes.clone();
    bad[16] = b'[';
    assert!(matches!(modelio::decode(&bad), Err(ModelIoError::Topology(_))));

    let mut bad = bytes.clone();
    bad[8..16].copy_from_slice(&(u64::MAX / 2).to_le_bytes());
    assert!(modelio::decode(&bad).is_err());
}

#[test]
fn every_truncation_is_rejected() {
    let bytes = modelio::encode(&net(Preset::EcoweedMini), 16).unwrap();
    let t = topo_len(&bytes);
    let mut cuts: Vec<usize> = (0..40).collect();
    cuts.extend([16 + t - 1, 16 + t, 16 + t + 1, bytes.len() - 5, bytes.len() - 4, bytes.len() - 1]);
    for cut in cuts {
        assert!(modelio::decode(&bytes[..cut]).is_err(), "cut at {cut}");
    }
    let mut longer = bytes.clone();
    longer.push(0);
    assert!(modelio::decode(&longer).is_err());
}

#[test]
fn save_and_load_through_the_filesystem() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.twnm");
    let g = quantized(Preset::EcoweedMini);
    let n = modelio::save(&g, 32, &path).unwrap();
    assert_eq!(std::fs::metadata(&path).unwrap().len(), n);
    let (back, bits) = modelio::load(&path).unwrap();
    assert_eq!((back, bits), (g, 32));
    let leftovers: Vec<_> = std::fs::read_dir(dir.path()).unwrap().collect();
    assert_eq!(leftovers.len(), 1, "temporary file left behind");

    let missing = modelio::load(&dir.path().join("nope.twnm")).unwrap_err();
    assert!(matches!(missing, ModelIoError::Io { .. }));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn arbitrary_finite_weights_round_trip_bitwise(values in prop::collection::vec(any::<f32>().prop_filter("finite", |v| v.is_finite()), 1..64), seed in 0u64..1000) {
        let mut g = net(Preset::EcoweedMini);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for n in g.nodes_mut() {
            for t in n.params.values_mut() {
                for v in t.data_mut() {
                    *v = values[rng.gen_range(0..values.len())];
                }
            }
        }
        let bytes = modelio::encode(&g, 32).unwrap();
        let (back, _) = modelio::decode(&bytes).unwrap();
        for (a, b) in g.nodes().zip(back.nodes()) {
            for (k, t) in &a.params {
                prop_assert!(b.params[k].bit_eq(t));
            }
        }
    }

    #[test]
    fn quantizer_attrs_round_trip(amax in 1e-6f32..1e6) {
        let mut g = quantized(Preset::EcoweedMini);
        for n in g.nodes_mut() {
            if let NodeKind::FakeQuant(q) = &mut n.kind {
                q.amax = amax;
                q.scale = amax / 127.0;
            }
        }
        let (back, _) = modelio::decode(&modelio::encode(&g, 32).unwrap()).unwrap();
        prop_assert_eq!(back, g);
    }
}
