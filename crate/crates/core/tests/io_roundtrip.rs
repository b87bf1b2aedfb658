use proptest::prelude::*;

use cobformer_core::analysis::AttnView;
use cobformer_core::io::*;
use cobformer_core::model::{AttentionMode, Cobformer, ModelConfig, ModelInputs};
use cobformer_core::nn::normalized_adjacency;
use cobformer_core::partition::{partition_multilevel, Partition};
use cobformer_core::synth::{generate_homophilic_graph, SynthSpec};
use cobformer_core::tensor::{Matrix, ParamStore, Tape};

fn arb_store() -> impl Strategy<Value = ParamStore> {
    let tensor = ("[a-z.]{1,12}", 0usize..5, 0usize..5).prop_flat_map(|(name, r, c)| {
        (Just(name), Just(r), Just(c), prop::collection::vec(any::<f64>(), r * c))
    });
    prop::collection::vec(tensor, 0..6).prop_map(|ts| {
        let mut store = ParamStore::new();
        for (i, (name, r, c, v)) in ts.into_iter().enumerate() {
            store.add(format!("{name}{i}"), Matrix::from_vec(r, c, v).unwrap());
        }
        store
    })
}

fn bits(store: &ParamStore) -> Vec<(String, (usize, usize), Vec<u64>)> {
    store.iter().map(|(_, p)| (p.name.clone(), p.value.shape(), p.value.as_slice().iter().map(|x| x.to_bits()).collect())).collect()
}

proptest! {
    #[test]
    fn checkpoints_round_trip_bitwise(store in arb_store()) {
        let bytes = encode_checkpoint(&store);
        let back = decode_checkpoint(&bytes).unwrap();
        prop_assert_eq!(bits(&back), bits(&store));
        prop_assert_eq!(encode_checkpoint(&back), bytes);
    }

    #[test]
    fn truncated_checkpoints_report_the_file_length(store in arb_store(), frac in 0.0f64..1.0) {
        let bytes = encode_checkpoint(&store);
        let cut = 4 + ((bytes.len() - 4) as f64 * frac) as usize;
        prop_assume!(cut < bytes.len());
        match decode_checkpoint(&bytes[..cut]) {
            Err(IoError::Format { offset, .. }) => prop_assert_eq!(offset, cut),
            // A cut on a tensor boundary is a shorter valid file.
            Ok(s) => prop_assert!(s.len() < store.len()),
            Err(e) => prop_assert!(false, "unexpected {e}"),
        }
    }

    #[test]
    fn partitions_round_trip(assign in prop::collection::vec(0usize..5, 5..60)) {
        let p = 5;
        let mut assign = assign;
        assign[..p].copy_from_slice(&[0, 1, 2, 3, 4]);
        let part = Partition::from_assignment(assign, p, 10.0).unwrap();
        let back = decode_partition(&encode_partition(&part, None)).unwrap();
        prop_assert_eq!(back, part);
    }
}

#[test]
fn checkpoint_rejects_other_versions_and_magic() {
    let mut bytes = encode_checkpoint(&ParamStore::new());
    bytes[3] = b'2';
    assert!(matches!(decode_checkpoint(&bytes), Err(IoError::Version { .. })));
    assert!(matches!(decode_checkpoint(b"PK\x03\x04"), Err(IoError::Format { .. })));
}

#[test]
fn checkpoint_restores_a_trained_model_from_disk() {
    let dir = tempfile::tempdir().unwrap();
    let mut store = ParamStore::new();
    let model = Cobformer::new(&mut store, ModelConfig { hidden: 8, gcn_hidden: 8, ..ModelConfig::default() }, 4, 3, 2).unwrap();
    let path = dir.path().join("m.cbt");
    save_checkpoint(&path, &store).unwrap();
    let mut fresh = ParamStore::new();
    let _ = Cobformer::new(&mut fresh, model.config.clone(), 4, 3, 99).unwrap();
    assert_ne!(fresh, store);
    restore_params(&mut fresh, &load_checkpoint(&path).unwrap()).unwrap();
    assert_eq!(fresh, store);
    assert!(matches!(load_checkpoint(&dir.path().join("missing.cbt")), Err(IoError::Io { .. })));
}

fn captured_views(mode: AttentionMode) -> Vec<AttnView> {
    let spec = SynthSpec { num_nodes: 40, num_classes: 3, target_rho: 0.8, avg_degree: 4.0, seed: 1 };
    let ds = generate_homophilic_graph(&spec).unwrap();
    let mut store = ParamStore::new();
    let cfg = ModelConfig { hidden: 8, gcn_hidden: 8, num_bga_layers: 2, attention: mode, ..ModelConfig::default() };
    let model = Cobformer::new(&mut store, cfg, ds.data.features.cols(), 3, 0).unwrap();
    let partition = partition_multilevel(&ds.graph, 4, 0.1, 0).unwrap();
    let inputs = ModelInputs { features: ds.data.features.clone(), adjacency: normalized_adjacency(&ds.graph), partition };
    let mut t = Tape::no_grad();
    let out = model.forward(&mut t, &store, &inputs, true).unwrap();
    let eff = model.effective_partition(&inputs.partition);
    out.captures.iter().enumerate().map(|(k, c)| AttnView::from_capture(&eff, c, k)).collect()
}

#[test]
fn attention_dumps_round_trip() {
    for mode in [AttentionMode::Bga, AttentionMode::Vanilla] {
        for view in captured_views(mode) {
            let text = encode_attention_dump(&view);
            let header = text.lines().next().unwrap();
            match mode {
                AttentionMode::Bga => assert!(header.starts_with("BGA P=4 layer=")),
                AttentionMode::Vanilla => assert!(header.starts_with("DENSE N=40")),
            }
            let back = decode_attention_dump(&text).unwrap();
            assert_eq!(back.layer(), view.layer());
            assert_eq!(back.to_dense(), view.to_dense());
            assert_eq!(encode_attention_dump(&back), text);
            let cut = text.len() / 2;
            assert!(matches!(decode_attention_dump(&text[..cut]), Err(IoError::Format { .. })));
        }
    }
}

#[test]
fn metrics_lines_are_one_json_object_each() {
    #[derive(serde::Serialize)]
    struct R {
        epoch: usize,
        loss: f64,
    }
    let text = encode_jsonl(&[R { epoch: 0, loss: 1.5 }, R { epoch: 1, loss: 0.25 }]);
    let lines: Vec<_> = text.lines().collect();
    assert_eq!(lines, [r#"{"epoch":0,"loss":1.5}"#, r#"{"epoch":1,"loss":0.25}"#]);
}
