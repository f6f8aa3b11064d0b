use dex::checkpoint::{save, to_bytes, Checkpoint, CheckpointError, MAGIC};
use dex::config::RunConfig;
use dex::run::fixed_batch;
use dex_core::train::Trainer;
use dex_core::{Precision, Real};
use serde_json::json;

fn small(steps: usize) -> RunConfig {
    RunConfig::from_value(
        json!({
            "network": {"image_size": 16, "patch_size": 4, "embed_dim": 8, "heads": 2,
                        "num_experts": 4, "top_k": 2, "decoder_dim": 8, "decoder_heads": 2},
            "train": {"steps": steps, "batch_size": 8},
            "data": {"image_size": 16}
        }),
        &[],
    )
    .unwrap()
}

fn trained<T: Real>(config: &RunConfig, steps: usize) -> Trainer<T> {
    let mut t = Trainer::<T>::new(config.network.clone(), config.train.clone(), config.data.clone()).unwrap();
    for _ in 0..steps {
        t.step_sampled().unwrap();
    }
    t
}

fn values<T: Real>(t: &Trainer<T>) -> Vec<T> {
    t.model.params.iter().flat_map(|(_, p)| p.value.data().to_vec()).collect()
}

#[test]
fn eval_output_survives_a_round_trip_bitwise() {
    let config = small(10);
    let t = trained::<f64>(&config, 4);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.dex");
    save(&path, &t, &config).unwrap();
    let back = Checkpoint::read(&path).unwrap().restore::<f64>().unwrap();
    let images = fixed_batch::<f64>(&config.data, 6).unwrap();
    let (a, ra) = t.model.encode_eval(&images).unwrap();
    let (b, rb) = back.model.encode_eval(&images).unwrap();
    let bits = |x: &[f64]| x.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(a.data()), bits(b.data()));
    assert_eq!(ra, rb);
    assert_eq!(values(&t), values(&back));
    assert_eq!(back.step, 4);
}

#[test]
fn single_precision_round_trip() {
    let mut config = small(10);
    config.train.precision = Precision::F32;
    let t = trained::<f32>(&config, 2);
    let c = Checkpoint::from_bytes(&to_bytes(&t, &config)).unwrap();
    assert_eq!(c.manifest.dtype, "f32");
    let back = c.restore::<f32>().unwrap();
    assert_eq!(values(&t), values(&back));
    assert!(matches!(c.restore::<f64>(), Err(CheckpointError::Dtype { .. })));
}

#[test]
fn resumed_training_continues_the_same_trajectory() {
    let config = small(8);
    let straight = trained::<f64>(&config, 8);
    let half = trained::<f64>(&config, 4);
    let mut resumed = Checkpoint::from_bytes(&to_bytes(&half, &config))
        .unwrap()
        .restore::<f64>()
        .unwrap();
    while !resumed.is_done() {
        resumed.step_sampled().unwrap();
    }
    assert_eq!(values(&resumed), values(&straight));
    assert_eq!(resumed.optimizer, straight.optimizer);
    for (a, b) in resumed.model.blocks.iter().zip(&straight.model.blocks) {
        assert_eq!(a.gate.freq, b.gate.freq);
    }
}

#[test]
fn corrupt_magic_is_a_format_error() {
    let config = small(10);
    let mut bytes = to_bytes(&trained::<f64>(&config, 1), &config);
    bytes[0] = b'X';
    assert!(matches!(Checkpoint::from_bytes(&bytes), Err(CheckpointError::Format(_))));
    assert!(matches!(Checkpoint::from_bytes(b"hello"), Err(CheckpointError::Format(_))));
}

#[test]
fn truncation_is_detected_everywhere() {
    let config = small(10);
    let bytes = to_bytes(&trained::<f64>(&config, 1), &config);
    let manifest_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    for cut in [4, 8, 12, 16, 16 + manifest_len / 2, 16 + manifest_len + 10, bytes.len() - 1] {
        let r = Checkpoint::from_bytes(&bytes[..cut]);
        assert!(matches!(r, Err(CheckpointError::Truncated(_))), "cut at {cut}: {r:?}");
    }
    assert!(Checkpoint::from_bytes(&bytes).is_ok());
}

fn with_manifest(bytes: &[u8], edit: impl FnOnce(&mut serde_json::Value)) -> Vec<u8> {
    let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let mut manifest: serde_json::Value = serde_json::from_slice(&bytes[16..16 + len]).unwrap();
    edit(&mut manifest);
    let text = serde_json::to_vec(&manifest).unwrap();
    let mut out = MAGIC.to_vec();
    out.extend_from_slice(&(text.len() as u64).to_le_bytes());
    out.extend_from_slice(&text);
    out.extend_from_slice(&bytes[16 + len..]);
    out
}

#[test]
fn other_versions_are_rejected() {
    let config = small(10);
    let bytes = to_bytes(&trained::<f64>(&config, 1), &config);
    let newer = with_manifest(&bytes, |m| m["format_version"] = json!(2));
    assert!(matches!(
        Checkpoint::from_bytes(&newer),
        Err(CheckpointError::Version { found: 2, expected: 1 })
    ));
    let unchanged = with_manifest(&bytes, |_| {});
    assert!(Checkpoint::from_bytes(&unchanged).is_ok());
}

#[test]
fn a_different_expert_count_is_a_shape_error() {
    let config = small(10);
    let c = Checkpoint::from_bytes(&to_bytes(&trained::<f64>(&config, 1), &config)).unwrap();
    let mut other = config.clone();
    other.network.num_experts = 8;
    assert!(matches!(c.restore_as::<f64>(&other), Err(CheckpointError::Shape(_))));
    let mut deeper = config.clone();
    deeper.network.depth = 3;
    assert!(matches!(c.restore_as::<f64>(&deeper), Err(CheckpointError::Shape(_))));
    let mut shallower = config;
    shallower.network.depth = 1;
    assert!(matches!(c.restore_as::<f64>(&shallower), Err(CheckpointError::Shape(_))));
}
