use std::path::Path;

use medoe::formats::{decode_checkpoint, encode_checkpoint, read_checkpoint, write_checkpoint};
use medoe::inference::{predict, Combiner};
use medoe::synthgen::{compute_frequency, generate_dataset, make_grouping, GeneratorConfig, GroupingMode, SceneSample};
use medoe::training::{train_full, TrainConfig, TrainMode, TrainedModel};

fn tiny(mode: TrainMode) -> (TrainedModel, Vec<SceneSample>) {
    let data = generate_dataset(&GeneratorConfig { height: 24, width: 24, n_scenes: 4, seed: 3, ..Default::default() }).unwrap();
    let profile = compute_frequency(&data, 12).unwrap();
    let grouping = make_grouping(&profile, GroupingMode::ExplicitCounts { head: 2, body: 4, tail: 6 }).unwrap();
    let cfg = TrainConfig { iters: 6, moe_iters: 6, seed: 11, mode, ..Default::default() };
    (train_full(&data, &grouping, &cfg).unwrap(), data)
}

fn same_params(a: &TrainedModel, b: &TrainedModel) {
    assert_eq!(a.dims, b.dims);
    assert_eq!(a.mode, b.mode);
    assert_eq!(a.backbone, b.backbone);
    assert_eq!(a.experts, b.experts);
    assert_eq!(a.expert_sets, b.expert_sets);
    assert_eq!(a.grouping, b.grouping);
    assert_eq!(a.profile, b.profile);
    assert_eq!(a.calibration, b.calibration);
    assert_eq!(a.provenance.seed, b.provenance.seed);
    assert_eq!(a.provenance.config, b.provenance.config);
}

#[test]
fn checkpoint_round_trip_preserves_model() {
    for mode in [TrainMode::Medoe, TrainMode::Baseline, TrainMode::Focal { gamma: 1.5 }] {
        let (model, data) = tiny(mode);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.medc");
        write_checkpoint(&path, &model).unwrap();
        let back = read_checkpoint(&path).unwrap();
        same_params(&model, &back);
        let c = if model.experts.len() > 1 { Combiner::Moe } else { Combiner::Single(0) };
        assert_eq!(predict(&model, &data[0], c).unwrap(), predict(&back, &data[0], c).unwrap());
    }
}

#[test]
fn checkpoints_are_bit_identical() {
    let (a, _) = tiny(TrainMode::Medoe);
    let (b, _) = tiny(TrainMode::Medoe);
    let bytes = encode_checkpoint(&a).unwrap();
    assert_eq!(bytes, encode_checkpoint(&b).unwrap());
    let back = decode_checkpoint(&bytes, Path::new("m")).unwrap();
    assert_eq!(encode_checkpoint(&back).unwrap(), bytes);
}

#[test]
fn damaged_checkpoints_are_rejected() {
    let (model, _) = tiny(TrainMode::Baseline);
    let bytes = encode_checkpoint(&model).unwrap();
    let p = Path::new("m");
    assert!(decode_checkpoint(&bytes[..bytes.len() - 3], p).is_err());
    let mut wrong_magic = bytes.clone();
    wrong_magic[0] = b'X';
    assert!(decode_checkpoint(&wrong_magic, p).is_err());
    let mut extra = bytes;
    extra.push(0);
    let err = decode_checkpoint(&extra, p).unwrap_err();
    assert_eq!(err.exit_code(), 3);
}
