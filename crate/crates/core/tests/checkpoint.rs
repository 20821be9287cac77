mod common;

use std::fs;

use common::tiny_model;
use oceanprompt::checkpoint::{Checkpoint, EpochRecord, RngState, CHECKPOINT_VERSION};
use oceanprompt::datastore::VariableUniverse;
use oceanprompt::model::{Model, Variant};
use oceanprompt::trainer::{SubsetPolicy, TrainConfig};
use oceanprompt::Error;

fn sample_checkpoint() -> Checkpoint {
    let model = Model::new(&tiny_model(Variant::Full), 4).unwrap();
    let params = model.init_params::<f32>(1);
    let mut adam_v = params.zeros_like();
    for (_, t) in adam_v.iter_mut() {
        t.data_mut().iter_mut().enumerate().for_each(|(i, v)| *v = (i as f32).sqrt() * 1e-7);
    }
    Checkpoint {
        model: model.config.clone(),
        train: TrainConfig::default(),
        policy: SubsetPolicy::default(),
        universe: VariableUniverse::default(),
        epoch: 2,
        step: 17,
        rng: RngState { seed: 0, next_epoch: 2 },
        history: vec![EpochRecord {
            epoch: 0,
            train_loss: 0.1 + 0.2,
            val_loss: None,
            wall_time_s: 1.5,
        }],
        best_val: Some(1.0 / 3.0),
        adam_m: model.init_params::<f32>(2),
        adam_v,
        params,
    }
}

#[test]
fn round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.ckpt");
    let ckpt = sample_checkpoint();
    ckpt.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back, ckpt);
    assert_eq!(back.identity(), ckpt.identity());
    assert_eq!(back.to_bytes().unwrap(), fs::read(&path).unwrap());
    assert!(!dir.path().join("a.ckpt.partial").exists());
}

#[test]
fn identity_tracks_parameters() {
    let a = sample_checkpoint();
    let mut b = a.clone();
    b.params.iter_mut().next().unwrap().1.data_mut()[0] += 1.0;
    assert_ne!(a.identity(), b.identity());
    assert_eq!(a.identity().len(), 16);
}

#[test]
fn damaged_files_are_format_errors() {
    let bytes = sample_checkpoint().to_bytes().unwrap();
    let p = std::path::Path::new("x.ckpt");
    let mut bad_magic = bytes.clone();
    bad_magic[0] = b'X';
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let mut bad_json = bytes.clone();
    bad_json[16] = b'#';
    for damaged in [&bad_magic[..], &bytes[..bytes.len() - 3], &bytes[..16 + header_len / 2], &bad_json[..], &[][..]] {
        let err = Checkpoint::from_bytes(damaged, p).unwrap_err();
        assert!(matches!(err, Error::Format { .. }), "{err}");
        assert_eq!(err.exit_code(), 3);
    }
}

#[test]
fn other_schema_versions_are_refused_with_both_numbers() {
    let bytes = sample_checkpoint().to_bytes().unwrap();
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let mut header: serde_json::Value = serde_json::from_slice(&bytes[16..16 + header_len]).unwrap();
    header["schema_version"] = serde_json::json!(CHECKPOINT_VERSION + 1);
    let new_header = serde_json::to_vec(&header).unwrap();
    let mut rebuilt = bytes[..8].to_vec();
    rebuilt.extend_from_slice(&(new_header.len() as u64).to_le_bytes());
    rebuilt.extend_from_slice(&new_header);
    rebuilt.extend_from_slice(&bytes[16 + header_len..]);
    match Checkpoint::from_bytes(&rebuilt, std::path::Path::new("v.ckpt")).unwrap_err() {
        Error::Version { found, expected, .. } => {
            assert_eq!(found, CHECKPOINT_VERSION + 1);
            assert_eq!(expected, CHECKPOINT_VERSION);
        }
        other => panic!("unexpected {other}"),
    }
}

#[test]
fn missing_file_is_an_io_error() {
    let err = Checkpoint::load(std::path::Path::new("/nonexistent/dir/x.ckpt")).unwrap_err();
    assert_eq!(err.exit_code(), 5);
}
