mod common;

use common::tiny_config;
use occgen_core::checkpoint::{from_bytes, load_checkpoint, save_checkpoint, to_bytes};
use occgen_core::diffusion::Model;
use occgen_core::reward::init_adapters;
use occgen_core::Error;

fn model() -> Model {
    let mut m = Model::init(&tiny_config(), &Default::default()).unwrap();
    init_adapters(&mut m.params, 2, 1).unwrap();
    common::activate(&mut m, 3);
    m
}

#[test]
fn bytes_round_trip_exactly() {
    let m = model();
    let bytes = to_bytes(&m);
    let back = from_bytes(&bytes).unwrap();
    assert_eq!(back, m);
    assert_eq!(to_bytes(&back), bytes);
    assert_eq!(to_bytes(&m), bytes);
}

#[test]
fn file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ddfx");
    let m = model();
    save_checkpoint(&path, &m).unwrap();
    assert_eq!(load_checkpoint(&path).unwrap(), m);
    assert!(matches!(load_checkpoint(&dir.path().join("missing")), Err(Error::Io { .. })));
}

fn corrupt(bytes: &[u8]) -> String {
    match from_bytes(bytes) {
        Err(Error::Checkpoint(msg)) => msg,
        Err(e) => panic!("unexpected error kind: {e}"),
        Ok(_) => panic!("corrupted bytes were accepted"),
    }
}

#[test]
fn corruption_is_detected() {
    let good = to_bytes(&model());
    let mut bad = good.clone();
    bad[0] = b'X';
    assert!(corrupt(&bad).contains("magic"));
    let mut bad = good.clone();
    bad[4] = 9;
    assert!(corrupt(&bad).contains("version"));
    for cut in [3, 8, 20, good.len() / 3, good.len() / 2, good.len() - 1] {
        assert!(from_bytes(&good[..cut]).is_err(), "prefix of {cut} bytes accepted");
    }
    let mut bad = good.clone();
    bad.push(0);
    assert!(corrupt(&bad).contains("trailing"));
    // absurd config length
    let mut bad = good.clone();
    bad[8..16].copy_from_slice(&u64::MAX.to_le_bytes());
    assert!(corrupt(&bad).contains("exceeds"));
}

#[test]
fn error_mentions_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("broken.ddfx");
    std::fs::write(&path, b"DDFX\x01\0\0\0").unwrap();
    let msg = load_checkpoint(&path).unwrap_err().to_string();
    assert!(msg.contains("broken.ddfx"), "{msg}");
}
