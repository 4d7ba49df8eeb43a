//! Replays the checked-in fuzz seeds through the fuzz targets' invariants.

use std::fs;
use std::path::{Path, PathBuf};

use mlomae::data::cifar10_decode;
use mlomae::io::{bundle_from_bytes, container, Checkpoint, Pgm, RunConfig};

fn seeds(target: &str) -> Vec<(PathBuf, Vec<u8>)> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus").join(target);
    let mut out: Vec<_> = fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| {
            let p = e.unwrap().path();
            let bytes = fs::read(&p).unwrap();
            (p, bytes)
        })
        .collect();
    out.sort();
    assert!(!out.is_empty(), "no seeds for {target}");
    out
}

#[test]
fn cifar_seeds() {
    let mut decoded = 0;
    for (_, data) in seeds("cifar_decode") {
        if let Ok(images) = cifar10_decode(&data, None, Path::new("seed")) {
            assert_eq!(images.len() * 3073, data.len());
            decoded += 1;
        }
    }
    assert!(decoded >= 1);
}

#[test]
fn config_seeds_round_trip() {
    for (p, data) in seeds("config_parse") {
        let cfg = RunConfig::parse(std::str::from_utf8(&data).unwrap())
            .unwrap_or_else(|e| panic!("{}: {e}", p.display()));
        assert_eq!(RunConfig::parse(&cfg.serialize()).unwrap(), cfg);
    }
}

#[test]
fn checkpoint_seeds_are_canonical() {
    for (p, data) in seeds("checkpoint_decode") {
        let ck = Checkpoint::from_bytes(&data).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
        assert_eq!(ck.to_bytes(), data);
    }
}

#[test]
fn bundle_seeds_decode() {
    for (p, data) in seeds("bundle_decode") {
        let entries = container::decode(&data).unwrap();
        assert_eq!(container::encode(&entries), data);
        bundle_from_bytes(&data).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
    }
}

#[test]
fn pgm_seeds_round_trip() {
    for (p, data) in seeds("pgm_parse") {
        let img = Pgm::parse(&data).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
        assert_eq!(img.pixels.len(), img.width * img.height);
        assert_eq!(Pgm::parse(&img.to_bytes()).unwrap(), img);
    }
}
