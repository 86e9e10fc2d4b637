//! Replays the checked-in fuzz corpus through the same harness bodies as
//! the cargo-fuzz targets, so the seeds stay exercised on stable.

use std::fs;
use std::path::PathBuf;

use geopeft::config::{parse_ini, ExperimentConfig};
use geopeft::data::splits::{parse_split_map, split_map_json};
use geopeft::data::{decode_sample, DatasetManifest};

fn seeds(target: &str) -> Vec<(String, Vec<u8>)> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus").join(target);
    let mut out: Vec<_> = fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap())
        })
        .collect();
    out.sort();
    assert!(!out.is_empty(), "no seeds for {target}");
    out
}

fn checkpoint_decode(data: &[u8]) -> bool {
    if data.len() < 4 {
        return false;
    }
    let n = u32::from_le_bytes([data[0], data[1], data[2], data[3]]) as usize;
    let rest = &data[4..];
    let (manifest, weights) = rest.split_at(n.min(rest.len()));
    match geopeft::checkpoint::decode(manifest, weights) {
        Ok(tensors) => {
            let (m, w) = geopeft::checkpoint::encode(&tensors).unwrap();
            assert_eq!(geopeft::checkpoint::decode(m.as_bytes(), &w).unwrap().len(), tensors.len());
            true
        }
        Err(_) => false,
    }
}

fn manifest_parse(data: &[u8]) -> bool {
    DatasetManifest::parse(data).map(|m| m.validate().unwrap()).is_ok()
}

fn sample_decode(data: &[u8]) -> bool {
    if data.len() < 9 {
        return false;
    }
    let k = data[0] as usize;
    let len = |i: usize| u32::from_le_bytes([data[i], data[i + 1], data[i + 2], data[i + 3]]) as usize;
    let (a, b) = (len(1), len(5));
    let rest = &data[9..];
    let (sidecar, rest) = rest.split_at(a.min(rest.len()));
    let (image, mask) = rest.split_at(b.min(rest.len()));
    decode_sample(sidecar, image, mask, k).map(|s| s.validate(k).unwrap()).is_ok()
}

fn config_parse(data: &[u8]) -> bool {
    let Ok(text) = std::str::from_utf8(data) else { return false };
    let _ = parse_ini(text);
    match text.parse::<ExperimentConfig>() {
        Ok(cfg) => {
            let back: ExperimentConfig = cfg.to_ini().parse().unwrap();
            assert_eq!(back, cfg);
            true
        }
        Err(_) => false,
    }
}

fn split_map(data: &[u8]) -> bool {
    match parse_split_map(data) {
        Ok(map) => {
            assert_eq!(parse_split_map(split_map_json(&map).as_bytes()).unwrap(), map);
            true
        }
        Err(_) => false,
    }
}

/// Runs every seed and checks which ones are accepted.
fn replay(target: &str, f: fn(&[u8]) -> bool, rejected: &[&str]) {
    for (name, bytes) in seeds(target) {
        assert_eq!(f(&bytes), !rejected.contains(&name.as_str()), "{target}/{name}");
    }
}

#[test]
fn checkpoint_seeds() {
    replay("checkpoint_decode", checkpoint_decode, &["bad_offset"]);
}

#[test]
fn manifest_seeds() {
    replay("manifest_parse", manifest_parse, &["escaping_path", "truncated"]);
}

#[test]
fn sample_seeds() {
    replay("decode_sample", sample_decode, &["short_image"]);
}

#[test]
fn config_seeds() {
    replay("config_parse", config_parse, &["unknown_key", "syntax"]);
}

#[test]
fn split_map_seeds() {
    replay("split_map", split_map, &["bad_split"]);
}
