#![no_main]

use geopeft::data::splits::{parse_split_map, split_map_json};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(map) = parse_split_map(data) {
        assert_eq!(parse_split_map(split_map_json(&map).as_bytes()).expect("round trip"), map);
    }
});
