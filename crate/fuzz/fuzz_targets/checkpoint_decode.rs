//! Input: little-endian `u32` manifest length, manifest bytes, weight blob.
#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if data.len() < 4 {
        return;
    }
    let n = u32::from_le_bytes([data[0], data[1], data[2], data[3]]) as usize;
    let rest = &data[4..];
    let (manifest, weights) = rest.split_at(n.min(rest.len()));
    if let Ok(tensors) = geopeft::checkpoint::decode(manifest, weights) {
        // whatever decodes must re-encode to the same tensors
        let (m, w) = geopeft::checkpoint::encode(&tensors).expect("re-encode");
        let again = geopeft::checkpoint::decode(m.as_bytes(), &w).expect("re-decode");
        assert_eq!(again.len(), tensors.len());
    }
});
