//! Input: class count byte, two little-endian `u32` lengths (sidecar,
//! image), then sidecar, image and mask bytes.
#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if data.len() < 9 {
        return;
    }
    let k = data[0] as usize;
    let len = |i: usize| u32::from_le_bytes([data[i], data[i + 1], data[i + 2], data[i + 3]]) as usize;
    let (a, b) = (len(1), len(5));
    let rest = &data[9..];
    let (sidecar, rest) = rest.split_at(a.min(rest.len()));
    let (image, mask) = rest.split_at(b.min(rest.len()));
    if let Ok(s) = geopeft::data::decode_sample(sidecar, image, mask, k) {
        s.validate(k).expect("decoded samples are valid");
    }
});
