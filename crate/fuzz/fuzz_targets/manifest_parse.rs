#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(m) = geopeft::data::DatasetManifest::parse(data) {
        m.validate().expect("parsed manifests are valid");
    }
});
