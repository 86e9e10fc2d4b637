#![no_main]

use geopeft::config::{parse_ini, ExperimentConfig};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let _ = parse_ini(text);
    if let Ok(cfg) = text.parse::<ExperimentConfig>() {
        let back: ExperimentConfig = cfg.to_ini().parse().expect("resolved config parses");
        assert_eq!(back, cfg);
    }
});
