#![no_main]

use gastro_core::pipeline::PipelineConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = PipelineConfig::from_toml(text, "fuzz") {
        cfg.validate().expect("parsed configs are valid");
    }
});
