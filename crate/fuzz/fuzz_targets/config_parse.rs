#![no_main]

use centralflows::harness::ExperimentConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        // whatever parses must also pass validation and build
        if let Ok(cfg) = text.parse::<ExperimentConfig>() {
            let _ = cfg.method_spec();
            let _ = cfg.flow_options();
        }
    }
});
