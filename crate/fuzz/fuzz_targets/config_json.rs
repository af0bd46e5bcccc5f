#![no_main]

use libfuzzer_sys::fuzz_target;
use rmtbvqa::config::RunConfig;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(cfg) = RunConfig::from_json(text) {
            let _ = cfg.validate();
        }
    }
});
