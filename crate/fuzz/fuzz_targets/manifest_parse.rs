#![no_main]

use libfuzzer_sys::fuzz_target;
use std::path::Path;

use rmtbvqa::manifest;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(m) = manifest::parse(text, Path::new("fuzz.csv")) {
            let _ = m.validate();
        }
    }
});
