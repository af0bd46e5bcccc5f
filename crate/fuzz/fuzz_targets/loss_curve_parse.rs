#![no_main]

use libfuzzer_sys::fuzz_target;
use std::path::Path;

use rmtbvqa::trainer;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        let _ = trainer::parse_curve(text, Path::new("fuzz.csv"));
    }
});
