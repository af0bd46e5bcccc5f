#![no_main]

use libfuzzer_sys::fuzz_target;
use std::path::Path;

use rmtbvqa::video;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        let _ = video::parse_video_list(text, Path::new("fuzz.csv"));
    }
});
