#![no_main]

use libfuzzer_sys::fuzz_target;
use rmtbvqa::patch;

fuzz_target!(|data: &[u8]| {
    let _ = patch::decode_pixels(data);
});
