#![no_main]

use libfuzzer_sys::fuzz_target;
use rmtbvqa::video;

fuzz_target!(|data: &[u8]| {
    if let Ok(v) = video::decode(data) {
        assert_eq!(video::decode(&video::encode(&v)).unwrap(), v);
    }
});
