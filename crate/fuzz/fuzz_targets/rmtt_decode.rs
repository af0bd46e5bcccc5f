#![no_main]

use libfuzzer_sys::fuzz_target;
use rmtbvqa::rmtt;

fuzz_target!(|data: &[u8]| {
    if let Ok(t) = rmtt::decode(data) {
        let bytes = rmtt::encode(&t);
        assert_eq!(rmtt::decode(&bytes).unwrap(), t);
    }
});
