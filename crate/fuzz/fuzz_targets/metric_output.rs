#![no_main]

use libfuzzer_sys::fuzz_target;

use rmtbvqa::proxy;

// Input is `pattern \0 output`; without a NUL byte there is no pattern.
fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let _ = match text.split_once('\0') {
        Some((pattern, output)) => proxy::parse_metric_output(output, Some(pattern)),
        None => proxy::parse_metric_output(text, None),
    };
});
