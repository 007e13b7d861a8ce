#![no_main]
use coalfake_service::parse_label_body;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = parse_label_body(data);
});
