#![no_main]
use coalfake::corpus::parse_jsonl;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(s) = std::str::from_utf8(data) {
        if let Ok(records) = parse_jsonl(s, "fuzz") {
            assert!(records.iter().all(|r| r.source == "fuzz"));
        }
    }
});
