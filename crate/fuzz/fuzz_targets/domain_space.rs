#![no_main]
use coalfake::domainspace::DomainSpace;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(s) = std::str::from_utf8(data) {
        let _ = DomainSpace::from_json(s);
    }
});
