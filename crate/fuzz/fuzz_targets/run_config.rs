#![no_main]
use coalfake::pipeline::RunConfig;
use libfuzzer_sys::fuzz_target;

// Input: config JSON, then a NUL byte, then one `key=value` override per line.
fuzz_target!(|data: &[u8]| {
    let (json, rest) = match data.iter().position(|&b| b == 0) {
        Some(i) => (&data[..i], &data[i + 1..]),
        None => (data, &[][..]),
    };
    let (Ok(json), Ok(rest)) = (std::str::from_utf8(json), std::str::from_utf8(rest)) else {
        return;
    };
    if let Ok(config) = RunConfig::from_json(json) {
        let overrides: Vec<&str> = rest.lines().collect();
        let _ = config.with_overrides(&overrides);
    }
});
