#![no_main]
use coalfake::Label;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(s) = std::str::from_utf8(data) {
        if let Some(label) = Label::parse(s) {
            // Whatever parsed must also parse from its canonical spelling.
            let canonical = if label == Label::Fake { "fake" } else { "real" };
            assert_eq!(Label::parse(canonical), Some(label));
        }
    }
});
