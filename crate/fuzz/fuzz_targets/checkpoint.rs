#![no_main]
use coalfake::model::{decode_checkpoint, encode_checkpoint};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(state) = decode_checkpoint(data) {
        decode_checkpoint(&encode_checkpoint(&state)).expect("re-encoded checkpoint decodes");
    }
});
