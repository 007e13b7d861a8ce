#![no_main]
use coalfake::pipeline::RunState;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(state) = RunState::from_file_bytes(data) {
        RunState::from_file_bytes(&state.to_file_bytes()).expect("re-encoded state decodes");
    }
});
