#![no_main]
use coalfake::annotator::llm::parse_chat_response;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = parse_chat_response(data);
});
