#![no_main]
use kcut_service::session::parse_session_request;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(req) = parse_session_request(data) else { return };
    let bytes = serde_json::to_vec(&req).expect("request serializes");
    let again = parse_session_request(&bytes).expect("serialized request re-parses");
    assert_eq!(req, again);
});
