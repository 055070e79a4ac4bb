#![no_main]
use flownerf::oracleio::SceneMeta;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(meta) = SceneMeta::from_json(data) {
        let again = SceneMeta::from_json(meta.to_json().as_bytes()).expect("rendered scene parses");
        assert_eq!(again, meta);
    }
});
