#![no_main]
use flownerf::oracleio::formats::{decode_tum, encode_tum};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(entries) = decode_tum(text) {
        let again = decode_tum(&encode_tum(&entries)).expect("encoded trajectory parses");
        assert_eq!(encode_tum(&again), encode_tum(&entries));
        for e in &entries {
            let _ = e.pose();
        }
    }
});
