#![no_main]
use flownerf::oracleio::formats::{decode_fndp, encode_fndp};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(d) = decode_fndp(data) {
        assert_eq!(encode_fndp(&d), data);
    }
});
