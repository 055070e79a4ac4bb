#![no_main]
use flownerf::oracleio::formats::{decode_flo, encode_flo};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(f) = decode_flo(data) {
        let bytes = encode_flo(&f);
        assert_eq!(bytes, data, "accepted .flo input must re-encode to itself");
    }
});
