#![no_main]
use flownerf::oracleio::formats::{decode_pgm_mask, encode_pgm_mask};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok((w, h, mask)) = decode_pgm_mask(data) {
        assert_eq!(mask.len(), w * h);
        let again = decode_pgm_mask(&encode_pgm_mask(w, h, &mask)).expect("encoded mask parses");
        assert_eq!(again, (w, h, mask));
    }
});
