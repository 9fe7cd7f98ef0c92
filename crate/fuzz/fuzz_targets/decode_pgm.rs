#![no_main]

use ctseg::io::{decode_pgm, encode_pgm16};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(img) = decode_pgm(data) {
        let again = decode_pgm(&encode_pgm16(&img)).expect("re-encoded image decodes");
        assert_eq!(again, img);
    }
});
