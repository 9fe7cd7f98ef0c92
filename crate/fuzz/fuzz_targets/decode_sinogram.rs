#![no_main]

use ctseg::io::{decode_sinogram, encode_sinogram};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let split = data.iter().position(|&b| b == 0).unwrap_or(data.len());
    let Ok(sidecar) = std::str::from_utf8(&data[..split]) else {
        return;
    };
    let payload = data.get(split + 1..).unwrap_or(&[]);
    if let Ok(s) = decode_sinogram(sidecar, payload) {
        let (side, bytes) = encode_sinogram(&s);
        assert!(decode_sinogram(&side, &bytes).is_ok());
    }
});
