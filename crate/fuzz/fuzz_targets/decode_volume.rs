#![no_main]

use ctseg::io::decode_volume;
use ctseg::volume::ClassId;
use libfuzzer_sys::fuzz_target;

// input: sidecar JSON, a NUL byte, then the raw payload
fuzz_target!(|data: &[u8]| {
    let split = data.iter().position(|&b| b == 0).unwrap_or(data.len());
    let Ok(sidecar) = std::str::from_utf8(&data[..split]) else {
        return;
    };
    let payload = data.get(split + 1..).unwrap_or(&[]);
    let _ = decode_volume::<u16>(sidecar, payload);
    let _ = decode_volume::<f32>(sidecar, payload);
    if let Ok(v) = decode_volume::<ClassId>(sidecar, payload) {
        assert_eq!(v.data().len(), v.dims().len());
    }
});
