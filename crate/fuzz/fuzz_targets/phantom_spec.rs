#![no_main]

use ctseg::phantom::PhantomSpec;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(spec) = serde_json::from_slice::<PhantomSpec>(data) else {
        return;
    };
    let _ = spec.validate();
});
