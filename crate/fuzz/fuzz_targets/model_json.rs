#![no_main]

use ctseg::segmodel::SoftmaxModel;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok((model, meta)) = SoftmaxModel::from_json(text) {
        model.check_finite().expect("loaded models are finite");
        let _ = SoftmaxModel::from_json(&model.to_json(&meta)).expect("round trip");
    }
});
