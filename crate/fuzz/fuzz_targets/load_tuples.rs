//! Tuple-file parsing must never panic on arbitrary bytes.
#![no_main]

use libfuzzer_sys::fuzz_target;
use uwm_core::calibration::load_tuples;
use uwm_core::encoder::EncoderConfig;

fuzz_target!(|data: &[u8]| {
    let config = EncoderConfig::default();
    let _ = load_tuples(data, &config);
    // A second, tiny geometry exercises the length/range checks.
    let small = EncoderConfig {
        vocab_size: 4,
        seq_len: 2,
        ..config
    };
    let _ = load_tuples(data, &small);
});
