//! Knowledge/prototype parsing must never panic. The input splits at the
//! first 0xFF byte into a samples part and a prototypes part.
#![no_main]

use libfuzzer_sys::fuzz_target;
use uwm_core::calibration::KnowledgeSet;
use uwm_core::encoder::EncoderConfig;

fuzz_target!(|data: &[u8]| {
    let config = EncoderConfig::default();
    let (samples, prototypes) = match data.iter().position(|&b| b == 0xFF) {
        Some(p) => (&data[..p], &data[p + 1..]),
        None => (data, &[][..]),
    };
    let _ = KnowledgeSet::load(samples, prototypes, &config);
});
