//! Layer-id parsing must never panic; accepted ids round-trip via Display.
#![no_main]

use libfuzzer_sys::fuzz_target;
use uwm_core::encoder::LayerId;

fuzz_target!(|data: &[u8]| {
    if let Ok(s) = std::str::from_utf8(data) {
        if let Ok(id) = s.parse::<LayerId>() {
            let printed = id.to_string();
            assert_eq!(printed.parse::<LayerId>().ok(), Some(id));
        }
    }
});
