//! Archive parsing must never panic, and anything it accepts must survive a
//! bit-exact write/read round trip.
#![no_main]

use libfuzzer_sys::fuzz_target;
use uwm_core::tensorio::{read_archive, write_archive_bytes};

fuzz_target!(|data: &[u8]| {
    if let Ok(archive) = read_archive(data) {
        let bytes = write_archive_bytes(&archive).expect("accepted archive must serialize");
        let back = read_archive(&bytes[..]).expect("serialized archive must parse");
        assert_eq!(archive, back);
    }
});
