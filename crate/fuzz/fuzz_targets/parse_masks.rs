//! Mask and score-table decoding from archives must never panic.
#![no_main]

use libfuzzer_sys::fuzz_target;
use uwm_core::flowscore::ScoreTable;
use uwm_core::surgeon::SelectionMask;
use uwm_core::tensorio::read_archive;

fuzz_target!(|data: &[u8]| {
    if let Ok(archive) = read_archive(data) {
        let _ = SelectionMask::from_archive(&archive);
        let _ = ScoreTable::from_archive(&archive, "score");
        let _ = ScoreTable::from_archive(&archive, "gradscore");
    }
});
