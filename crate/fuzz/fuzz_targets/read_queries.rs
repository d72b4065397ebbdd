#![no_main]

use libfuzzer_sys::fuzz_target;
use tsjm::predict::read_queries;

fuzz_target!(|data: &[u8]| {
    if let Ok(rows) = read_queries(data) {
        assert!(rows.iter().all(|r| r.landmark >= 0.0 && r.window > 0.0));
    }
});
