#![no_main]

use libfuzzer_sys::fuzz_target;
use tsjm::predict::read_predictions;

fuzz_target!(|data: &[u8]| {
    let _ = read_predictions(data);
});
