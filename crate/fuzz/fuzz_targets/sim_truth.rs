#![no_main]

use libfuzzer_sys::fuzz_target;
use tsjm::sim::SimTruth;

fuzz_target!(|data: &[u8]| {
    if let Ok(truth) = SimTruth::from_reader(data) {
        let mut out = Vec::new();
        truth.to_writer(&mut out).expect("serializable");
    }
});
