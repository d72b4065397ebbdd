#![no_main]

use libfuzzer_sys::fuzz_target;
use tsjm::two_stage::TwoStageModel;

fuzz_target!(|data: &[u8]| {
    let _ = TwoStageModel::check_manifest(data);
});
