#![no_main]

use libfuzzer_sys::fuzz_target;
use tsjm::mcmc::JointPosterior;

fuzz_target!(|data: &[u8]| {
    if let Ok(post) = JointPosterior::from_reader(data) {
        let _ = post.model();
        if post.n_draws() > 0 {
            let _ = post.point_estimate();
        }
    }
});
