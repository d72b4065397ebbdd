#![no_main]

use libfuzzer_sys::fuzz_target;
use tsjm::data::{read_dataset, Schema};

// Input is the longitudinal CSV and the survival CSV separated by a line
// holding only `%%`.
fuzz_target!(|data: &[u8]| {
    let sep = b"\n%%\n";
    let (long, surv) = match data.windows(sep.len()).position(|w| w == sep) {
        Some(at) => (&data[..at], &data[at + sep.len()..]),
        None => (data, &b""[..]),
    };
    let schema = Schema {
        covariate_columns: vec!["x1".into()],
        ..Schema::default()
    };
    if let Ok(ds) = read_dataset(long, surv, &schema) {
        assert_eq!(ds.survival().len(), ds.n_subjects());
        for obs in ds.longitudinal() {
            assert!(ds.subject_index(&obs.subject).is_some());
        }
    }
});
