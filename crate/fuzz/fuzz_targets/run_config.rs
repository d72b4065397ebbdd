#![no_main]

use libfuzzer_sys::fuzz_target;
use tsjm_cli::config::RunConfig;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(cfg) = RunConfig::from_toml_str(text) {
            // Anything accepted must survive a round trip.
            let again = cfg.to_toml().expect("serializable");
            RunConfig::from_toml_str(&again).expect("re-parses");
        }
    }
});
