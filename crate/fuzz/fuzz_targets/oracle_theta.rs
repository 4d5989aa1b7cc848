#![no_main]

use libfuzzer_sys::fuzz_target;
use mollify_harness::oracle_cli::{parse_theta, run_oracle};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(theta) = parse_theta(text) else { return };
    if theta.len() <= 16 {
        let _ = run_oracle("double-well", &theta, 0.5, 8, 1);
    }
});
