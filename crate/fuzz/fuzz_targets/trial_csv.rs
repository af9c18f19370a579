#![no_main]

use hes_core::io::parse_trial_csv;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(rows) = parse_trial_csv(text) {
        assert!(rows.iter().all(|r| r.metric.is_finite()));
    }
});
