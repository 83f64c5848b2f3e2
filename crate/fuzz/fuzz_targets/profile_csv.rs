#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(profile) = bess_core::profile::PowerProfile::piecewise_from_csv(data) {
        // a parsed profile must be internally valid and evaluable
        profile.validate().expect("parsed profile validates");
        let _ = profile.power_at(0.0);
        let _ = profile.power_at(1e6);
    }
});
