//! Scenario JSON must never panic, only return errors. Parsing and, when it
//! succeeds, building the scenario both run so validation paths get fuzzed
//! too.

#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(cfg) = bess_core::config::ScenarioConfig::from_json_str(text) {
            // cap the work a hostile config can request before building
            if cfg.pack.cells <= 64 && cfg.steps() <= 16 && cfg.solver.ensemble_size <= 64 {
                let _ = cfg.build(std::path::Path::new("/nonexistent"));
            }
        }
    }
});
