#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(state) = bess_core::sim::read_state_csv(data) {
        // parsed states satisfy the pack invariants by construction
        assert!(state.len() > 0);
        assert!(state.socs().iter().all(|q| (0.0..=1.0).contains(q)));
    }
});
