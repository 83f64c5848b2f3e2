#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(records) = bess_core::sim::read_records_csv(data) {
        // successful parses must round-trip through the writer
        if let Some(first) = records.first() {
            let mut buf = Vec::new();
            bess_core::sim::write_records_csv(&mut buf, &records, first.socs.len())
                .expect("parsed records re-serialize");
        }
    }
});
