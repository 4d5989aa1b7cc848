#![no_main]

use libfuzzer_sys::fuzz_target;
use mollify_harness::metrics::{self, Table};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(table) = Table::parse(text) else { return };
    if let (Ok(layers), Ok(rows)) = (table.metrics_layers(), table.to_rows()) {
        let _ = metrics::aggregate(layers, &[rows.clone(), rows]);
    }
});
