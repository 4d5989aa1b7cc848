#![no_main]

use libfuzzer_sys::fuzz_target;
use mollify_harness::plot::emit_plot;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    // first line names the columns to draw, the rest is the CSV
    let (cols, csv) = text.split_once('\n').unwrap_or((text, ""));
    let cols: Vec<&str> = cols.split(',').collect();
    if let Ok(svg) = emit_plot(csv, &cols) {
        assert!(svg.starts_with("<svg") && svg.ends_with("</svg>\n"));
        assert_eq!(svg.matches("<polyline").count(), cols.len());
    }
});
