//! Metrics CSV parser, plus a value-level write/parse round trip on
//! anything accepted (text forms may differ, e.g. `1e3` vs `1000`).

#![no_main]

use libfuzzer_sys::fuzz_target;
use palp_lab::evalkit::report::{parse_metrics_csv, write_metrics_csv};

fn same(a: f64, b: f64) -> bool {
    a == b || (a.is_nan() && b.is_nan())
}

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(rows) = parse_metrics_csv(text) else { return };
    let rewritten = write_metrics_csv(&rows);
    let again = parse_metrics_csv(&rewritten).expect("rewritten CSV must parse");
    assert_eq!(rows.len(), again.len());
    for (a, b) in rows.iter().zip(&again) {
        assert_eq!(a.run_id, b.run_id);
        assert_eq!(a.mode, b.mode);
        assert_eq!(a.step, b.step);
        assert_eq!(a.seed, b.seed);
        assert!(same(a.text_align, b.text_align), "{} vs {}", a.text_align, b.text_align);
        assert!(same(a.subject_sim, b.subject_sim), "{} vs {}", a.subject_sim, b.subject_sim);
        assert!(same(a.loss, b.loss), "{} vs {}", a.loss, b.loss);
    }
});
