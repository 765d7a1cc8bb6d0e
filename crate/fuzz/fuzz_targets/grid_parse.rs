//! Probe timestep-grid parser: comma/whitespace lists of any shape.

#![no_main]

use libfuzzer_sys::fuzz_target;
use palp_lab::evalkit::probe::parse_t_grid;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(grid) = parse_t_grid(text) {
            assert!(!grid.is_empty(), "parsed grids are never empty");
            assert!(grid.windows(2).all(|w| w[0] < w[1]), "parsed grids increase");
        }
    }
});
