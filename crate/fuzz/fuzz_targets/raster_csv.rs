#![no_main]

use hes_core::benchfuncs::RasterGrid;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(grid) = RasterGrid::parse(text) {
        // Accepted rasters must survive a write/parse round trip.
        let again = RasterGrid::parse(&grid.to_csv()).expect("re-parse of written raster");
        assert_eq!(again.to_csv(), grid.to_csv());
    }
});
