#![no_main]

use libfuzzer_sys::fuzz_target;
use supermarket_harness::io::read_trajectory;

fuzz_target!(|data: &[u8]| {
    if let Ok(table) = read_trajectory(data) {
        assert!(table.n >= 1);
        assert_eq!(table.times.len(), table.rows.len());
        assert!(table.rows.iter().all(|r| r.len() == table.n));
        assert!(table.times.windows(2).all(|w| w[0] < w[1]));
    }
});
