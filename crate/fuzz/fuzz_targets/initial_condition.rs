#![no_main]

use libfuzzer_sys::fuzz_target;
use supermarket_harness::initial::InitialCondition;

fuzz_target!(|data: &[u8]| {
    let text = String::from_utf8_lossy(data);
    if let Ok(ic) = text.parse::<InitialCondition>() {
        let again: InitialCondition = ic.to_string().parse().expect("display parses back");
        assert_eq!(again, ic);
        for (lambda, n) in [(0.5, 4), (0.9, 12)] {
            if let Ok(x) = ic.resolve(lambda, n, 1) {
                assert_eq!(x.len(), n);
            }
        }
    }
});
