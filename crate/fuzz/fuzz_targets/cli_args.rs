#![no_main]

use libfuzzer_sys::fuzz_target;
use supermarket_harness::cli::{parse, Parsed};
use supermarket_harness::ExperimentConfig;

// NUL-separated argv; parsing and flag application only, nothing runs
fuzz_target!(|data: &[u8]| {
    let text = String::from_utf8_lossy(data);
    let argv = std::iter::once("supermarket").chain(text.split('\0'));
    match parse(argv) {
        Parsed::Run(cli) => {
            let mut cfg = ExperimentConfig::default();
            cli.command.args().overrides().apply(&mut cfg);
            let _ = cfg.validate();
        }
        Parsed::Exit { code, .. } => assert!(code == 0 || code == 1),
    }
});
