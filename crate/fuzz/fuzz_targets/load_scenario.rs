#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    // Loading must never panic; every malformed input maps to a typed error.
    let _ = dualgeo::scenario::load_scenario_str(text, "fuzz");
});
