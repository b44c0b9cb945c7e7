#![no_main]

use libfuzzer_sys::fuzz_target;
use robustlab::Manifest;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(manifest) = Manifest::parse(text) {
        let _ = manifest.validate();
    }
});
