#![no_main]

use libfuzzer_sys::fuzz_target;
use robustlab_core::structure::{structure_from_preset, Family};

fuzz_target!(|data: &[u8]| {
    let Some((&first, rest)) = data.split_first() else {
        return;
    };
    let family = if first & 1 == 0 { Family::Vit } else { Family::Vmlp };
    let id = String::from_utf8_lossy(rest);
    if let Ok(spec) = structure_from_preset(&id, family) {
        assert_eq!(spec.family, family);
        assert_eq!(spec.total_layers(), 12);
        let _ = spec.validate();
    }
});
