#![no_main]

use libfuzzer_sys::fuzz_target;
use robustlab_core::data::decode_cifar10;

fuzz_target!(|data: &[u8]| {
    if let Ok((pixels, labels)) = decode_cifar10(data) {
        assert_eq!(pixels.len(), labels.len() * 3072);
        assert!(labels.iter().all(|&l| l < 10));
        // Every pixel maps back to the byte it came from.
        for (r, rec) in data.chunks_exact(3073).enumerate() {
            for (k, &b) in rec[1..].iter().enumerate() {
                assert_eq!((pixels[r * 3072 + k] * 255.0).round() as u8, b);
            }
        }
    }
});
