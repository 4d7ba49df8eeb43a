#![no_main]

use std::path::Path;

use libfuzzer_sys::fuzz_target;
use mlomae::data::cifar10_decode;

fuzz_target!(|data: &[u8]| {
    if let Ok(images) = cifar10_decode(data, None, Path::new("fuzz")) {
        assert_eq!(images.len() * 3073, data.len());
        for x in &images {
            assert!(x.label < 10);
            assert!(x.image.pixels.iter().all(|p| (0.0..=1.0).contains(p)));
        }
    }
});
