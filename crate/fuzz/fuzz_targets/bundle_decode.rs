#![no_main]

use libfuzzer_sys::fuzz_target;
use mlomae::io::{bundle_from_bytes, container};

fuzz_target!(|data: &[u8]| {
    if let Ok(entries) = container::decode(data) {
        assert_eq!(container::encode(&entries), data);
    }
    let _ = bundle_from_bytes(data);
});
