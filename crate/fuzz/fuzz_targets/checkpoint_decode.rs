#![no_main]

use libfuzzer_sys::fuzz_target;
use mlomae::io::Checkpoint;

fuzz_target!(|data: &[u8]| {
    if let Ok(ck) = Checkpoint::from_bytes(data) {
        let canonical = ck.to_bytes();
        let again = Checkpoint::from_bytes(&canonical).expect("canonical bytes must decode");
        assert_eq!(again.to_bytes(), canonical);
    }
});
