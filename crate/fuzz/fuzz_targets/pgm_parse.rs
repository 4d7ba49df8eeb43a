#![no_main]

use libfuzzer_sys::fuzz_target;
use mlomae::io::Pgm;

fuzz_target!(|data: &[u8]| {
    if let Ok(p) = Pgm::parse(data) {
        assert_eq!(p.pixels.len(), p.width * p.height);
        assert_eq!(Pgm::parse(&p.to_bytes()).unwrap(), p);
    }
});
