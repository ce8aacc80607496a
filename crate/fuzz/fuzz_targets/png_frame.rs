#![no_main]

use lataug::data::decode_frame;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(t) = decode_frame(data) {
        assert_eq!(t.shape()[0], 3);
        assert!(t.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }
});
