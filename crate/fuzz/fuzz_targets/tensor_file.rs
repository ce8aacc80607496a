#![no_main]

use lataug::io::{decode_tensor, encode_tensor};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(t) = decode_tensor(data) {
        assert_eq!(t.len(), t.shape().iter().product::<usize>());
        let back = decode_tensor(&encode_tensor(&t)).expect("re-encoded tensor");
        assert_eq!(back.shape(), t.shape());
    }
});
