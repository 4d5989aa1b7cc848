#![no_main]

use libfuzzer_sys::fuzz_target;
use mollify_core::checkpoint::Checkpoint;

fuzz_target!(|data: &[u8]| {
    if let Ok(ck) = Checkpoint::decode(data) {
        let text = ck.encode().expect("decoded checkpoints encode");
        assert_eq!(Checkpoint::decode(text.as_bytes()).expect("round trip"), ck);
    }
});
