#![no_main]

use libfuzzer_sys::fuzz_target;
use mambareg::training::Checkpoint;

fuzz_target!(|data: &[u8]| {
    if let Ok(ck) = Checkpoint::decode(data) {
        let again = ck.encode().expect("decoded checkpoint re-encodes");
        let back = Checkpoint::decode(&again).expect("re-encoded checkpoint decodes");
        assert_eq!(back.encode().unwrap(), again);
    }
});
