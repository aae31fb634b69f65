#![no_main]

use hardapt::model::{decode_checkpoint, encode_checkpoint};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    // Anything that decodes must survive a round trip.
    if let Ok(ckpt) = decode_checkpoint(data) {
        let bytes = encode_checkpoint(&ckpt).expect("decoded checkpoint re-encodes");
        assert_eq!(decode_checkpoint(&bytes).unwrap(), ckpt);
    }
});
