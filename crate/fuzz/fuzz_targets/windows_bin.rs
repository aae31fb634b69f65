#![no_main]

use hardapt::data::store::decode_windows;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok((channels, window_len, windows)) = decode_windows(data) {
        for w in &windows {
            assert_eq!(w.shape(), [channels, window_len]);
        }
    }
});
