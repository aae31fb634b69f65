#![no_main]

use hardapt::data::store::read_norm_stats;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(stats) = read_norm_stats(data) {
        assert_eq!(stats.min.len(), stats.max.len());
        for c in 0..stats.min.len() {
            let _ = stats.scale(c, 0.5);
        }
    }
});
