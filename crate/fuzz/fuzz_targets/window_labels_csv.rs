#![no_main]

use hardapt::data::store::{read_window_labels, write_window_labels};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(labels) = read_window_labels(data) {
        let mut buf = Vec::new();
        write_window_labels(&mut buf, &labels).unwrap();
        assert_eq!(read_window_labels(buf.as_slice()).unwrap(), labels);
    }
});
