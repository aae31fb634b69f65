#![no_main]

use hardapt::data::store::{read_manifest, write_manifest};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(rows) = read_manifest(data) {
        let mut buf = Vec::new();
        write_manifest(&mut buf, &rows).unwrap();
        assert_eq!(read_manifest(buf.as_slice()).unwrap(), rows);
    }
});
