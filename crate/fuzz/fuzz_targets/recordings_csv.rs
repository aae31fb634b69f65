#![no_main]

use hardapt::data::csv_io::{read_recordings, CsvOptions};
use hardapt::data::Domain;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = read_recordings(data, &CsvOptions::default());
    let opts = CsvOptions {
        sample_rate_hz: Some(50.0),
        domain_override: Some(Domain::Target),
    };
    if let Ok(recs) = read_recordings(data, &opts) {
        for r in &recs {
            r.validate(None).expect("parsed recordings are valid");
        }
    }
});
