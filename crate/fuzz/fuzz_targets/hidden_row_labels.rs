#![no_main]

use hardapt::data::csv_io::attach_hidden_row_labels;
use hardapt::data::{Domain, SensorRecording};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let mut recs = vec![
        SensorRecording::new("target00", Domain::Target, 50.0, vec![vec![0.0; 4]; 3], None).unwrap(),
        SensorRecording::new("target01", Domain::Target, 50.0, vec![vec![0.0; 2]; 3], None).unwrap(),
    ];
    if attach_hidden_row_labels(data, &mut recs).is_ok() {
        assert!(recs.iter().all(|r| r.labels.as_ref().map(Vec::len) == Some(r.len())));
    }
});
