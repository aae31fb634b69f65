//! Replays the checked-in fuzz seeds, plus truncated and bit-flipped
//! variants of each, through the same entry points the fuzz targets use.

use std::fs;
use std::path::PathBuf;

use hardapt::data::csv_io::{attach_hidden_row_labels, read_recordings, CsvOptions};
use hardapt::data::store::{
    decode_windows, read_manifest, read_norm_stats, read_window_labels, write_manifest,
    write_window_labels,
};
use hardapt::data::{Domain, SensorRecording};
use hardapt::model::{decode_checkpoint, encode_checkpoint};
use hardapt::trainer::TrainConfig;

fn seeds(target: &str) -> Vec<(String, Vec<u8>)> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus").join(target);
    let mut out: Vec<_> = fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap())
        })
        .collect();
    out.sort();
    assert!(!out.is_empty(), "no seeds for {target}");
    out
}

/// The seed itself, every prefix at a coarse stride, and single-byte flips.
fn variants(seed: &[u8]) -> Vec<Vec<u8>> {
    let mut out = vec![seed.to_vec()];
    let step = (seed.len() / 64).max(1);
    for cut in (0..seed.len()).step_by(step) {
        out.push(seed[..cut].to_vec());
    }
    for i in (0..seed.len()).step_by(step) {
        for mask in [0x01, 0x20, 0x80] {
            let mut v = seed.to_vec();
            v[i] ^= mask;
            out.push(v);
        }
    }
    out
}

/// Run `f` on every variant of every seed; `f` returns whether it parsed.
fn replay(target: &str, f: impl Fn(&[u8]) -> bool) {
    for (name, seed) in seeds(target) {
        assert!(f(&seed), "seed {target}/{name} should parse");
        for v in variants(&seed) {
            f(&v);
        }
    }
}

#[test]
fn recordings_csv() {
    replay("recordings_csv", |d| {
        let _ = read_recordings(d, &CsvOptions::default());
        let opts = CsvOptions {
            sample_rate_hz: Some(50.0),
            domain_override: Some(Domain::Target),
        };
        match read_recordings(d, &opts) {
            Ok(recs) => {
                recs.iter().for_each(|r| r.validate(None).unwrap());
                true
            }
            Err(_) => false,
        }
    });
}

#[test]
fn hidden_row_labels() {
    replay("hidden_row_labels", |d| {
        let mut recs = vec![
            SensorRecording::new("target00", Domain::Target, 50.0, vec![vec![0.0; 4]; 3], None).unwrap(),
            SensorRecording::new("target01", Domain::Target, 50.0, vec![vec![0.0; 2]; 3], None).unwrap(),
        ];
        let ok = attach_hidden_row_labels(d, &mut recs).is_ok();
        if ok {
            assert!(recs.iter().all(|r| r.labels.as_ref().map(Vec::len) == Some(r.len())));
        }
        ok
    });
}

#[test]
fn windows_bin() {
    replay("windows_bin", |d| match decode_windows(d) {
        Ok((c, w, windows)) => {
            windows.iter().for_each(|x| assert_eq!(x.shape(), [c, w]));
            true
        }
        Err(_) => false,
    });
}

#[test]
fn manifest_csv() {
    replay("manifest_csv", |d| match read_manifest(d) {
        Ok(rows) => {
            let mut buf = Vec::new();
            write_manifest(&mut buf, &rows).unwrap();
            assert_eq!(read_manifest(buf.as_slice()).unwrap(), rows);
            true
        }
        Err(_) => false,
    });
}

#[test]
fn norm_stats_csv() {
    replay("norm_stats_csv", |d| match read_norm_stats(d) {
        Ok(s) => {
            assert_eq!(s.min.len(), s.max.len());
            true
        }
        Err(_) => false,
    });
}

#[test]
fn window_labels_csv() {
    replay("window_labels_csv", |d| match read_window_labels(d) {
        Ok(labels) => {
            let mut buf = Vec::new();
            write_window_labels(&mut buf, &labels).unwrap();
            assert_eq!(read_window_labels(buf.as_slice()).unwrap(), labels);
            true
        }
        Err(_) => false,
    });
}

#[test]
fn checkpoint() {
    replay("checkpoint", |d| match decode_checkpoint(d) {
        Ok(ckpt) => {
            let bytes = encode_checkpoint(&ckpt).unwrap();
            assert_eq!(decode_checkpoint(&bytes).unwrap(), ckpt);
            true
        }
        Err(_) => false,
    });
}

#[test]
fn train_config() {
    replay("train_config", |d| {
        let Ok(text) = std::str::from_utf8(d) else {
            return false;
        };
        match TrainConfig::from_toml_str(text) {
            Ok(cfg) => {
                let back = TrainConfig::from_toml_str(&cfg.to_toml_string().unwrap()).unwrap();
                assert_eq!(back, cfg);
                true
            }
            Err(_) => false,
        }
    });
}
