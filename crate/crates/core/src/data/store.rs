//! On-disk layout of a prepared (windowed) dataset directory:
//!
//! ```text
//! meta.json           PreparedMeta (counts, shapes, preprocessing settings)
//! manifest.csv        window,split,subject,domain,offset,label
//! windows.bin         window array file, see below
//! normalization.csv   channel,min,max
//! hidden_labels.csv   window,label   (target evaluation labels, optional)
//! ```
//!
//! `windows.bin` is little-endian: magic `HDAW`, `u32` version (1),
//! `u64` window count `n`, `u32` channels `C`, `u32` window length `W`,
//! then `n * C * W` `f64` values, window-major then channel-major. Window
//! `i` of the file is manifest row `i`. The `label` column of target rows
//! is always empty; their labels, if known, live only in
//! `hidden_labels.csv`.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::csv_io::csv_io_err;
use super::{Domain, NormStats, SplitSpec, Window, WindowedDataset};
use crate::autodiff::Array;
use crate::error::{Error, Result};

pub const WINDOWS_MAGIC: &[u8; 4] = b"HDAW";
pub const WINDOWS_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 8 + 4 + 4;

fn fmt_err(msg: impl Into<String>) -> Error {
    Error::Format {
        kind: "windows",
        version: WINDOWS_VERSION,
        msg: msg.into(),
    }
}

pub fn encode_windows(windows: &[Window], channels: usize, window_len: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + windows.len() * channels * window_len * 8);
    out.extend_from_slice(WINDOWS_MAGIC);
    out.extend_from_slice(&WINDOWS_VERSION.to_le_bytes());
    out.extend_from_slice(&(windows.len() as u64).to_le_bytes());
    out.extend_from_slice(&(channels as u32).to_le_bytes());
    out.extend_from_slice(&(window_len as u32).to_le_bytes());
    for w in windows {
        for v in w.data.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Decode a window array file into `[C, W]` arrays.
pub fn decode_windows(bytes: &[u8]) -> Result<(usize, usize, Vec<Array>)> {
    if bytes.len() < HEADER_LEN {
        return Err(fmt_err("file shorter than header"));
    }
    if &bytes[..4] != WINDOWS_MAGIC {
        return Err(fmt_err("bad magic"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
    let version = u32_at(4);
    if version != WINDOWS_VERSION {
        return Err(Error::Format {
            kind: "windows",
            version,
            msg: format!("unsupported version, expected {WINDOWS_VERSION}"),
        });
    }
    let n = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let channels = u32_at(16) as usize;
    let window_len = u32_at(20) as usize;
    if channels == 0 || window_len == 0 {
        return Err(fmt_err("zero channels or window length"));
    }
    let per = channels
        .checked_mul(window_len)
        .ok_or_else(|| fmt_err("window size overflows"))?;
    let body = bytes.len() - HEADER_LEN;
    let expected = usize::try_from(n)
        .ok()
        .and_then(|n| n.checked_mul(per))
        .and_then(|v| v.checked_mul(8))
        .ok_or_else(|| fmt_err("window count overflows"))?;
    if expected != body {
        return Err(fmt_err(format!(
            "body has {body} bytes, header implies {expected}"
        )));
    }
    let mut out = Vec::with_capacity(n as usize);
    for chunk in bytes[HEADER_LEN..].chunks_exact(per * 8) {
        let data: Vec<f64> = chunk
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(fmt_err("non-finite sample"));
        }
        out.push(Array::from_parts(vec![channels, window_len], data));
    }
    Ok((channels, window_len, out))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Val,
    Test,
    Target,
}

impl SplitTag {
    fn as_str(self) -> &'static str {
        match self {
            SplitTag::Train => "train",
            SplitTag::Val => "val",
            SplitTag::Test => "test",
            SplitTag::Target => "target",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "train" => SplitTag::Train,
            "val" => SplitTag::Val,
            "test" => SplitTag::Test,
            "target" => SplitTag::Target,
            _ => return None,
        })
    }
}

/// One manifest row.
#[derive(Clone, Debug, PartialEq)]
pub struct ManifestRow {
    pub window: usize,
    pub split: SplitTag,
    pub subject: String,
    pub domain: Domain,
    pub offset: usize,
    pub label: Option<usize>,
}

pub fn write_manifest<W: Write>(writer: W, rows: &[ManifestRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["window", "split", "subject", "domain", "offset", "label"])
        .map_err(csv_io_err)?;
    for r in rows {
        w.write_record([
            r.window.to_string(),
            r.split.as_str().to_string(),
            r.subject.clone(),
            r.domain.to_string(),
            r.offset.to_string(),
            r.label.map(|l| l.to_string()).unwrap_or_default(),
        ])
        .map_err(csv_io_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_manifest<R: Read>(reader: R) -> Result<Vec<ManifestRow>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let header = rdr.headers().map_err(|e| Error::parse(1, e))?.clone();
    if header.iter().collect::<Vec<_>>() != ["window", "split", "subject", "domain", "offset", "label"] {
        return Err(Error::parse(1, "unexpected manifest header"));
    }
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::parse(e.position().map_or(0, |p| p.line() as usize), e))?;
        let line = i + 2;
        let num = |s: &str, what: &str| {
            s.parse::<usize>()
                .map_err(|_| Error::parse(line, format!("invalid {what} {s:?}")))
        };
        let window = num(&rec[0], "window id")?;
        if window != i {
            return Err(Error::parse(line, format!("window id {window}, expected {i}")));
        }
        let split = SplitTag::parse(&rec[1])
            .ok_or_else(|| Error::parse(line, format!("unknown split {:?}", &rec[1])))?;
        let domain: Domain = rec[3]
            .parse()
            .map_err(|_| Error::parse(line, format!("unknown domain tag {:?}", &rec[3])))?;
        let label = if rec[5].is_empty() {
            None
        } else {
            Some(num(&rec[5], "label")?)
        };
        out.push(ManifestRow {
            window,
            split,
            subject: rec[2].to_string(),
            domain,
            offset: num(&rec[4], "offset")?,
            label,
        });
    }
    Ok(out)
}

pub fn write_norm_stats<W: Write>(writer: W, stats: &NormStats) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["channel", "min", "max"]).map_err(csv_io_err)?;
    for (c, (lo, hi)) in stats.min.iter().zip(&stats.max).enumerate() {
        w.write_record([c.to_string(), lo.to_string(), hi.to_string()])
            .map_err(csv_io_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_norm_stats<R: Read>(reader: R) -> Result<NormStats> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let mut stats = NormStats {
        min: Vec::new(),
        max: Vec::new(),
    };
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| Error::parse(line, e))?;
        let f = |s: &str| {
            s.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::parse(line, format!("invalid number {s:?}")))
        };
        if rec.len() != 3 || rec[0].parse::<usize>().ok() != Some(i) {
            return Err(Error::parse(line, "expected `channel,min,max` in channel order"));
        }
        stats.min.push(f(&rec[1])?);
        stats.max.push(f(&rec[2])?);
    }
    Ok(stats)
}

/// `window,label` rows for evaluation-only labels.
pub fn write_window_labels<W: Write>(writer: W, labels: &[usize]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["window", "label"]).map_err(csv_io_err)?;
    for (i, l) in labels.iter().enumerate() {
        w.write_record([i.to_string(), l.to_string()])
            .map_err(csv_io_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_window_labels<R: Read>(reader: R) -> Result<Vec<usize>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| Error::parse(line, e))?;
        if rec.len() != 2 || rec[0].parse::<usize>().ok() != Some(i) {
            return Err(Error::parse(line, "expected `window,label` in window order"));
        }
        out.push(
            rec[1]
                .parse()
                .map_err(|_| Error::parse(line, format!("invalid label {:?}", &rec[1])))?,
        );
    }
    Ok(out)
}

/// Preprocessing provenance stored next to the windows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreparedMeta {
    pub version: u32,
    pub num_classes: usize,
    pub channels: usize,
    pub window_len: usize,
    pub sample_rate_hz: f64,
    pub overlap: f64,
    pub median_kernel: usize,
    pub split: SplitSpec,
}

/// A windowed, normalized corpus ready for training.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedData {
    pub source_train: WindowedDataset,
    pub source_val: WindowedDataset,
    pub source_test: WindowedDataset,
    /// Unlabeled target windows.
    pub target: WindowedDataset,
    /// Evaluation-only target labels, aligned with `target.windows`.
    pub target_labels: Option<Vec<usize>>,
    pub norm: NormStats,
    pub meta: PreparedMeta,
}

pub const META_FILE: &str = "meta.json";
pub const MANIFEST_FILE: &str = "manifest.csv";
pub const WINDOWS_FILE: &str = "windows.bin";
pub const NORM_FILE: &str = "normalization.csv";
pub const HIDDEN_FILE: &str = "hidden_labels.csv";

impl PreparedData {
    fn parts(&self) -> [(SplitTag, &WindowedDataset); 4] {
        [
            (SplitTag::Train, &self.source_train),
            (SplitTag::Val, &self.source_val),
            (SplitTag::Test, &self.source_test),
            (SplitTag::Target, &self.target),
        ]
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut rows = Vec::new();
        let mut windows = Vec::new();
        for (tag, ds) in self.parts() {
            for w in &ds.windows {
                rows.push(ManifestRow {
                    window: rows.len(),
                    split: tag,
                    subject: w.subject_id.clone(),
                    domain: w.domain,
                    offset: w.offset,
                    label: if tag == SplitTag::Target { None } else { w.label },
                });
                windows.push(w.clone());
            }
        }
        let meta = serde_json::to_string_pretty(&self.meta)
            .map_err(|e| Error::contract(format!("meta serialization: {e}")))?;
        fs::write(dir.join(META_FILE), meta + "\n")?;
        let mut manifest = Vec::new();
        write_manifest(&mut manifest, &rows)?;
        fs::write(dir.join(MANIFEST_FILE), manifest)?;
        fs::write(
            dir.join(WINDOWS_FILE),
            encode_windows(&windows, self.meta.channels, self.meta.window_len),
        )?;
        let mut norm = Vec::new();
        write_norm_stats(&mut norm, &self.norm)?;
        fs::write(dir.join(NORM_FILE), norm)?;
        let hidden = dir.join(HIDDEN_FILE);
        match &self.target_labels {
            Some(labels) => {
                let mut buf = Vec::new();
                write_window_labels(&mut buf, labels)?;
                fs::write(hidden, buf)?;
            }
            None if hidden.exists() => fs::remove_file(hidden)?,
            None => {}
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta: PreparedMeta = serde_json::from_slice(&fs::read(dir.join(META_FILE))?)
            .map_err(|e| Error::Format {
                kind: "prepared meta",
                version: 1,
                msg: e.to_string(),
            })?;
        let rows = read_manifest(fs::File::open(dir.join(MANIFEST_FILE))?)?;
        let (channels, window_len, arrays) = decode_windows(&fs::read(dir.join(WINDOWS_FILE))?)?;
        if channels != meta.channels || window_len != meta.window_len || arrays.len() != rows.len() {
            return Err(fmt_err("window file disagrees with manifest or meta"));
        }
        let norm = read_norm_stats(fs::File::open(dir.join(NORM_FILE))?)?;
        let mk = || WindowedDataset {
            windows: Vec::new(),
            num_classes: meta.num_classes,
            channels,
            window_len,
        };
        let (mut train, mut val, mut test, mut target) = (mk(), mk(), mk(), mk());
        for (row, data) in rows.into_iter().zip(arrays) {
            let w = Window {
                data,
                label: row.label,
                subject_id: row.subject,
                domain: row.domain,
                offset: row.offset,
            };
            match row.split {
                SplitTag::Train => train.windows.push(w),
                SplitTag::Val => val.windows.push(w),
                SplitTag::Test => test.windows.push(w),
                SplitTag::Target => target.windows.push(w),
            }
        }
        for ds in [&train, &val, &test, &target] {
            WindowedDataset::new(ds.windows.clone(), ds.num_classes, channels, window_len)?;
        }
        let hidden = dir.join(HIDDEN_FILE);
        let target_labels = if hidden.exists() {
            let l = read_window_labels(fs::File::open(hidden)?)?;
            if l.len() != target.len() || l.iter().any(|&c| c >= meta.num_classes) {
                return Err(fmt_err("hidden labels disagree with target windows"));
            }
            Some(l)
        } else {
            None
        };
        Ok(PreparedData {
            source_train: train,
            source_val: val,
            source_test: test,
            target,
            target_labels,
            norm,
            meta,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn window(vals: Vec<f64>, c: usize, w: usize) -> Window {
        Window {
            data: Array::new(vec![c, w], vals).unwrap(),
            label: Some(0),
            subject_id: "s".into(),
            domain: Domain::Source,
            offset: 0,
        }
    }

    #[test]
    fn rejects_truncated_and_bad_magic() {
        let bytes = encode_windows(&[window(vec![1.0, 2.0], 1, 2)], 1, 2);
        assert!(decode_windows(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_windows(&bad).is_err());
        let mut v2 = bytes.clone();
        v2[4] = 2;
        assert!(matches!(decode_windows(&v2), Err(Error::Format { version: 2, .. })));
        // huge window count must not allocate or overflow
        let mut huge = bytes;
        huge[8..16].copy_from_slice(&u64::MAX.to_le_bytes());
        assert!(decode_windows(&huge).is_err());
    }

    proptest! {
        #[test]
        fn window_file_round_trips(vals in prop::collection::vec(-1e6f64..1e6, 6..=6), n in 1usize..4) {
            let ws: Vec<Window> = (0..n).map(|_| window(vals.clone(), 2, 3)).collect();
            let bytes = encode_windows(&ws, 2, 3);
            let (c, w, arrays) = decode_windows(&bytes).unwrap();
            prop_assert_eq!((c, w), (2, 3));
            prop_assert_eq!(arrays.len(), n);
            for a in arrays {
                prop_assert_eq!(a.data(), vals.as_slice());
            }
        }

        #[test]
        fn decode_never_panics(bytes in prop::collection::vec(any::<u8>(), 0..64)) {
            let _ = decode_windows(&bytes);
        }
    }

    #[test]
    fn manifest_round_trips() {
        let rows = vec![
            ManifestRow {
                window: 0,
                split: SplitTag::Train,
                subject: "u1".into(),
                domain: Domain::Source,
                offset: 15,
                label: Some(2),
            },
            ManifestRow {
                window: 1,
                split: SplitTag::Target,
                subject: "u9".into(),
                domain: Domain::Target,
                offset: 0,
                label: None,
            },
        ];
        let mut buf = Vec::new();
        write_manifest(&mut buf, &rows).unwrap();
        assert_eq!(read_manifest(buf.as_slice()).unwrap(), rows);
    }
}
