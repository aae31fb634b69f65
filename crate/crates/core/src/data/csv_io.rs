//! Raw recording CSV.
//!
//! Header: `subject,domain,timestamp,label,ch_0,...,ch_{C-1}`. The `label`
//! column may be omitted for target-only files and is empty on unlabeled
//! rows. Rows are grouped per subject and sorted by timestamp (seconds).

use std::io::{Read, Write};

use crate::data::{Domain, SensorRecording};
use crate::error::{Error, Result};

#[derive(Clone, Debug, Default)]
pub struct CsvOptions {
    /// Sample rate; inferred from the median timestamp step when absent.
    pub sample_rate_hz: Option<f64>,
    /// Treat every row as this domain regardless of its `domain` column.
    pub domain_override: Option<Domain>,
}

struct Layout {
    label: Option<usize>,
    channels: Vec<usize>,
}

fn layout(header: &csv::StringRecord) -> Result<Layout> {
    let names: Vec<&str> = header.iter().map(str::trim).collect();
    let want = ["subject", "domain", "timestamp"];
    for (i, w) in want.iter().enumerate() {
        if names.get(i) != Some(w) {
            return Err(Error::parse(
                1,
                format!("column {} must be `{w}`, found {:?}", i + 1, names.get(i)),
            ));
        }
    }
    let (label, first_ch) = if names.get(3) == Some(&"label") {
        (Some(3), 4)
    } else {
        (None, 3)
    };
    let channels: Vec<usize> = (first_ch..names.len()).collect();
    if channels.is_empty() {
        return Err(Error::parse(1, "no channel columns"));
    }
    for (c, &col) in channels.iter().enumerate() {
        if names[col] != format!("ch_{c}") {
            return Err(Error::parse(
                1,
                format!("expected column `ch_{c}`, found `{}`", names[col]),
            ));
        }
    }
    Ok(Layout { label, channels })
}

struct Group {
    subject: String,
    domain: Domain,
    first_line: usize,
    timestamps: Vec<f64>,
    channels: Vec<Vec<f64>>,
    labels: Vec<Option<usize>>,
}

fn parse_f64(field: &str, line: usize, what: &str) -> Result<f64> {
    let v: f64 = field
        .trim()
        .parse()
        .map_err(|_| Error::parse(line, format!("invalid {what} {field:?}")))?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::parse(line, format!("non-finite {what} {field:?}")))
    }
}

/// Parse recordings, one per contiguous (subject, domain) group.
pub fn read_recordings<R: Read>(reader: R, opts: &CsvOptions) -> Result<Vec<SensorRecording>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(reader);
    let header = rdr
        .headers()
        .map_err(|e| Error::parse(1, e))?
        .clone();
    let lay = layout(&header)?;
    let width = header.len();
    let mut groups: Vec<Group> = Vec::new();
    let mut record = csv::StringRecord::new();
    loop {
        let more = rdr.read_record(&mut record).map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            Error::parse(line, e)
        })?;
        if !more {
            break;
        }
        let line = record.position().map_or(0, |p| p.line() as usize);
        if record.len() != width {
            return Err(Error::parse(
                line,
                format!("expected {width} fields, found {}", record.len()),
            ));
        }
        let subject = record[0].trim();
        if subject.is_empty() {
            return Err(Error::parse(line, "empty subject"));
        }
        let domain: Domain = record[1]
            .trim()
            .parse()
            .map_err(|_| Error::parse(line, format!("unknown domain tag {:?}", &record[1])))?;
        let domain = opts.domain_override.unwrap_or(domain);
        let ts = parse_f64(&record[2], line, "timestamp")?;
        let label = match lay.label {
            Some(col) if !record[col].trim().is_empty() => Some(
                record[col]
                    .trim()
                    .parse::<usize>()
                    .map_err(|_| Error::parse(line, format!("invalid label {:?}", &record[col])))?,
            ),
            _ => None,
        };
        let same = groups
            .last()
            .is_some_and(|g| g.subject == subject && g.domain == domain);
        if !same {
            if groups.iter().any(|g| g.subject == subject && g.domain == domain) {
                return Err(Error::parse(
                    line,
                    format!("rows for subject {subject:?} ({domain}) are not contiguous"),
                ));
            }
            groups.push(Group {
                subject: subject.to_string(),
                domain,
                first_line: line,
                timestamps: Vec::new(),
                channels: vec![Vec::new(); lay.channels.len()],
                labels: Vec::new(),
            });
        }
        let g = groups.last_mut().expect("pushed above");
        if let Some(&prev) = g.timestamps.last() {
            if ts <= prev {
                return Err(Error::parse(
                    line,
                    format!("timestamp {ts} not after {prev} for subject {subject:?}"),
                ));
            }
        }
        g.timestamps.push(ts);
        for (c, &col) in lay.channels.iter().enumerate() {
            g.channels[c].push(parse_f64(&record[col], line, "channel value")?);
        }
        g.labels.push(label);
    }
    groups.into_iter().map(|g| finish(g, opts)).collect()
}

fn finish(g: Group, opts: &CsvOptions) -> Result<SensorRecording> {
    let labeled = g.labels.iter().filter(|l| l.is_some()).count();
    let labels = if labeled == g.labels.len() {
        Some(g.labels.iter().map(|l| l.expect("all labeled")).collect())
    } else if labeled == 0 {
        None
    } else {
        return Err(Error::parse(
            g.first_line,
            format!("subject {:?} mixes labeled and unlabeled rows", g.subject),
        ));
    };
    if g.domain == Domain::Source && labels.is_none() {
        return Err(Error::parse(
            g.first_line,
            format!("source subject {:?} has no labels", g.subject),
        ));
    }
    let rate = match opts.sample_rate_hz {
        Some(r) => r,
        None => infer_rate(&g.timestamps).ok_or_else(|| {
            Error::parse(
                g.first_line,
                format!(
                    "cannot infer sample rate for subject {:?}; pass it explicitly",
                    g.subject
                ),
            )
        })?,
    };
    SensorRecording::new(g.subject, g.domain, rate, g.channels, labels)
        .map_err(|e| Error::parse(g.first_line, e))
}

fn infer_rate(ts: &[f64]) -> Option<f64> {
    if ts.len() < 2 {
        return None;
    }
    let mut dt: Vec<f64> = ts.windows(2).map(|w| w[1] - w[0]).collect();
    dt.sort_by(f64::total_cmp);
    let step = dt[dt.len() / 2];
    (step > 0.0).then(|| 1.0 / step)
}

/// Write recordings in the same format. Labels are written when present
/// and `with_labels` is set.
pub fn write_recordings<W: Write>(
    writer: W,
    recs: &[SensorRecording],
    with_labels: bool,
) -> Result<()> {
    let channels = recs.first().map_or(0, SensorRecording::num_channels);
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec![
        "subject".to_string(),
        "domain".into(),
        "timestamp".into(),
        "label".into(),
    ];
    header.extend((0..channels).map(|c| format!("ch_{c}")));
    w.write_record(&header).map_err(csv_io_err)?;
    for rec in recs {
        if rec.num_channels() != channels {
            return Err(Error::contract("recordings disagree on channel count"));
        }
        for t in 0..rec.len() {
            let mut row = vec![
                rec.subject_id.clone(),
                rec.domain.to_string(),
                format!("{}", t as f64 / rec.sample_rate_hz),
                match (&rec.labels, with_labels) {
                    (Some(l), true) => l[t].to_string(),
                    _ => String::new(),
                },
            ];
            row.extend(rec.channels.iter().map(|c| format!("{}", c[t])));
            w.write_record(&row).map_err(csv_io_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Per-row labels kept apart from the data file: `subject,timestamp,label`.
pub fn write_hidden_row_labels<W: Write>(writer: W, recs: &[SensorRecording]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["subject", "timestamp", "label"])
        .map_err(csv_io_err)?;
    for rec in recs {
        let labels = rec
            .labels
            .as_ref()
            .ok_or_else(|| Error::contract("hidden label export needs labeled recordings"))?;
        for (t, l) in labels.iter().enumerate() {
            w.write_record([
                rec.subject_id.clone(),
                format!("{}", t as f64 / rec.sample_rate_hz),
                l.to_string(),
            ])
            .map_err(csv_io_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Attach per-row hidden labels to unlabeled target recordings. Rows must
/// appear in the same order as in the data file.
pub fn attach_hidden_row_labels<R: Read>(reader: R, recs: &mut [SensorRecording]) -> Result<()> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let header = rdr.headers().map_err(|e| Error::parse(1, e))?.clone();
    if header.iter().map(str::trim).collect::<Vec<_>>() != ["subject", "timestamp", "label"] {
        return Err(Error::parse(1, "hidden labels need header `subject,timestamp,label`"));
    }
    let mut rows = rdr.records();
    for rec in recs.iter_mut().filter(|r| r.domain == Domain::Target) {
        let mut labels = Vec::with_capacity(rec.len());
        for _ in 0..rec.len() {
            let row = rows
                .next()
                .ok_or_else(|| Error::parse(0, "hidden label file ends early"))?
                .map_err(|e| Error::parse(e.position().map_or(0, |p| p.line() as usize), e))?;
            let line = row.position().map_or(0, |p| p.line() as usize);
            if row.len() != 3 || row[0].trim() != rec.subject_id {
                return Err(Error::parse(
                    line,
                    format!("expected a row for subject {:?}", rec.subject_id),
                ));
            }
            labels.push(
                row[2]
                    .trim()
                    .parse::<usize>()
                    .map_err(|_| Error::parse(line, format!("invalid label {:?}", &row[2])))?,
            );
        }
        rec.labels = Some(labels);
    }
    if let Some(extra) = rows.next() {
        let line = match extra {
            Ok(r) => r.position().map_or(0, |p| p.line() as usize),
            Err(e) => e.position().map_or(0, |p| p.line() as usize),
        };
        return Err(Error::parse(line, "hidden label file has extra rows"));
    }
    Ok(())
}

pub(crate) fn csv_io_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::contract(format!("csv write failed: {other:?}")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = "\
subject,domain,timestamp,label,ch_0,ch_1
a,source,0.0,1,1.0,2.0
a,source,0.5,1,1.5,2.5
a,source,1.0,0,2.0,3.0
b,target,0.0,,0.1,0.2
b,target,0.5,,0.3,0.4
";

    #[test]
    fn parses_two_subjects() {
        let recs = read_recordings(SAMPLE.as_bytes(), &CsvOptions::default()).unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[0].subject_id, "a");
        assert_eq!(recs[0].domain, Domain::Source);
        assert_eq!(recs[0].labels, Some(vec![1, 1, 0]));
        assert_eq!(recs[0].channels, vec![vec![1.0, 1.5, 2.0], vec![2.0, 2.5, 3.0]]);
        assert!((recs[0].sample_rate_hz - 2.0).abs() < 1e-12);
        assert_eq!(recs[1].domain, Domain::Target);
        assert_eq!(recs[1].labels, None);
    }

    #[test]
    fn bad_value_reports_line() {
        let bad = SAMPLE.replace("1.5,2.5", "1.5,oops");
        match read_recordings(bad.as_bytes(), &CsvOptions::default()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unknown_domain_is_rejected() {
        let bad = SAMPLE.replace("b,target", "b,elsewhere");
        match read_recordings(bad.as_bytes(), &CsvOptions::default()) {
            Err(Error::Parse { line, msg }) => {
                assert_eq!(line, 5);
                assert!(msg.contains("domain"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn source_without_label_column_is_rejected() {
        let unlabeled = "subject,domain,timestamp,ch_0\nx,target,0,1\nx,target,1,2\n";
        let opts = CsvOptions {
            domain_override: Some(Domain::Source),
            ..Default::default()
        };
        assert!(matches!(
            read_recordings(unlabeled.as_bytes(), &opts),
            Err(Error::Parse { .. })
        ));
        let recs = read_recordings(unlabeled.as_bytes(), &CsvOptions::default()).unwrap();
        assert_eq!(recs[0].labels, None);
    }

    #[test]
    fn unsorted_or_split_groups_are_rejected() {
        let unsorted = SAMPLE.replace("a,source,0.5", "a,source,-0.5");
        assert!(read_recordings(unsorted.as_bytes(), &CsvOptions::default()).is_err());
        let split = format!("{SAMPLE}a,source,9.0,1,1.0,1.0\n");
        assert!(read_recordings(split.as_bytes(), &CsvOptions::default()).is_err());
    }

    #[test]
    fn write_then_read_preserves_recordings() {
        let recs = read_recordings(SAMPLE.as_bytes(), &CsvOptions::default()).unwrap();
        let mut buf = Vec::new();
        write_recordings(&mut buf, &recs, true).unwrap();
        let back = read_recordings(buf.as_slice(), &CsvOptions::default()).unwrap();
        assert_eq!(back, recs);
    }

    #[test]
    fn hidden_labels_attach_to_target_rows() {
        let mut recs = read_recordings(SAMPLE.as_bytes(), &CsvOptions::default()).unwrap();
        let hidden = "subject,timestamp,label\nb,0,2\nb,0.5,1\n";
        attach_hidden_row_labels(hidden.as_bytes(), &mut recs).unwrap();
        assert_eq!(recs[1].labels, Some(vec![2, 1]));
        let short = "subject,timestamp,label\nb,0,2\n";
        let mut recs = read_recordings(SAMPLE.as_bytes(), &CsvOptions::default()).unwrap();
        assert!(attach_hidden_row_labels(short.as_bytes(), &mut recs).is_err());
    }
}
