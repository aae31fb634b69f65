use super::store::{PreparedData, PreparedMeta};
use super::{
    make_windows, median_filter, split_indices, Domain, NormStats, SensorRecording, SplitSpec,
    WindowedDataset,
};
use crate::error::{ensure, Result, Warning};

#[derive(Clone, Debug, PartialEq)]
pub struct PrepareOptions {
    pub window_len: usize,
    pub overlap: f64,
    /// Odd median kernel; 1 disables filtering.
    pub median_kernel: usize,
    pub split: SplitSpec,
    /// Inferred from the largest label seen when absent.
    pub num_classes: Option<usize>,
}

/// Filter, window, split the source windows, then scale everything with
/// statistics from the source training split.
pub fn prepare(
    recordings: &[SensorRecording],
    opts: &PrepareOptions,
) -> Result<(PreparedData, Vec<Warning>)> {
    ensure!(!recordings.is_empty(), "no recordings to prepare");
    let channels = recordings[0].num_channels();
    let rate = recordings[0].sample_rate_hz;
    for r in recordings {
        ensure!(
            r.num_channels() == channels,
            "subject {} has {} channels, expected {channels}",
            r.subject_id,
            r.num_channels()
        );
        ensure!(
            (r.sample_rate_hz - rate).abs() <= 1e-6 * rate,
            "subject {} sampled at {} Hz, expected {rate} Hz",
            r.subject_id,
            r.sample_rate_hz
        );
    }
    let max_label = recordings
        .iter()
        .filter_map(|r| r.labels.as_ref())
        .flat_map(|l| l.iter().copied())
        .max();
    let num_classes = match (opts.num_classes, max_label) {
        (Some(c), _) => c,
        (None, Some(m)) => m + 1,
        (None, None) => 0,
    };
    ensure!(num_classes >= 2, "need at least two classes, found {num_classes}");
    for r in recordings {
        r.validate(Some(num_classes))?;
    }

    let mut warnings = Vec::new();
    let mut source = WindowedDataset {
        windows: Vec::new(),
        num_classes,
        channels,
        window_len: opts.window_len,
    };
    let mut target = source.clone();
    let mut target_labels = Vec::new();
    let mut target_fully_labeled = true;
    for r in recordings {
        let filtered = if opts.median_kernel > 1 && opts.median_kernel <= r.len() {
            median_filter(r, opts.median_kernel)?
        } else {
            if opts.median_kernel > r.len() {
                warnings.push(Warning::emit(format!(
                    "subject {} shorter than median kernel; left unfiltered",
                    r.subject_id
                )));
            }
            ensure!(opts.median_kernel % 2 == 1, "median kernel must be odd");
            r.clone()
        };
        let (windows, w) = make_windows(&filtered, opts.window_len, opts.overlap)?;
        warnings.extend(w);
        match r.domain {
            Domain::Source => source.windows.extend(windows),
            Domain::Target => {
                for mut w in windows {
                    match w.label.take() {
                        Some(l) => target_labels.push(l),
                        None => target_fully_labeled = false,
                    }
                    target.windows.push(w);
                }
            }
        }
    }
    ensure!(!source.is_empty(), "no source windows were produced");
    ensure!(!target.is_empty(), "no target windows were produced");

    let (idx, w) = split_indices(&source, &opts.split)?;
    warnings.extend(w);
    let train = source.subset(&idx.train);
    let norm = NormStats::fit(&train)?;
    let data = PreparedData {
        source_train: norm.apply(&train)?,
        source_val: norm.apply(&source.subset(&idx.val))?,
        source_test: norm.apply(&source.subset(&idx.test))?,
        target: norm.apply(&target)?,
        target_labels: target_fully_labeled.then_some(target_labels),
        meta: PreparedMeta {
            version: 1,
            num_classes,
            channels,
            window_len: opts.window_len,
            sample_rate_hz: rate,
            overlap: opts.overlap,
            median_kernel: opts.median_kernel,
            split: opts.split.clone(),
        },
        norm,
    };
    Ok((data, warnings))
}
