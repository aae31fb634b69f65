//! Run config file: a `[data]` table naming the inputs, followed by the
//! training config tables.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use hardapt::data::csv_io::{attach_hidden_row_labels, read_recordings, CsvOptions};
use hardapt::data::{prepare, window_len_for, PrepareOptions, PreparedData, SplitSpec};
use hardapt::trainer::{TrainConfig, WindowParams};
use hardapt::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// Directory written by `hardapt prepare`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prepared: Option<PathBuf>,
    /// Raw recording CSVs, prepared in memory on every run.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub inputs: Vec<PathBuf>,
    /// Per-row target labels for reporting only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hidden_labels: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preprocess: Option<Preprocess>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Preprocess {
    /// Window length in samples; `window_ms` is used when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub window_len: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub window_ms: Option<f64>,
    pub overlap: f64,
    pub median_kernel: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sample_rate_hz: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_classes: Option<usize>,
    pub split: SplitSpec,
}

impl Default for Preprocess {
    fn default() -> Self {
        Preprocess {
            window_len: None,
            window_ms: Some(1000.0),
            overlap: 0.5,
            median_kernel: 3,
            sample_rate_hz: None,
            num_classes: None,
            split: SplitSpec::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub data: DataSection,
    pub train: TrainConfig,
    /// Directory relative data paths are resolved against.
    pub base: PathBuf,
}

fn cfg_err(e: impl std::fmt::Display) -> Error {
    Error::Config(e.to_string())
}

impl RunConfig {
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(cfg_err)?;
        let data = match table.remove("data") {
            Some(v) => v.try_into().map_err(cfg_err)?,
            None => DataSection::default(),
        };
        let rest = toml::to_string(&table).map_err(cfg_err)?;
        Ok(RunConfig {
            data,
            train: TrainConfig::from_toml_str(&rest)?,
            base: base.to_path_buf(),
        })
    }

    /// Returns the config and the raw bytes it was parsed from.
    pub fn load(path: &Path) -> Result<(Self, Vec<u8>)> {
        let bytes = fs::read(path)?;
        let text = std::str::from_utf8(&bytes).map_err(cfg_err)?;
        let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        Ok((Self::parse(text, &base)?, bytes))
    }

    pub fn to_toml_string(&self) -> Result<String> {
        let mut out = String::new();
        if self.data != DataSection::default() {
            let mut t = toml::Table::new();
            t.insert("data".into(), toml::Value::try_from(&self.data).map_err(cfg_err)?);
            out += &toml::to_string(&t).map_err(cfg_err)?;
            out.push('\n');
        }
        out += &self.train.to_toml_string()?;
        Ok(out)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base.join(p)
        }
    }

    /// Files the data section reads, for the run manifest.
    pub fn data_paths(&self) -> Vec<PathBuf> {
        let mut v: Vec<PathBuf> = self.data.prepared.iter().map(|p| self.resolve(p)).collect();
        v.extend(self.data.inputs.iter().map(|p| self.resolve(p)));
        v.extend(self.data.hidden_labels.iter().map(|p| self.resolve(p)));
        v
    }

    /// Load or prepare the data; `window` overrides the windowing of raw inputs.
    pub fn load_data(&self, window: Option<&WindowParams>) -> Result<PreparedData> {
        match (&self.data.prepared, self.data.inputs.is_empty()) {
            (Some(_), false) => Err(cfg_err("[data] sets both `prepared` and `inputs`")),
            (Some(dir), true) => {
                if window.is_some() {
                    return Err(cfg_err(
                        "window settings can only be searched with raw `inputs` in [data]",
                    ));
                }
                PreparedData::load(&self.resolve(dir))
            }
            (None, false) => {
                let pre = self.data.preprocess.clone().unwrap_or_default();
                let mut recs = Vec::new();
                let opts = CsvOptions {
                    sample_rate_hz: pre.sample_rate_hz,
                    domain_override: None,
                };
                for p in &self.data.inputs {
                    recs.extend(read_recordings(fs::File::open(self.resolve(p))?, &opts)?);
                }
                if let Some(h) = &self.data.hidden_labels {
                    attach_hidden_row_labels(fs::File::open(self.resolve(h))?, &mut recs)?;
                }
                let rate = recs.first().map_or(1.0, |r| r.sample_rate_hz);
                let (window_len, overlap) = match window {
                    Some(w) => (w.window_len, w.overlap),
                    None => (preprocess_len(&pre, rate)?, pre.overlap),
                };
                let opts = PrepareOptions {
                    window_len,
                    overlap,
                    median_kernel: pre.median_kernel,
                    split: pre.split,
                    num_classes: pre.num_classes,
                };
                let (data, _) = prepare(&recs, &opts)?;
                Ok(data)
            }
            (None, true) => Err(cfg_err(
                "[data] needs `prepared` or `inputs` (or pass --data)",
            )),
        }
    }
}

fn preprocess_len(pre: &Preprocess, rate: f64) -> Result<usize> {
    match (pre.window_len, pre.window_ms) {
        (Some(w), _) => Ok(w),
        (None, Some(ms)) => Ok(window_len_for(ms, rate)),
        (None, None) => Err(cfg_err("[data.preprocess] needs `window_len` or `window_ms`")),
    }
}

pub fn template() -> Result<String> {
    let cfg = RunConfig {
        data: DataSection {
            prepared: Some("prepared".into()),
            ..DataSection::default()
        },
        train: TrainConfig::default(),
        base: PathBuf::new(),
    };
    let body = cfg.to_toml_string()?;
    Ok(format!(
        "# hardapt run config. Every table below [data] is required in full.\n\
         # [data] takes either `prepared = \"dir\"` or raw `inputs = [..]` with an\n\
         # optional `hidden_labels` file and a [data.preprocess] table.\n\n{body}"
    ))
}
