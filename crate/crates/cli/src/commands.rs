use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use hardapt::data::csv_io::{
    attach_hidden_row_labels, read_recordings, write_hidden_row_labels, write_recordings,
    CsvOptions,
};
use hardapt::data::store::{read_window_labels, HIDDEN_FILE};
use hardapt::data::{prepare, window_len_for, Domain, PrepareOptions, PreparedData, SplitSpec};
use hardapt::ensemble::entropy;
use hardapt::eval::{
    alpha_uncertainty_sweep, export_embeddings, write_alpha_rows, MetricReport,
};
use hardapt::model::{decode_checkpoint, encode_checkpoint, Checkpoint};
use hardapt::model::Model;
use hardapt::synthgen::{generate, ShiftConfig};
use hardapt::trainer::{
    grid_search, predict_dataset, train_with, AblationMode, Grid, GridResult, TrainData,
    WindowParams,
};
use hardapt::{Error, Result};

use crate::config::{template, RunConfig};
use crate::manifest::{write_atomic, RunManifest};

pub type CmdResult = std::result::Result<(), CliError>;

#[derive(Debug)]
pub enum CliError {
    /// Reported with the usage exit code.
    Usage(String),
    Core(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}

fn write_out(manifest: &mut RunManifest, path: &Path, bytes: &[u8]) -> Result<()> {
    write_atomic(path, bytes)?;
    manifest.output(path)
}

pub struct SynthArgs {
    pub out: PathBuf,
    pub seed: u64,
    pub rotation_shift: Option<f64>,
    pub samples_per_class: Option<usize>,
    pub subjects: Option<usize>,
    pub classes: Option<usize>,
    pub window_len: Option<usize>,
}

pub const SYNTH_SOURCE: &str = "source.csv";
pub const SYNTH_TARGET: &str = "target.csv";
pub const SYNTH_HIDDEN: &str = "target_hidden_labels.csv";

pub fn synth(a: SynthArgs) -> CmdResult {
    let mut m = RunManifest::start("synth");
    m.seed = Some(a.seed);
    let mut cfg = ShiftConfig {
        seed: a.seed,
        ..ShiftConfig::default()
    };
    if let Some(v) = a.rotation_shift {
        cfg.rotation_shift_deg = v;
    }
    if let Some(v) = a.samples_per_class {
        cfg.samples_per_class = v;
    }
    if let Some(v) = a.subjects {
        cfg.subjects_per_domain = v;
    }
    if let Some(v) = a.classes {
        cfg.num_classes = v;
    }
    if let Some(v) = a.window_len {
        cfg.window_len = v;
    }
    let corpus = generate(&cfg)?;
    fs::create_dir_all(&a.out)?;
    let mut buf = Vec::new();
    write_recordings(&mut buf, &corpus.source_recordings, true)?;
    write_out(&mut m, &a.out.join(SYNTH_SOURCE), &buf)?;
    buf.clear();
    write_recordings(&mut buf, &corpus.target_recordings, false)?;
    write_out(&mut m, &a.out.join(SYNTH_TARGET), &buf)?;
    let labeled: Vec<_> = corpus
        .target_recordings
        .iter()
        .zip(&corpus.target_row_labels)
        .map(|(r, l)| hardapt::data::SensorRecording {
            labels: Some(l.clone()),
            ..r.clone()
        })
        .collect();
    buf.clear();
    write_hidden_row_labels(&mut buf, &labeled)?;
    write_out(&mut m, &a.out.join(SYNTH_HIDDEN), &buf)?;
    let text = toml::to_string(&cfg).map_err(|e| Error::Config(e.to_string()))?;
    write_out(&mut m, &a.out.join("synth.toml"), text.as_bytes())?;
    m.finish(&a.out)?;
    println!(
        "wrote {} source and {} target windows to {}",
        corpus.source.len(),
        corpus.target.len(),
        a.out.display()
    );
    Ok(())
}

pub struct PrepareArgs {
    pub inputs: Vec<PathBuf>,
    pub hidden_labels: Option<PathBuf>,
    pub out: PathBuf,
    pub domain: Option<Domain>,
    pub window_ms: Option<f64>,
    pub window_len: Option<usize>,
    pub overlap: f64,
    pub median_kernel: usize,
    pub sample_rate: Option<f64>,
    pub num_classes: Option<usize>,
    pub split_seed: u64,
}

pub fn prepare_cmd(a: PrepareArgs) -> CmdResult {
    let mut m = RunManifest::start("prepare");
    m.seed = Some(a.split_seed);
    let opts = CsvOptions {
        sample_rate_hz: a.sample_rate,
        domain_override: a.domain,
    };
    let mut recs = Vec::new();
    for p in &a.inputs {
        m.input(p)?;
        recs.extend(read_recordings(fs::File::open(p)?, &opts)?);
    }
    if let Some(h) = &a.hidden_labels {
        m.input(h)?;
        attach_hidden_row_labels(fs::File::open(h)?, &mut recs)?;
    }
    let rate = recs
        .first()
        .map(|r| r.sample_rate_hz)
        .ok_or_else(|| Error::contract("no recordings in the inputs"))?;
    let window_len = match (a.window_len, a.window_ms) {
        (Some(w), None) => w,
        (None, Some(ms)) => window_len_for(ms, rate),
        _ => return Err(CliError::Usage("pass exactly one of --window-len or --window-ms".into())),
    };
    let split = SplitSpec {
        seed: a.split_seed,
        ..SplitSpec::default()
    };
    let (data, _) = prepare(
        &recs,
        &PrepareOptions {
            window_len,
            overlap: a.overlap,
            median_kernel: a.median_kernel,
            split,
            num_classes: a.num_classes,
        },
    )?;
    data.save(&a.out)?;
    let mut names: Vec<PathBuf> = fs::read_dir(&a.out)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    names.sort();
    for p in names.iter().filter(|p| p.file_name().is_some_and(|n| n != crate::manifest::RUN_FILE)) {
        m.output(p)?;
    }
    m.finish(&a.out)?;
    println!(
        "W={window_len} stride={} windows: train {} val {} test {} target {}",
        hardapt::data::window_stride(window_len, a.overlap),
        data.source_train.len(),
        data.source_val.len(),
        data.source_test.len(),
        data.target.len()
    );
    Ok(())
}

pub fn init_config(out: Option<PathBuf>) -> CmdResult {
    let text = template()?;
    match out {
        Some(p) => write_atomic(&p, text.as_bytes())?,
        None => print!("{text}"),
    }
    Ok(())
}

pub struct TrainArgs {
    pub config: PathBuf,
    pub out: PathBuf,
    pub ablation: Option<AblationMode>,
    pub seed: Option<u64>,
    pub data: Option<PathBuf>,
    pub from_sweep: Option<String>,
    pub sweep_dir: Option<PathBuf>,
    pub max_epochs: Option<usize>,
    pub dump_ensemble: bool,
}

pub const CHECKPOINT_FILE: &str = "checkpoint.hdac";
pub const REPORT_FILE: &str = "report.csv";
pub const GRID_JSON: &str = "grid.json";

/// One ranked grid entry as stored on disk.
#[derive(Serialize, Deserialize)]
struct SweepEntry {
    rank: usize,
    window: Option<WindowParams>,
    best_val_f1: Option<f64>,
    best_epoch: usize,
    config: hardapt::trainer::TrainConfig,
}

fn pick_from_sweep(dir: &Path, selector: &str) -> std::result::Result<SweepEntry, CliError> {
    let rank: usize = match selector {
        "best" => 1,
        s => s
            .parse()
            .ok()
            .filter(|&r| r >= 1)
            .ok_or_else(|| CliError::Usage(format!("--from-sweep takes `best` or a rank, got {s:?}")))?,
    };
    let path = dir.join(GRID_JSON);
    let entries: Vec<SweepEntry> = serde_json::from_slice(&fs::read(&path)?).map_err(|e| Error::Format {
        kind: "sweep results",
        version: 1,
        msg: e.to_string(),
    })?;
    entries
        .into_iter()
        .find(|e| e.rank == rank)
        .ok_or_else(|| CliError::Usage(format!("{} has no rank {rank}", path.display())))
}

fn train_data(cfg: &RunConfig, window: Option<&WindowParams>) -> Result<(TrainData, PreparedData)> {
    let prepared = cfg.load_data(window)?;
    Ok((TrainData::from(&prepared), prepared))
}

pub fn train(a: TrainArgs) -> CmdResult {
    let mut m = RunManifest::start("train");
    let (mut cfg, bytes) = RunConfig::load(&a.config)?;
    m.config(&a.config, &bytes);
    let mut window = None;
    if let Some(sel) = &a.from_sweep {
        let dir = a.sweep_dir.clone().unwrap_or_else(|| a.out.join("sweep"));
        let entry = pick_from_sweep(&dir, sel)?;
        m.input(&dir.join(GRID_JSON))?;
        cfg.train = entry.config;
        window = entry.window;
    }
    if let Some(d) = &a.data {
        cfg.data = crate::config::DataSection {
            prepared: Some(fs::canonicalize(d)?),
            ..Default::default()
        };
    }
    if let Some(mode) = a.ablation {
        cfg.train.training.mode = mode;
    }
    if let Some(s) = a.seed {
        cfg.train.optimizer.seed = s;
    }
    if let Some(e) = a.max_epochs {
        cfg.train.optimizer.max_epochs = e;
    }
    cfg.train.validate().map_err(|e| Error::Config(e.to_string()))?;
    m.seed = Some(cfg.train.optimizer.seed);
    for p in cfg.data_paths() {
        m.input(&p)?;
    }
    let (data, prepared) = train_data(&cfg, window.as_ref())?;
    fs::create_dir_all(&a.out)?;

    let mut dump = Vec::new();
    let mut first = true;
    let outcome = train_with(&data, &cfg.train, &mut |rec, ens| {
        log::info!(
            "epoch {} total {:.4} val_f1 {:?} target_f1 {:?}",
            rec.epoch,
            rec.total,
            rec.val_f1,
            rec.target_f1
        );
        if let (true, Some(e)) = (a.dump_ensemble, ens) {
            e.write_dump(&mut dump, first)?;
            first = false;
        }
        Ok(())
    })?;

    let mut extra = serde_json::Map::new();
    extra.insert("mode".into(), cfg.train.training.mode.as_str().into());
    extra.insert("best_epoch".into(), outcome.report.best_epoch.into());
    extra.insert("num_classes".into(), prepared.meta.num_classes.into());
    let ckpt = Checkpoint {
        config: outcome.model.config.clone(),
        seed: cfg.train.optimizer.seed,
        extra,
        params: Some(outcome.params.clone()),
    };
    write_out(&mut m, &a.out.join(CHECKPOINT_FILE), &encode_checkpoint(&ckpt)?)?;
    let mut buf = Vec::new();
    outcome.report.write_csv(&mut buf)?;
    write_out(&mut m, &a.out.join(REPORT_FILE), &buf)?;
    write_out(&mut m, &a.out.join("config.toml"), cfg.train.to_toml_string()?.as_bytes())?;
    if a.dump_ensemble {
        write_out(&mut m, &a.out.join("ensemble.csv"), &dump)?;
    }
    m.finish(&a.out)?;
    let r = &outcome.report;
    println!(
        "{}: {} epochs, best epoch {} val macro-F1 {} target macro-F1 {}",
        cfg.train.training.mode,
        r.epochs.len(),
        r.best_epoch,
        fmt_opt(r.best_val_f1),
        fmt_opt(r.final_target_f1())
    );
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".into(), |x| format!("{x:.4}"))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Split {
    Train,
    Val,
    Test,
    Target,
}

pub struct EvalArgs {
    pub checkpoint: PathBuf,
    pub data: PathBuf,
    pub split: Split,
    pub hidden_labels: Option<PathBuf>,
    pub no_labels: bool,
    pub embeddings: bool,
    pub out: PathBuf,
}

#[derive(Serialize)]
struct EvalSummary {
    split: String,
    windows: usize,
    macro_f1: Option<f64>,
    mean_entropy: f64,
}

pub fn eval(a: EvalArgs) -> CmdResult {
    let mut m = RunManifest::start("eval");
    m.input(&a.checkpoint)?;
    m.input(&a.data)?;
    let ckpt = decode_checkpoint(&fs::read(&a.checkpoint)?)?;
    let params = ckpt.params.clone().expect("decoder fills params");
    m.seed = Some(ckpt.seed);
    let model = Model::new(ckpt.config.clone())?;
    let prepared = PreparedData::load(&a.data)?;
    let ds = match a.split {
        Split::Train => &prepared.source_train,
        Split::Val => &prepared.source_val,
        Split::Test => &prepared.source_test,
        Split::Target => &prepared.target,
    };
    if ds.channels != ckpt.config.channels || ds.window_len != ckpt.config.window_len {
        return Err(Error::contract(format!(
            "checkpoint expects [{}, {}] windows, data has [{}, {}]",
            ckpt.config.channels, ckpt.config.window_len, ds.channels, ds.window_len
        ))
        .into());
    }
    let labels: Option<Vec<usize>> = if a.no_labels {
        None
    } else if let Some(h) = &a.hidden_labels {
        m.input(h)?;
        Some(read_window_labels(fs::File::open(h)?)?)
    } else if a.split == Split::Target {
        let hidden = a.data.join(HIDDEN_FILE);
        hidden.exists().then(|| prepared.target_labels.clone()).flatten()
    } else {
        ds.labels()
    };
    if let Some(l) = &labels {
        if l.len() != ds.len() {
            return Err(Error::contract(format!(
                "{} labels for {} windows",
                l.len(),
                ds.len()
            ))
            .into());
        }
    }
    let probs = predict_dataset(&model, &params, ds)?;
    let mut h = 0.0;
    for r in 0..probs.rows() {
        h += entropy(probs.row(r))?;
    }
    let mean_entropy = h / probs.rows() as f64;
    fs::create_dir_all(&a.out)?;
    let mut macro_f1 = None;
    if let Some(l) = &labels {
        let report = MetricReport::from_probs(l, &probs)?;
        macro_f1 = Some(report.macro_f1);
        let mut buf = Vec::new();
        report.write_csv(&mut buf)?;
        write_out(&mut m, &a.out.join("metrics.csv"), &buf)?;
        buf.clear();
        report.confusion.write_csv(&mut buf)?;
        write_out(&mut m, &a.out.join("confusion.csv"), &buf)?;
    }
    if a.embeddings {
        let pseudo: Vec<usize> = (0..probs.rows())
            .map(|r| hardapt::model::argmax(probs.row(r)))
            .collect();
        let mut buf = Vec::new();
        export_embeddings(&model, &params, ds, labels.as_deref(), Some(&pseudo), &mut buf)?;
        write_out(&mut m, &a.out.join("embeddings.csv"), &buf)?;
    }
    let summary = EvalSummary {
        split: format!("{:?}", a.split).to_lowercase(),
        windows: ds.len(),
        macro_f1,
        mean_entropy,
    };
    let text = serde_json::to_string_pretty(&summary).map_err(Error::contract)? + "\n";
    write_out(&mut m, &a.out.join("summary.json"), text.as_bytes())?;
    m.finish(&a.out)?;
    println!(
        "{} windows: macro-F1 {} mean entropy {mean_entropy:.4}",
        ds.len(),
        fmt_opt(macro_f1)
    );
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum SweepKind {
    Grid,
    Alpha,
}

pub struct SweepArgs {
    pub config: PathBuf,
    pub kind: SweepKind,
    pub grid: Grid,
    pub workers: usize,
    pub out: PathBuf,
}

pub fn sweep(a: SweepArgs) -> CmdResult {
    let mut m = RunManifest::start("sweep");
    let (cfg, bytes) = RunConfig::load(&a.config)?;
    m.config(&a.config, &bytes);
    m.seed = Some(cfg.train.optimizer.seed);
    for p in cfg.data_paths() {
        m.input(&p)?;
    }
    let g = &a.grid;
    let empty = g.alpha.is_empty() && g.lambda.is_empty() && g.learning_rate.is_empty() && g.window.is_empty();
    if empty {
        return Err(CliError::Usage("empty grid: give at least one axis value".into()));
    }
    fs::create_dir_all(&a.out)?;
    match a.kind {
        SweepKind::Grid => {
            let base = cfg.load_data(None)?;
            let data = |w: Option<&WindowParams>| -> Result<TrainData> {
                match w {
                    None => Ok(TrainData::from(&base)),
                    Some(w) => Ok(TrainData::from(&cfg.load_data(Some(w))?)),
                }
            };
            let results = grid_search(&cfg.train, g, a.workers, &data)?;
            write_grid(&mut m, &a.out, &results)?;
            if let Some(best) = results.first() {
                println!(
                    "best: alpha {} lambda {} lr {} window {:?} val macro-F1 {}",
                    best.point.alpha,
                    best.point.lambda,
                    best.point.learning_rate,
                    best.point.window,
                    fmt_opt(best.best_val_f1)
                );
            }
        }
        SweepKind::Alpha => {
            if g.alpha.is_empty() || !(g.lambda.is_empty() && g.learning_rate.is_empty() && g.window.is_empty()) {
                return Err(CliError::Usage("an alpha sweep takes --alpha values only".into()));
            }
            let data = TrainData::from(&cfg.load_data(None)?);
            let rows = alpha_uncertainty_sweep(&g.alpha, |alpha| {
                let mut c = cfg.train.clone();
                c.ensemble.alpha = alpha;
                if c.training.mode == AblationMode::Baseline {
                    c.training.mode = AblationMode::Te;
                }
                c.training.ensembling = true;
                let mut trace = Vec::new();
                train_with(&data, &c, &mut |rec, _| {
                    trace.extend(rec.mean_entropy);
                    Ok(())
                })?;
                Ok(trace)
            })?;
            let mut buf = Vec::new();
            write_alpha_rows(&rows, &mut buf)?;
            write_out(&mut m, &a.out.join("alpha.csv"), &buf)?;
            print!("{}", String::from_utf8_lossy(&buf));
        }
    }
    m.finish(&a.out)?;
    Ok(())
}

fn write_grid(m: &mut RunManifest, out: &Path, results: &[GridResult]) -> Result<()> {
    let mut csv = String::from("rank,alpha,lambda,learning_rate,window_len,overlap,best_val_f1,best_epoch\n");
    let mut entries = Vec::new();
    for (i, r) in results.iter().enumerate() {
        let p = &r.point;
        let (wl, ov) = p
            .window
            .map_or((String::new(), String::new()), |w| (w.window_len.to_string(), w.overlap.to_string()));
        csv += &format!(
            "{},{},{},{},{wl},{ov},{},{}\n",
            i + 1,
            p.alpha,
            p.lambda,
            p.learning_rate,
            r.best_val_f1.map_or(String::new(), |v| v.to_string()),
            r.best_epoch
        );
        entries.push(SweepEntry {
            rank: i + 1,
            window: p.window,
            best_val_f1: r.best_val_f1,
            best_epoch: r.best_epoch,
            config: r.config.clone(),
        });
    }
    write_out(m, &out.join("grid.csv"), csv.as_bytes())?;
    let json = serde_json::to_string_pretty(&entries).map_err(Error::contract)? + "\n";
    write_out(m, &out.join(GRID_JSON), json.as_bytes())
}
