//! Train every ablation rung on a synthetic shifted corpus and print the
//! target macro-F1 of each, using `configs/shift-ablation.toml`.
//!
//! cargo run --release -p hardapt-core --example ablation -- [seeds] [epochs]

use std::time::Instant;

use hardapt::data::{prepare, PrepareOptions, SplitSpec};
use hardapt::synthgen::{generate, ShiftConfig};
use hardapt::trainer::{train, AblationMode, TrainConfig, TrainData};

const CONFIG: &str = include_str!("../../../configs/shift-ablation.toml");

fn env<T: std::str::FromStr>(key: &str) -> Option<T> {
    std::env::var(key).ok().and_then(|v| v.parse().ok())
}

fn main() -> hardapt::Result<()> {
    let mut args = std::env::args().skip(1);
    let seeds: u64 = args.next().map_or(3, |s| s.parse().expect("seed count"));
    let epochs: Option<usize> = args.next().map(|s| s.parse().expect("epoch count"));
    let first: u64 = env("FIRST_SEED").unwrap_or(0);
    for seed in first..first + seeds {
        let mut shift = ShiftConfig {
            seed,
            ..ShiftConfig::default()
        };
        if let Some(v) = env("SHIFT_DEG") {
            shift.rotation_shift_deg = v;
        }
        if let Some(v) = env("SAMPLES") {
            shift.samples_per_class = v;
        }
        let corpus = generate(&shift)?;
        let mut recs = corpus.source_recordings.clone();
        recs.extend(corpus.target_recordings.iter().cloned());
        let opts = PrepareOptions {
            window_len: 24,
            overlap: 0.0,
            median_kernel: 1,
            split: SplitSpec {
                seed,
                ..SplitSpec::default()
            },
            num_classes: Some(4),
        };
        let (mut prepared, _) = prepare(&recs, &opts)?;
        prepared.target_labels = Some(corpus.target_labels.clone());
        let data = TrainData::from(&prepared);
        let mut line = format!("seed {seed}:");
        let only: Option<AblationMode> = env("MODE");
        for mode in AblationMode::ALL.into_iter().filter(|m| only.is_none_or(|o| o == *m)) {
            let mut cfg = TrainConfig::from_toml_str(CONFIG)?;
            cfg.training.mode = mode;
            cfg.optimizer.seed = seed;
            if let Some(e) = epochs {
                cfg.optimizer.max_epochs = e;
            }
            if let Some(v) = env("AUG_DEG") {
                cfg.augment.rotation_deg = v;
            }
            if let Some(v) = env("RAMP") {
                cfg.weights.ramp_epochs = v;
            }
            if let Some(v) = env("PATIENCE") {
                cfg.training.patience = v;
            }
            if let Some(v) = env("TAU") {
                cfg.ensemble.confidence_threshold = v;
            }
            if let Some(v) = env("BETA0") {
                cfg.weights.beta0 = v;
            }
            if let Some(v) = env("BETA1") {
                cfg.weights.beta1 = v;
            }
            let t = Instant::now();
            let out = train(&data, &cfg)?;
            if std::env::var_os("ABLATION_TRACE").is_some() {
                let mut buf = Vec::new();
                out.report.write_csv(&mut buf)?;
                println!("{mode}\n{}", String::from_utf8_lossy(&buf));
            }
            if std::env::var_os("ABLATION_CONFUSION").is_some() {
                let r = hardapt::eval::evaluate(&out.model, &out.params, &data.target, &corpus.target_labels)?;
                println!("{mode} {:?}", r.confusion.counts);
            }
            let last = out.report.epochs.last().unwrap();
            line += &format!(
                " {mode}={:.3}/{:.3} ({:.1}s)",
                out.report.final_target_f1().unwrap_or(f64::NAN),
                last.target_f1.unwrap_or(f64::NAN),
                t.elapsed().as_secs_f64()
            );
        }
        println!("{line}");
    }
    Ok(())
}
