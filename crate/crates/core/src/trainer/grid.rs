use std::cmp::Ordering;
use std::sync::atomic::{AtomicUsize, Ordering as AtomicOrdering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{train, TrainConfig, TrainData};
use crate::error::{ensure, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindowParams {
    pub window_len: usize,
    pub overlap: f64,
}

/// Axes of a search; an empty axis keeps the template value.
#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Grid {
    pub alpha: Vec<f64>,
    pub lambda: Vec<f64>,
    pub learning_rate: Vec<f64>,
    pub window: Vec<WindowParams>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct GridPoint {
    pub alpha: f64,
    pub lambda: f64,
    pub learning_rate: f64,
    pub window: Option<WindowParams>,
}

impl GridPoint {
    fn cmp_key(&self, other: &Self) -> Ordering {
        let w = |p: &GridPoint| p.window.map_or((0, 0.0), |w| (w.window_len, w.overlap));
        self.alpha
            .total_cmp(&other.alpha)
            .then(self.lambda.total_cmp(&other.lambda))
            .then(self.learning_rate.total_cmp(&other.learning_rate))
            .then(w(self).0.cmp(&w(other).0))
            .then(w(self).1.total_cmp(&w(other).1))
    }

    pub fn apply(&self, template: &TrainConfig) -> TrainConfig {
        let mut c = template.clone();
        c.ensemble.alpha = self.alpha;
        c.kernel.lambda = self.lambda;
        c.optimizer.learning_rate = self.learning_rate;
        c
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GridResult {
    pub point: GridPoint,
    pub config: TrainConfig,
    pub best_val_f1: Option<f64>,
    pub best_epoch: usize,
}

impl Grid {
    pub fn points(&self, template: &TrainConfig) -> Result<Vec<GridPoint>> {
        ensure!(
            !(self.alpha.is_empty()
                && self.lambda.is_empty()
                && self.learning_rate.is_empty()
                && self.window.is_empty()),
            "empty grid"
        );
        ensure!(
            self.alpha
                .iter()
                .chain(&self.lambda)
                .chain(&self.learning_rate)
                .chain(self.window.iter().map(|w| &w.overlap))
                .all(|v| v.is_finite()),
            "grid values must be finite"
        );
        let or = |v: &Vec<f64>, d: f64| if v.is_empty() { vec![d] } else { v.clone() };
        let windows: Vec<Option<WindowParams>> = if self.window.is_empty() {
            vec![None]
        } else {
            self.window.iter().copied().map(Some).collect()
        };
        let mut out = Vec::new();
        for &alpha in &or(&self.alpha, template.ensemble.alpha) {
            for &lambda in &or(&self.lambda, template.kernel.lambda) {
                for &learning_rate in &or(&self.learning_rate, template.optimizer.learning_rate) {
                    for &window in &windows {
                        out.push(GridPoint {
                            alpha,
                            lambda,
                            learning_rate,
                            window,
                        });
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Train one run per grid point with the template's seed and rank by best
/// validation macro-F1 (ties by point value). `data` supplies the windows
/// for a window setting, or the default windows for `None`.
pub fn grid_search(
    template: &TrainConfig,
    grid: &Grid,
    workers: usize,
    data: &(dyn Fn(Option<&WindowParams>) -> Result<TrainData> + Sync),
) -> Result<Vec<GridResult>> {
    let points = grid.points(template)?;
    for p in &points {
        p.apply(template).validate()?;
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<GridResult>>>> =
        Mutex::new((0..points.len()).map(|_| None).collect());
    let run = |p: &GridPoint| -> Result<GridResult> {
        let config = p.apply(template);
        let d = data(p.window.as_ref())?;
        let out = train(&d, &config)?;
        Ok(GridResult {
            point: *p,
            config,
            best_val_f1: out.report.best_val_f1,
            best_epoch: out.report.best_epoch,
        })
    };
    std::thread::scope(|s| {
        for _ in 0..workers.clamp(1, points.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, AtomicOrdering::SeqCst);
                if i >= points.len() {
                    break;
                }
                let r = run(&points[i]);
                slots.lock().unwrap()[i] = Some(r);
            });
        }
    });
    let mut results = slots
        .into_inner()
        .unwrap()
        .into_iter()
        .map(|r| r.expect("every point ran"))
        .collect::<Result<Vec<_>>>()?;
    let score = |r: &GridResult| r.best_val_f1.unwrap_or(f64::NEG_INFINITY);
    results.sort_by(|a, b| score(b).total_cmp(&score(a)).then(a.point.cmp_key(&b.point)));
    Ok(results)
}
