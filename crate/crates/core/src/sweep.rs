//! Hyperparameter grid search scored by windowed 50-step forecasts.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::esn::EsnParams;
use crate::io::fmt_f64;
use crate::models::{fit_model, AnyModel, FitReport, ModelSpec};
use crate::nets::{CellKind, FcnConfig, GatedConfig, TrainConfig};
use crate::rng::derive_seed;
use crate::surrogate::Surrogate;
use crate::timeseries::{Dataset, TrainingSet};

/// Steps per forecast window.
pub const FORECAST_WINDOW: usize = 50;
/// Minimum teacher-forced samples before the first window.
pub const MIN_SYNC_PREFIX: usize = 200;

/// Per-step ℓ₂ errors of consecutive closed-loop forecast windows.
#[derive(Debug, Clone, PartialEq)]
pub struct ForecastErrors {
    /// Time at which each window's forecast starts.
    pub starts: Vec<usize>,
    /// `errors[w][s]` is `‖ŷ − y‖` at step `s+1` of window `w`.
    pub errors: Vec<Vec<f64>>,
}

impl ForecastErrors {
    pub fn mean(&self) -> f64 {
        let n: usize = self.errors.iter().map(Vec::len).sum();
        self.errors.iter().flatten().sum::<f64>() / n as f64
    }

    pub fn window_means(&self) -> Vec<f64> {
        self.errors.iter().map(|w| w.iter().sum::<f64>() / w.len() as f64).collect()
    }
}

/// Splits `data` after a synchronization prefix into consecutive windows of `horizon` steps.
/// Before each window the model is driven by all true data up to the window start; the
/// forecast then runs closed-loop under the true controls.
pub fn forecast_errors<S: Surrogate>(model: &S, data: &Dataset, horizon: usize, min_prefix: usize) -> Result<ForecastErrors> {
    if data.n_x() != model.n_y() || data.n_u() != model.n_u() {
        return Err(Error::Dimension("validation data does not match the model".into()));
    }
    if horizon == 0 {
        return Err(Error::Config("forecast horizon must be positive".into()));
    }
    let prefix = min_prefix.max(model.history_len());
    let windows = data.len().saturating_sub(prefix) / horizon;
    if windows == 0 {
        return Err(Error::Size(format!(
            "{} samples cannot hold a {prefix}-step prefix and one {horizon}-step window",
            data.len()
        )));
    }
    let col = |m: &nalgebra::DMatrix<f64>, j: usize| m.column(j).into_owned();
    let mut state = model.start(&col(&data.states, 0));
    let mut t = 0;
    let mut out = ForecastErrors { starts: Vec::with_capacity(windows), errors: Vec::with_capacity(windows) };
    for w in 0..windows {
        let start = prefix + w * horizon;
        while t < start {
            model.advance(&mut state, &col(&data.controls, t), &col(&data.states, t + 1));
            t += 1;
        }
        let u = data.controls.columns(start, horizon).into_owned();
        let pred = model.forecast(&state, &u);
        let err = (0..horizon).map(|s| (pred.column(s) - data.states.column(start + s + 1)).norm()).collect();
        out.starts.push(start);
        out.errors.push(err);
    }
    Ok(out)
}

/// Mean 50-step ℓ₂ forecast error in scaled space.
pub fn evaluate_50step<S: Surrogate>(model: &S, val: &Dataset) -> Result<f64> {
    forecast_errors(model, val, FORECAST_WINDOW, MIN_SYNC_PREFIX).map(|e| e.mean())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Axis {
    pub name: String,
    pub values: Vec<f64>,
}

/// A base configuration and the axes varied around it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub base: ModelSpec,
    pub axes: Vec<Axis>,
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        for a in &self.axes {
            if a.values.is_empty() {
                return Err(Error::Config(format!("axis {:?} has no values", a.name)));
            }
            let mut probe = self.base.clone();
            for v in &a.values {
                probe.set(&a.name, *v)?;
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.axes.iter().map(|a| a.values.len()).product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Axis values of grid point `index`; the last axis varies fastest.
    pub fn values(&self, mut index: usize) -> Vec<f64> {
        let mut v = vec![0.0; self.axes.len()];
        for (k, a) in self.axes.iter().enumerate().rev() {
            v[k] = a.values[index % a.values.len()];
            index /= a.values.len();
        }
        v
    }

    pub fn point(&self, index: usize) -> Result<ModelSpec> {
        let mut s = self.base.clone();
        for (a, v) in self.axes.iter().zip(self.values(index)) {
            s.set(&a.name, v)?;
        }
        Ok(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepEntry {
    pub index: usize,
    pub values: Vec<f64>,
    /// Mean 50-step error; `+∞` when fitting or evaluation failed.
    pub score: f64,
    pub param_count: usize,
    pub seed: u64,
    pub fit_seconds: f64,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub grid: GridSpec,
    pub seed: u64,
    pub entries: Vec<SweepEntry>,
    /// Entry indices, best first.
    pub ranking: Vec<usize>,
}

impl SweepResult {
    pub fn selected(&self) -> &SweepEntry {
        &self.entries[self.ranking[0]]
    }

    /// One row per grid point in index order. Timing is the last column.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("index,");
        for a in &self.grid.axes {
            s.push_str(&a.name);
            s.push(',');
        }
        s.push_str("score,param_count,seed,rank,fit_seconds\n");
        let mut rank = vec![0; self.entries.len()];
        for (r, &i) in self.ranking.iter().enumerate() {
            rank[i] = r;
        }
        for e in &self.entries {
            s.push_str(&format!("{},", e.index));
            for v in &e.values {
                s.push_str(&fmt_f64(*v));
                s.push(',');
            }
            s.push_str(&format!("{},{},{},{},{:.3}\n", fmt_f64(e.score), e.param_count, e.seed, rank[e.index], e.fit_seconds));
        }
        s
    }

    pub fn selection(&self) -> Result<Selection> {
        let e = self.selected();
        Ok(Selection {
            family: self.grid.base.family().to_string(),
            index: e.index,
            score: e.score,
            sweep_seed: self.seed,
            values: self.grid.axes.iter().map(|a| a.name.clone()).zip(e.values.iter().copied()).collect(),
            spec: self.grid.point(e.index)?,
        })
    }
}

/// The chosen grid point, as consumed by training and control runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub family: String,
    pub index: usize,
    pub score: f64,
    pub sweep_seed: u64,
    pub values: BTreeMap<String, f64>,
    pub spec: ModelSpec,
}

impl Selection {
    /// The selected configuration retrained from a fresh initialization.
    pub fn retrain(&self, train: &TrainingSet, fresh_seed: u64) -> Result<(AnyModel, FitReport)> {
        fit_model(&self.spec.with_seed(derive_seed(fresh_seed, self.index as u64)), train)
    }
}

fn evaluate_point(grid: &GridSpec, index: usize, seed: u64, train: &TrainingSet, val: &Dataset) -> SweepEntry {
    let child = derive_seed(seed, index as u64);
    let mut entry = SweepEntry {
        index,
        values: grid.values(index),
        score: f64::INFINITY,
        param_count: usize::MAX,
        seed: child,
        fit_seconds: 0.0,
        error: None,
    };
    let run = || -> Result<(f64, usize, f64)> {
        let spec = grid.point(index)?.with_seed(child);
        let (model, report) = fit_model(&spec, train)?;
        Ok((evaluate_50step(&model, val)?, model.param_count(), report.seconds))
    };
    match run() {
        Ok((score, params, secs)) => {
            entry.score = if score.is_finite() { score } else { f64::INFINITY };
            entry.param_count = params;
            entry.fit_seconds = secs;
        }
        Err(e) => {
            log::warn!("grid point {index} failed: {e}");
            entry.error = Some(e.to_string());
        }
    }
    entry
}

/// Fits and scores every grid point on `workers` threads. `val` must be scaled with the
/// training scalers.
pub fn run_sweep(grid: &GridSpec, train: &TrainingSet, val: &Dataset, seed: u64, workers: usize) -> Result<SweepResult> {
    grid.validate()?;
    let n = grid.len();
    let next = AtomicUsize::new(0);
    let results = Mutex::new(Vec::with_capacity(n));
    std::thread::scope(|s| {
        for _ in 0..workers.clamp(1, n.max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= n {
                    break;
                }
                let e = evaluate_point(grid, i, seed, train, val);
                log::info!("grid point {i}/{n}: score {:.4e}", e.score);
                results.lock().expect("no worker panics while holding the lock").push(e);
            });
        }
    });
    let mut entries = results.into_inner().expect("workers joined");
    entries.sort_by_key(|e| e.index);
    let mut ranking: Vec<usize> = (0..n).collect();
    ranking.sort_by(|&a, &b| {
        let (x, y) = (&entries[a], &entries[b]);
        x.score.total_cmp(&y.score).then(x.param_count.cmp(&y.param_count)).then(a.cmp(&b))
    });
    Ok(SweepResult { grid: grid.clone(), seed, entries, ranking })
}

/// Retrains the sweep's selected configuration from a fresh initialization.
pub fn retrain_best(result: &SweepResult, train: &TrainingSet, fresh_seed: u64) -> Result<(AnyModel, FitReport)> {
    result.selection()?.retrain(train, fresh_seed)
}

fn axis(name: &str, values: &[f64]) -> Axis {
    Axis { name: name.into(), values: values.to_vec() }
}

/// Default grid for a family; candidate values bracket the configurations reported for the
/// benchmark plants.
pub fn default_grid(family: &str) -> Result<GridSpec> {
    let train = TrainConfig::default();
    Ok(match family {
        "dmdc" => GridSpec {
            base: ModelSpec::Dmdc { delays: 20, beta: 1e-6 },
            axes: vec![axis("delays", &[1.0, 5.0, 10.0, 20.0, 30.0]), axis("beta", &[1e-7, 1e-6, 1e-5, 1e-4])],
        },
        "esn" => GridSpec {
            base: ModelSpec::Esn(EsnParams::default()),
            axes: vec![
                axis("spectral_radius", &[0.2, 0.4, 0.8, 1.2]),
                axis("input_scale", &[0.01, 0.1, 0.25, 0.5]),
                axis("bias_scale", &[0.66, 1.33, 1.66]),
                axis("leak", &[0.2, 0.4, 0.6]),
                axis("beta", &[1e-7, 1e-6, 1e-5]),
            ],
        },
        "fcn" => GridSpec {
            base: ModelSpec::Fcn { net: FcnConfig { width: 50, delays: 15, dropout: 0.0, seed: 0 }, train },
            axes: vec![
                axis("delays", &[5.0, 15.0, 20.0]),
                axis("dropout", &[0.0, 0.02]),
                axis("width", &[10.0, 50.0, 75.0]),
                axis("lr", &[1e-4, 1e-3]),
            ],
        },
        "lstm" | "gru" => {
            let kind: CellKind = family.parse()?;
            GridSpec {
                base: ModelSpec::Gated {
                    net: GatedConfig { kind, hidden: 64, lags: 20, readout_width: 0, dropout: 0.0, seed: 0 },
                    train,
                },
                axes: vec![
                    axis("hidden", &[16.0, 32.0, 64.0, 128.0]),
                    axis("dropout", &[0.0, 0.02]),
                    axis("lags", &[5.0, 10.0, 20.0, 30.0]),
                    axis("lr", &[1e-4, 1e-3]),
                ],
            }
        }
        other => return Err(Error::Config(format!("unknown model family {other:?}"))),
    })
}
