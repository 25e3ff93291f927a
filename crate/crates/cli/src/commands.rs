use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use anyhow::{bail, Context as _, Result};
use esnmpc::io::fmt_f64;
use esnmpc::models::{fit_model, AnyModel, FitReport};
use esnmpc::mpc::{build_reference, receding_horizon, ReferenceTrajectory, RunStatus, SimulatedPlant};
use esnmpc::plants::{training_trajectory, validation_trajectory, PlantSpec};
use esnmpc::rng::derive_seed;
use esnmpc::nets::TrainStatus;
use esnmpc::sweep::{forecast_errors, run_sweep, Selection, FORECAST_WINDOW, MIN_SYNC_PREFIX};
use esnmpc::timeseries::{Dataset, DatasetMeta, NoiseSpec, TrainingSet};
use serde::Serialize;

use crate::config::RunConfig;

/// A loaded config with the plant it names and the run-time overrides applied.
pub struct Context {
    pub cfg: RunConfig,
    pub plant: PlantSpec,
    pub workers: usize,
}

fn write(path: &Path, text: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    }
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    write(path, serde_json::to_string_pretty(value)? + "\n")
}

/// Runs `f` over `items` on up to `workers` threads, keeping input order.
fn parallel_map<T: Sync, R: Send>(items: &[T], workers: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<R>>> = items.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..workers.clamp(1, items.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                *slots[i].lock().unwrap() = Some(r);
            });
        }
    });
    slots.into_iter().map(|m| m.into_inner().unwrap().expect("every item is processed")).collect()
}

fn first_error<R>(results: Vec<Result<R>>) -> Result<Vec<R>> {
    results.into_iter().collect()
}

impl Context {
    pub fn new(cfg: RunConfig, workers: usize) -> Result<Self> {
        let plant = cfg.plant_spec()?;
        Ok(Self { cfg, plant, workers })
    }

    fn out(&self) -> &Path {
        &self.cfg.out
    }

    fn data_dir(&self, role: &str) -> PathBuf {
        self.out().join("data").join(role)
    }

    fn save_config(&self, dir: &Path) -> Result<()> {
        write(&dir.join("config.toml"), self.cfg.to_toml()?)
    }

    fn meta(&self, seed: u64, role: &str) -> DatasetMeta {
        DatasetMeta {
            seed: Some(seed),
            plant: Some(self.plant.kind.id().to_string()),
            role: Some(role.to_string()),
            substeps: Some(self.plant.substeps),
            ..DatasetMeta::default()
        }
    }

    fn generate(&self) -> Result<(Dataset, Dataset)> {
        let d = &self.cfg.data;
        let train = training_trajectory(&self.plant, d.seed, d.train_steps)?.measured_dataset()?;
        let val_seed = derive_seed(d.seed, 1);
        let val = validation_trajectory(&self.plant, val_seed, d.validation_steps)?.measured_dataset()?;
        train.write_dir(&self.data_dir("train"), &self.meta(d.seed, "train"))?;
        val.write_dir(&self.data_dir("validation"), &self.meta(val_seed, "validation"))?;
        Ok((train, val))
    }

    /// Training and validation data, generated on first use.
    fn data(&self) -> Result<(Dataset, Dataset)> {
        let (tdir, vdir) = (self.data_dir("train"), self.data_dir("validation"));
        if tdir.join("meta.json").exists() && vdir.join("meta.json").exists() {
            let (train, _) = Dataset::read_dir(&tdir)?;
            let (val, _) = Dataset::read_dir(&vdir)?;
            return Ok((train, val));
        }
        self.generate()
    }

    fn training_set(&self, raw: &Dataset) -> Result<TrainingSet> {
        let noise = match self.cfg.data.noise {
            v if v > 0.0 => Some(NoiseSpec::new(v, derive_seed(self.cfg.data.seed, 2))?),
            _ => None,
        };
        Ok(TrainingSet::prepare(raw, noise.as_ref())?)
    }

    fn selection_path(&self) -> PathBuf {
        self.out().join("sweep").join("selection.json")
    }

    fn selection(&self) -> Result<Option<Selection>> {
        if self.cfg.sweep.is_none() {
            return Ok(None);
        }
        let path = self.selection_path();
        let text = fs::read_to_string(&path)
            .with_context(|| format!("cannot read {}; run the sweep command first", path.display()))?;
        Ok(Some(serde_json::from_str(&text)?))
    }

    /// Family name of the model this config trains.
    fn family(&self) -> Result<String> {
        match (self.selection()?, &self.cfg.model) {
            (Some(sel), _) => Ok(sel.spec.family().to_string()),
            (None, Some(m)) => Ok(m.family().to_string()),
            (None, None) => bail!("config needs a [model] or [sweep] section"),
        }
    }

    fn model_dir(&self, family: &str, seed: u64) -> PathBuf {
        self.out().join("models").join(format!("{family}_{seed}"))
    }

    fn fit(&self, train: &TrainingSet, seed: u64) -> Result<(AnyModel, FitReport)> {
        match (self.selection()?, &self.cfg.model) {
            (Some(sel), _) => Ok(sel.retrain(train, seed)?),
            (None, Some(m)) => Ok(fit_model(&m.with_seed(seed), train)?),
            (None, None) => bail!("config needs a [model] or [sweep] section"),
        }
    }

    fn train_one(&self, train: &TrainingSet, family: &str, seed: u64) -> Result<AnyModel> {
        let (model, report) = self.fit(train, seed)?;
        let dir = self.model_dir(family, seed);
        fs::create_dir_all(&dir)?;
        model.save(&dir.join("model.txt"))?;
        self.save_config(&dir)?;
        if let Some(log) = &report.log {
            write(&dir.join("train_log.csv"), log.to_csv())?;
            if matches!(log.status, TrainStatus::Diverged { .. } | TrainStatus::NoImprovement) {
                log::warn!("{family} seed {seed}: training ended with {:?}", log.status);
            }
        }
        write_json(
            &dir.join("fit.json"),
            &serde_json::json!({ "family": family, "seed": seed, "seconds": report.seconds }),
        )?;
        log::info!("trained {family} seed {seed} in {:.2} s", report.seconds);
        Ok(model)
    }

    fn load_model(&self, family: &str, seed: u64) -> Result<AnyModel> {
        let path = self.model_dir(family, seed).join("model.txt");
        AnyModel::load(&path).with_context(|| format!("cannot load {}; run the train command first", path.display()))
    }

    pub fn gen_data(&self) -> Result<()> {
        let (train, val) = self.generate()?;
        self.save_config(self.out())?;
        println!(
            "{}: {} training steps, {} validation steps at dt = {} -> {}",
            self.plant.kind,
            train.len(),
            val.len(),
            train.dt,
            self.out().join("data").display()
        );
        Ok(())
    }

    pub fn sweep(&self) -> Result<()> {
        let grid = self.cfg.grid()?;
        let (raw, val) = self.data()?;
        let train = self.training_set(&raw)?;
        let val = train.scale_other(&val)?;
        let seed = self.cfg.sweep.as_ref().map_or(0, |s| s.seed);
        let result = run_sweep(&grid, &train, &val, seed, self.workers)?;
        let dir = self.out().join("sweep");
        write(&dir.join("results.csv"), result.to_csv())?;
        let sel = result.selection()?;
        write_json(&dir.join("selection.json"), &sel)?;
        self.save_config(&dir)?;
        println!("{} candidates; selected #{} with score {}", grid.len(), sel.index, fmt_f64(sel.score));
        for (k, v) in &sel.values {
            println!("  {k} = {}", fmt_f64(*v));
        }
        Ok(())
    }

    pub fn train(&self) -> Result<()> {
        let family = self.family()?;
        let (raw, _) = self.data()?;
        let train = self.training_set(&raw)?;
        first_error(parallel_map(&self.cfg.seeds, self.workers, |&s| self.train_one(&train, &family, s)))?;
        println!("trained {} {family} model(s) -> {}", self.cfg.seeds.len(), self.out().join("models").display());
        Ok(())
    }

    pub fn forecast(&self) -> Result<()> {
        let family = self.family()?;
        let (raw, val) = self.data()?;
        let scaled = self.training_set(&raw)?.scale_other(&val)?;
        let means = first_error(parallel_map(&self.cfg.seeds, self.workers, |&seed| -> Result<f64> {
            let model = self.load_model(&family, seed)?;
            let errs = forecast_errors(&model, &scaled, FORECAST_WINDOW, MIN_SYNC_PREFIX)?;
            let mut csv = String::from("step,window,start,error\n");
            for (w, (start, e)) in errs.starts.iter().zip(&errs.errors).enumerate() {
                for (s, v) in e.iter().enumerate() {
                    csv.push_str(&format!("{},{w},{start},{}\n", start + s + 1, fmt_f64(*v)));
                }
            }
            let dir = self.out().join("forecast").join(format!("{family}_{seed}"));
            write(&dir.join("errors.csv"), csv)?;
            write_json(
                &dir.join("summary.json"),
                &serde_json::json!({
                    "family": family, "seed": seed, "windows": errs.starts.len(),
                    "horizon": FORECAST_WINDOW, "mean_error": errs.mean(),
                }),
            )?;
            self.save_config(&dir)?;
            Ok(errs.mean())
        }))?;
        for (seed, m) in self.cfg.seeds.iter().zip(&means) {
            println!("{family} seed {seed}: mean {FORECAST_WINDOW}-step error {}", fmt_f64(*m));
        }
        Ok(())
    }

    fn reference(&self) -> Result<ReferenceTrajectory> {
        let (points, durations) = self.cfg.task(&self.plant);
        Ok(build_reference(&points, &durations, self.plant.dt_control)?)
    }

    pub fn control(&self) -> Result<()> {
        let family = self.family()?;
        let reference = self.reference()?;
        let needs_training = self.cfg.seeds.iter().any(|&s| !self.model_dir(&family, s).join("model.txt").exists());
        let train = if needs_training {
            let (raw, _) = self.data()?;
            Some(self.training_set(&raw)?)
        } else {
            None
        };
        let costs = first_error(parallel_map(&self.cfg.seeds, self.workers, |&seed| -> Result<f64> {
            let model = match &train {
                Some(t) if !self.model_dir(&family, seed).join("model.txt").exists() => self.train_one(t, &family, seed)?,
                _ => self.load_model(&family, seed)?,
            };
            let mut plant = SimulatedPlant::new(self.plant.clone(), self.plant.control_initial_state(seed));
            let log = receding_horizon(&mut plant, &model, &reference, &self.cfg.mpc)?;
            if let RunStatus::PlantFailure { step, message } = &log.status {
                log::warn!("{family} seed {seed}: plant failed at step {step}: {message}");
            }
            let mut summary = log.summary();
            summary.label = family.clone();
            summary.seed = Some(seed);
            let dir = self.out().join("control").join(format!("{family}_{seed}"));
            write(&dir.join("log.csv"), log.to_csv())?;
            write_json(&dir.join("summary.json"), &summary)?;
            self.save_config(&dir)?;
            Ok(summary.total_cost)
        }))?;
        for (seed, j) in self.cfg.seeds.iter().zip(&costs) {
            println!("{family} seed {seed}: J = {}", fmt_f64(*j));
        }
        Ok(())
    }
}
