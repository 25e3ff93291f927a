//! Browser bindings for three interactive operations: simulating a plant under its training
//! signal, forecasting the controlled Lorenz system with a reservoir, and closed-loop tracking
//! on the spring-mass plant. Each binding returns a JSON document for plotting.

use esnmpc::esn::{fit_esn, EsnParams};
use esnmpc::linid::fit_dmdc;
use esnmpc::models::AnyModel;
use esnmpc::mpc::{build_reference, receding_horizon, MpcConfig, SimulatedPlant};
use esnmpc::plants::{training_trajectory, validation_trajectory, PlantKind, PlantSpec};
use esnmpc::rng::derive_seed;
use esnmpc::surrogate::Surrogate;
use esnmpc::timeseries::TrainingSet;
use esnmpc::{Error, Result};
use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use wasm_bindgen::prelude::*;

/// Teacher-forced steps before a forecast starts.
const SYNC_STEPS: usize = 200;

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn times(n: usize, dt: f64) -> Vec<f64> {
    (0..n).map(|j| j as f64 * dt).collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct Simulation {
    pub plant: String,
    pub dt: f64,
    pub time: Vec<f64>,
    /// One row per measured channel, one entry per time.
    pub outputs: Vec<Vec<f64>>,
    /// One row per control channel; entry `j` acts between times `j` and `j + 1`.
    pub controls: Vec<Vec<f64>>,
}

/// The plant driven by the first `steps` samples of its training signal.
pub fn simulate_plant(plant: &str, steps: usize, seed: u64) -> Result<Simulation> {
    let spec = PlantSpec::from_id(plant)?;
    let traj = training_trajectory(&spec, seed, Some(steps.max(1)))?;
    Ok(Simulation {
        plant: spec.kind.id().into(),
        dt: spec.dt_control,
        time: times(traj.measurements.ncols(), spec.dt_control),
        outputs: rows(&traj.measurements),
        controls: rows(&traj.controls),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct Forecast {
    pub dt: f64,
    /// Times of the forecast steps, counted from the forecast start.
    pub time: Vec<f64>,
    pub truth: Vec<Vec<f64>>,
    pub forecast: Vec<Vec<f64>>,
    /// Scaled ℓ₂ error per step.
    pub error: Vec<f64>,
    pub mean_error: f64,
    pub train_steps: usize,
}

/// Fits a reservoir on `train_steps` Lorenz samples and forecasts `horizon` steps of unseen
/// data after synchronizing on its preceding samples.
pub fn lorenz_forecast(train_steps: usize, n_r: usize, spectral_radius: f64, leak: f64, seed: u64, horizon: usize) -> Result<Forecast> {
    if horizon == 0 || train_steps <= SYNC_STEPS {
        return Err(Error::Config(format!("need horizon > 0 and more than {SYNC_STEPS} training steps")));
    }
    let plant = PlantSpec::new(PlantKind::Lorenz);
    let raw = training_trajectory(&plant, seed, Some(train_steps))?.measured_dataset()?;
    let train = TrainingSet::prepare(&raw, None)?;
    let params = EsnParams { n_r, spectral_radius, leak, seed, ..EsnParams::default() };
    let esn = fit_esn(&train, &params)?;

    let val = validation_trajectory(&plant, derive_seed(seed, 1), SYNC_STEPS + horizon)?.measured_dataset()?;
    let val = train.scale_other(&val)?;
    let col = |m: &DMatrix<f64>, j: usize| m.column(j).into_owned();
    let mut state = esn.start(&col(&val.states, 0));
    for j in 0..SYNC_STEPS {
        esn.advance(&mut state, &col(&val.controls, j), &col(&val.states, j + 1));
    }
    let pred = esn.forecast(&state, &val.controls.columns(SYNC_STEPS, horizon).into_owned());
    let truth = val.states.columns(SYNC_STEPS + 1, horizon).into_owned();
    let error: Vec<f64> = (0..horizon).map(|s| (pred.column(s) - truth.column(s)).norm()).collect();
    let unscale = |m: &DMatrix<f64>| {
        let cols: Vec<DVector<f64>> = m.column_iter().map(|c| train.scalers.states.invert_vec(&c.into_owned())).collect();
        DMatrix::from_columns(&cols)
    };
    Ok(Forecast {
        dt: plant.dt_control,
        time: (1..=horizon).map(|s| s as f64 * plant.dt_control).collect(),
        truth: rows(&unscale(&truth)),
        forecast: rows(&unscale(&pred)),
        mean_error: error.iter().sum::<f64>() / horizon as f64,
        error,
        train_steps,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct ControlRun {
    pub dt: f64,
    pub time: Vec<f64>,
    pub output: Vec<f64>,
    pub reference: Vec<f64>,
    pub control: Vec<f64>,
    /// Realized cost in scaled units.
    pub cost: f64,
    pub solves: usize,
    pub model: String,
}

/// Tracks piecewise-constant set points on the spring-mass plant with a DMDc or reservoir
/// surrogate fitted to a short training record.
pub fn spring_mass_control(set_points: &[f64], segment_seconds: f64, model: &str, seed: u64) -> Result<ControlRun> {
    let plant = PlantSpec::new(PlantKind::SpringMass);
    let raw = training_trajectory(&plant, seed, Some(3000))?.measured_dataset()?;
    let train = TrainingSet::prepare(&raw, None)?;
    let surrogate = match model {
        "dmdc" => AnyModel::Dmdc(fit_dmdc(&train, 4, 0.0)?),
        "esn" => AnyModel::Esn(fit_esn(&train, &EsnParams { n_r: 200, density: 0.05, seed, ..EsnParams::default() })?),
        other => return Err(Error::Config(format!("unknown model {other:?}; use dmdc or esn"))),
    };
    let points: Vec<DVector<f64>> = set_points.iter().map(|&p| DVector::from_element(1, p)).collect();
    let reference = build_reference(&points, &vec![segment_seconds; points.len()], plant.dt_control)?;
    let cfg = MpcConfig { control_center: 0.5, ..MpcConfig::default() };
    let mut sim = SimulatedPlant::new(plant.clone(), plant.control_initial_state(seed));
    let log = receding_horizon(&mut sim, &surrogate, &reference, &cfg)?;
    let n = log.steps();
    Ok(ControlRun {
        dt: plant.dt_control,
        time: times(n + 1, plant.dt_control),
        output: log.measurements.row(0).iter().copied().collect(),
        reference: log.references.row(0).iter().copied().collect(),
        control: log.controls.row(0).iter().copied().collect(),
        cost: log.total_cost(),
        solves: log.solves.len(),
        model: model.into(),
    })
}

fn to_js<T: Serialize>(r: Result<T>) -> std::result::Result<String, JsError> {
    let v = r.map_err(|e| JsError::new(&e.to_string()))?;
    serde_json::to_string(&v).map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen]
pub fn simulate(plant: &str, steps: usize, seed: u32) -> std::result::Result<String, JsError> {
    to_js(simulate_plant(plant, steps, seed.into()))
}

#[wasm_bindgen]
pub fn forecast(train_steps: usize, n_r: usize, spectral_radius: f64, leak: f64, seed: u32, horizon: usize) -> std::result::Result<String, JsError> {
    to_js(lorenz_forecast(train_steps, n_r, spectral_radius, leak, seed.into(), horizon))
}

#[wasm_bindgen]
pub fn control(set_points: &[f64], segment_seconds: f64, model: &str, seed: u32) -> std::result::Result<String, JsError> {
    to_js(spring_mass_control(set_points, segment_seconds, model, seed.into()))
}
