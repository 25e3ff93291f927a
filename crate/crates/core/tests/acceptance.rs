//! End-to-end acceptance criteria. Each test prints one `PASS`/`FAIL` line and then asserts.
//! Tests take a shared lock so wall-clock bounds are measured without contention.

use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::Instant;

use esnmpc::esn::{fit_esn, init_reservoir, reservoir_step, train_readout, EsnParams};
use esnmpc::linid::{fit_dmdc, ridge_solve};
use esnmpc::models::{fit_model, AnyModel, ModelSpec};
use esnmpc::mpc::{build_reference, mean_std, receding_horizon, ControlLog, MpcConfig, MpcProblem, SimulatedPlant};
use esnmpc::nets::{
    bptt_gradient, finite_difference_grad, fit_gated, time_one_epoch, CellKind, FcnConfig, FcnNet, GatedConfig, GatedNet,
    TrainConfig, WindowBatch,
};
use esnmpc::plants::{training_trajectory, validation_trajectory, PlantKind, PlantSpec};
use esnmpc::rng::{derive_seed, seeded};
use esnmpc::surrogate::Surrogate;
use esnmpc::sweep::{evaluate_50step, retrain_best, run_sweep, Axis, GridSpec};
use esnmpc::timeseries::{Dataset, NoiseSpec, TrainingSet};
use nalgebra::{DMatrix, DVector};
use rand::Rng as _;

fn serial() -> MutexGuard<'static, ()> {
    static LOCK: Mutex<()> = Mutex::new(());
    LOCK.lock().unwrap_or_else(|e| e.into_inner())
}

fn verdict(n: usize, name: &str, pass: bool, detail: impl AsRef<str>) -> bool {
    println!("criterion {n:>2} {}: {name}: {}", if pass { "PASS" } else { "FAIL" }, detail.as_ref());
    pass
}

fn lorenz() -> PlantSpec {
    PlantSpec::new(PlantKind::Lorenz)
}

fn spring_mass() -> PlantSpec {
    PlantSpec::new(PlantKind::SpringMass)
}

fn training_set(plant: &PlantSpec, seed: u64, steps: Option<usize>) -> TrainingSet {
    let raw = training_trajectory(plant, seed, steps).unwrap().measured_dataset().unwrap();
    TrainingSet::prepare(&raw, None).unwrap()
}

fn scaled_validation(plant: &PlantSpec, train: &TrainingSet, seed: u64, steps: usize) -> Dataset {
    let raw = validation_trajectory(plant, seed, steps).unwrap().measured_dataset().unwrap();
    train.scale_other(&raw).unwrap()
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let norm: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    diff / norm.max(1e-12)
}

/// Shared controller settings: the default weights with the control penalty centred on the
/// scaled image of zero actuation.
fn centred_mpc() -> MpcConfig {
    MpcConfig { control_center: 0.5, ..MpcConfig::default() }
}

fn run_control<S: Surrogate>(plant: &PlantSpec, model: &S, seed: u64, cfg: &MpcConfig) -> ControlLog {
    let (points, durations) = plant.default_control_task();
    let reference = build_reference(&points, &durations, plant.dt_control).unwrap();
    let mut sim = SimulatedPlant::new(plant.clone(), plant.control_initial_state(seed));
    receding_horizon(&mut sim, model, &reference, cfg).unwrap()
}

/// Per-segment mean distance to the set point over the final quarter of each segment.
fn final_quarter_distances(log: &ControlLog, plant: &PlantSpec) -> Vec<f64> {
    let (points, durations) = plant.default_control_task();
    let mut start = 0;
    let mut out = Vec::new();
    for (p, d) in points.iter().zip(&durations) {
        let n = (d / plant.dt_control).round() as usize;
        let from = start + n - n / 4;
        let dist: f64 = (from..start + n).map(|j| (log.measurements.column(j + 1) - p).norm()).sum();
        out.push(dist / (n / 4) as f64);
        start += n;
    }
    out
}

#[test]
fn criterion_01_exact_linear_identification() {
    let _g = serial();
    let t0 = Instant::now();
    let plant = spring_mass();
    let train = training_set(&plant, 11, Some(5000));
    let model = fit_dmdc(&train, 3, 0.0).unwrap();
    let val = scaled_validation(&plant, &train, 12, 2000);
    let err = evaluate_50step(&model, &val).unwrap();
    let secs = t0.elapsed().as_secs_f64();
    let pass = err < 1e-6 && secs < 5.0;
    assert!(verdict(1, "exact linear identification", pass, format!("50-step error {err:.3e} (< 1e-6), {secs:.2} s (< 5 s)")));
}

/// Independent ridge oracle: explicit normal equations solved by LU.
fn ridge_oracle(p: &DMatrix<f64>, q: &DMatrix<f64>, beta: f64) -> DMatrix<f64> {
    let mut g = p * p.transpose();
    for i in 0..g.nrows() {
        g[(i, i)] += beta;
    }
    let rhs = p * q.transpose();
    g.lu().solve(&rhs).expect("oracle system is nonsingular")
}

#[test]
fn criterion_02_ridge_oracle_equivalence() {
    let _g = serial();
    let t0 = Instant::now();
    let mut rng = seeded(2);
    let mut worst: f64 = 0.0;
    for trial in 0..2 {
        let h = DMatrix::from_fn(1000, 5000, |_, _| rng.gen_range(-1.0..1.0));
        let y = DMatrix::from_fn(3, 5000, |_, _| rng.gen_range(-1.0..1.0));
        let beta = [1e-7, 1e-3][trial];
        let oracle = ridge_oracle(&h, &y, beta);
        let (theta, _) = ridge_solve(&h, &y, beta).unwrap();
        worst = worst.max(rel_err(theta.as_slice(), oracle.as_slice()));
        let (w, _) = train_readout(&h, &y, beta, 0).unwrap();
        worst = worst.max(rel_err(w.transpose().as_slice(), oracle.as_slice()));
    }
    let secs = t0.elapsed().as_secs_f64();
    let pass = worst < 1e-8 && secs < 30.0;
    assert!(verdict(2, "ridge oracle equivalence", pass, format!("max relative error {worst:.3e} (< 1e-8), {secs:.1} s (< 30 s)")));
}

#[test]
fn criterion_03_echo_state_property() {
    let _g = serial();
    let t0 = Instant::now();
    let plant = lorenz();
    let train = training_set(&plant, 3, Some(2000));
    let params = EsnParams { seed: 3, ..EsnParams::default() };
    let w = init_reservoir(&params, 3, 1).unwrap();
    let mut rng = seeded(33);
    let mut a = DVector::from_fn(params.n_r, |_, _| rng.gen_range(-1.0..1.0));
    let mut b = DVector::from_fn(params.n_r, |_, _| rng.gen_range(-1.0..1.0));
    let d = &train.scaled;
    for j in 500..700 {
        let (y, u) = (d.states.column(j).into_owned(), d.controls.column(j).into_owned());
        a = reservoir_step(&w, &a, &y, &u);
        b = reservoir_step(&w, &b, &y, &u);
    }
    let gap = (&a - &b).norm();
    let secs = t0.elapsed().as_secs_f64();
    let pass = gap < 1e-4 && secs < 5.0;
    assert!(verdict(3, "echo state property", pass, format!("state gap after 200 steps {gap:.3e} (< 1e-4), {secs:.2} s (< 5 s)")));
}

fn bptt_worst(kind: Option<CellKind>, instances: u64) -> f64 {
    let plant = lorenz();
    let train = training_set(&plant, 4, Some(400));
    let mut worst: f64 = 0.0;
    for i in 0..instances {
        let mut rng = seeded(derive_seed(40, i));
        let lags = rng.gen_range(1..5);
        let times: Vec<usize> = (0..4).map(|_| rng.gen_range(lags..train.scaled.len())).collect();
        let batch = WindowBatch::gather(&train.scaled, lags, &times);
        let (g, fd) = match kind {
            Some(kind) => {
                let cfg = GatedConfig { kind, hidden: rng.gen_range(2..6), lags, readout_width: 4, dropout: 0.0, seed: i };
                let net = GatedNet::new(&cfg, 3, 1, train.scalers.clone()).unwrap();
                (bptt_gradient(&net, &batch).1, finite_difference_grad(&net, &batch, 1e-6))
            }
            None => {
                let cfg = FcnConfig { width: rng.gen_range(2..8), delays: lags, dropout: 0.0, seed: i };
                let net = FcnNet::new(&cfg, 3, 1, train.scalers.clone()).unwrap();
                (bptt_gradient(&net, &batch).1, finite_difference_grad(&net, &batch, 1e-6))
            }
        };
        let flat = |v: &[DMatrix<f64>]| v.iter().flat_map(|m| m.iter().copied()).collect::<Vec<_>>();
        worst = worst.max(rel_err(&flat(&g), &flat(&fd)));
    }
    worst
}

fn small_models(seed: u64) -> Vec<AnyModel> {
    let plant = lorenz();
    let train = training_set(&plant, seed, Some(1200));
    let quick = TrainConfig { max_epochs: 2, seed, ..TrainConfig::default() };
    let specs = [
        ModelSpec::Dmdc { delays: 2, beta: 1e-6 },
        ModelSpec::Esn(EsnParams { n_r: 40, density: 0.1, n_spin: 50, seed, ..EsnParams::default() }),
        ModelSpec::Fcn { net: FcnConfig { width: 6, delays: 2, dropout: 0.0, seed }, train: quick },
        ModelSpec::Gated { net: GatedConfig { kind: CellKind::Lstm, hidden: 4, lags: 3, readout_width: 4, dropout: 0.0, seed }, train: quick },
        ModelSpec::Gated { net: GatedConfig { kind: CellKind::Gru, hidden: 4, lags: 3, readout_width: 4, dropout: 0.0, seed }, train: quick },
    ];
    specs.iter().map(|s| fit_model(s, &train).unwrap().0).collect()
}

fn mpc_gradient_worst(model: &AnyModel, instance: u64) -> f64 {
    let mut rng = seeded(derive_seed(77, instance));
    let cfg = MpcConfig { horizon: 8, control_horizon: 5, applied: 2, ..MpcConfig::default() };
    let y0 = DVector::from_fn(model.n_y(), |_, _| rng.gen_range(0.2..0.8));
    let mut state = model.start(&y0);
    for _ in 0..model.history_len() + 3 {
        let u = DVector::from_fn(model.n_u(), |_, _| rng.gen_range(0.0..1.0));
        let y = DVector::from_fn(model.n_y(), |_, _| rng.gen_range(0.2..0.8));
        model.advance(&mut state, &u, &y);
    }
    let problem = MpcProblem {
        model,
        state: &state,
        reference: DMatrix::from_fn(model.n_y(), cfg.horizon, |_, _| rng.gen_range(0.0..1.0)),
        u_prev: DVector::from_fn(model.n_u(), |_, _| rng.gen_range(0.0..1.0)),
        cfg: &cfg,
    };
    // Entries outside the barrier band exercise the barrier gradient too.
    let u = DMatrix::from_fn(model.n_u(), cfg.control_horizon, |_, _| rng.gen_range(-0.1..1.1));
    let (_, g) = problem.cost_and_gradient(&u).unwrap();
    let h = 1e-6;
    let fd: Vec<f64> = (0..u.len())
        .map(|k| {
            let (mut up, mut dn) = (u.clone(), u.clone());
            up[k] += h;
            dn[k] -= h;
            (problem.cost(&up).unwrap() - problem.cost(&dn).unwrap()) / (2.0 * h)
        })
        .collect();
    rel_err(g.as_slice(), &fd)
}

#[test]
fn criterion_04_gradient_suites() {
    let _g = serial();
    let t0 = Instant::now();
    let n = 20;
    let mut lines = Vec::new();
    let mut worst: f64 = 0.0;
    for (name, kind) in [("lstm", Some(CellKind::Lstm)), ("gru", Some(CellKind::Gru)), ("fcn", None)] {
        let w = bptt_worst(kind, n);
        lines.push(format!("bptt {name} {w:.1e}"));
        worst = worst.max(w);
    }
    let mut fam_worst = vec![0.0f64; 5];
    let mut names = Vec::new();
    for i in 0..n {
        let models = small_models(derive_seed(5, i));
        names = models.iter().map(|m| m.family()).collect();
        for (k, m) in models.iter().enumerate() {
            fam_worst[k] = fam_worst[k].max(mpc_gradient_worst(m, i));
        }
    }
    for (name, w) in names.iter().zip(&fam_worst) {
        lines.push(format!("mpc {name} {w:.1e}"));
        worst = worst.max(*w);
    }
    let secs = t0.elapsed().as_secs_f64();
    let pass = worst < 1e-4 && secs < 60.0;
    let detail = format!("{n} instances each; worst relative error {worst:.2e} (< 1e-4); {}; {secs:.1} s (< 60 s)", lines.join(", "));
    assert!(verdict(4, "gradient suites", pass, detail));
}

fn axis(name: &str, values: &[f64]) -> Axis {
    Axis { name: name.into(), values: values.to_vec() }
}

#[test]
fn criterion_05_forecast_ordering() {
    let _g = serial();
    let t0 = Instant::now();
    let plant = lorenz();
    let mut rows = Vec::new();
    let mut pass = true;
    for seed in 0..3u64 {
        let train = training_set(&plant, derive_seed(seed, 50), Some(16_000));
        let val = scaled_validation(&plant, &train, derive_seed(seed, 51), 3000);
        let test = scaled_validation(&plant, &train, derive_seed(seed, 52), 5000);
        let quick = TrainConfig { lr: 1e-3, max_epochs: 60, patience: 8, ..TrainConfig::default() };
        let grids = [
            GridSpec {
                base: ModelSpec::Dmdc { delays: 20, beta: 1e-6 },
                axes: vec![axis("delays", &[1.0, 5.0, 10.0, 20.0, 30.0]), axis("beta", &[1e-7, 1e-6, 1e-5, 1e-4])],
            },
            GridSpec {
                base: ModelSpec::Fcn { net: FcnConfig { width: 75, delays: 15, dropout: 0.0, seed: 0 }, train: quick },
                axes: vec![axis("delays", &[5.0, 15.0]), axis("width", &[50.0, 75.0])],
            },
            GridSpec {
                base: ModelSpec::Esn(EsnParams::default()),
                axes: vec![axis("spectral_radius", &[0.2, 0.4, 0.8]), axis("input_scale", &[0.1, 0.25]), axis("leak", &[0.2, 0.6])],
            },
        ];
        let mut scores = Vec::new();
        for grid in &grids {
            let result = run_sweep(grid, &train, &val, derive_seed(seed, 53), 1).unwrap();
            let (model, _) = retrain_best(&result, &train, derive_seed(seed, 54)).unwrap();
            scores.push(evaluate_50step(&model, &test).unwrap());
        }
        let ok = scores[2] < scores[0] && scores[2] < scores[1];
        pass &= ok;
        rows.push(format!("seed {seed}: dmdc {:.4} fcn {:.4} esn {:.4}", scores[0], scores[1], scores[2]));
    }
    let secs = t0.elapsed().as_secs_f64();
    pass &= secs < 1200.0;
    assert!(verdict(5, "forecast ordering esn < dmdc, fcn", pass, format!("{}; {secs:.0} s (< 1200 s)", rows.join("; "))));
}

struct LorenzRun {
    seed: u64,
    distances: Vec<f64>,
    cost: f64,
}

const CONTROL_SEEDS: u64 = 8;

fn lorenz_esn_runs() -> &'static (Vec<LorenzRun>, f64) {
    static RUNS: OnceLock<(Vec<LorenzRun>, f64)> = OnceLock::new();
    RUNS.get_or_init(|| {
        let t0 = Instant::now();
        let plant = lorenz();
        let runs = (0..CONTROL_SEEDS)
            .map(|seed| {
                let train = training_set(&plant, derive_seed(seed, 60), None);
                let esn = fit_esn(&train, &EsnParams { seed: derive_seed(seed, 61), ..EsnParams::default() }).unwrap();
                let log = run_control(&plant, &esn, seed, &centred_mpc());
                LorenzRun { seed, distances: final_quarter_distances(&log, &plant), cost: log.total_cost() }
            })
            .collect();
        (runs, t0.elapsed().as_secs_f64())
    })
}

#[test]
fn criterion_06_lorenz_control() {
    let _g = serial();
    let (runs, secs) = lorenz_esn_runs();
    let ok = runs.iter().filter(|r| r.distances.iter().all(|d| *d < 1.0)).count();
    let worst = runs.iter().flat_map(|r| r.distances.iter().copied()).fold(0.0, f64::max);
    let rows: Vec<String> = runs
        .iter()
        .map(|r| format!("seed {}: {}", r.seed, r.distances.iter().map(|d| format!("{d:.3}")).collect::<Vec<_>>().join("/")))
        .collect();
    let pass = ok == runs.len() && *secs < 2700.0;
    let detail = format!("{ok}/{} seeds within 1.0 on every segment, worst {worst:.3}; {}; {secs:.0} s (< 2700 s)", runs.len(), rows.join("; "));
    assert!(verdict(6, "lorenz control through three fixed points", pass, detail));
}

#[test]
fn criterion_07_robustness_spread() {
    let _g = serial();
    let (esn_runs, esn_secs) = lorenz_esn_runs();
    let t0 = Instant::now();
    let plant = lorenz();
    let lstm_costs: Vec<f64> = (0..CONTROL_SEEDS)
        .map(|seed| {
            let train = training_set(&plant, derive_seed(seed, 60), Some(10_000));
            let net = GatedConfig { kind: CellKind::Lstm, hidden: 32, lags: 10, readout_width: 0, dropout: 0.0, seed: derive_seed(seed, 62) };
            let tc = TrainConfig { lr: 1e-3, max_epochs: 60, patience: 10, seed: derive_seed(seed, 63), ..TrainConfig::default() };
            let (lstm, _) = fit_gated(&train, &net, &tc).unwrap();
            run_control(&plant, &lstm, seed, &centred_mpc()).total_cost()
        })
        .collect();
    let esn_costs: Vec<f64> = esn_runs.iter().map(|r| r.cost).collect();
    let (em, es) = mean_std(&esn_costs);
    let (lm, ls) = mean_std(&lstm_costs);
    let secs = esn_secs + t0.elapsed().as_secs_f64();
    let pass = es < ls && secs < 10_800.0;
    let detail = format!("J mean/std over {CONTROL_SEEDS} seeds: esn {em:.1}/{es:.1}, lstm {lm:.1}/{ls:.1}; {secs:.0} s (< 10800 s)");
    assert!(verdict(7, "esn cost spread below lstm", pass, detail));
}

#[test]
fn criterion_08_spring_mass_closed_loop() {
    let _g = serial();
    let t0 = Instant::now();
    let plant = spring_mass();
    let train = training_set(&plant, 80, Some(10_000));
    // Reservoir hyperparameters selected for this plant.
    let params = EsnParams { spectral_radius: 0.8, input_scale: 0.01, bias_scale: 0.66, leak: 0.2, beta: 1e-7, seed: 81, ..EsnParams::default() };
    let esn = AnyModel::Esn(fit_esn(&train, &params).unwrap());
    let net = GatedConfig { kind: CellKind::Lstm, hidden: 32, lags: 10, readout_width: 0, dropout: 0.0, seed: 82 };
    let tc = TrainConfig { lr: 1e-3, max_epochs: 60, patience: 10, seed: 83, ..TrainConfig::default() };
    let lstm = AnyModel::Gated(fit_gated(&train, &net, &tc).unwrap().0);
    let (points, durations) = plant.default_control_task();
    let sy = &train.scalers.states;
    let mut rows = Vec::new();
    let mut pass = true;
    for model in [&esn, &lstm] {
        let log = run_control(&plant, model, 8, &centred_mpc());
        let mut start = 0;
        let mut worst: f64 = 0.0;
        for (p, d) in points.iter().zip(&durations) {
            let n = (d / plant.dt_control).round() as usize;
            let tail = (10.0 / plant.dt_control).round() as usize;
            for j in start + n - tail..start + n {
                let e = sy.apply_vec(&log.measurements.column(j + 1).into_owned()) - sy.apply_vec(p);
                worst = worst.max(e.amax());
            }
            start += n;
        }
        pass &= worst < 0.05;
        rows.push(format!("{} max |y - r| {worst:.4}", model.family()));
    }
    let secs = t0.elapsed().as_secs_f64();
    pass &= secs < 1200.0;
    assert!(verdict(8, "spring-mass closed loop", pass, format!("{} (< 0.05 scaled); {secs:.0} s (< 1200 s)", rows.join(", "))));
}

#[test]
fn criterion_09_esn_training_throughput() {
    let _g = serial();
    let plant = lorenz();
    let full = training_set(&plant, 90, None);
    let t0 = Instant::now();
    fit_esn(&full, &EsnParams { seed: 91, ..EsnParams::default() }).unwrap();
    let full_secs = t0.elapsed().as_secs_f64();

    // Per-candidate comparison on a common 10,000-sample record. The LSTM figure is a lower
    // bound: early stopping needs at least `patience + 1` epochs.
    let part = training_set(&plant, 92, Some(10_000));
    let t1 = Instant::now();
    fit_esn(&part, &EsnParams { seed: 93, ..EsnParams::default() }).unwrap();
    let esn_secs = t1.elapsed().as_secs_f64();
    let net = GatedConfig { kind: CellKind::Lstm, hidden: 128, lags: 30, readout_width: 0, dropout: 0.0, seed: 94 };
    let tc = TrainConfig { lr: 1e-4, ..TrainConfig::default() };
    let lstm = GatedNet::new(&net, 3, 1, part.scalers.clone()).unwrap();
    let epoch = time_one_epoch(&lstm, &part.scaled, &tc).unwrap();
    let lstm_secs = epoch * (tc.patience + 1) as f64;
    let ratio = lstm_secs / esn_secs;
    let pass = full_secs < 60.0 && ratio >= 10.0;
    let detail = format!(
        "full fit (1000 units, 50,000 samples) {full_secs:.1} s (< 60 s); candidate esn {esn_secs:.2} s vs lstm >= {lstm_secs:.1} s, ratio {ratio:.0} (>= 10)"
    );
    assert!(verdict(9, "esn training throughput", pass, detail));
}

fn without_column(csv: &str, name: &str) -> String {
    let mut lines = csv.lines();
    let head: Vec<&str> = lines.next().unwrap_or("").split(',').collect();
    let skip = head.iter().position(|h| *h == name);
    let keep = |l: &str| -> String {
        l.split(',').enumerate().filter(|(i, _)| Some(*i) != skip).map(|(_, v)| v).collect::<Vec<_>>().join(",")
    };
    std::iter::once(keep(&head.join(","))).chain(lines.map(keep)).collect::<Vec<_>>().join("\n")
}

#[test]
fn criterion_10_determinism() {
    let _g = serial();
    let stage = |_: usize| -> Vec<String> {
        let sm = spring_mass();
        let raw = training_trajectory(&sm, 100, Some(2000)).unwrap().measured_dataset().unwrap();
        let noise = NoiseSpec::new(1e-3, 101).unwrap();
        let train = TrainingSet::prepare(&raw, Some(&noise)).unwrap();
        let val = scaled_validation(&sm, &train, 102, 600);
        let dest = std::env::temp_dir().join(format!("esnmpc-determinism-{}", std::process::id()));
        train.scaled.write_dir(&dest, &Default::default()).unwrap();
        let data_csv = std::fs::read_to_string(dest.join("states.csv")).unwrap()
            + &std::fs::read_to_string(dest.join("controls.csv")).unwrap();
        let _ = std::fs::remove_dir_all(&dest);
        let esn = fit_esn(&train, &EsnParams { n_r: 100, seed: 103, ..EsnParams::default() }).unwrap();
        let grid = GridSpec { base: ModelSpec::Dmdc { delays: 1, beta: 0.0 }, axes: vec![axis("delays", &[0.0, 1.0, 3.0])] };
        let sweep = run_sweep(&grid, &train, &val, 104, 2).unwrap();
        let net = GatedConfig { kind: CellKind::Gru, hidden: 6, lags: 4, readout_width: 0, dropout: 0.1, seed: 105 };
        let tc = TrainConfig { max_epochs: 3, seed: 106, ..TrainConfig::default() };
        let (gru, log) = fit_gated(&train, &net, &tc).unwrap();
        let dmdc = fit_dmdc(&train, 3, 0.0).unwrap();
        let control = run_control(&sm, &dmdc, 107, &centred_mpc());
        vec![
            data_csv,
            esn.to_container().to_text(),
            without_column(&sweep.to_csv(), "fit_seconds"),
            AnyModel::Gated(gru).to_container().to_text(),
            log.to_csv(),
            control.to_csv(),
        ]
    };
    let (a, b) = (stage(0), stage(1));
    let names = ["data", "esn model", "sweep table", "gru model", "training log", "control log"];
    let differing: Vec<&str> = names.iter().zip(a.iter().zip(&b)).filter(|(_, (x, y))| x != y).map(|(n, _)| *n).collect();
    let pass = differing.is_empty();
    let detail = if pass { format!("{} artifacts byte-identical across repeats", names.len()) } else { format!("differing: {differing:?}") };
    assert!(verdict(10, "determinism", pass, detail));
}
