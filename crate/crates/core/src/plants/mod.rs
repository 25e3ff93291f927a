//! Ground-truth simulators for the benchmark plants.

mod signals;

pub use signals::{
    moving_average, prbs_raw, prbs_signal, validation_signal, SignalSpec,
    VALIDATION_SEGMENT_STEPS,
};

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::rng;
use crate::timeseries::Dataset;

/// Continuous-time dynamics `ẋ = f(x, u)` with an optional state projection after each step.
pub trait Dynamics {
    fn n_x(&self) -> usize;
    fn n_u(&self) -> usize;
    fn rhs(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64>;
    /// Applied after every integration substep (e.g. physical bounds on tank levels).
    fn project(&self, _x: &mut DVector<f64>) {}
}

/// Classical fourth-order Runge–Kutta step with `u` held over the step.
///
/// `t` is the start time of the step and only used to report a blow-up.
pub fn rk4_step<F>(rhs: F, t: f64, x: &DVector<f64>, u: &DVector<f64>, dt: f64) -> Result<DVector<f64>>
where
    F: Fn(&DVector<f64>, &DVector<f64>) -> DVector<f64>,
{
    let blowup = |v: &DVector<f64>| !v.iter().all(|e| e.is_finite());
    let k1 = rhs(x, u);
    if blowup(&k1) {
        return Err(Error::IntegrationBlowup { time: t });
    }
    let k2 = rhs(&(x + &k1 * (dt / 2.0)), u);
    if blowup(&k2) {
        return Err(Error::IntegrationBlowup { time: t + dt / 2.0 });
    }
    let k3 = rhs(&(x + &k2 * (dt / 2.0)), u);
    if blowup(&k3) {
        return Err(Error::IntegrationBlowup { time: t + dt / 2.0 });
    }
    let k4 = rhs(&(x + &k3 * dt), u);
    let next = x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);
    if blowup(&next) {
        return Err(Error::IntegrationBlowup { time: t + dt });
    }
    Ok(next)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlantKind {
    SpringMass,
    Cstr,
    TwoTank,
    Lorenz,
}

impl PlantKind {
    pub const ALL: [PlantKind; 4] = [Self::SpringMass, Self::Cstr, Self::TwoTank, Self::Lorenz];

    pub fn id(self) -> &'static str {
        match self {
            Self::SpringMass => "spring_mass",
            Self::Cstr => "cstr",
            Self::TwoTank => "two_tank",
            Self::Lorenz => "lorenz",
        }
    }
}

impl fmt::Display for PlantKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for PlantKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.id() == s)
            .ok_or_else(|| Error::Config(format!("unknown plant {s:?}")))
    }
}

/// A registered benchmark plant with its constants and sampling settings.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantSpec {
    pub kind: PlantKind,
    pub n_x: usize,
    pub n_u: usize,
    /// Measurement map `y = C x`.
    pub measurement: DMatrix<f64>,
    pub dt_control: f64,
    /// RK4 substeps per control interval.
    pub substeps: usize,
    pub constants: BTreeMap<String, f64>,
}

fn consts(pairs: &[(&str, f64)]) -> BTreeMap<String, f64> {
    pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
}

impl PlantSpec {
    pub fn new(kind: PlantKind) -> Self {
        match kind {
            PlantKind::SpringMass => Self {
                kind,
                n_x: 4,
                n_u: 1,
                measurement: DMatrix::from_row_slice(1, 4, &[1.0, 0.0, 1.0, 0.0]),
                dt_control: 0.1,
                substeps: 1,
                constants: consts(&[("k", 1.0), ("m", 1.0), ("b", 0.1)]),
            },
            PlantKind::Cstr => Self {
                kind,
                n_x: 2,
                n_u: 1,
                measurement: DMatrix::identity(2, 2),
                dt_control: 0.1,
                substeps: 10,
                constants: consts(&[
                    ("q", 100.0),
                    ("V", 100.0),
                    ("rho", 1000.0),
                    ("Cp", 0.239),
                    ("dH", -5e4),
                    ("EoverR", 8750.0),
                    ("k0", 7.2e10),
                    ("UA", 5e4),
                    ("Caf", 1.0),
                    ("Tf", 350.0),
                ]),
            },
            PlantKind::TwoTank => Self {
                kind,
                n_x: 2,
                n_u: 2,
                measurement: DMatrix::identity(2, 2),
                dt_control: 1.0,
                substeps: 10,
                constants: consts(&[("c1", 0.08), ("c2", 0.04)]),
            },
            PlantKind::Lorenz => Self {
                kind,
                n_x: 3,
                n_u: 1,
                measurement: DMatrix::identity(3, 3),
                dt_control: 0.01,
                substeps: 1,
                constants: consts(&[("sigma", 10.0), ("rho", 28.0), ("beta", 8.0 / 3.0)]),
            },
        }
    }

    pub fn from_id(id: &str) -> Result<Self> {
        Ok(Self::new(id.parse()?))
    }

    pub fn n_y(&self) -> usize {
        self.measurement.nrows()
    }

    pub fn constant(&self, name: &str) -> f64 {
        self.constants[name]
    }

    /// Overrides a named constant; unknown names are rejected.
    pub fn set_constant(&mut self, name: &str, value: f64) -> Result<()> {
        match self.constants.get_mut(name) {
            Some(v) => {
                *v = value;
                Ok(())
            }
            None => Err(Error::Config(format!("{} has no constant {name:?}", self.kind))),
        }
    }

    pub fn measure(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.measurement * x
    }

    /// Nominal operating point used as the base of training initial conditions.
    pub fn nominal_state(&self) -> DVector<f64> {
        match self.kind {
            PlantKind::SpringMass => DVector::zeros(4),
            PlantKind::Cstr => DVector::from_vec(vec![0.87725, 324.475]),
            PlantKind::TwoTank => DVector::from_vec(vec![0.1, 0.1]),
            PlantKind::Lorenz => DVector::zeros(3),
        }
    }

    /// Initial condition for a training run: spring-mass and Lorenz start at the origin plus a
    /// uniform(−0.1, 0.1) perturbation; the others start at their nominal state.
    pub fn training_initial_state(&self, seed: u64) -> DVector<f64> {
        let mut x = self.nominal_state();
        if matches!(self.kind, PlantKind::SpringMass | PlantKind::Lorenz) {
            let mut r = rng::seeded(seed);
            x.iter_mut().for_each(|v| *v += r.gen_range(-0.1..0.1));
        }
        x
    }

    /// Initial condition for a closed-loop run: spring-mass uniform(−1, 1) per state, Lorenz
    /// uniform(−10, 10) for x and y and uniform(10, 35) for z; the others start at nominal.
    pub fn control_initial_state(&self, seed: u64) -> DVector<f64> {
        let mut r = rng::seeded(seed);
        match self.kind {
            PlantKind::SpringMass => DVector::from_fn(4, |_, _| r.gen_range(-1.0..1.0)),
            PlantKind::Lorenz => DVector::from_vec(vec![
                r.gen_range(-10.0..10.0),
                r.gen_range(-10.0..10.0),
                r.gen_range(10.0..35.0),
            ]),
            PlantKind::Cstr | PlantKind::TwoTank => self.nominal_state(),
        }
    }

    /// Default set points and segment durations (seconds) of the tracking task.
    pub fn default_control_task(&self) -> (Vec<DVector<f64>>, Vec<f64>) {
        let v = |x: &[f64]| DVector::from_column_slice(x);
        match self.kind {
            PlantKind::SpringMass => (vec![v(&[-1.5]), v(&[0.0]), v(&[1.5])], vec![50.0; 3]),
            PlantKind::Cstr => (vec![v(&[0.87725, 324.475]), v(&[0.5, 350.0]), v(&[0.2, 370.0])], vec![50.0; 3]),
            PlantKind::TwoTank => (vec![v(&[0.2, 0.3]), v(&[0.4, 0.6]), v(&[0.1, 0.5])], vec![500.0; 3]),
            PlantKind::Lorenz => {
                let a = 72f64.sqrt();
                (vec![v(&[0.0, 0.0, 0.0]), v(&[a, a, 27.0]), v(&[-a, -a, 27.0])], vec![10.0; 3])
            }
        }
    }

    /// Pseudo-random training signal recipe for this plant.
    pub fn training_signal(&self, seed: u64) -> SignalSpec {
        let (ranges, hold, width, duration) = match self.kind {
            PlantKind::SpringMass => (vec![(-3.0, 3.0)], 0.5, 2, 5000.0),
            PlantKind::Cstr => (vec![(297.0, 303.0)], 0.5, 2, 5000.0),
            PlantKind::TwoTank => (vec![(0.0, 0.4); 2], 50.0, 50, 50_000.0),
            PlantKind::Lorenz => (vec![(-50.0, 50.0)], 0.05, 2, 500.0),
        };
        SignalSpec {
            ranges,
            hold,
            filter_width: width,
            duration,
            seed,
        }
    }

    /// Sinusoid frequency band (Hz) for validation signals: 1–5 periods per segment.
    pub fn validation_frequency_band(&self) -> (f64, f64) {
        let seg = VALIDATION_SEGMENT_STEPS as f64 * self.dt_control;
        (1.0 / seg, 5.0 / seg)
    }

    /// Advances the plant by one control interval.
    pub fn step(&self, t: f64, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
        step_dynamics(self, t, x, u, self.dt_control, self.substeps)
    }
}

/// Evaluates the continuous-time right-hand side of a plant.
pub fn eval_rhs(plant: &PlantSpec, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
    if x.len() != plant.n_x || u.len() != plant.n_u {
        return Err(dim_err(format!(
            "{} expects x in R^{} and u in R^{}, got {} and {}",
            plant.kind,
            plant.n_x,
            plant.n_u,
            x.len(),
            u.len()
        )));
    }
    Ok(plant.rhs(x, u))
}

impl Dynamics for PlantSpec {
    fn n_x(&self) -> usize {
        self.n_x
    }

    fn n_u(&self) -> usize {
        self.n_u
    }

    fn rhs(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        let c = |k: &str| self.constants[k];
        match self.kind {
            PlantKind::SpringMass => {
                let (k, m, b) = (c("k"), c("m"), c("b"));
                DVector::from_vec(vec![
                    x[1],
                    (-2.0 * k * x[0] - b * x[1] + k * x[2] + u[0]) / m,
                    x[3],
                    (k * x[0] - k * x[2] - b * x[3]) / m,
                ])
            }
            PlantKind::Cstr => {
                let (ca, temp) = (x[0], x[1]);
                let rate = c("k0") * (-c("EoverR") / temp).exp() * ca;
                let flow = c("q") / c("V");
                let rho_cp = c("rho") * c("Cp");
                DVector::from_vec(vec![
                    flow * (c("Caf") - ca) - rate,
                    flow * (c("Tf") - temp)
                        + (-c("dH") / rho_cp) * rate
                        + c("UA") / (c("V") * rho_cp) * (u[0] - temp),
                ])
            }
            PlantKind::TwoTank => {
                let (c1, c2) = (c("c1"), c("c2"));
                let s1 = x[0].max(0.0).sqrt();
                let s2 = x[1].max(0.0).sqrt();
                DVector::from_vec(vec![c1 * u[0] - c2 * s1, c1 * u[1] + c2 * s1 - c2 * s2])
            }
            PlantKind::Lorenz => {
                let (s, r, b) = (c("sigma"), c("rho"), c("beta"));
                DVector::from_vec(vec![
                    s * (x[1] - x[0]) + u[0],
                    x[0] * (r - x[2]) - x[1],
                    x[0] * x[1] - b * x[2],
                ])
            }
        }
    }

    fn project(&self, x: &mut DVector<f64>) {
        if self.kind == PlantKind::TwoTank {
            x.iter_mut().for_each(|h| *h = h.clamp(0.0, 1.0));
        }
    }
}

/// One control interval split into `substeps` RK4 steps with zero-order-hold control.
pub fn step_dynamics<D: Dynamics + ?Sized>(
    plant: &D,
    t: f64,
    x: &DVector<f64>,
    u: &DVector<f64>,
    dt: f64,
    substeps: usize,
) -> Result<DVector<f64>> {
    let h = dt / substeps as f64;
    let mut x = x.clone();
    for s in 0..substeps {
        x = rk4_step(|x, u| plant.rhs(x, u), t + s as f64 * h, &x, u, h)?;
        plant.project(&mut x);
    }
    Ok(x)
}

/// Simulated trajectory: `controls` has one column fewer than `states`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRecord {
    pub times: DVector<f64>,
    pub states: DMatrix<f64>,
    pub measurements: DMatrix<f64>,
    pub controls: DMatrix<f64>,
    pub dt: f64,
}

impl TrajectoryRecord {
    /// The surrogate-facing dataset: measurements paired with controls.
    pub fn measured_dataset(&self) -> Result<Dataset> {
        Dataset::new(self.measurements.clone(), self.controls.clone(), self.dt)
    }

    pub fn state_dataset(&self) -> Result<Dataset> {
        Dataset::new(self.states.clone(), self.controls.clone(), self.dt)
    }
}

/// Generic simulation of any dynamics with a linear measurement map.
pub fn simulate_dynamics<D: Dynamics + ?Sized>(
    plant: &D,
    measurement: &DMatrix<f64>,
    x0: &DVector<f64>,
    u_seq: &DMatrix<f64>,
    dt: f64,
    substeps: usize,
) -> Result<TrajectoryRecord> {
    if x0.len() != plant.n_x() || u_seq.nrows() != plant.n_u() {
        return Err(dim_err("initial state or control rows do not match the plant"));
    }
    let n = u_seq.ncols();
    let mut states = DMatrix::zeros(plant.n_x(), n + 1);
    states.set_column(0, x0);
    let mut x = x0.clone();
    for j in 0..n {
        let u = u_seq.column(j).into_owned();
        x = step_dynamics(plant, j as f64 * dt, &x, &u, dt, substeps)?;
        states.set_column(j + 1, &x);
    }
    Ok(TrajectoryRecord {
        times: DVector::from_fn(n + 1, |j, _| j as f64 * dt),
        measurements: measurement * &states,
        states,
        controls: u_seq.clone(),
        dt,
    })
}

/// Simulates a registered plant from `x0` under `u_seq` (one column per control interval).
pub fn simulate(plant: &PlantSpec, x0: &DVector<f64>, u_seq: &DMatrix<f64>) -> Result<TrajectoryRecord> {
    simulate_dynamics(plant, &plant.measurement, x0, u_seq, plant.dt_control, plant.substeps)
}

/// Training data for a plant following its recipe, optionally truncated to `max_steps`.
pub fn training_trajectory(
    plant: &PlantSpec,
    seed: u64,
    max_steps: Option<usize>,
) -> Result<TrajectoryRecord> {
    let mut spec = plant.training_signal(seed);
    if let Some(n) = max_steps {
        spec.duration = spec.duration.min(n as f64 * plant.dt_control);
    }
    let u = prbs_signal(&spec, plant.dt_control)?;
    let x0 = plant.training_initial_state(rng::derive_seed(seed, 1));
    simulate(plant, &x0, &u)
}

/// Validation data: constants and sinusoids within the training amplitude range.
pub fn validation_trajectory(plant: &PlantSpec, seed: u64, steps: usize) -> Result<TrajectoryRecord> {
    let mut spec = plant.training_signal(seed);
    spec.duration = steps as f64 * plant.dt_control;
    let u = validation_signal(&spec, plant.dt_control, plant.validation_frequency_band())?;
    let x0 = plant.training_initial_state(rng::derive_seed(seed, 1));
    simulate(plant, &x0, &u)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rk4_exponential_decay() {
        let x = DVector::from_element(1, 1.0);
        let u = DVector::zeros(0);
        let next = rk4_step(|x, _| -x, 0.0, &x, &u, 0.1).unwrap();
        // 1 - h + h²/2 - h³/6 + h⁴/24 at h = 0.1.
        assert!((next[0] - 0.9048375).abs() < 1e-12);
        assert!((next[0] - (-0.1f64).exp()).abs() < 1e-6);
    }

    #[test]
    fn rk4_is_exact_for_constant_rhs() {
        let x = DVector::zeros(1);
        let u = DVector::from_element(1, 2.0);
        let next = rk4_step(|_, u| u.clone(), 0.0, &x, &u, 0.5).unwrap();
        assert_eq!(next[0], 1.0);
    }

    #[test]
    fn rk4_reports_blowup_time() {
        let x = DVector::from_element(1, 1.0);
        let u = DVector::zeros(0);
        let err = rk4_step(|x, _| x.map(|v| 1.0 / (v - 1.0)), 3.0, &x, &u, 0.1).unwrap_err();
        assert!(matches!(err, Error::IntegrationBlowup { time } if time == 3.0));
    }

    #[test]
    fn lorenz_fixed_points() {
        let p = PlantSpec::new(PlantKind::Lorenz);
        let u = DVector::zeros(1);
        let s = 72f64.sqrt();
        for x in [[0.0, 0.0, 0.0], [s, s, 27.0], [-s, -s, 27.0]] {
            let d = eval_rhs(&p, &DVector::from_row_slice(&x), &u).unwrap();
            assert!(d.norm() < 1e-12, "{x:?} -> {d}");
        }
        let next = p.step(0.0, &DVector::zeros(3), &u).unwrap();
        assert_eq!(next, DVector::zeros(3));
    }

    #[test]
    fn spring_mass_input_column_and_empty_tanks() {
        let p = PlantSpec::new(PlantKind::SpringMass);
        let d = eval_rhs(&p, &DVector::zeros(4), &DVector::from_element(1, 1.0)).unwrap();
        assert_eq!(d, DVector::from_vec(vec![0.0, 1.0 / p.constant("m"), 0.0, 0.0]));
        let t = PlantSpec::new(PlantKind::TwoTank);
        let d = eval_rhs(&t, &DVector::zeros(2), &DVector::zeros(2)).unwrap();
        assert_eq!(d, DVector::zeros(2));
        let d = eval_rhs(&t, &DVector::from_vec(vec![-0.5, 0.0]), &DVector::zeros(2)).unwrap();
        assert!(d.iter().all(|v| v.is_finite()));
        assert!(eval_rhs(&t, &DVector::zeros(3), &DVector::zeros(2)).is_err());
    }

    #[test]
    fn cstr_nominal_point_is_near_equilibrium() {
        let p = PlantSpec::new(PlantKind::Cstr);
        let d = eval_rhs(&p, &p.nominal_state(), &DVector::from_element(1, 300.0)).unwrap();
        assert!(d[0].abs() < 1e-3 && d[1].abs() < 0.5, "{d}");
    }

    #[test]
    fn unknown_plant_is_a_config_error() {
        assert!(matches!(PlantSpec::from_id("cylinder"), Err(Error::Config(_))));
        assert_eq!(PlantSpec::from_id("two_tank").unwrap().kind, PlantKind::TwoTank);
    }

    #[test]
    fn control_timesteps() {
        let dts: Vec<f64> = PlantKind::ALL.iter().map(|k| PlantSpec::new(*k).dt_control).collect();
        assert_eq!(dts, vec![0.1, 0.1, 1.0, 0.01]);
        assert_eq!(PlantSpec::new(PlantKind::SpringMass).n_y(), 1);
    }

    struct Frozen;
    impl Dynamics for Frozen {
        fn n_x(&self) -> usize {
            2
        }
        fn n_u(&self) -> usize {
            1
        }
        fn rhs(&self, x: &DVector<f64>, _: &DVector<f64>) -> DVector<f64> {
            DVector::zeros(x.len())
        }
    }

    #[test]
    fn zero_dynamics_hold_initial_state() {
        let x0 = DVector::from_vec(vec![0.3, -1.0]);
        let u = DMatrix::from_fn(1, 10, |_, j| j as f64);
        let rec = simulate_dynamics(&Frozen, &DMatrix::identity(2, 2), &x0, &u, 0.1, 3).unwrap();
        assert_eq!(rec.states.ncols(), 11);
        for c in rec.states.column_iter() {
            assert_eq!(c, x0);
        }
    }

    fn spring_energy(p: &PlantSpec, x: &DVector<f64>) -> f64 {
        let (k, m) = (p.constant("k"), p.constant("m"));
        // One spring from the wall to mass 1, one between the masses.
        0.5 * m * (x[1].powi(2) + x[3].powi(2)) + 0.5 * k * (x[0].powi(2) + (x[0] - x[2]).powi(2))
    }

    #[test]
    fn unforced_damped_spring_mass_loses_energy() {
        let p = PlantSpec::new(PlantKind::SpringMass);
        let x0 = DVector::from_vec(vec![0.5, 0.0, -0.3, 0.2]);
        let rec = simulate(&p, &x0, &DMatrix::zeros(1, 2000)).unwrap();
        let e: Vec<f64> = rec.states.column_iter().map(|c| spring_energy(&p, &c.into_owned())).collect();
        for w in e.windows(2) {
            assert!(w[1] <= w[0] + 1e-12 * e[0], "{} -> {}", w[0], w[1]);
        }
        assert!(e.last().unwrap() < &(0.5 * e[0]));
    }

    #[test]
    fn lorenz_stays_on_attractor_box() {
        let p = PlantSpec::new(PlantKind::Lorenz);
        let rec = simulate(&p, &DVector::from_element(3, 1.0), &DMatrix::zeros(1, 500)).unwrap();
        for c in rec.states.column_iter() {
            assert!(c[0].abs() < 30.0 && c[1].abs() < 30.0 && c[2] > 0.0 && c[2] < 60.0);
        }
    }

    #[test]
    fn rk4_order_on_lorenz() {
        // One-step error against a fine reference shrinks by ~2^5 per halving (local error
        // O(h^5)); accumulated over a fixed interval it shrinks by ~2^4.
        let p = PlantSpec::new(PlantKind::Lorenz);
        let x0 = DVector::from_vec(vec![1.0, 2.0, 20.0]);
        let u = DVector::zeros(1);
        let run = |h: f64, steps: usize| {
            let mut x = x0.clone();
            for s in 0..steps {
                x = rk4_step(|x, u| p.rhs(x, u), s as f64 * h, &x, &u, h).unwrap();
            }
            x
        };
        let t_end = 0.4;
        let reference = run(t_end / 40_000.0, 40_000);
        let e1 = (run(0.01, 40) - &reference).norm();
        let e2 = (run(0.005, 80) - &reference).norm();
        let ratio = e1 / e2;
        assert!((12.0..20.0).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn simulate_is_deterministic() {
        let p = PlantSpec::new(PlantKind::Cstr);
        let a = training_trajectory(&p, 4, Some(300)).unwrap();
        let b = training_trajectory(&p, 4, Some(300)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.controls.ncols(), 300);
        assert!(a.states.iter().all(|v| v.is_finite()));
    }
}
