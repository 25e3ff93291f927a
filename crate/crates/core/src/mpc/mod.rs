//! Receding-horizon control on a surrogate: tracking cost with soft control barriers, its
//! gradient through the surrogate rollout, L-BFGS solves and the closed-loop driver.

mod lbfgs;

pub use lbfgs::{lbfgs_minimize, LbfgsOptions, LbfgsResult, LbfgsStatus};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::io::fmt_f64;
use crate::plants::PlantSpec;
use crate::surrogate::{fold_held_gradient, hold_controls, Surrogate};
use crate::timeseries::Scalers;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MpcConfig {
    /// Forecast horizon `T`.
    pub horizon: usize,
    /// Optimized control columns `M`; later columns hold the last one.
    pub control_horizon: usize,
    /// Columns applied per solve `M_c`.
    pub applied: usize,
    pub q_track: f64,
    pub q_control: f64,
    /// Scaled control value at which the `q_control` penalty vanishes.
    pub control_center: f64,
    pub q_rate: f64,
    pub barrier_weight: f64,
    pub barrier_hi: f64,
    pub barrier_lo: f64,
    pub clamp_lo: f64,
    pub clamp_hi: f64,
    pub solver: LbfgsOptions,
}

impl Default for MpcConfig {
    fn default() -> Self {
        Self {
            horizon: 50,
            control_horizon: 50,
            applied: 20,
            q_track: 100.0,
            q_control: 1.0,
            control_center: 0.0,
            q_rate: 20.0,
            barrier_weight: 100.0,
            barrier_hi: 0.95,
            barrier_lo: 0.05,
            clamp_lo: 0.0,
            clamp_hi: 1.0,
            solver: LbfgsOptions::default(),
        }
    }
}

impl MpcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 || self.control_horizon == 0 || self.applied == 0 {
            return Err(Error::Config("horizons must be positive".into()));
        }
        if self.control_horizon > self.horizon || self.applied > self.control_horizon {
            return Err(Error::Config(format!(
                "need applied ({}) <= control horizon ({}) <= horizon ({})",
                self.applied, self.control_horizon, self.horizon
            )));
        }
        if [self.q_track, self.q_control, self.q_rate, self.barrier_weight].iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::Config("cost weights must be non-negative".into()));
        }
        if !self.control_center.is_finite() {
            return Err(Error::Config("control center must be finite".into()));
        }
        if self.clamp_lo > self.clamp_hi || self.barrier_lo > self.barrier_hi {
            return Err(Error::Config("inverted bounds".into()));
        }
        Ok(())
    }
}

/// Piecewise-constant desired measurements in plant units. Column `j` is the target at step `j`;
/// the final column is held past the end.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceTrajectory {
    pub values: DMatrix<f64>,
    /// First column of each segment.
    pub segment_starts: Vec<usize>,
}

impl ReferenceTrajectory {
    pub fn len(&self) -> usize {
        self.values.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn n_y(&self) -> usize {
        self.values.nrows()
    }

    pub fn at(&self, j: usize) -> DVector<f64> {
        self.values.column(j.min(self.len() - 1)).into_owned()
    }

    /// Columns `from..from+n` in scaled space, holding the last value.
    pub fn scaled_slice(&self, scalers: &Scalers, from: usize, n: usize) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.n_y(), n);
        for j in 0..n {
            out.set_column(j, &scalers.states.apply_vec(&self.at(from + j)));
        }
        out
    }

    /// Half-open column range of each segment.
    pub fn segments(&self) -> Vec<(usize, usize)> {
        let mut ends: Vec<usize> = self.segment_starts.iter().skip(1).copied().collect();
        ends.push(self.len());
        self.segment_starts.iter().copied().zip(ends).collect()
    }
}

/// Piecewise-constant reference from set points and durations (seconds).
pub fn build_reference(set_points: &[DVector<f64>], durations: &[f64], dt: f64) -> Result<ReferenceTrajectory> {
    if set_points.is_empty() || set_points.len() != durations.len() {
        return Err(Error::Config("set points and durations must be non-empty and of equal length".into()));
    }
    let n_y = set_points[0].len();
    if set_points.iter().any(|p| p.len() != n_y) {
        return Err(Error::Config("set points have different dimensions".into()));
    }
    let mut steps = Vec::with_capacity(durations.len());
    for &d in durations {
        let n = (d / dt).round();
        if !(d > 0.0) || (n * dt - d).abs() > 1e-9 * d.max(1.0) {
            return Err(Error::Config(format!("duration {d} is not a positive multiple of {dt}")));
        }
        steps.push(n as usize);
    }
    let total: usize = steps.iter().sum();
    let mut values = DMatrix::zeros(n_y, total);
    let mut starts = Vec::with_capacity(steps.len());
    let mut col = 0;
    for (p, n) in set_points.iter().zip(steps) {
        starts.push(col);
        for _ in 0..n {
            values.set_column(col, p);
            col += 1;
        }
    }
    Ok(ReferenceTrajectory { values, segment_starts: starts })
}

/// One finite-horizon problem in scaled space at a synchronized surrogate state.
pub struct MpcProblem<'a, S: Surrogate> {
    pub model: &'a S,
    pub state: &'a S::State,
    /// Targets for the `T` predicted measurements.
    pub reference: DMatrix<f64>,
    /// Last physically applied control.
    pub u_prev: DVector<f64>,
    pub cfg: &'a MpcConfig,
}

/// Value of the tracking cost split into its parts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostTerms {
    pub tracking: f64,
    pub control: f64,
    pub rate: f64,
    pub barrier: f64,
}

impl CostTerms {
    pub fn total(&self) -> f64 {
        self.tracking + self.control + self.rate + self.barrier
    }
}

impl<S: Surrogate> MpcProblem<'_, S> {
    fn check(&self, u: &DMatrix<f64>) -> Result<()> {
        let c = self.cfg;
        if u.nrows() != self.model.n_u() || u.ncols() != c.control_horizon {
            return Err(dim_err(format!("controls must be {}x{}", self.model.n_u(), c.control_horizon)));
        }
        if self.reference.shape() != (self.model.n_y(), c.horizon) || self.u_prev.len() != self.model.n_u() {
            return Err(dim_err("reference or previous control has the wrong shape"));
        }
        Ok(())
    }

    fn terms(&self, full: &DMatrix<f64>, pred: &DMatrix<f64>, u: &DMatrix<f64>) -> CostTerms {
        let c = self.cfg;
        let mut rate = 0.0;
        for j in 0..full.ncols() {
            let d = if j == 0 { full.column(0) - &self.u_prev } else { full.column(j) - full.column(j - 1) };
            rate += d.norm_squared();
        }
        let barrier = u
            .iter()
            .map(|&v| (v.max(c.barrier_hi) - c.barrier_hi).powi(2) + (v.min(c.barrier_lo) - c.barrier_lo).powi(2))
            .sum::<f64>();
        CostTerms {
            tracking: c.q_track * (pred - &self.reference).norm_squared(),
            control: c.q_control * full.map(|v| v - c.control_center).norm_squared(),
            rate: c.q_rate * rate,
            barrier: c.barrier_weight * barrier,
        }
    }

    /// Cost terms, or `None` when the rollout is not finite.
    pub fn cost_terms(&self, u: &DMatrix<f64>) -> Result<Option<CostTerms>> {
        self.check(u)?;
        let full = hold_controls(u, self.cfg.horizon);
        let pred = self.model.forecast(self.state, &full);
        if !pred.iter().all(|v| v.is_finite()) {
            log::warn!("surrogate rollout is not finite; reporting infinite cost");
            return Ok(None);
        }
        Ok(Some(self.terms(&full, &pred, u)))
    }

    pub fn cost(&self, u: &DMatrix<f64>) -> Result<f64> {
        Ok(self.cost_terms(u)?.map_or(f64::INFINITY, |t| t.total()))
    }

    /// Cost and its exact gradient with respect to the `M` control columns. A non-finite
    /// rollout gives `+∞` with a zero gradient.
    pub fn cost_and_gradient(&self, u: &DMatrix<f64>) -> Result<(f64, DMatrix<f64>)> {
        self.check(u)?;
        let c = self.cfg;
        let t = c.horizon;
        let full = hold_controls(u, t);
        let (pred, tape) = self.model.forecast_taped(self.state, &full);
        if !pred.iter().all(|v| v.is_finite()) {
            log::warn!("surrogate rollout is not finite; reporting infinite cost");
            return Ok((f64::INFINITY, DMatrix::zeros(u.nrows(), u.ncols())));
        }
        let cost = self.terms(&full, &pred, u).total();
        let d_pred = (&pred - &self.reference) * (2.0 * c.q_track);
        let mut d_full = self.model.backprop(self.state, &full, &tape, &d_pred);
        d_full += full.map(|v| v - c.control_center) * (2.0 * c.q_control);
        for j in 0..t {
            let d = if j == 0 { full.column(0) - &self.u_prev } else { full.column(j) - full.column(j - 1) };
            let mut col = d_full.column_mut(j);
            col += &d * (2.0 * c.q_rate);
            if j > 0 {
                let mut prev = d_full.column_mut(j - 1);
                prev -= &d * (2.0 * c.q_rate);
            }
        }
        let mut g = fold_held_gradient(&d_full, u.ncols());
        g.zip_apply(u, |gi, v| {
            if v > c.barrier_hi {
                *gi += 2.0 * c.barrier_weight * (v - c.barrier_hi);
            } else if v < c.barrier_lo {
                *gi += 2.0 * c.barrier_weight * (v - c.barrier_lo);
            }
        });
        Ok((cost, g))
    }

    /// Minimizes the cost from `u0` and clamps the result.
    pub fn solve(&self, u0: &DMatrix<f64>) -> Result<SolveOutcome> {
        self.check(u0)?;
        let (r, m) = u0.shape();
        let start_cost = self.cost(u0)?;
        let res = lbfgs_minimize(
            |x| {
                let u = DMatrix::from_column_slice(r, m, x.as_slice());
                let (f, g) = self.cost_and_gradient(&u).expect("shape checked");
                (f, DVector::from_column_slice(g.as_slice()))
            },
            &DVector::from_column_slice(u0.as_slice()),
            &self.cfg.solver,
            Some((self.cfg.clamp_lo, self.cfg.clamp_hi)),
        );
        let u = DMatrix::from_column_slice(r, m, res.x.as_slice());
        let clamped_cost = self.cost(&u)?;
        Ok(SolveOutcome {
            u,
            record: SolveRecord {
                time: 0,
                iterations: res.iterations,
                evaluations: res.evaluations,
                status: res.status,
                start_cost,
                solved_cost: res.f,
                clamped_cost,
            },
        })
    }
}

/// Shorthand for [`MpcProblem::cost`].
pub fn mpc_cost<S: Surrogate>(
    model: &S,
    state: &S::State,
    reference: &DMatrix<f64>,
    u_prev: &DVector<f64>,
    u: &DMatrix<f64>,
    cfg: &MpcConfig,
) -> Result<f64> {
    MpcProblem { model, state, reference: reference.clone(), u_prev: u_prev.clone(), cfg }.cost(u)
}

/// Shorthand for [`MpcProblem::cost_and_gradient`], returning only the gradient.
pub fn cost_gradient<S: Surrogate>(
    model: &S,
    state: &S::State,
    reference: &DMatrix<f64>,
    u_prev: &DVector<f64>,
    u: &DMatrix<f64>,
    cfg: &MpcConfig,
) -> Result<DMatrix<f64>> {
    MpcProblem { model, state, reference: reference.clone(), u_prev: u_prev.clone(), cfg }
        .cost_and_gradient(u)
        .map(|(_, g)| g)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveOutcome {
    pub u: DMatrix<f64>,
    pub record: SolveRecord,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolveRecord {
    /// Control step at which the solve ran.
    pub time: usize,
    pub iterations: usize,
    pub evaluations: usize,
    pub status: LbfgsStatus,
    pub start_cost: f64,
    pub solved_cost: f64,
    /// Cost after clamping; exceeds `solved_cost` only through the clamp.
    pub clamped_cost: f64,
}

/// A plant driven one control interval at a time.
pub trait ControlPlant {
    fn n_u(&self) -> usize;
    fn state(&self) -> DVector<f64>;
    fn measurement(&self) -> DVector<f64>;
    fn apply(&mut self, u: &DVector<f64>) -> Result<()>;
    fn dt(&self) -> f64;
}

/// A [`PlantSpec`] integrated from a given state.
#[derive(Debug, Clone)]
pub struct SimulatedPlant {
    pub spec: PlantSpec,
    pub x: DVector<f64>,
    pub t: f64,
}

impl SimulatedPlant {
    pub fn new(spec: PlantSpec, x0: DVector<f64>) -> Self {
        Self { spec, x: x0, t: 0.0 }
    }
}

impl ControlPlant for SimulatedPlant {
    fn n_u(&self) -> usize {
        self.spec.n_u
    }

    fn state(&self) -> DVector<f64> {
        self.x.clone()
    }

    fn measurement(&self) -> DVector<f64> {
        self.spec.measure(&self.x)
    }

    fn apply(&mut self, u: &DVector<f64>) -> Result<()> {
        self.x = self.spec.step(self.t, &self.x, u)?;
        self.t += self.spec.dt_control;
        Ok(())
    }

    fn dt(&self) -> f64 {
        self.spec.dt_control
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    /// The plant integration failed at this step; the log stops there.
    PlantFailure { step: usize, message: String },
}

/// Everything a closed-loop run produced. Plant-unit matrices have one column per time
/// `0..=n` (states, measurements, references) or per step `0..n` (controls, costs).
#[derive(Debug, Clone, PartialEq)]
pub struct ControlLog {
    pub dt: f64,
    pub states: DMatrix<f64>,
    pub measurements: DMatrix<f64>,
    pub references: DMatrix<f64>,
    pub controls: DMatrix<f64>,
    pub controls_scaled: DMatrix<f64>,
    /// Control preceding the first step, scaled.
    pub u_initial: DVector<f64>,
    /// Per-step cost in scaled space.
    pub step_cost: Vec<f64>,
    /// Per-step cost with the same weights in plant units.
    pub step_cost_plant: Vec<f64>,
    pub solves: Vec<SolveRecord>,
    pub status: RunStatus,
    /// Steps spent synchronizing the surrogate before control started.
    pub sync_steps: usize,
}

impl ControlLog {
    pub fn steps(&self) -> usize {
        self.controls.ncols()
    }

    pub fn total_cost(&self) -> f64 {
        self.step_cost.iter().sum()
    }

    pub fn total_cost_plant(&self) -> f64 {
        self.step_cost_plant.iter().sum()
    }

    pub fn mean_iterations(&self) -> f64 {
        if self.solves.is_empty() {
            return 0.0;
        }
        self.solves.iter().map(|s| s.iterations as f64).sum::<f64>() / self.solves.len() as f64
    }

    /// Rows for times `1..=n`: the state, measurement and reference reached, the control that
    /// led there and that step's scaled cost.
    pub fn to_csv(&self) -> String {
        let mut head = vec!["time".to_string()];
        let names = |p: &'static str, n: usize| (1..=n).map(move |i| format!("{p}{i}"));
        head.extend(names("x", self.states.nrows()));
        head.extend(names("y", self.measurements.nrows()));
        head.extend(names("r", self.references.nrows()));
        head.extend(names("u", self.controls.nrows()));
        head.push("cost".into());
        let mut s = head.join(",");
        s.push('\n');
        for j in 1..=self.steps() {
            let mut row = vec![fmt_f64(j as f64 * self.dt)];
            row.extend(self.states.column(j).iter().map(|v| fmt_f64(*v)));
            row.extend(self.measurements.column(j).iter().map(|v| fmt_f64(*v)));
            row.extend(self.references.column(j).iter().map(|v| fmt_f64(*v)));
            row.extend(self.controls.column(j - 1).iter().map(|v| fmt_f64(*v)));
            row.push(fmt_f64(self.step_cost[j - 1]));
            s.push_str(&row.join(","));
            s.push('\n');
        }
        s
    }

    pub fn summary(&self) -> ControlSummary {
        ControlSummary {
            label: String::new(),
            seed: None,
            total_cost: self.total_cost(),
            total_cost_plant: self.total_cost_plant(),
            steps: self.steps(),
            solves: self.solves.len(),
            mean_iterations: self.mean_iterations(),
            initial_state: self.states.column(0).iter().copied().collect(),
            status: self.status.clone(),
        }
    }
}

/// The per-run record aggregated by reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlSummary {
    pub label: String,
    pub seed: Option<u64>,
    pub total_cost: f64,
    pub total_cost_plant: f64,
    pub steps: usize,
    pub solves: usize,
    pub mean_iterations: f64,
    pub initial_state: Vec<f64>,
    pub status: RunStatus,
}

/// Scaled and plant-unit cost of step `j` of a log.
fn step_costs(
    cfg: &MpcConfig,
    scalers: &Scalers,
    y_next: &DVector<f64>,
    r_next: &DVector<f64>,
    u: &DVector<f64>,
    u_before: &DVector<f64>,
) -> (f64, f64) {
    let sy = &scalers.states;
    let su = &scalers.controls;
    let q = |e: f64, c: f64, d: f64| cfg.q_track * e + cfg.q_control * c + cfg.q_rate * d;
    let scaled = q(
        (sy.apply_vec(y_next) - sy.apply_vec(r_next)).norm_squared(),
        u.map(|v| v - cfg.control_center).norm_squared(),
        (u - u_before).norm_squared(),
    );
    let (up, bp) = (su.invert_vec(u), su.invert_vec(u_before));
    let center = su.invert_vec(&DVector::from_element(u.len(), cfg.control_center));
    let plant = q((y_next - r_next).norm_squared(), (&up - &center).norm_squared(), (&up - &bp).norm_squared());
    (scaled, plant)
}

/// Recomputes the per-step scaled costs from the logged trajectory.
pub fn recompute_step_costs(log: &ControlLog, scalers: &Scalers, cfg: &MpcConfig) -> Vec<f64> {
    (0..log.steps())
        .map(|j| {
            let before = if j == 0 { log.u_initial.clone() } else { log.controls_scaled.column(j - 1).into_owned() };
            step_costs(
                cfg,
                scalers,
                &log.measurements.column(j + 1).into_owned(),
                &log.references.column(j + 1).into_owned(),
                &log.controls_scaled.column(j).into_owned(),
                &before,
            )
            .0
        })
        .collect()
}

/// Closed-loop run. The surrogate is first synchronized by holding the scaled mid-range control
/// for `history_len` steps; then the loop solves, applies `M_c` clamped columns, feeds the
/// realized measurements back and shifts the warm start, for `reference.len()` steps.
pub fn receding_horizon<S: Surrogate, P: ControlPlant>(
    plant: &mut P,
    model: &S,
    reference: &ReferenceTrajectory,
    cfg: &MpcConfig,
) -> Result<ControlLog> {
    cfg.validate()?;
    let sc = model.scalers();
    if reference.n_y() != model.n_y() || plant.n_u() != model.n_u() {
        return Err(Error::Config("reference or plant dimensions do not match the surrogate".into()));
    }
    if reference.is_empty() {
        return Err(Error::Config("empty reference".into()));
    }
    let n_u = model.n_u();
    let mid = DVector::from_element(n_u, 0.5 * (cfg.clamp_lo + cfg.clamp_hi));
    let mid_plant = sc.controls.invert_vec(&mid);
    let mut state = model.start(&sc.states.apply_vec(&plant.measurement()));
    let sync_steps = model.history_len();
    for j in 0..sync_steps {
        plant
            .apply(&mid_plant)
            .map_err(|e| Error::Config(format!("plant failed while synchronizing at step {j}: {e}")))?;
        model.advance(&mut state, &mid, &sc.states.apply_vec(&plant.measurement()));
    }

    let n = reference.len();
    let mut states = vec![plant.state()];
    let mut meas = vec![plant.measurement()];
    let mut controls = Vec::with_capacity(n);
    let mut controls_scaled: Vec<DVector<f64>> = Vec::with_capacity(n);
    let mut step_cost = Vec::with_capacity(n);
    let mut step_cost_plant = Vec::with_capacity(n);
    let mut solves = Vec::new();
    let mut status = RunStatus::Completed;
    let mut u_warm = DMatrix::from_element(n_u, cfg.control_horizon, mid[0]);
    let mut u_prev = mid.clone();
    let mut t = 0;
    'run: while t < n {
        let problem = MpcProblem {
            model,
            state: &state,
            reference: reference.scaled_slice(sc, t + 1, cfg.horizon),
            u_prev: u_prev.clone(),
            cfg,
        };
        let SolveOutcome { u, mut record } = problem.solve(&u_warm)?;
        record.time = t;
        solves.push(record);
        let apply = cfg.applied.min(n - t);
        for k in 0..apply {
            let us = u.column(k).into_owned();
            let up = sc.controls.invert_vec(&us);
            if let Err(e) = plant.apply(&up) {
                log::warn!("plant failure at step {t}: {e}");
                status = RunStatus::PlantFailure { step: t, message: e.to_string() };
                break 'run;
            }
            let y = plant.measurement();
            let (c, cp) = step_costs(cfg, sc, &y, &reference.at(t + 1), &us, &u_prev);
            model.advance(&mut state, &us, &sc.states.apply_vec(&y));
            states.push(plant.state());
            meas.push(y);
            controls.push(up);
            step_cost.push(c);
            step_cost_plant.push(cp);
            u_prev = us.clone();
            controls_scaled.push(us);
            t += 1;
        }
        let m = cfg.control_horizon;
        u_warm = DMatrix::from_fn(n_u, m, |i, j| u[(i, (j + cfg.applied).min(m - 1))]);
    }
    let cols = |v: &[DVector<f64>], rows: usize| {
        DMatrix::from_fn(rows, v.len(), |i, j| v[j][i])
    };
    let refs: Vec<DVector<f64>> = (0..meas.len()).map(|j| reference.at(j)).collect();
    Ok(ControlLog {
        dt: plant.dt(),
        states: cols(&states, states[0].len()),
        measurements: cols(&meas, model.n_y()),
        references: cols(&refs, model.n_y()),
        controls: cols(&controls, n_u),
        controls_scaled: cols(&controls_scaled, n_u),
        u_initial: mid,
        step_cost,
        step_cost_plant,
        solves,
        status,
        sync_steps,
    })
}

/// Mean and sample standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 { values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (mean, var.sqrt())
}
