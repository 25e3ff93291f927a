//! Echo state networks: sparse random reservoir, teacher forcing and a ridge-trained readout.

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::io::Container;
use crate::linalg::{max_eigen_modulus, solve_spd, Conditioning, CsrMatrix, SCHUR_MAX_ITER};
use crate::linid::{ridge_solve, RidgeAccumulator};
use crate::rng;
use crate::surrogate::Surrogate;
use crate::timeseries::{Dataset, Scalers, TrainingSet};

/// Reservoir hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EsnParams {
    pub n_r: usize,
    pub density: f64,
    pub spectral_radius: f64,
    pub input_scale: f64,
    pub bias_scale: f64,
    pub leak: f64,
    pub beta: f64,
    pub n_spin: usize,
    pub seed: u64,
}

impl Default for EsnParams {
    fn default() -> Self {
        Self {
            n_r: 1000,
            density: 0.02,
            spectral_radius: 0.4,
            input_scale: 0.1,
            bias_scale: 1.33,
            leak: 0.2,
            beta: 1e-7,
            n_spin: 200,
            seed: 0,
        }
    }
}

impl EsnParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_r == 0 {
            return bad("reservoir size must be positive".into());
        }
        if !(self.density > 0.0 && self.density <= 1.0) {
            return bad(format!("density {} outside (0, 1]", self.density));
        }
        if !(self.spectral_radius > 0.0 && self.spectral_radius.is_finite()) {
            return bad(format!("spectral radius {} must be positive", self.spectral_radius));
        }
        if !(self.leak > 0.0 && self.leak <= 1.0) {
            return bad(format!("leak rate {} outside (0, 1]", self.leak));
        }
        if !(self.input_scale >= 0.0 && self.bias_scale.is_finite() && self.beta >= 0.0) {
            return bad("input scale and ridge parameter must be non-negative".into());
        }
        Ok(())
    }
}

/// Fixed reservoir weights and, once trained, the linear readout.
#[derive(Debug, Clone, PartialEq)]
pub struct EsnWeights {
    pub reservoir: CsrMatrix,
    /// `n_r × (n_y + n_u)`; the first `n_y` columns multiply the measurement.
    pub input: DMatrix<f64>,
    pub bias_scale: f64,
    pub leak: f64,
    /// `n_y × n_r`.
    pub readout: Option<DMatrix<f64>>,
}

const MAX_DRAWS: u64 = 5;

/// Draws a Bernoulli(`density`) pattern with uniform(−1, 1) values, rescaled to the requested
/// spectral radius, and a uniform(−σ, σ) input matrix.
pub fn init_reservoir(params: &EsnParams, n_y: usize, n_u: usize) -> Result<EsnWeights> {
    params.validate()?;
    let n = params.n_r;
    for attempt in 0..MAX_DRAWS {
        let mut r = rng::seeded(rng::derive_seed(params.seed, attempt));
        let mut triplets = Vec::with_capacity((params.density * (n * n) as f64 * 1.1) as usize);
        for i in 0..n {
            for j in 0..n {
                if r.gen::<f64>() < params.density {
                    triplets.push((i, j, r.gen_range(-1.0..1.0)));
                }
            }
        }
        let mut a = CsrMatrix::from_sorted_triplets(n, n, &triplets).expect("triplets are ordered");
        let radius = spectral_radius(&a, rng::derive_seed(params.seed, 1000 + attempt))?;
        if radius < 1e-10 {
            log::debug!("reservoir draw {attempt} has zero spectral radius, redrawing");
            continue;
        }
        a.scale_mut(params.spectral_radius / radius);
        let sigma = params.input_scale;
        let input = DMatrix::from_fn(n, n_y + n_u, |_, _| {
            if sigma > 0.0 {
                r.gen_range(-sigma..=sigma)
            } else {
                0.0
            }
        });
        return Ok(EsnWeights {
            reservoir: a,
            input,
            bias_scale: params.bias_scale,
            leak: params.leak,
            readout: None,
        });
    }
    Err(Error::Convergence {
        iterations: MAX_DRAWS as usize,
        residual: 0.0,
    })
}

/// Largest eigenvalue modulus.
///
/// Small matrices go straight to a dense eigensolver. Larger ones use block subspace
/// iteration with Rayleigh–Ritz extraction, which resolves complex-conjugate dominant pairs
/// and tightly clustered outer eigenvalues.
pub fn spectral_radius(a: &CsrMatrix, seed: u64) -> Result<f64> {
    let n = a.nrows();
    if n != a.ncols() {
        return Err(dim_err("spectral radius of a non-square matrix"));
    }
    if n == 0 {
        return Ok(0.0);
    }
    if n <= 64 {
        return dense_radius(&a.to_dense());
    }
    const BLOCK: usize = 12;
    const CHECK_EVERY: usize = 10;
    const MAX_ITER: usize = 50_000;
    const TOL: f64 = 1e-13;
    let mut r = rng::seeded(seed);
    let mut q = orthonormal_columns(DMatrix::from_fn(n, BLOCK, |_, _| r.gen_range(-1.0..1.0)));
    let mut prev = f64::NAN;
    let mut settled = 0;
    for it in 1..=MAX_ITER {
        if q.ncols() == 0 {
            // The iterated subspace collapsed, so the matrix is nilpotent on it.
            return Ok(0.0);
        }
        let mut z = DMatrix::zeros(n, q.ncols());
        for c in 0..q.ncols() {
            a.mul_into(q.column(c).as_slice(), z.column_mut(c).as_mut_slice());
        }
        if it % CHECK_EVERY == 0 {
            let est = dense_radius(&(q.transpose() * &z))?;
            if (est - prev).abs() <= TOL * est || est == 0.0 && prev == 0.0 {
                settled += 1;
                if settled >= 2 {
                    return Ok(est);
                }
            } else {
                settled = 0;
            }
            prev = est;
        }
        q = orthonormal_columns(z);
    }
    Err(Error::Convergence {
        iterations: MAX_ITER,
        residual: prev,
    })
}

/// Modified Gram–Schmidt that drops columns which are numerically dependent on earlier ones.
fn orthonormal_columns(mut z: DMatrix<f64>) -> DMatrix<f64> {
    let scale = z.column_iter().map(|c| c.norm()).fold(0.0f64, f64::max);
    if scale == 0.0 {
        return DMatrix::zeros(z.nrows(), 0);
    }
    let mut kept: Vec<usize> = Vec::with_capacity(z.ncols());
    for c in 0..z.ncols() {
        for _pass in 0..2 {
            for &k in &kept {
                let proj = z.column(k).dot(&z.column(c));
                let basis = z.column(k).into_owned();
                z.column_mut(c).axpy(-proj, &basis, 1.0);
            }
        }
        let norm = z.column(c).norm();
        if norm > 1e-10 * scale {
            z.column_mut(c).unscale_mut(norm);
            kept.push(c);
        }
    }
    z.select_columns(&kept)
}

fn dense_radius(m: &DMatrix<f64>) -> Result<f64> {
    max_eigen_modulus(m).ok_or(Error::Convergence { iterations: SCHUR_MAX_ITER, residual: f64::NAN })
}

/// `h' = (1 − α) h + α tanh(A h + W_ih [y; u] + σ_b 1)`.
pub fn reservoir_step(w: &EsnWeights, h: &DVector<f64>, y: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
    let mut next = h.clone();
    step_in_place(w, h, y, u, &mut next, None);
    next
}

/// Writes the updated state into `out` and optionally the `tanh` activations into `act`.
fn step_in_place(
    w: &EsnWeights,
    h: &DVector<f64>,
    y: &DVector<f64>,
    u: &DVector<f64>,
    out: &mut DVector<f64>,
    act: Option<&mut DVector<f64>>,
) {
    let n = h.len();
    let mut z = DVector::zeros(n);
    w.reservoir.mul_into(h.as_slice(), z.as_mut_slice());
    let ny = y.len();
    for (c, v) in y.iter().chain(u.iter()).enumerate() {
        if *v != 0.0 {
            z.axpy(*v, &w.input.column(c), 1.0);
        }
        debug_assert!(c < ny + u.len());
    }
    let alpha = w.leak;
    z.apply(|v| *v = (*v + w.bias_scale).tanh());
    for i in 0..n {
        out[i] = (1.0 - alpha) * h[i] + alpha * z[i];
    }
    if let Some(a) = act {
        *a = z;
    }
}

/// Drives the reservoir from `h = 0` with every `(y_j, u_j)` pair; column `j` is the state after
/// consuming pair `j`.
pub fn teacher_force(w: &EsnWeights, data: &Dataset) -> Result<DMatrix<f64>> {
    let n = w.reservoir.nrows();
    if data.n_x() + data.n_u() != w.input.ncols() {
        return Err(dim_err("dataset dimensions do not match the input matrix"));
    }
    let mut out = DMatrix::zeros(n, data.len());
    let mut h = DVector::zeros(n);
    let mut next = DVector::zeros(n);
    for j in 0..data.len() {
        step_in_place(
            w,
            &h,
            &data.states.column(j).into_owned(),
            &data.controls.column(j).into_owned(),
            &mut next,
            None,
        );
        std::mem::swap(&mut h, &mut next);
        out.set_column(j, &h);
    }
    Ok(out)
}

/// Ridge readout on reservoir states `h` (one column per sample) after dropping `n_spin`
/// columns; returns `W_o` (`n_y × n_r`).
pub fn train_readout(
    h: &DMatrix<f64>,
    targets: &DMatrix<f64>,
    beta: f64,
    n_spin: usize,
) -> Result<(DMatrix<f64>, Conditioning)> {
    if h.ncols() != targets.ncols() {
        return Err(dim_err("reservoir states and targets are misaligned"));
    }
    if n_spin >= h.ncols() {
        return Err(Error::Size(format!(
            "spin-up {n_spin} leaves no samples out of {}",
            h.ncols()
        )));
    }
    let keep = h.ncols() - n_spin;
    let (theta, cond) = ridge_solve(
        &h.columns(n_spin, keep).into_owned(),
        &targets.columns(n_spin, keep).into_owned(),
        beta,
    )?;
    Ok((theta.transpose(), cond))
}

/// Trained echo state network.
#[derive(Debug, Clone, PartialEq)]
pub struct Esn {
    pub params: EsnParams,
    pub weights: EsnWeights,
    pub scalers: Scalers,
    pub conditioning: Conditioning,
    n_y: usize,
}

/// Reservoir state plus the measurement it is synchronized with.
#[derive(Debug, Clone, PartialEq)]
pub struct EsnState {
    pub h: DVector<f64>,
    pub y: DVector<f64>,
}

pub struct EsnTape {
    /// `tanh` activations per forecast step.
    act: Vec<DVector<f64>>,
}

const CHUNK: usize = 1024;

/// Builds a reservoir and fits its readout on scaled data. States are streamed into the normal
/// equations in column chunks, so memory stays at `O(n_r²)`.
pub fn fit_esn_scaled(data: &Dataset, scalers: &Scalers, params: &EsnParams) -> Result<Esn> {
    if params.n_spin >= data.len() {
        return Err(Error::Size(format!(
            "spin-up {} needs more than {} samples",
            params.n_spin,
            data.len()
        )));
    }
    let (ny, nu) = (data.n_x(), data.n_u());
    let mut weights = init_reservoir(params, ny, nu)?;
    let n = params.n_r;
    let mut acc = RidgeAccumulator::new(n, ny);
    let mut h = DVector::zeros(n);
    let mut next = DVector::zeros(n);
    let mut hbuf = DMatrix::zeros(n, CHUNK);
    let mut ybuf = DMatrix::zeros(ny, CHUNK);
    let mut fill = 0;
    for j in 0..data.len() {
        step_in_place(
            &weights,
            &h,
            &data.states.column(j).into_owned(),
            &data.controls.column(j).into_owned(),
            &mut next,
            None,
        );
        std::mem::swap(&mut h, &mut next);
        if j < params.n_spin {
            continue;
        }
        hbuf.set_column(fill, &h);
        ybuf.set_column(fill, &data.states.column(j + 1));
        fill += 1;
        if fill == CHUNK || j + 1 == data.len() {
            acc.add(
                &hbuf.columns(0, fill).into_owned(),
                &ybuf.columns(0, fill).into_owned(),
            )?;
            fill = 0;
        }
    }
    let (theta, conditioning) = acc.solve(params.beta)?;
    weights.readout = Some(theta.transpose());
    Ok(Esn {
        params: *params,
        weights,
        scalers: scalers.clone(),
        conditioning,
        n_y: ny,
    })
}

pub fn fit_esn(train: &TrainingSet, params: &EsnParams) -> Result<Esn> {
    fit_esn_scaled(&train.scaled, &train.scalers, params)
}

/// Closed-loop forecast from a synchronized reservoir state; the input state is not modified.
/// Returns the predictions and the advanced state.
pub fn esn_forecast(
    w: &EsnWeights,
    h: &DVector<f64>,
    y_now: &DVector<f64>,
    u_future: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let wo = w
        .readout
        .as_ref()
        .ok_or_else(|| Error::Usage("the readout has not been trained".into()))?;
    let mut h = h.clone();
    let mut next = h.clone();
    let mut y = y_now.clone();
    let mut pred = DMatrix::zeros(wo.nrows(), u_future.ncols());
    for s in 0..u_future.ncols() {
        step_in_place(w, &h, &y, &u_future.column(s).into_owned(), &mut next, None);
        std::mem::swap(&mut h, &mut next);
        y = wo * &h;
        pred.set_column(s, &y);
    }
    Ok((pred, h))
}

impl Esn {
    pub fn readout(&self) -> &DMatrix<f64> {
        self.weights.readout.as_ref().expect("a fitted network always has a readout")
    }

    pub fn to_container(&self) -> Container {
        let p = &self.params;
        let mut c = Container::default();
        c.set("family", "esn");
        c.set("n_r", p.n_r);
        c.set_f64("density", p.density);
        c.set_f64("spectral_radius", p.spectral_radius);
        c.set_f64("input_scale", p.input_scale);
        c.set_f64("bias_scale", p.bias_scale);
        c.set_f64("leak", p.leak);
        c.set_f64("beta", p.beta);
        c.set("n_spin", p.n_spin);
        c.set("seed", p.seed);
        c.set("n_y", self.n_y);
        c.put_sparse("reservoir", self.weights.reservoir.clone());
        c.put("input", self.weights.input.clone());
        c.put("readout", self.readout().clone());
        self.scalers.store(&mut c);
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        if c.get("family")? != "esn" {
            return Err(Error::Parse("container does not hold an echo state network".into()));
        }
        let params = EsnParams {
            n_r: c.get_usize("n_r")?,
            density: c.get_f64("density")?,
            spectral_radius: c.get_f64("spectral_radius")?,
            input_scale: c.get_f64("input_scale")?,
            bias_scale: c.get_f64("bias_scale")?,
            leak: c.get_f64("leak")?,
            beta: c.get_f64("beta")?,
            n_spin: c.get_usize("n_spin")?,
            seed: c.get_u64("seed")?,
        };
        let n_y = c.get_usize("n_y")?;
        let reservoir = c.sparse("reservoir")?.clone();
        let input = c.dense("input")?.clone();
        let readout = c.dense("readout")?.clone();
        let n = params.n_r;
        if reservoir.nrows() != n || input.nrows() != n || readout.shape() != (n_y, n) || input.ncols() < n_y {
            return Err(Error::Parse("esn block shapes disagree with header".into()));
        }
        Ok(Self {
            params,
            weights: EsnWeights {
                reservoir,
                input,
                bias_scale: params.bias_scale,
                leak: params.leak,
                readout: Some(readout),
            },
            scalers: Scalers::restore(c)?,
            conditioning: Conditioning::Ok,
            n_y,
        })
    }
}

impl Surrogate for Esn {
    type State = EsnState;
    type Tape = EsnTape;

    fn n_y(&self) -> usize {
        self.n_y
    }

    fn n_u(&self) -> usize {
        self.weights.input.ncols() - self.n_y
    }

    fn history_len(&self) -> usize {
        self.params.n_spin
    }

    fn scalers(&self) -> &Scalers {
        &self.scalers
    }

    fn param_count(&self) -> usize {
        self.readout().len()
    }

    fn start(&self, y0: &DVector<f64>) -> EsnState {
        EsnState {
            h: DVector::zeros(self.params.n_r),
            y: y0.clone(),
        }
    }

    fn advance(&self, state: &mut EsnState, u: &DVector<f64>, y_next: &DVector<f64>) {
        let mut next = state.h.clone();
        step_in_place(&self.weights, &state.h, &state.y, u, &mut next, None);
        state.h = next;
        state.y = y_next.clone();
    }

    fn current(&self, state: &EsnState) -> DVector<f64> {
        state.y.clone()
    }

    fn forecast_taped(&self, state: &EsnState, u: &DMatrix<f64>) -> (DMatrix<f64>, EsnTape) {
        let wo = self.readout();
        let mut h = state.h.clone();
        let mut next = h.clone();
        let mut y = state.y.clone();
        let mut pred = DMatrix::zeros(self.n_y, u.ncols());
        let mut act = Vec::with_capacity(u.ncols());
        for s in 0..u.ncols() {
            let mut a = DVector::zeros(0);
            step_in_place(&self.weights, &h, &y, &u.column(s).into_owned(), &mut next, Some(&mut a));
            std::mem::swap(&mut h, &mut next);
            act.push(a);
            y = wo * &h;
            pred.set_column(s, &y);
        }
        (pred, EsnTape { act })
    }

    fn backprop(&self, _: &EsnState, u: &DMatrix<f64>, tape: &EsnTape, d_pred: &DMatrix<f64>) -> DMatrix<f64> {
        let wo = self.readout();
        let ny = self.n_y;
        let w_y = self.weights.input.columns(0, ny);
        let w_u = self.weights.input.columns(ny, self.n_u());
        let alpha = self.weights.leak;
        let n = self.params.n_r;
        let t = u.ncols();
        let mut du = DMatrix::zeros(self.n_u(), t);
        // `lam` is ∂L/∂h_{s+1}, `delta` is ∂L/∂z_s for the pre-activation at step s.
        let mut lam_next = DVector::zeros(n);
        let mut delta_next: Option<DVector<f64>> = None;
        for s in (0..t).rev() {
            let mut g_pred = d_pred.column(s).into_owned();
            let mut lam = DVector::zeros(n);
            if let Some(dn) = &delta_next {
                g_pred += w_y.transpose() * dn;
                lam = &lam_next * (1.0 - alpha);
                self.weights.reservoir.tr_mul_add(dn.as_slice(), lam.as_mut_slice());
            }
            lam += wo.transpose() * g_pred;
            let a = &tape.act[s];
            let delta = DVector::from_fn(n, |i, _| alpha * (1.0 - a[i] * a[i]) * lam[i]);
            du.set_column(s, &(w_u.transpose() * &delta));
            lam_next = lam;
            delta_next = Some(delta);
        }
        du
    }
}

/// Ridge readout via the dense normal equations, for callers that already hold `H`.
pub fn readout_normal_equations(h: &DMatrix<f64>, targets: &DMatrix<f64>, beta: f64) -> (DMatrix<f64>, Conditioning) {
    let mut g = h * h.transpose();
    for i in 0..g.nrows() {
        g[(i, i)] += beta;
    }
    let (theta, cond) = solve_spd(&g, &(h * targets.transpose()));
    (theta.transpose(), cond)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plants::{training_trajectory, PlantKind, PlantSpec};

    fn small(seed: u64) -> EsnParams {
        EsnParams { n_r: 60, density: 0.1, n_spin: 20, seed, ..EsnParams::default() }
    }

    #[test]
    fn radius_of_simple_matrices() {
        let i5 = CsrMatrix::from_dense(&DMatrix::identity(5, 5));
        assert!((spectral_radius(&i5, 0).unwrap() - 1.0).abs() < 1e-12);
        let d = CsrMatrix::from_dense(&DMatrix::from_diagonal(&DVector::from_vec(vec![0.5, -2.0])));
        assert!((spectral_radius(&d, 0).unwrap() - 2.0).abs() < 1e-12);
        let id = CsrMatrix::from_dense(&DMatrix::identity(100, 100));
        assert!((spectral_radius(&id, 0).unwrap() - 1.0).abs() < 1e-12);
        let nil = CsrMatrix::from_sorted_triplets(100, 100, &[(0, 1, 1.0), (1, 2, 1.0)]).unwrap();
        assert_eq!(spectral_radius(&nil, 0).unwrap(), 0.0);
    }

    #[test]
    fn radius_matches_dense_oracle_on_random_sparse() {
        for seed in 0..3 {
            let mut r = rng::seeded(seed);
            let m = DMatrix::from_fn(200, 200, |_, _| {
                if r.gen::<f64>() < 0.05 {
                    r.gen_range(-1.0..1.0)
                } else {
                    0.0
                }
            });
            let est = spectral_radius(&CsrMatrix::from_dense(&m), seed).unwrap();
            let oracle = dense_radius(&m).unwrap();
            assert!((est - oracle).abs() / oracle < 1e-6, "{est} vs {oracle}");
        }
    }

    #[test]
    fn init_is_deterministic_and_scaled() {
        let p = EsnParams { n_r: 150, density: 0.05, spectral_radius: 0.9, seed: 7, ..EsnParams::default() };
        let a = init_reservoir(&p, 3, 1).unwrap();
        assert_eq!(a, init_reservoir(&p, 3, 1).unwrap());
        let radius = dense_radius(&a.reservoir.to_dense()).unwrap();
        assert!((radius - 0.9).abs() / 0.9 < 1e-6, "{radius}");
        assert!(a.input.iter().all(|v| v.abs() <= p.input_scale));
        let z = init_reservoir(&EsnParams { input_scale: 0.0, ..p }, 3, 1).unwrap();
        assert!(z.input.iter().all(|v| *v == 0.0));
    }

    fn hand_weights(alpha: f64) -> EsnWeights {
        EsnWeights {
            reservoir: CsrMatrix::from_dense(&DMatrix::from_row_slice(2, 2, &[0.0, 0.5, 0.0, 0.0])),
            input: DMatrix::from_row_slice(2, 1, &[1.0, 0.0]),
            bias_scale: 0.0,
            leak: alpha,
            readout: None,
        }
    }

    #[test]
    fn step_hand_cases() {
        let h0 = DVector::zeros(2);
        let one = DVector::from_element(1, 1.0);
        let none = DVector::zeros(0);
        let h = reservoir_step(&hand_weights(0.5), &h0, &one, &none);
        assert!((h[0] - 0.5 * 1f64.tanh()).abs() < 1e-15 && h[1] == 0.0);
        assert!((h[0] - 0.380797).abs() < 1e-6);
        let hx = DVector::from_vec(vec![0.3, -0.7]);
        assert_eq!(reservoir_step(&hand_weights(0.0), &hx, &one, &none), hx);
        let mut w = hand_weights(1.0);
        w.reservoir = CsrMatrix::zeros(2, 2);
        w.input.fill(0.0);
        assert_eq!(reservoir_step(&w, &hx, &one, &none), DVector::zeros(2));
    }

    #[test]
    fn teacher_force_columns() {
        let w = hand_weights(0.5);
        let d = Dataset::new(DMatrix::from_row_slice(1, 2, &[1.0, 0.0]), DMatrix::zeros(0, 1), 1.0).unwrap();
        let h = teacher_force(&w, &d).unwrap();
        assert_eq!(h.ncols(), 1);
        let step = reservoir_step(&w, &DVector::zeros(2), &DVector::from_element(1, 1.0), &DVector::zeros(0));
        assert_eq!(h.column(0), step);
    }

    #[test]
    fn readout_recovers_realizable_map_and_shrinks() {
        let mut r = rng::seeded(5);
        let h = DMatrix::from_fn(30, 400, |_, _| r.gen_range(-1.0..1.0));
        let w = DMatrix::from_fn(2, 30, |_, _| r.gen_range(-1.0..1.0));
        let (wo, _) = train_readout(&h, &(&w * &h), 0.0, 10).unwrap();
        assert!((&wo - &w).amax() < 1e-8);
        let y = DMatrix::from_fn(2, 400, |_, _| r.gen_range(-1.0..1.0));
        let mut last = f64::INFINITY;
        for e in -7..=-1 {
            let (wo, _) = train_readout(&h, &y, 10f64.powi(e), 10).unwrap();
            assert!(wo.norm() <= last);
            last = wo.norm();
        }
        let (_, cond) = train_readout(&h, &y, 0.0, 399).unwrap();
        assert!(matches!(cond, Conditioning::RankDeficient { .. }));
        assert!(train_readout(&h, &y, 0.0, 400).is_err());
    }

    fn lorenz_train(steps: usize) -> TrainingSet {
        let p = PlantSpec::new(PlantKind::Lorenz);
        let rec = training_trajectory(&p, 3, Some(steps)).unwrap();
        TrainingSet::prepare(&rec.measured_dataset().unwrap(), None).unwrap()
    }

    #[test]
    fn echo_state_property_contracts() {
        let train = lorenz_train(400);
        let p = EsnParams { n_r: 300, ..EsnParams::default() };
        let w = init_reservoir(&p, 3, 1).unwrap();
        let mut r = rng::seeded(1);
        let mut ha = DVector::from_fn(300, |_, _| r.gen_range(-1.0..1.0));
        let mut hb = DVector::from_fn(300, |_, _| r.gen_range(-1.0..1.0));
        ha /= ha.norm();
        hb /= hb.norm();
        let d = &train.scaled;
        for j in 0..200 {
            let (y, u) = (d.states.column(j).into_owned(), d.controls.column(j).into_owned());
            ha = reservoir_step(&w, &ha, &y, &u);
            hb = reservoir_step(&w, &hb, &y, &u);
        }
        assert!((ha - hb).norm() < 1e-6);
    }

    #[test]
    fn forecast_contracts() {
        let train = lorenz_train(600);
        let esn = fit_esn(&train, &small(2)).unwrap();
        let s = esn.sync(&train.scaled, 300).unwrap();
        let u = train.scaled.controls.columns(300, 20).into_owned();
        let (p0, h0) = esn_forecast(&esn.weights, &s.h, &s.y, &DMatrix::zeros(1, 0)).unwrap();
        assert_eq!((p0.ncols(), &h0), (0, &s.h));
        let (p1, _) = esn_forecast(&esn.weights, &s.h, &s.y, &u.columns(0, 1).into_owned()).unwrap();
        let h1 = reservoir_step(&esn.weights, &s.h, &s.y, &u.column(0).into_owned());
        assert_eq!(p1.column(0).into_owned(), esn.readout() * h1);
        let a = esn.forecast(&s, &u);
        assert_eq!(a, esn.forecast(&s, &u));
        assert_eq!(a, esn_forecast(&esn.weights, &s.h, &s.y, &u).unwrap().0);
        let mut untrained = esn.weights.clone();
        untrained.readout = None;
        assert!(matches!(esn_forecast(&untrained, &s.h, &s.y, &u), Err(Error::Usage(_))));
    }

    #[test]
    fn streamed_fit_matches_dense_readout() {
        let train = lorenz_train(2500);
        let p = small(4);
        let esn = fit_esn(&train, &p).unwrap();
        let h = teacher_force(&esn.weights, &train.scaled).unwrap();
        let targets = train.scaled.states.columns(1, train.scaled.len()).into_owned();
        let (wo, _) = train_readout(&h, &targets, p.beta, p.n_spin).unwrap();
        let keep = h.ncols() - p.n_spin;
        let hk = h.columns(p.n_spin, keep).into_owned();
        let (oracle, _) = readout_normal_equations(&hk, &targets.columns(p.n_spin, keep).into_owned(), p.beta);
        let fit = esn.readout() * &hk;
        for other in [&wo, &oracle] {
            let coef = (other - esn.readout()).norm() / other.norm();
            let pred = (other * &hk - &fit).norm() / fit.norm();
            eprintln!("coef {coef:e} pred {pred:e}");
            assert!(pred < 1e-8, "{coef} {pred}");
        }
    }

    #[test]
    fn backprop_matches_finite_differences() {
        let train = lorenz_train(600);
        let esn = fit_esn(&train, &small(6)).unwrap();
        let s = esn.sync(&train.scaled, 250).unwrap();
        let mut r = rng::seeded(8);
        let u = DMatrix::from_fn(1, 12, |_, _| r.gen_range(0.0..1.0));
        let w = DMatrix::from_fn(3, 12, |_, _| r.gen_range(-1.0..1.0));
        let loss = |u: &DMatrix<f64>| esn.forecast(&s, u).component_mul(&w).sum();
        let (_, tape) = esn.forecast_taped(&s, &u);
        let g = esn.backprop(&s, &u, &tape, &w);
        for j in 0..12 {
            let mut up = u.clone();
            let mut dn = u.clone();
            up[(0, j)] += 1e-5;
            dn[(0, j)] -= 1e-5;
            let fd = (loss(&up) - loss(&dn)) / 2e-5;
            assert!((fd - g[(0, j)]).abs() <= 1e-6 * (1.0 + fd.abs()), "{j}: {fd} vs {}", g[(0, j)]);
        }
    }

    #[test]
    fn container_round_trip() {
        let train = lorenz_train(300);
        let esn = fit_esn(&train, &small(9)).unwrap();
        let text = esn.to_container().to_text();
        let back = Esn::from_container(&Container::from_text(&text).unwrap()).unwrap();
        assert_eq!(back.weights, esn.weights);
        assert_eq!(back.params, esn.params);
    }
}
