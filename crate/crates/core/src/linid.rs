//! Ridge regression and the delay-embedded linear (DMDc) surrogate.

use nalgebra::{DMatrix, DVector};

use crate::error::{dim_err, Error, Result};
use crate::io::Container;
use crate::linalg::{gemm_abt, solve_spd, Conditioning};
use crate::surrogate::{LagState, Surrogate};
use crate::timeseries::{delay_embed, Dataset, Scalers, TrainingSet};

/// Streaming accumulator for the normal equations `(P Pᵀ + βI) Θ = P Qᵀ`.
#[derive(Debug, Clone)]
pub struct RidgeAccumulator {
    gram: DMatrix<f64>,
    cross: DMatrix<f64>,
    samples: usize,
}

impl RidgeAccumulator {
    pub fn new(n_features: usize, n_outputs: usize) -> Self {
        Self {
            gram: DMatrix::zeros(n_features, n_features),
            cross: DMatrix::zeros(n_features, n_outputs),
            samples: 0,
        }
    }

    pub fn samples(&self) -> usize {
        self.samples
    }

    /// Adds sample columns of regressors `p` and targets `q`.
    pub fn add(&mut self, p: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<()> {
        if p.ncols() != q.ncols() {
            return Err(dim_err(format!(
                "{} regressor columns vs {} target columns",
                p.ncols(),
                q.ncols()
            )));
        }
        if p.nrows() != self.gram.nrows() || q.nrows() != self.cross.ncols() {
            return Err(dim_err("chunk shape does not match accumulator"));
        }
        gemm_abt(&mut self.gram, p, p, 1.0);
        gemm_abt(&mut self.cross, p, q, 1.0);
        self.samples += p.ncols();
        Ok(())
    }

    /// `Θ` with one column per output, plus the conditioning of the solve.
    pub fn solve(&self, beta: f64) -> Result<(DMatrix<f64>, Conditioning)> {
        if !(beta >= 0.0 && beta.is_finite()) {
            return Err(Error::Config(format!("ridge parameter must be >= 0, got {beta}")));
        }
        let mut g = self.gram.clone();
        for i in 0..g.nrows() {
            g[(i, i)] += beta;
        }
        let (theta, cond) = solve_spd(&g, &self.cross);
        if let Conditioning::RankDeficient { rank } = cond {
            log::warn!(
                "ridge system rank {rank} of {}: returning the minimum-norm solution",
                g.nrows()
            );
        }
        Ok((theta, cond))
    }
}

/// `argmin ‖PᵀΘ − Qᵀ‖² + β‖Θ‖²` for regressors `p` and targets `q` stored column-per-sample.
pub fn ridge_solve(p: &DMatrix<f64>, q: &DMatrix<f64>, beta: f64) -> Result<(DMatrix<f64>, Conditioning)> {
    let mut acc = RidgeAccumulator::new(p.nrows(), q.nrows());
    acc.add(p, q)?;
    acc.solve(beta)
}

/// Linear map from `[y_t; …; y_{t−k}; u_t; …; u_{t−k}; 1]` to `y_{t+1}`, all in scaled units.
///
/// The constant feature absorbs the offset that min-max scaling introduces into otherwise
/// linear dynamics.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    /// `n_y × ((k+1)(n_y+n_u) + 1)`.
    pub operator: DMatrix<f64>,
    pub delays: usize,
    pub beta: f64,
    pub scalers: Scalers,
    pub conditioning: Conditioning,
}

/// Appends the constant feature row to embedded inputs.
fn with_bias(inputs: &DMatrix<f64>) -> DMatrix<f64> {
    let mut p = inputs.clone().resize_vertically(inputs.nrows() + 1, 1.0);
    p.row_mut(inputs.nrows()).fill(1.0);
    p
}

/// Fits the delay-embedded linear model on already-scaled data.
pub fn fit_dmdc_scaled(data: &Dataset, scalers: &Scalers, k: usize, beta: f64) -> Result<LinearModel> {
    let emb = delay_embed(&data.states, &data.controls, k)?;
    let (theta, conditioning) = ridge_solve(&with_bias(&emb.inputs), &emb.targets, beta)?;
    Ok(LinearModel {
        operator: theta.transpose(),
        delays: k,
        beta,
        scalers: scalers.clone(),
        conditioning,
    })
}

pub fn fit_dmdc(train: &TrainingSet, k: usize, beta: f64) -> Result<LinearModel> {
    fit_dmdc_scaled(&train.scaled, &train.scalers, k, beta)
}

impl LinearModel {
    pub fn n_features(&self) -> usize {
        self.operator.ncols()
    }

    fn ny(&self) -> usize {
        self.operator.nrows()
    }

    fn nu(&self) -> usize {
        (self.operator.ncols() - 1) / (self.delays + 1) - self.ny()
    }

    /// Block of Θ multiplying `y_{t−lag}`.
    fn y_block(&self, lag: usize) -> nalgebra::DMatrixView<'_, f64> {
        let ny = self.ny();
        self.operator.columns(lag * ny, ny)
    }

    fn u_block(&self, lag: usize) -> nalgebra::DMatrixView<'_, f64> {
        let (ny, nu) = (self.ny(), self.nu());
        self.operator.columns((self.delays + 1) * ny + lag * nu, nu)
    }

    fn bias(&self) -> DVector<f64> {
        self.operator.column(self.operator.ncols() - 1).into_owned()
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::default();
        c.set("family", "dmdc");
        c.set("delays", self.delays);
        c.set_f64("beta", self.beta);
        c.set("n_y", self.ny());
        c.set("n_u", self.nu());
        c.put("operator", self.operator.clone());
        self.scalers.store(&mut c);
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        if c.get("family")? != "dmdc" {
            return Err(Error::Parse("container does not hold a linear model".into()));
        }
        let delays = c.get_usize("delays")?;
        let operator = c.dense("operator")?.clone();
        let (ny, nu) = (c.get_usize("n_y")?, c.get_usize("n_u")?);
        if operator.nrows() != ny || operator.ncols() != (delays + 1) * (ny + nu) + 1 {
            return Err(Error::Parse("operator shape disagrees with header".into()));
        }
        Ok(Self {
            operator,
            delays,
            beta: c.get_f64("beta")?,
            scalers: Scalers::restore(c)?,
            conditioning: Conditioning::Ok,
        })
    }
}

/// Forecast in plant units from `k+1` measurements (oldest first, the last being `y_t`), the
/// `k` controls `u_{t−k}, …, u_{t−1}` and future controls `u_t, …`.
pub fn forecast_linear(
    model: &LinearModel,
    y_hist: &DMatrix<f64>,
    u_hist: &DMatrix<f64>,
    u_future: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let k = model.delays;
    if y_hist.ncols() != k + 1 || u_hist.ncols() != k {
        return Err(dim_err(format!(
            "history needs {} measurements and {k} controls, got {} and {}",
            k + 1,
            y_hist.ncols(),
            u_hist.ncols()
        )));
    }
    if y_hist.nrows() != model.n_y() || u_hist.nrows() != model.n_u() || u_future.nrows() != model.n_u() {
        return Err(dim_err("history rows do not match the model"));
    }
    let sc = &model.scalers;
    let ys = sc.states.apply(y_hist)?;
    let us = sc.controls.apply(u_hist)?;
    let mut state = model.start(&ys.column(0).into_owned());
    for j in 0..k {
        model.advance(&mut state, &us.column(j).into_owned(), &ys.column(j + 1).into_owned());
    }
    let pred = model.forecast(&state, &sc.controls.apply(u_future)?);
    sc.states.invert(&pred)
}

impl Surrogate for LinearModel {
    type State = LagState;
    type Tape = ();

    fn n_y(&self) -> usize {
        self.ny()
    }

    fn n_u(&self) -> usize {
        self.nu()
    }

    fn history_len(&self) -> usize {
        self.delays
    }

    fn scalers(&self) -> &Scalers {
        &self.scalers
    }

    fn param_count(&self) -> usize {
        self.operator.len()
    }

    fn start(&self, y0: &DVector<f64>) -> LagState {
        LagState::new(y0, self.delays)
    }

    fn advance(&self, state: &mut LagState, u: &DVector<f64>, y_next: &DVector<f64>) {
        state.push(u, y_next);
    }

    fn current(&self, state: &LagState) -> DVector<f64> {
        state.y.clone()
    }

    fn forecast_taped(&self, state: &LagState, u: &DMatrix<f64>) -> (DMatrix<f64>, ()) {
        let k = self.delays;
        let t = u.ncols();
        // Newest-first histories; index 0 is time `s` at step `s`.
        let window = state.window(self.nu());
        let mut ys: Vec<DVector<f64>> = window.iter().map(|p| p.0.clone()).collect();
        let mut us: Vec<DVector<f64>> = window.iter().map(|p| p.1.clone()).collect();
        ys.push(state.y.clone());
        let bias = self.bias();
        let mut pred = DMatrix::zeros(self.ny(), t);
        for s in 0..t {
            us.push(u.column(s).into_owned());
            let mut next = bias.clone();
            for lag in 0..=k {
                next += self.y_block(lag) * &ys[ys.len() - 1 - lag];
                next += self.u_block(lag) * &us[us.len() - 1 - lag];
            }
            pred.set_column(s, &next);
            ys.push(next);
        }
        (pred, ())
    }

    fn backprop(&self, _: &LagState, u: &DMatrix<f64>, _: &(), d_pred: &DMatrix<f64>) -> DMatrix<f64> {
        let k = self.delays;
        let t = u.ncols();
        // g[p] is the total adjoint of prediction p (ŷ_{t+p+1}).
        let mut g: Vec<DVector<f64>> = vec![DVector::zeros(self.ny()); t];
        let mut du = DMatrix::zeros(self.nu(), t);
        for p in (0..t).rev() {
            let mut gp = d_pred.column(p).into_owned();
            for lag in 0..=k {
                if let Some(later) = g.get(p + 1 + lag) {
                    gp += self.y_block(lag).transpose() * later;
                }
            }
            g[p] = gp;
        }
        for q in 0..t {
            let mut col = DVector::zeros(self.nu());
            for lag in 0..=k {
                if let Some(gp) = g.get(q + lag) {
                    col += self.u_block(lag).transpose() * gp;
                }
            }
            du.set_column(q, &col);
        }
        du
    }
}
