//! Two-layer tanh network on a fixed lag vector of measurements and controls.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{
    check_window, dropout_mask, init_uniform, mlp_backward, mlp_forward, train_bptt, MlpPass, TrainConfig, TrainLog,
    Trainable, WindowBatch,
};
use crate::error::{dim_err, Error, Result};
use crate::io::Container;
use crate::rng::{self, Rng};
use crate::surrogate::{LagState, Surrogate};
use crate::timeseries::{Scalers, TrainingSet};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FcnConfig {
    pub width: usize,
    pub delays: usize,
    pub dropout: f64,
    pub seed: u64,
}

impl Default for FcnConfig {
    fn default() -> Self {
        Self { width: 64, delays: 5, dropout: 0.0, seed: 0 }
    }
}

impl FcnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 {
            return Err(Error::Config("network width must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// `ŷ_{t+1} = W₁ tanh(W₀ φ_t + b₀) + b₁` with `φ_t = [y_t; …; y_{t−k}; u_t; …; u_{t−k}]`.
/// Parameters are `[W₀, b₀, W₁, b₁]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FcnNet {
    pub delays: usize,
    pub dropout: f64,
    pub params: Vec<DMatrix<f64>>,
    pub scalers: Scalers,
    n_y: usize,
    n_u: usize,
}

impl FcnNet {
    pub fn new(cfg: &FcnConfig, n_y: usize, n_u: usize, scalers: Scalers) -> Result<Self> {
        cfg.validate()?;
        let n_in = (cfg.delays + 1) * (n_y + n_u);
        let mut r = rng::seeded(cfg.seed);
        let params = vec![
            init_uniform(&mut r, cfg.width, n_in, n_in),
            init_uniform(&mut r, cfg.width, 1, n_in),
            init_uniform(&mut r, n_y, cfg.width, cfg.width),
            init_uniform(&mut r, n_y, 1, cfg.width),
        ];
        Ok(Self { delays: cfg.delays, dropout: cfg.dropout, params, scalers, n_y, n_u })
    }

    pub fn width(&self) -> usize {
        self.params[0].nrows()
    }

    /// Builds `φ` from window steps `[y; u]`, oldest first.
    fn features(&self, steps: &[DMatrix<f64>]) -> DMatrix<f64> {
        let (ny, nu, k) = (self.n_y, self.n_u, self.delays);
        let b = steps[0].ncols();
        let mut phi = DMatrix::zeros((k + 1) * (ny + nu), b);
        for lag in 0..=k {
            let s = &steps[k - lag];
            phi.view_mut((lag * ny, 0), (ny, b)).copy_from(&s.rows(0, ny));
            phi.view_mut(((k + 1) * ny + lag * nu, 0), (nu, b)).copy_from(&s.rows(ny, nu));
        }
        phi
    }

    /// One prediction from newest-first lag vectors `[y_t; …; y_{t−k}]` and `[u_t; …; u_{t−k}]`.
    pub fn forward(&self, y_lags: &DVector<f64>, u_lags: &DVector<f64>) -> Result<DVector<f64>> {
        let k1 = self.delays + 1;
        if y_lags.len() != k1 * self.n_y || u_lags.len() != k1 * self.n_u {
            return Err(dim_err(format!("lag vectors need {} and {} entries", k1 * self.n_y, k1 * self.n_u)));
        }
        let phi = DMatrix::from_iterator(y_lags.len() + u_lags.len(), 1, y_lags.iter().chain(u_lags.iter()).copied());
        Ok(mlp_forward(&self.params, &phi, None).out.column(0).into_owned())
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::default();
        c.set("family", "fcn");
        c.set("delays", self.delays);
        c.set_f64("dropout", self.dropout);
        c.set("n_y", self.n_y);
        c.set("n_u", self.n_u);
        for (name, m) in PARAM_NAMES.iter().zip(&self.params) {
            c.put(name, m.clone());
        }
        self.scalers.store(&mut c);
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        if c.get("family")? != "fcn" {
            return Err(Error::Parse("container does not hold a fully connected net".into()));
        }
        let net = Self {
            delays: c.get_usize("delays")?,
            dropout: c.get_f64("dropout")?,
            params: PARAM_NAMES.iter().map(|n| c.dense(n).cloned()).collect::<Result<_>>()?,
            scalers: Scalers::restore(c)?,
            n_y: c.get_usize("n_y")?,
            n_u: c.get_usize("n_u")?,
        };
        let w = net.params[0].nrows();
        let n_in = (net.delays + 1) * (net.n_y + net.n_u);
        let shapes = [(w, n_in), (w, 1), (net.n_y, w), (net.n_y, 1)];
        if net.params.iter().zip(shapes).any(|(m, s)| m.shape() != s) {
            return Err(Error::Parse("network parameter shapes disagree with header".into()));
        }
        Ok(net)
    }
}

const PARAM_NAMES: [&str; 4] = ["w0", "b0", "w1", "b1"];

impl Trainable for FcnNet {
    fn lags(&self) -> usize {
        self.delays
    }

    fn params(&self) -> &[DMatrix<f64>] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [DMatrix<f64>] {
        &mut self.params
    }

    fn dropout(&self) -> f64 {
        self.dropout
    }

    fn predict_batch(&self, batch: &WindowBatch, dropout: Option<&mut Rng>) -> DMatrix<f64> {
        debug_assert!(check_window(self.n_y + self.n_u, batch, self.delays).is_ok());
        let phi = self.features(&batch.steps);
        let mask = dropout.map(|r| dropout_mask(r, self.width(), phi.ncols(), self.dropout));
        mlp_forward(&self.params, &phi, mask).out
    }

    fn loss_and_grad(&self, batch: &WindowBatch, dropout: Option<&mut Rng>, grads: &mut [DMatrix<f64>]) -> f64 {
        let b = batch.len() as f64;
        let phi = self.features(&batch.steps);
        let mask = dropout.map(|r| dropout_mask(r, self.width(), phi.ncols(), self.dropout));
        let pass = mlp_forward(&self.params, &phi, mask);
        let err = &pass.out - &batch.target;
        let loss = err.norm_squared() / b;
        mlp_backward(&self.params, &phi, &pass, &(err * (2.0 / b)), Some(grads));
        loss
    }
}

pub fn fit_fcn(train: &TrainingSet, cfg: &FcnConfig, tcfg: &TrainConfig) -> Result<(FcnNet, TrainLog)> {
    let d = &train.scaled;
    let net = FcnNet::new(cfg, d.n_x(), d.n_u(), train.scalers.clone())?;
    train_bptt(net, d, tcfg)
}

/// Feature vector and layer values of each forecast step.
#[derive(Debug, Clone)]
pub struct FcnTape {
    steps: Vec<(DMatrix<f64>, MlpPass)>,
}

impl Surrogate for FcnNet {
    type State = LagState;
    type Tape = FcnTape;

    fn n_y(&self) -> usize {
        self.n_y
    }

    fn n_u(&self) -> usize {
        self.n_u
    }

    fn history_len(&self) -> usize {
        self.delays
    }

    fn scalers(&self) -> &Scalers {
        &self.scalers
    }

    fn param_count(&self) -> usize {
        self.params.iter().map(DMatrix::len).sum()
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

    fn forecast_taped(&self, state: &LagState, u: &DMatrix<f64>) -> (DMatrix<f64>, FcnTape) {
        let (ny, nu) = (self.n_y, self.n_u);
        let stack = |y: &DVector<f64>, u: nalgebra::DVectorView<'_, f64>| {
            DMatrix::from_fn(ny + nu, 1, |i, _| if i < ny { y[i] } else { u[i - ny] })
        };
        let mut window: Vec<DMatrix<f64>> = state.window(nu).iter().map(|(y, u)| stack(y, u.column(0))).collect();
        let mut y = state.y.clone();
        let mut pred = DMatrix::zeros(ny, u.ncols());
        let mut steps = Vec::with_capacity(u.ncols());
        for s in 0..u.ncols() {
            window.push(stack(&y, u.column(s)));
            let phi = self.features(&window[window.len() - self.delays - 1..]);
            let pass = mlp_forward(&self.params, &phi, None);
            y = pass.out.column(0).into_owned();
            pred.set_column(s, &y);
            steps.push((phi, pass));
        }
        (pred, FcnTape { steps })
    }

    fn backprop(&self, _: &LagState, u: &DMatrix<f64>, tape: &FcnTape, d_pred: &DMatrix<f64>) -> DMatrix<f64> {
        let (ny, nu, k) = (self.n_y, self.n_u, self.delays);
        let t = u.ncols();
        // acc[q] collects the adjoint of prediction q (ŷ_{t+q+1}) from later steps.
        let mut acc = DMatrix::zeros(ny, t);
        let mut du = DMatrix::zeros(nu, t);
        for p in (0..t).rev() {
            let d_out = d_pred.column(p) + acc.column(p);
            let (phi, pass) = &tape.steps[p];
            let d_out = DMatrix::from_column_slice(ny, 1, d_out.as_slice());
            let dphi = mlp_backward(&self.params, phi, pass, &d_out, None);
            for lag in 0..=k {
                // Measurement y_{t+p−lag} is prediction p−lag−1 when that index exists.
                if let Some(q) = p.checked_sub(lag + 1) {
                    let mut col = acc.column_mut(q);
                    col += dphi.rows(lag * ny, ny);
                }
                if let Some(q) = p.checked_sub(lag) {
                    let mut col = du.column_mut(q);
                    col += dphi.rows((k + 1) * ny + lag * nu, nu);
                }
            }
        }
        du
    }
}
