//! LSTM and GRU networks with a two-layer readout, trained by truncated BPTT over a fixed lag
//! window starting from zero hidden state.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{
    add_bias, add_row_sums, check_window, column, dropout_mask, init_uniform, matmul, matmul_tn, mlp_backward,
    mlp_forward, sigmoid, train_bptt, MlpPass, TrainConfig, TrainLog, Trainable, WindowBatch,
};
use crate::error::{dim_err, Error, Result};
use crate::io::Container;
use crate::linalg::gemm_abt;
use crate::rng::{self, Rng};
use crate::surrogate::{LagState, Surrogate};
use crate::timeseries::{Scalers, TrainingSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellKind {
    Lstm,
    Gru,
}

impl CellKind {
    pub fn gates(self) -> usize {
        match self {
            CellKind::Lstm => 4,
            CellKind::Gru => 3,
        }
    }

    pub fn id(self) -> &'static str {
        match self {
            CellKind::Lstm => "lstm",
            CellKind::Gru => "gru",
        }
    }
}

impl fmt::Display for CellKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for CellKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lstm" => Ok(CellKind::Lstm),
            "gru" => Ok(CellKind::Gru),
            _ => Err(Error::Config(format!("unknown cell kind {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GatedConfig {
    pub kind: CellKind,
    pub hidden: usize,
    /// Past samples fed through the cell before each prediction.
    pub lags: usize,
    /// Width of the readout's hidden layer; 0 means the cell width.
    pub readout_width: usize,
    pub dropout: f64,
    pub seed: u64,
}

impl Default for GatedConfig {
    fn default() -> Self {
        Self { kind: CellKind::Lstm, hidden: 128, lags: 30, readout_width: 0, dropout: 0.0, seed: 0 }
    }
}

impl GatedConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 {
            return Err(Error::Config("hidden size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    fn readout(&self) -> usize {
        if self.readout_width == 0 {
            self.hidden
        } else {
            self.readout_width
        }
    }
}

/// Parameters are `[W_i, W_h, b_i, b_h, R₀, c₀, R₁, c₁]`. Gate rows are stacked in the order
/// `i, f, g, o` for the LSTM and `r, z, n` for the GRU.
#[derive(Debug, Clone, PartialEq)]
pub struct GatedNet {
    pub kind: CellKind,
    pub hidden: usize,
    pub lags: usize,
    pub dropout: f64,
    pub params: Vec<DMatrix<f64>>,
    pub scalers: Scalers,
    n_y: usize,
    n_u: usize,
}

/// Values of one cell step kept for the reverse pass, one column per batch entry.
#[derive(Debug, Clone)]
pub struct StepCache {
    x: DMatrix<f64>,
    h_prev: DMatrix<f64>,
    c_prev: DMatrix<f64>,
    /// Activated gates.
    gates: DMatrix<f64>,
    /// `tanh(c)` for the LSTM, the hidden contribution to the new gate for the GRU.
    aux: DMatrix<f64>,
}

impl GatedNet {
    pub fn new(cfg: &GatedConfig, n_y: usize, n_u: usize, scalers: Scalers) -> Result<Self> {
        cfg.validate()?;
        let (n, g, n_in, w) = (cfg.hidden, cfg.kind.gates(), n_y + n_u, cfg.readout());
        let mut r = rng::seeded(cfg.seed);
        let params = vec![
            init_uniform(&mut r, g * n, n_in, n_in),
            init_uniform(&mut r, g * n, n, n),
            init_uniform(&mut r, g * n, 1, n_in),
            init_uniform(&mut r, g * n, 1, n),
            init_uniform(&mut r, w, n, n),
            init_uniform(&mut r, w, 1, n),
            init_uniform(&mut r, n_y, w, w),
            init_uniform(&mut r, n_y, 1, w),
        ];
        Ok(Self { kind: cfg.kind, hidden: n, lags: cfg.lags, dropout: cfg.dropout, params, scalers, n_y, n_u })
    }

    fn readout_params(&self) -> &[DMatrix<f64>] {
        &self.params[4..8]
    }

    pub fn readout_width(&self) -> usize {
        self.params[4].nrows()
    }

    /// One cell step on a batch of inputs `x` with previous states `h` and `c` (`c` is empty for
    /// the GRU).
    pub fn cell_forward(&self, x: &DMatrix<f64>, h: &DMatrix<f64>, c: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>, StepCache) {
        let n = self.hidden;
        let b = x.ncols();
        let p = &self.params;
        let mut zi = matmul(&p[0], x);
        add_bias(&mut zi, &p[2]);
        let mut zh = matmul(&p[1], h);
        add_bias(&mut zh, &p[3]);
        match self.kind {
            CellKind::Lstm => {
                zi += zh;
                let gates = DMatrix::from_fn(4 * n, b, |r, j| {
                    if r / n == 2 {
                        zi[(r, j)].tanh()
                    } else {
                        sigmoid(zi[(r, j)])
                    }
                });
                let c_new = DMatrix::from_fn(n, b, |r, j| gates[(n + r, j)] * c[(r, j)] + gates[(r, j)] * gates[(2 * n + r, j)]);
                let tc = c_new.map(f64::tanh);
                let h_new = DMatrix::from_fn(n, b, |r, j| gates[(3 * n + r, j)] * tc[(r, j)]);
                let cache = StepCache { x: x.clone(), h_prev: h.clone(), c_prev: c.clone(), gates, aux: tc };
                (h_new, c_new, cache)
            }
            CellKind::Gru => {
                let mut gates = DMatrix::zeros(3 * n, b);
                for j in 0..b {
                    for r in 0..n {
                        let rg = sigmoid(zi[(r, j)] + zh[(r, j)]);
                        gates[(r, j)] = rg;
                        gates[(n + r, j)] = sigmoid(zi[(n + r, j)] + zh[(n + r, j)]);
                        gates[(2 * n + r, j)] = (zi[(2 * n + r, j)] + rg * zh[(2 * n + r, j)]).tanh();
                    }
                }
                let h_new = DMatrix::from_fn(n, b, |r, j| {
                    let z = gates[(n + r, j)];
                    (1.0 - z) * gates[(2 * n + r, j)] + z * h[(r, j)]
                });
                let aux = zh.rows(2 * n, n).into_owned();
                let cache = StepCache { x: x.clone(), h_prev: h.clone(), c_prev: DMatrix::zeros(0, b), gates, aux };
                (h_new, DMatrix::zeros(0, b), cache)
            }
        }
    }

    /// Reverse of one cell step. Returns `(∂x, ∂h_prev, ∂c_prev)` and accumulates the gate
    /// parameter gradients `[W_i, W_h, b_i, b_h]` into `g` when given.
    pub fn cell_backward(
        &self,
        cache: &StepCache,
        dh: &DMatrix<f64>,
        dc: &DMatrix<f64>,
        g: Option<&mut [DMatrix<f64>]>,
    ) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
        let n = self.hidden;
        let b = dh.ncols();
        let gt = &cache.gates;
        let p = &self.params;
        match self.kind {
            CellKind::Lstm => {
                let mut dz = DMatrix::zeros(4 * n, b);
                let mut dc_prev = DMatrix::zeros(n, b);
                for j in 0..b {
                    for r in 0..n {
                        let (i, f, gg, o) = (gt[(r, j)], gt[(n + r, j)], gt[(2 * n + r, j)], gt[(3 * n + r, j)]);
                        let tc = cache.aux[(r, j)];
                        let dct = dc[(r, j)] + dh[(r, j)] * o * (1.0 - tc * tc);
                        dz[(r, j)] = dct * gg * i * (1.0 - i);
                        dz[(n + r, j)] = dct * cache.c_prev[(r, j)] * f * (1.0 - f);
                        dz[(2 * n + r, j)] = dct * i * (1.0 - gg * gg);
                        dz[(3 * n + r, j)] = dh[(r, j)] * tc * o * (1.0 - o);
                        dc_prev[(r, j)] = dct * f;
                    }
                }
                if let Some(g) = g {
                    gemm_abt(&mut g[0], &dz, &cache.x, 1.0);
                    gemm_abt(&mut g[1], &dz, &cache.h_prev, 1.0);
                    add_row_sums(&mut g[2], &dz);
                    add_row_sums(&mut g[3], &dz);
                }
                (matmul_tn(&p[0], &dz), matmul_tn(&p[1], &dz), dc_prev)
            }
            CellKind::Gru => {
                let mut dzi = DMatrix::zeros(3 * n, b);
                let mut dzh = DMatrix::zeros(3 * n, b);
                let mut direct = DMatrix::zeros(n, b);
                for j in 0..b {
                    for r in 0..n {
                        let (rg, z, nn) = (gt[(r, j)], gt[(n + r, j)], gt[(2 * n + r, j)]);
                        let d = dh[(r, j)];
                        let dan = d * (1.0 - z) * (1.0 - nn * nn);
                        let dar = dan * cache.aux[(r, j)] * rg * (1.0 - rg);
                        let daz = d * (cache.h_prev[(r, j)] - nn) * z * (1.0 - z);
                        dzi[(r, j)] = dar;
                        dzi[(n + r, j)] = daz;
                        dzi[(2 * n + r, j)] = dan;
                        dzh[(r, j)] = dar;
                        dzh[(n + r, j)] = daz;
                        dzh[(2 * n + r, j)] = dan * rg;
                        direct[(r, j)] = d * z;
                    }
                }
                if let Some(g) = g {
                    gemm_abt(&mut g[0], &dzi, &cache.x, 1.0);
                    gemm_abt(&mut g[1], &dzh, &cache.h_prev, 1.0);
                    add_row_sums(&mut g[2], &dzi);
                    add_row_sums(&mut g[3], &dzh);
                }
                (matmul_tn(&p[0], &dzi), matmul_tn(&p[1], &dzh) + direct, DMatrix::zeros(0, b))
            }
        }
    }

    fn zero_state(&self, b: usize) -> (DMatrix<f64>, DMatrix<f64>) {
        let nc = if self.kind == CellKind::Lstm { self.hidden } else { 0 };
        (DMatrix::zeros(self.hidden, b), DMatrix::zeros(nc, b))
    }

    /// Runs the window from zero state and returns the final hidden state with per-step caches.
    fn run_window(&self, steps: &[DMatrix<f64>]) -> (DMatrix<f64>, Vec<StepCache>) {
        let (mut h, mut c) = self.zero_state(steps.first().map_or(1, |s| s.ncols()));
        let mut caches = Vec::with_capacity(steps.len());
        for x in steps {
            let (h2, c2, cache) = self.cell_forward(x, &h, &c);
            h = h2;
            c = c2;
            caches.push(cache);
        }
        (h, caches)
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::default();
        c.set("family", self.kind.id());
        c.set("hidden", self.hidden);
        c.set("lags", self.lags);
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
        let kind: CellKind = c.get("family")?.parse().map_err(|_| Error::Parse("container does not hold a gated net".into()))?;
        let params: Vec<DMatrix<f64>> = PARAM_NAMES.iter().map(|n| c.dense(n).cloned()).collect::<Result<_>>()?;
        let net = Self {
            kind,
            hidden: c.get_usize("hidden")?,
            lags: c.get_usize("lags")?,
            dropout: c.get_f64("dropout")?,
            params,
            scalers: Scalers::restore(c)?,
            n_y: c.get_usize("n_y")?,
            n_u: c.get_usize("n_u")?,
        };
        let (n, g, w) = (net.hidden, kind.gates(), net.params[4].nrows());
        let shapes = [
            (g * n, net.n_y + net.n_u),
            (g * n, n),
            (g * n, 1),
            (g * n, 1),
            (w, n),
            (w, 1),
            (net.n_y, w),
            (net.n_y, 1),
        ];
        if net.params.iter().zip(shapes).any(|(m, s)| m.shape() != s) {
            return Err(Error::Parse("gated net parameter shapes disagree with header".into()));
        }
        Ok(net)
    }
}

const PARAM_NAMES: [&str; 8] = ["w_input", "w_hidden", "b_input", "b_hidden", "r0", "c0", "r1", "c1"];

/// One LSTM step on single vectors, returning `(h, c)`.
pub fn lstm_cell(net: &GatedNet, x: &DVector<f64>, h: &DVector<f64>, c: &DVector<f64>) -> Result<(DVector<f64>, DVector<f64>)> {
    if net.kind != CellKind::Lstm {
        return Err(Error::Usage("not an LSTM".into()));
    }
    check_sizes(net, x, h)?;
    let (h2, c2, _) = net.cell_forward(&column(x), &column(h), &column(c));
    Ok((h2.column(0).into_owned(), c2.column(0).into_owned()))
}

pub fn gru_cell(net: &GatedNet, x: &DVector<f64>, h: &DVector<f64>) -> Result<DVector<f64>> {
    if net.kind != CellKind::Gru {
        return Err(Error::Usage("not a GRU".into()));
    }
    check_sizes(net, x, h)?;
    let (h2, _, _) = net.cell_forward(&column(x), &column(h), &DMatrix::zeros(0, 1));
    Ok(h2.column(0).into_owned())
}

fn check_sizes(net: &GatedNet, x: &DVector<f64>, h: &DVector<f64>) -> Result<()> {
    if x.len() != net.n_y + net.n_u || h.len() != net.hidden {
        return Err(dim_err("cell input or state has the wrong length"));
    }
    Ok(())
}

impl Trainable for GatedNet {
    fn lags(&self) -> usize {
        self.lags
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
        debug_assert!(check_window(self.n_y + self.n_u, batch, self.lags).is_ok());
        let (h, _) = self.run_window(&batch.steps);
        let mask = dropout.map(|r| dropout_mask(r, self.readout_width(), h.ncols(), self.dropout));
        mlp_forward(self.readout_params(), &h, mask).out
    }

    fn loss_and_grad(&self, batch: &WindowBatch, dropout: Option<&mut Rng>, grads: &mut [DMatrix<f64>]) -> f64 {
        let b = batch.len() as f64;
        let (h, caches) = self.run_window(&batch.steps);
        let mask = dropout.map(|r| dropout_mask(r, self.readout_width(), h.ncols(), self.dropout));
        let pass = mlp_forward(self.readout_params(), &h, mask);
        let err = &pass.out - &batch.target;
        let loss = err.norm_squared() / b;
        let d_out = err * (2.0 / b);
        let (cell_g, read_g) = grads.split_at_mut(4);
        let mut dh = mlp_backward(self.readout_params(), &h, &pass, &d_out, Some(read_g));
        let (_, mut dc) = self.zero_state(h.ncols());
        for cache in caches.iter().rev() {
            let (_, dh_prev, dc_prev) = self.cell_backward(cache, &dh, &dc, Some(&mut *cell_g));
            dh = dh_prev;
            dc = dc_prev;
        }
        loss
    }
}

/// Trains a gated net on scaled data, returning the best-validation checkpoint and its log.
pub fn fit_gated(train: &TrainingSet, cfg: &GatedConfig, tcfg: &TrainConfig) -> Result<(GatedNet, TrainLog)> {
    let d = &train.scaled;
    let net = GatedNet::new(cfg, d.n_x(), d.n_u(), train.scalers.clone())?;
    train_bptt(net, d, tcfg)
}

/// Per-prediction windows of a rollout, kept for the reverse pass.
#[derive(Debug, Clone)]
pub struct GatedTape {
    windows: Vec<(Vec<StepCache>, DMatrix<f64>, MlpPass)>,
}

impl GatedNet {
    fn stack(&self, y: &DVector<f64>, u: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(self.n_y + self.n_u, 1, |i, _| if i < self.n_y { y[i] } else { u[i - self.n_y] })
    }
}

impl Surrogate for GatedNet {
    type State = LagState;
    type Tape = GatedTape;

    fn n_y(&self) -> usize {
        self.n_y
    }

    fn n_u(&self) -> usize {
        self.n_u
    }

    fn history_len(&self) -> usize {
        self.lags
    }

    fn scalers(&self) -> &Scalers {
        &self.scalers
    }

    fn param_count(&self) -> usize {
        self.params.iter().map(DMatrix::len).sum()
    }

    fn start(&self, y0: &DVector<f64>) -> LagState {
        LagState::new(y0, self.lags)
    }

    fn advance(&self, state: &mut LagState, u: &DVector<f64>, y_next: &DVector<f64>) {
        state.push(u, y_next);
    }

    fn current(&self, state: &LagState) -> DVector<f64> {
        state.y.clone()
    }

    /// Each prediction runs the cell from zero state over the latest `lags + 1` input pairs,
    /// with earlier predictions standing in for measurements, exactly as in training.
    fn forecast_taped(&self, state: &LagState, u: &DMatrix<f64>) -> (DMatrix<f64>, GatedTape) {
        let t = u.ncols();
        let mut inputs: Vec<DMatrix<f64>> = state.window(self.n_u).iter().map(|(y, u)| self.stack(y, u)).collect();
        let mut pred = DMatrix::zeros(self.n_y, t);
        let mut windows = Vec::with_capacity(t);
        let mut y = state.y.clone();
        for s in 0..t {
            inputs.push(self.stack(&y, &u.column(s).into_owned()));
            let (h, caches) = self.run_window(&inputs[s..]);
            let pass = mlp_forward(self.readout_params(), &h, None);
            y = pass.out.column(0).into_owned();
            pred.set_column(s, &y);
            windows.push((caches, h, pass));
        }
        (pred, GatedTape { windows })
    }

    fn backprop(&self, _: &LagState, u: &DMatrix<f64>, tape: &GatedTape, d_pred: &DMatrix<f64>) -> DMatrix<f64> {
        let (t, l) = (u.ncols(), self.lags);
        // Gradient with respect to every input pair; pair `l + s` holds `(ŷ_s, u_s)`.
        let mut dx = DMatrix::zeros(self.n_y + self.n_u, l + t);
        for s in (0..t).rev() {
            let (caches, h, pass) = &tape.windows[s];
            let mut d_out = d_pred.column(s).into_owned();
            if s + 1 < t {
                d_out += dx.column(l + s + 1).rows(0, self.n_y);
            }
            let mut dh = mlp_backward(self.readout_params(), h, pass, &column(&d_out), None);
            let (_, mut dc) = self.zero_state(1);
            for (k, cache) in caches.iter().enumerate().rev() {
                let (dxk, dh_prev, dc_prev) = self.cell_backward(cache, &dh, &dc, None);
                let mut col = dx.column_mut(s + k);
                col += dxk.column(0);
                dh = dh_prev;
                dc = dc_prev;
            }
        }
        dx.view((self.n_y, l), (self.n_u, t)).into_owned()
    }
}
