//! Gradient-trained surrogates: a fully connected lag network and gated recurrent networks,
//! with hand-derived reverse passes, Adam and early-stopped minibatch training.

mod fcn;
mod gated;

pub use fcn::{fit_fcn, FcnConfig, FcnNet, FcnTape};
pub use gated::{fit_gated, gru_cell, lstm_cell, CellKind, GatedConfig, GatedNet, GatedTape, StepCache};

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::io::fmt_f64;
use crate::linalg::{gemm_abt, gemm_atb};
use crate::timing::Stopwatch;
use crate::rng::{self, Rng};
use crate::timeseries::Dataset;

pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Uniform(−1/√fan_in, 1/√fan_in) matrix.
pub(crate) fn init_uniform(r: &mut Rng, rows: usize, cols: usize, fan_in: usize) -> DMatrix<f64> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    DMatrix::from_fn(rows, cols, |_, _| r.gen_range(-bound..bound))
}

pub(crate) fn add_bias(z: &mut DMatrix<f64>, b: &DMatrix<f64>) {
    for mut col in z.column_iter_mut() {
        col += b.column(0);
    }
}

pub(crate) fn add_row_sums(db: &mut DMatrix<f64>, dz: &DMatrix<f64>) {
    for col in dz.column_iter() {
        let mut d = db.column_mut(0);
        d += col;
    }
}

/// `w * x` into a fresh matrix.
pub(crate) fn matmul(w: &DMatrix<f64>, x: &DMatrix<f64>) -> DMatrix<f64> {
    w * x
}

/// `wᵀ * d` without materializing the transpose.
pub(crate) fn matmul_tn(w: &DMatrix<f64>, d: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(w.ncols(), d.ncols());
    gemm_atb(&mut out, w, d, 0.0);
    out
}

/// Two-layer tanh network `W₁ · drop(tanh(W₀ x + b₀)) + b₁` over a batch of columns.
/// `p` holds `[W₀, b₀, W₁, b₁]`.
#[derive(Debug, Clone)]
pub(crate) struct MlpPass {
    pub hidden: DMatrix<f64>,
    pub mask: Option<DMatrix<f64>>,
    pub out: DMatrix<f64>,
}

pub(crate) fn mlp_forward(p: &[DMatrix<f64>], x: &DMatrix<f64>, mask: Option<DMatrix<f64>>) -> MlpPass {
    let mut a = matmul(&p[0], x);
    add_bias(&mut a, &p[1]);
    a.apply(|v| *v = v.tanh());
    let mut out = match &mask {
        Some(m) => matmul(&p[2], &a.component_mul(m)),
        None => matmul(&p[2], &a),
    };
    add_bias(&mut out, &p[3]);
    MlpPass { hidden: a, mask, out }
}

/// Returns `∂L/∂x`, accumulating parameter gradients into `g` (same layout as `p`) when given.
pub(crate) fn mlp_backward(
    p: &[DMatrix<f64>],
    x: &DMatrix<f64>,
    pass: &MlpPass,
    d_out: &DMatrix<f64>,
    g: Option<&mut [DMatrix<f64>]>,
) -> DMatrix<f64> {
    let mut da = matmul_tn(&p[2], d_out);
    if let Some(m) = &pass.mask {
        da.component_mul_assign(m);
    }
    da.zip_apply(&pass.hidden, |d, r| *d *= 1.0 - r * r);
    if let Some(g) = g {
        let dropped = match &pass.mask {
            Some(m) => pass.hidden.component_mul(m),
            None => pass.hidden.clone(),
        };
        gemm_abt(&mut g[2], d_out, &dropped, 1.0);
        add_row_sums(&mut g[3], d_out);
        gemm_abt(&mut g[0], &da, x, 1.0);
        add_row_sums(&mut g[1], &da);
    }
    matmul_tn(&p[0], &da)
}

/// Inverted-dropout mask: entries are 0 with probability `p` and `1/(1−p)` otherwise.
pub(crate) fn dropout_mask(r: &mut Rng, rows: usize, cols: usize, p: f64) -> DMatrix<f64> {
    let keep = 1.0 / (1.0 - p);
    DMatrix::from_fn(rows, cols, |_, _| if r.gen::<f64>() < p { 0.0 } else { keep })
}

pub(crate) fn zeros_like(p: &[DMatrix<f64>]) -> Vec<DMatrix<f64>> {
    p.iter().map(|m| DMatrix::zeros(m.nrows(), m.ncols())).collect()
}

/// A minibatch of training windows. `steps[s]` stacks `[y; u]` for the `s`-th oldest sample of
/// every window (one column per window); the last step is the current time `t` and `target`
/// holds `y_{t+1}`.
#[derive(Debug, Clone)]
pub struct WindowBatch {
    pub steps: Vec<DMatrix<f64>>,
    pub target: DMatrix<f64>,
}

impl WindowBatch {
    /// Windows ending at the given times, each with `lags` past samples.
    pub fn gather(data: &Dataset, lags: usize, times: &[usize]) -> Self {
        let (ny, nu) = (data.n_x(), data.n_u());
        let b = times.len();
        let steps = (0..=lags)
            .map(|s| {
                DMatrix::from_fn(ny + nu, b, |i, c| {
                    let t = times[c] - lags + s;
                    if i < ny {
                        data.states[(i, t)]
                    } else {
                        data.controls[(i - ny, t)]
                    }
                })
            })
            .collect();
        let target = DMatrix::from_fn(ny, b, |i, c| data.states[(i, times[c] + 1)]);
        Self { steps, target }
    }

    pub fn len(&self) -> usize {
        self.target.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A network whose one-step loss can be differentiated with respect to its parameters.
pub trait Trainable: Clone {
    /// Past samples consumed before the current one.
    fn lags(&self) -> usize;
    fn params(&self) -> &[DMatrix<f64>];
    fn params_mut(&mut self) -> &mut [DMatrix<f64>];
    fn dropout(&self) -> f64;
    /// Predictions for a batch. `dropout` supplies the generator for train-mode masks.
    fn predict_batch(&self, batch: &WindowBatch, dropout: Option<&mut Rng>) -> DMatrix<f64>;
    /// Mean over the batch of `‖ŷ − y‖²`, accumulating its gradient into `grads`.
    fn loss_and_grad(&self, batch: &WindowBatch, dropout: Option<&mut Rng>, grads: &mut [DMatrix<f64>]) -> f64;
}

/// Mean squared one-step error over the batch in evaluation mode.
pub fn batch_loss<N: Trainable>(net: &N, batch: &WindowBatch) -> f64 {
    let pred = net.predict_batch(batch, None);
    (pred - &batch.target).norm_squared() / batch.len().max(1) as f64
}

/// Loss and exact gradient for one minibatch, without dropout.
pub fn bptt_gradient<N: Trainable>(net: &N, batch: &WindowBatch) -> (f64, Vec<DMatrix<f64>>) {
    let mut g = zeros_like(net.params());
    let loss = net.loss_and_grad(batch, None, &mut g);
    (loss, g)
}

/// Adam moments with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<DMatrix<f64>>,
    pub v: Vec<DMatrix<f64>>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(params: &[DMatrix<f64>]) -> Self {
        Self {
            m: zeros_like(params),
            v: zeros_like(params),
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

pub fn adam_step(params: &mut [DMatrix<f64>], grads: &[DMatrix<f64>], state: &mut AdamState, lr: f64) {
    state.t += 1;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(state.m.iter_mut().zip(state.v.iter_mut())) {
        for i in 0..p.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + state.eps);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 64,
            max_epochs: 500,
            patience: 10,
            val_fraction: 0.2,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::Config(format!("validation fraction {} outside (0, 1)", self.val_fraction)));
        }
        if self.patience == 0 || self.batch_size == 0 {
            return Err(Error::Config("patience and batch size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {}", self.lr)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TrainStatus {
    /// Validation loss stopped improving for `patience` epochs.
    EarlyStopped,
    MaxEpochs,
    /// A training loss became non-finite; the best earlier checkpoint was kept.
    Diverged { epoch: usize },
    /// No epoch improved on the initial weights, which are returned.
    NoImprovement,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainLog {
    /// Epoch 0 is the untrained network.
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub status: TrainStatus,
}

impl TrainLog {
    pub fn best_val_loss(&self) -> f64 {
        self.epochs[self.best_epoch].val_loss
    }

    /// `epoch,train_loss,val_loss` rows; timing is left out so the log is reproducible.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_loss\n");
        for e in &self.epochs {
            s.push_str(&format!("{},{},{}\n", e.epoch, fmt_f64(e.train_loss), fmt_f64(e.val_loss)));
        }
        s
    }
}

fn mean_loss<N: Trainable>(net: &N, data: &Dataset, times: &[usize]) -> f64 {
    let mut total = 0.0;
    for chunk in times.chunks(256) {
        let b = WindowBatch::gather(data, net.lags(), chunk);
        total += batch_loss(net, &b) * chunk.len() as f64;
    }
    total / times.len() as f64
}

/// Minibatch Adam on one-step windows with a contiguous validation tail and early stopping.
/// Returns the best-validation checkpoint.
pub fn train_bptt<N: Trainable>(mut net: N, data: &Dataset, cfg: &TrainConfig) -> Result<(N, TrainLog)> {
    cfg.validate()?;
    let lags = net.lags();
    let n = data.len();
    if n <= lags + 1 {
        return Err(Error::Size(format!("{n} samples cannot support {lags} lags")));
    }
    let times: Vec<usize> = (lags..n).collect();
    let n_val = ((times.len() as f64 * cfg.val_fraction).round() as usize).clamp(1, times.len() - 1);
    let (train_t, val_t) = times.split_at(times.len() - n_val);
    let mut order = train_t.to_vec();
    let mut shuffle = rng::seeded(rng::derive_seed(cfg.seed, 1));
    let mut drop_rng = rng::seeded(rng::derive_seed(cfg.seed, 2));
    let mut adam = AdamState::new(net.params());
    let mut grads = zeros_like(net.params());

    let start = Stopwatch::start();
    let init_val = mean_loss(&net, data, val_t);
    let mut epochs = vec![EpochRecord {
        epoch: 0,
        train_loss: mean_loss(&net, data, train_t),
        val_loss: init_val,
        seconds: start.seconds(),
    }];
    let mut best = (net.clone(), 0usize, if init_val.is_finite() { init_val } else { f64::INFINITY });
    let mut status = TrainStatus::MaxEpochs;
    let mut stale = 0;
    for epoch in 1..=cfg.max_epochs {
        let t0 = Stopwatch::start();
        order.shuffle(&mut shuffle);
        let mut sum = 0.0;
        let mut finite = true;
        for chunk in order.chunks(cfg.batch_size) {
            let batch = WindowBatch::gather(data, lags, chunk);
            grads.iter_mut().for_each(|g| g.fill(0.0));
            let rng = if net.dropout() > 0.0 { Some(&mut drop_rng) } else { None };
            let loss = net.loss_and_grad(&batch, rng, &mut grads);
            if !loss.is_finite() || grads.iter().any(|g| !g.iter().all(|v| v.is_finite())) {
                finite = false;
                break;
            }
            sum += loss * chunk.len() as f64;
            adam_step(net.params_mut(), &grads, &mut adam, cfg.lr);
        }
        if !finite {
            log::warn!("non-finite training loss in epoch {epoch}; keeping epoch {}", best.1);
            status = TrainStatus::Diverged { epoch };
            break;
        }
        let val = mean_loss(&net, data, val_t);
        epochs.push(EpochRecord {
            epoch,
            train_loss: sum / order.len() as f64,
            val_loss: val,
            seconds: t0.seconds(),
        });
        log::debug!("epoch {epoch}: train {:.3e} val {val:.3e}", sum / order.len() as f64);
        if val < best.2 {
            best = (net.clone(), epoch, val);
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                status = TrainStatus::EarlyStopped;
                break;
            }
        }
    }
    if best.1 == 0 && !matches!(status, TrainStatus::Diverged { .. }) {
        log::warn!("training never improved on the initial weights");
        status = TrainStatus::NoImprovement;
    }
    let log = TrainLog { epochs, best_epoch: best.1, status };
    Ok((best.0, log))
}

/// Seconds for one training epoch of `net` on `data`, without updating the caller's network.
pub fn time_one_epoch<N: Trainable>(net: &N, data: &Dataset, cfg: &TrainConfig) -> Result<f64> {
    let once = TrainConfig { max_epochs: 1, ..*cfg };
    let (_, log) = train_bptt(net.clone(), data, &once)?;
    log.epochs
        .get(1)
        .map(|e| e.seconds)
        .ok_or_else(|| Error::NonFiniteLoss { epoch: 1 })
}

/// Gradient of the batch loss by central differences, for testing reverse passes.
pub fn finite_difference_grad<N: Trainable>(net: &N, batch: &WindowBatch, h: f64) -> Vec<DMatrix<f64>> {
    let mut probe = net.clone();
    let mut out = zeros_like(net.params());
    for k in 0..out.len() {
        for i in 0..out[k].len() {
            let orig = probe.params()[k][i];
            probe.params_mut()[k][i] = orig + h;
            let up = batch_loss(&probe, batch);
            probe.params_mut()[k][i] = orig - h;
            let dn = batch_loss(&probe, batch);
            probe.params_mut()[k][i] = orig;
            out[k][i] = (up - dn) / (2.0 * h);
        }
    }
    out
}

pub(crate) fn column(v: &DVector<f64>) -> DMatrix<f64> {
    DMatrix::from_column_slice(v.len(), 1, v.as_slice())
}

pub(crate) fn check_window(n_in: usize, batch: &WindowBatch, lags: usize) -> Result<()> {
    if batch.steps.len() != lags + 1 || batch.steps.iter().any(|s| s.nrows() != n_in) {
        return Err(dim_err("batch window does not match the network"));
    }
    Ok(())
}
