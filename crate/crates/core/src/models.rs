//! One type for every surrogate family: specification, fitting, persistence and dispatch.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::esn::{fit_esn, Esn, EsnParams, EsnState, EsnTape};
use crate::io::Container;
use crate::linid::{fit_dmdc, LinearModel};
use crate::nets::{fit_fcn, fit_gated, FcnConfig, FcnNet, FcnTape, GatedConfig, GatedNet, GatedTape, TrainConfig, TrainLog};
use crate::rng::derive_seed;
use crate::surrogate::{LagState, Surrogate};
use crate::timeseries::{Scalers, TrainingSet};
use crate::timing::Stopwatch;

/// Hyperparameters of one model, tagged by family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase")]
pub enum ModelSpec {
    Dmdc { delays: usize, beta: f64 },
    Esn(EsnParams),
    Fcn { net: FcnConfig, train: TrainConfig },
    Gated { net: GatedConfig, train: TrainConfig },
}

impl ModelSpec {
    pub fn family(&self) -> &'static str {
        match self {
            ModelSpec::Dmdc { .. } => "dmdc",
            ModelSpec::Esn(_) => "esn",
            ModelSpec::Fcn { .. } => "fcn",
            ModelSpec::Gated { net, .. } => net.kind.id(),
        }
    }

    /// The same configuration with every random stream reseeded from `seed`.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut s = self.clone();
        match &mut s {
            ModelSpec::Dmdc { .. } => {}
            ModelSpec::Esn(p) => p.seed = seed,
            ModelSpec::Fcn { net, train } => {
                net.seed = derive_seed(seed, 0);
                train.seed = derive_seed(seed, 1);
            }
            ModelSpec::Gated { net, train } => {
                net.seed = derive_seed(seed, 0);
                train.seed = derive_seed(seed, 1);
            }
        }
        s
    }

    /// Names accepted by [`ModelSpec::set`].
    pub fn axis_names(&self) -> &'static [&'static str] {
        match self {
            ModelSpec::Dmdc { .. } => &["delays", "beta"],
            ModelSpec::Esn(_) => &["n_r", "density", "spectral_radius", "input_scale", "bias_scale", "leak", "beta", "n_spin"],
            ModelSpec::Fcn { .. } => &["width", "delays", "dropout", "lr", "batch_size", "max_epochs", "patience"],
            ModelSpec::Gated { .. } => {
                &["hidden", "lags", "readout_width", "dropout", "lr", "batch_size", "max_epochs", "patience"]
            }
        }
    }

    /// Sets a named hyperparameter. Integer axes reject fractional values.
    pub fn set(&mut self, name: &str, v: f64) -> Result<()> {
        let int = || -> Result<usize> {
            if v >= 0.0 && v.fract() == 0.0 {
                Ok(v as usize)
            } else {
                Err(Error::Config(format!("{name} must be a non-negative integer, got {v}")))
            }
        };
        let family = self.family();
        let unknown = || Error::Config(format!("unknown hyperparameter {name:?} for {family}"));
        let train_axis = |t: &mut TrainConfig| -> Result<bool> {
            match name {
                "lr" => t.lr = v,
                "batch_size" => t.batch_size = int()?,
                "max_epochs" => t.max_epochs = int()?,
                "patience" => t.patience = int()?,
                _ => return Ok(false),
            }
            Ok(true)
        };
        match self {
            ModelSpec::Dmdc { delays, beta } => match name {
                "delays" => *delays = int()?,
                "beta" => *beta = v,
                _ => return Err(unknown()),
            },
            ModelSpec::Esn(p) => match name {
                "n_r" => p.n_r = int()?,
                "density" => p.density = v,
                "spectral_radius" => p.spectral_radius = v,
                "input_scale" => p.input_scale = v,
                "bias_scale" => p.bias_scale = v,
                "leak" => p.leak = v,
                "beta" => p.beta = v,
                "n_spin" => p.n_spin = int()?,
                _ => return Err(unknown()),
            },
            ModelSpec::Fcn { net, train } => match name {
                "width" => net.width = int()?,
                "delays" => net.delays = int()?,
                "dropout" => net.dropout = v,
                _ if train_axis(train)? => {}
                _ => return Err(unknown()),
            },
            ModelSpec::Gated { net, train } => match name {
                "hidden" => net.hidden = int()?,
                "lags" => net.lags = int()?,
                "readout_width" => net.readout_width = int()?,
                "dropout" => net.dropout = v,
                _ if train_axis(train)? => {}
                _ => return Err(unknown()),
            },
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum AnyModel {
    Dmdc(LinearModel),
    Esn(Esn),
    Fcn(FcnNet),
    Gated(GatedNet),
}

/// Outcome details of a fit.
#[derive(Debug, Clone, PartialEq)]
pub struct FitReport {
    pub seconds: f64,
    /// Present for gradient-trained families.
    pub log: Option<TrainLog>,
}

/// Fits the specified model on training data that is already noise-corrupted and scaled.
pub fn fit_model(spec: &ModelSpec, train: &TrainingSet) -> Result<(AnyModel, FitReport)> {
    let t0 = Stopwatch::start();
    let (model, log) = match spec {
        ModelSpec::Dmdc { delays, beta } => (AnyModel::Dmdc(fit_dmdc(train, *delays, *beta)?), None),
        ModelSpec::Esn(p) => (AnyModel::Esn(fit_esn(train, p)?), None),
        ModelSpec::Fcn { net, train: tc } => {
            let (m, log) = fit_fcn(train, net, tc)?;
            (AnyModel::Fcn(m), Some(log))
        }
        ModelSpec::Gated { net, train: tc } => {
            let (m, log) = fit_gated(train, net, tc)?;
            (AnyModel::Gated(m), Some(log))
        }
    };
    Ok((model, FitReport { seconds: t0.seconds(), log }))
}

impl AnyModel {
    pub fn family(&self) -> &'static str {
        match self {
            AnyModel::Dmdc(_) => "dmdc",
            AnyModel::Esn(_) => "esn",
            AnyModel::Fcn(_) => "fcn",
            AnyModel::Gated(g) => g.kind.id(),
        }
    }

    pub fn to_container(&self) -> Container {
        match self {
            AnyModel::Dmdc(m) => m.to_container(),
            AnyModel::Esn(m) => m.to_container(),
            AnyModel::Fcn(m) => m.to_container(),
            AnyModel::Gated(m) => m.to_container(),
        }
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        match c.get("family")? {
            "dmdc" => Ok(AnyModel::Dmdc(LinearModel::from_container(c)?)),
            "esn" => Ok(AnyModel::Esn(Esn::from_container(c)?)),
            "fcn" => Ok(AnyModel::Fcn(FcnNet::from_container(c)?)),
            "lstm" | "gru" => Ok(AnyModel::Gated(GatedNet::from_container(c)?)),
            other => Err(Error::Parse(format!("unknown model family {other:?}"))),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum AnyState {
    Lag(LagState),
    Esn(EsnState),
}

pub enum AnyTape {
    Linear,
    Esn(EsnTape),
    Fcn(FcnTape),
    Gated(GatedTape),
}

macro_rules! dispatch {
    ($self:expr, $m:ident => $e:expr) => {
        match $self {
            AnyModel::Dmdc($m) => $e,
            AnyModel::Esn($m) => $e,
            AnyModel::Fcn($m) => $e,
            AnyModel::Gated($m) => $e,
        }
    };
}

fn lag(s: &AnyState) -> &LagState {
    match s {
        AnyState::Lag(l) => l,
        AnyState::Esn(_) => panic!("lag-window model given a reservoir state"),
    }
}

fn lag_mut(s: &mut AnyState) -> &mut LagState {
    match s {
        AnyState::Lag(l) => l,
        AnyState::Esn(_) => panic!("lag-window model given a reservoir state"),
    }
}

impl Surrogate for AnyModel {
    type State = AnyState;
    type Tape = AnyTape;

    fn n_y(&self) -> usize {
        dispatch!(self, m => m.n_y())
    }

    fn n_u(&self) -> usize {
        dispatch!(self, m => m.n_u())
    }

    fn history_len(&self) -> usize {
        dispatch!(self, m => m.history_len())
    }

    fn scalers(&self) -> &Scalers {
        dispatch!(self, m => m.scalers())
    }

    fn param_count(&self) -> usize {
        dispatch!(self, m => m.param_count())
    }

    fn start(&self, y0: &DVector<f64>) -> AnyState {
        match self {
            AnyModel::Dmdc(m) => AnyState::Lag(m.start(y0)),
            AnyModel::Esn(m) => AnyState::Esn(m.start(y0)),
            AnyModel::Fcn(m) => AnyState::Lag(m.start(y0)),
            AnyModel::Gated(m) => AnyState::Lag(m.start(y0)),
        }
    }

    fn advance(&self, state: &mut AnyState, u: &DVector<f64>, y_next: &DVector<f64>) {
        match (self, state) {
            (AnyModel::Esn(m), AnyState::Esn(s)) => m.advance(s, u, y_next),
            (AnyModel::Esn(_), _) => panic!("reservoir model given a lag state"),
            (_, s) => lag_mut(s).push(u, y_next),
        }
    }

    fn current(&self, state: &AnyState) -> DVector<f64> {
        match state {
            AnyState::Lag(l) => l.y.clone(),
            AnyState::Esn(s) => s.y.clone(),
        }
    }

    fn forecast_taped(&self, state: &AnyState, u: &DMatrix<f64>) -> (DMatrix<f64>, AnyTape) {
        match (self, state) {
            (AnyModel::Esn(m), AnyState::Esn(s)) => {
                let (p, t) = m.forecast_taped(s, u);
                (p, AnyTape::Esn(t))
            }
            (AnyModel::Esn(_), _) => panic!("reservoir model given a lag state"),
            (AnyModel::Dmdc(m), s) => (m.forecast_taped(lag(s), u).0, AnyTape::Linear),
            (AnyModel::Fcn(m), s) => {
                let (p, t) = m.forecast_taped(lag(s), u);
                (p, AnyTape::Fcn(t))
            }
            (AnyModel::Gated(m), s) => {
                let (p, t) = m.forecast_taped(lag(s), u);
                (p, AnyTape::Gated(t))
            }
        }
    }

    fn backprop(&self, state: &AnyState, u: &DMatrix<f64>, tape: &AnyTape, d_pred: &DMatrix<f64>) -> DMatrix<f64> {
        match (self, state, tape) {
            (AnyModel::Esn(m), AnyState::Esn(s), AnyTape::Esn(t)) => m.backprop(s, u, t, d_pred),
            (AnyModel::Dmdc(m), s, AnyTape::Linear) => m.backprop(lag(s), u, &(), d_pred),
            (AnyModel::Fcn(m), s, AnyTape::Fcn(t)) => m.backprop(lag(s), u, t, d_pred),
            (AnyModel::Gated(m), s, AnyTape::Gated(t)) => m.backprop(lag(s), u, t, d_pred),
            _ => panic!("tape does not belong to this model"),
        }
    }
}
