//! The forecasting interface shared by every model family.
//!
//! All quantities are in scaled space. A state is synchronized to time `t` when it holds the
//! measurement `y_t` and whatever memory the family needs of earlier samples. A forecast
//! consumes controls `u_t, …, u_{t+T−1}` and predicts `y_{t+1}, …, y_{t+T}`.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};

use crate::error::{dim_err, Result};
use crate::timeseries::{Dataset, Scalers};

pub trait Surrogate: Sync {
    type State: Clone + Send + Sync;
    /// Intermediate values recorded by a forecast for the reverse pass.
    type Tape;

    fn n_y(&self) -> usize;
    fn n_u(&self) -> usize;
    /// Number of past `(y, u)` pairs the state must absorb before forecasts are meaningful.
    fn history_len(&self) -> usize;
    fn scalers(&self) -> &Scalers;
    fn param_count(&self) -> usize;

    /// A state synchronized on a single measurement.
    fn start(&self, y0: &DVector<f64>) -> Self::State;
    /// Consumes the control `u_t` and the realized measurement `y_{t+1}`.
    fn advance(&self, state: &mut Self::State, u: &DVector<f64>, y_next: &DVector<f64>);
    /// The measurement the state is synchronized on.
    fn current(&self, state: &Self::State) -> DVector<f64>;

    fn forecast_taped(&self, state: &Self::State, u: &DMatrix<f64>) -> (DMatrix<f64>, Self::Tape);

    /// Pulls `∂L/∂ŷ` (one column per predicted step) back to `∂L/∂u` for the controls of the
    /// forecast that produced `tape`.
    fn backprop(
        &self,
        state: &Self::State,
        u: &DMatrix<f64>,
        tape: &Self::Tape,
        d_pred: &DMatrix<f64>,
    ) -> DMatrix<f64>;

    fn forecast(&self, state: &Self::State, u: &DMatrix<f64>) -> DMatrix<f64> {
        self.forecast_taped(state, u).0
    }

    /// Starts at the first measurement of `data` and absorbs columns up to and including `t`,
    /// so the returned state is synchronized to time `t`.
    fn sync(&self, data: &Dataset, t: usize) -> Result<Self::State> {
        if t > data.len() {
            return Err(dim_err(format!("sync time {t} beyond {} controls", data.len())));
        }
        self.sync_range(data, 0, t)
    }

    /// Synchronizes on `data` columns `from..=t`, ignoring anything earlier.
    fn sync_range(&self, data: &Dataset, from: usize, t: usize) -> Result<Self::State> {
        if data.n_x() != self.n_y() || data.n_u() != self.n_u() {
            return Err(dim_err("dataset dimensions do not match the model"));
        }
        if from > t || t > data.len() {
            return Err(dim_err(format!("sync range {from}..={t} out of bounds")));
        }
        let mut s = self.start(&data.states.column(from).into_owned());
        for j in from..t {
            self.advance(
                &mut s,
                &data.controls.column(j).into_owned(),
                &data.states.column(j + 1).into_owned(),
            );
        }
        Ok(s)
    }
}

/// Bounded buffer of past `(y, u)` pairs plus the current measurement, used by the families
/// whose memory is an explicit lag window.
#[derive(Debug, Clone, PartialEq)]
pub struct LagState {
    /// Oldest first; at most `capacity` entries.
    pub past: VecDeque<(DVector<f64>, DVector<f64>)>,
    pub y: DVector<f64>,
    capacity: usize,
}

impl LagState {
    pub fn new(y0: &DVector<f64>, capacity: usize) -> Self {
        Self {
            past: VecDeque::with_capacity(capacity + 1),
            y: y0.clone(),
            capacity,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn is_warm(&self) -> bool {
        self.past.len() == self.capacity
    }

    pub fn push(&mut self, u: &DVector<f64>, y_next: &DVector<f64>) {
        if self.capacity > 0 {
            self.past.push_back((self.y.clone(), u.clone()));
            if self.past.len() > self.capacity {
                self.past.pop_front();
            }
        }
        self.y = y_next.clone();
    }

    /// Exactly `capacity` pairs, oldest first. A cold buffer is front-padded with its oldest
    /// pair, or with the current measurement and mid-range controls when empty.
    pub fn window(&self, n_u: usize) -> Vec<(DVector<f64>, DVector<f64>)> {
        let pad = self
            .past
            .front()
            .cloned()
            .unwrap_or_else(|| (self.y.clone(), DVector::from_element(n_u, 0.5)));
        let missing = self.capacity - self.past.len();
        std::iter::repeat(pad)
            .take(missing)
            .chain(self.past.iter().cloned())
            .collect()
    }
}

/// Expands `m` columns of decision variables to a `t`-column control sequence by holding the
/// last column.
pub fn hold_controls(u: &DMatrix<f64>, t: usize) -> DMatrix<f64> {
    let m = u.ncols();
    if m == 0 {
        return DMatrix::zeros(u.nrows(), t);
    }
    DMatrix::from_fn(u.nrows(), t, |i, j| u[(i, j.min(m - 1))])
}

/// Adjoint of [`hold_controls`]: gradients of held columns accumulate onto the last column.
pub fn fold_held_gradient(g: &DMatrix<f64>, m: usize) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(g.nrows(), m);
    if m == 0 {
        return out;
    }
    for (j, col) in g.column_iter().enumerate() {
        let mut dst = out.column_mut(j.min(m - 1));
        dst += col;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lag_state_keeps_the_newest_pairs() {
        let v = |x: f64| DVector::from_element(1, x);
        let mut s = LagState::new(&v(0.0), 2);
        assert!(!s.is_warm());
        assert_eq!(s.window(1), vec![(v(0.0), v(0.5)), (v(0.0), v(0.5))]);
        s.push(&v(10.0), &v(1.0));
        assert_eq!(s.window(1), vec![(v(0.0), v(10.0)), (v(0.0), v(10.0))]);
        s.push(&v(11.0), &v(2.0));
        s.push(&v(12.0), &v(3.0));
        assert!(s.is_warm());
        assert_eq!(s.window(1), vec![(v(1.0), v(11.0)), (v(2.0), v(12.0))]);
        assert_eq!(s.y, v(3.0));
    }

    #[test]
    fn holding_and_its_adjoint() {
        let u = DMatrix::from_row_slice(1, 2, &[1.0, 2.0]);
        assert_eq!(hold_controls(&u, 4), DMatrix::from_row_slice(1, 4, &[1.0, 2.0, 2.0, 2.0]));
        let g = DMatrix::from_row_slice(1, 4, &[1.0, 1.0, 1.0, 1.0]);
        assert_eq!(fold_held_gradient(&g, 2), DMatrix::from_row_slice(1, 2, &[1.0, 3.0]));
    }
}
