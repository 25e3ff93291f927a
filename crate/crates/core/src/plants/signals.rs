use nalgebra::DMatrix;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Length of each constant or sinusoid segment in a validation signal.
pub const VALIDATION_SEGMENT_STEPS: usize = 100;

/// Recipe for a piecewise-constant, smoothed pseudo-random control signal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignalSpec {
    /// `(lo, hi)` per control channel.
    pub ranges: Vec<(f64, f64)>,
    /// Seconds between fresh draws.
    pub hold: f64,
    /// Moving-average width in samples.
    pub filter_width: usize,
    /// Signal length in seconds.
    pub duration: f64,
    pub seed: u64,
}

fn steps_of(seconds: f64, dt: f64, what: &str) -> Result<usize> {
    let n = (seconds / dt).round();
    if !(n >= 1.0) || ((n * dt - seconds).abs() > 1e-9 * seconds.abs().max(dt)) {
        return Err(Error::Config(format!(
            "{what} {seconds} s is not a positive multiple of dt = {dt}"
        )));
    }
    Ok(n as usize)
}

impl SignalSpec {
    pub fn validate(&self, dt: f64) -> Result<()> {
        if !(dt > 0.0) {
            return Err(Error::Config(format!("dt must be positive, got {dt}")));
        }
        if self.ranges.is_empty() {
            return Err(Error::Config("signal needs at least one channel".into()));
        }
        if let Some((lo, hi)) = self.ranges.iter().find(|(lo, hi)| !(lo < hi)) {
            return Err(Error::Config(format!("signal range ({lo}, {hi}) is empty")));
        }
        if self.filter_width == 0 {
            return Err(Error::Config("filter width must be at least 1".into()));
        }
        steps_of(self.hold, dt, "hold interval")?;
        steps_of(self.duration, dt, "duration")?;
        Ok(())
    }

    pub fn n_channels(&self) -> usize {
        self.ranges.len()
    }

    pub fn n_steps(&self, dt: f64) -> Result<usize> {
        steps_of(self.duration, dt, "duration")
    }
}

/// Held uniform draws before smoothing.
pub fn prbs_raw(spec: &SignalSpec, dt: f64) -> Result<DMatrix<f64>> {
    spec.validate(dt)?;
    let hold = steps_of(spec.hold, dt, "hold interval")?;
    let n = spec.n_steps(dt)?;
    let mut r = rng::seeded(spec.seed);
    let mut out = DMatrix::zeros(spec.n_channels(), n);
    for (c, &(lo, hi)) in spec.ranges.iter().enumerate() {
        let mut value = 0.0;
        for j in 0..n {
            if j % hold == 0 {
                value = r.gen_range(lo..hi);
            }
            out[(c, j)] = value;
        }
    }
    Ok(out)
}

/// Centered moving average per row; the window covers offsets `-⌊w/2⌋ ..= ⌈w/2⌉-1` and is
/// truncated at the edges.
pub fn moving_average(x: &DMatrix<f64>, width: usize) -> DMatrix<f64> {
    let n = x.ncols();
    if width <= 1 || n == 0 {
        return x.clone();
    }
    let back = width / 2;
    let fwd = width - back - 1;
    DMatrix::from_fn(x.nrows(), n, |r, j| {
        let a = j.saturating_sub(back);
        let b = (j + fwd).min(n - 1);
        let s: f64 = (a..=b).map(|k| x[(r, k)]).sum();
        s / (b - a + 1) as f64
    })
}

/// Pseudo-random training signal: held uniform draws smoothed by a moving average.
pub fn prbs_signal(spec: &SignalSpec, dt: f64) -> Result<DMatrix<f64>> {
    Ok(moving_average(&prbs_raw(spec, dt)?, spec.filter_width))
}

/// Validation signal alternating constant segments and sinusoids inside the amplitude range.
///
/// The first segment type is drawn at random; `band` is the sinusoid frequency range in Hz.
pub fn validation_signal(spec: &SignalSpec, dt: f64, band: (f64, f64)) -> Result<DMatrix<f64>> {
    spec.validate(dt)?;
    let (f_lo, f_hi) = band;
    if !(f_lo > 0.0 && f_lo <= f_hi) {
        return Err(Error::Config(format!("invalid frequency band ({f_lo}, {f_hi})")));
    }
    let n = spec.n_steps(dt)?;
    let mut r = rng::seeded(spec.seed);
    let mut out = DMatrix::zeros(spec.n_channels(), n);
    let mut sinusoid = r.gen_bool(0.5);
    for start in (0..n).step_by(VALIDATION_SEGMENT_STEPS) {
        let end = (start + VALIDATION_SEGMENT_STEPS).min(n);
        for (c, &(lo, hi)) in spec.ranges.iter().enumerate() {
            if sinusoid {
                let center = r.gen_range(lo..hi);
                let amp = r.gen_range(0.0..=(center - lo).min(hi - center));
                let freq = if f_lo < f_hi { r.gen_range(f_lo..f_hi) } else { f_lo };
                for j in start..end {
                    let t = (j - start) as f64 * dt;
                    let v = amp * (2.0 * std::f64::consts::PI * freq * t).sin() + center;
                    out[(c, j)] = v.clamp(lo, hi);
                }
            } else {
                let v = r.gen_range(lo..hi);
                for j in start..end {
                    out[(c, j)] = v;
                }
            }
        }
        sinusoid = !sinusoid;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn spring_spec(seed: u64) -> SignalSpec {
        SignalSpec { ranges: vec![(-3.0, 3.0)], hold: 0.5, filter_width: 2, duration: 100.0, seed }
    }

    #[test]
    fn raw_signal_holds_runs_of_five() {
        let raw = prbs_raw(&spring_spec(1), 0.1).unwrap();
        assert_eq!(raw.ncols(), 1000);
        for block in raw.row(0).iter().copied().collect::<Vec<_>>().chunks(5) {
            assert!(block.iter().all(|v| *v == block[0]));
        }
        // Neighbouring blocks are distinct draws.
        assert_ne!(raw[(0, 4)], raw[(0, 5)]);
    }

    #[test]
    fn width_one_is_identity_and_constants_survive_smoothing() {
        let mut spec = spring_spec(2);
        spec.filter_width = 1;
        assert_eq!(prbs_signal(&spec, 0.1).unwrap(), prbs_raw(&spec, 0.1).unwrap());
        let ones = DMatrix::from_element(2, 37, 1.0);
        for w in [1, 2, 3, 50] {
            assert!(moving_average(&ones, w).iter().all(|v| (v - 1.0).abs() < 1e-15));
        }
    }

    #[test]
    fn width_two_averages_with_previous_sample() {
        let x = DMatrix::from_row_slice(1, 4, &[0.0, 2.0, 4.0, 8.0]);
        assert_eq!(moving_average(&x, 2), DMatrix::from_row_slice(1, 4, &[0.0, 1.0, 3.0, 6.0]));
    }

    #[test]
    fn hold_must_be_a_multiple_of_dt() {
        let mut spec = spring_spec(0);
        spec.hold = 0.25;
        assert!(prbs_signal(&spec, 0.1).is_err());
        spec.hold = 0.5;
        spec.ranges = vec![(1.0, 1.0)];
        assert!(prbs_signal(&spec, 0.1).is_err());
    }

    #[test]
    fn validation_signal_segments() {
        let spec = SignalSpec { ranges: vec![(0.0, 1.0)], hold: 1.0, filter_width: 1, duration: 1000.0, seed: 5 };
        let band = (1.0 / 100.0, 5.0 / 100.0);
        let v = validation_signal(&spec, 1.0, band).unwrap();
        assert!(v.iter().all(|x| (0.0..=1.0).contains(x)));
        let segs: Vec<Vec<f64>> = (0..10)
            .map(|s| v.row(0).columns(s * 100, 100).iter().copied().collect())
            .collect();
        let constant: Vec<bool> = segs.iter().map(|s| s.iter().all(|x| *x == s[0])).collect();
        for w in constant.windows(2) {
            assert_ne!(w[0], w[1], "segment types must alternate");
        }
        assert_eq!(v, validation_signal(&spec, 1.0, band).unwrap());
        let other = validation_signal(&SignalSpec { seed: 6, ..spec }, 1.0, band).unwrap();
        assert_ne!(v, other);
    }

    proptest! {
        #[test]
        fn training_signal_stays_in_range(seed in any::<u64>(), lo in -10.0..0.0f64, span in 0.1..10.0f64, w in 1usize..8) {
            let spec = SignalSpec { ranges: vec![(lo, lo + span); 2], hold: 0.3, filter_width: w, duration: 6.0, seed };
            let u = prbs_signal(&spec, 0.1).unwrap();
            prop_assert_eq!(u.ncols(), 60);
            prop_assert!(u.iter().all(|x| *x >= lo && *x <= lo + span));
        }
    }
}
