//! Snapshot datasets, row-wise min-max scaling, training-noise injection and delay embedding.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::io::{self, Container};
use crate::rng;

/// Paired state/control snapshots: `states` has one more column than `controls`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub states: DMatrix<f64>,
    pub controls: DMatrix<f64>,
    pub dt: f64,
}

/// Key-value metadata written next to a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct DatasetMeta {
    pub dt: f64,
    pub n_x: usize,
    pub n_u: usize,
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plant: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub role: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub substeps: Option<usize>,
}

fn check_finite(m: &DMatrix<f64>, what: &str) -> Result<()> {
    if let Some(p) = m.iter().position(|v| !v.is_finite()) {
        return Err(Error::DataQuality(format!(
            "{what}: non-finite entry at ({}, {})",
            p % m.nrows().max(1),
            p / m.nrows().max(1)
        )));
    }
    Ok(())
}

impl Dataset {
    pub fn new(states: DMatrix<f64>, controls: DMatrix<f64>, dt: f64) -> Result<Self> {
        if states.ncols() != controls.ncols() + 1 {
            return Err(dim_err(format!(
                "states have {} columns, controls {}; expected one more state column",
                states.ncols(),
                controls.ncols()
            )));
        }
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::DataQuality(format!("timestep must be positive, got {dt}")));
        }
        check_finite(&states, "states")?;
        check_finite(&controls, "controls")?;
        Ok(Self { states, controls, dt })
    }

    pub fn n_x(&self) -> usize {
        self.states.nrows()
    }

    pub fn n_u(&self) -> usize {
        self.controls.nrows()
    }

    /// Number of transitions `N` (control columns).
    pub fn len(&self) -> usize {
        self.controls.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Transitions `start..end`: states `start..=end`, controls `start..end`.
    pub fn window(&self, start: usize, end: usize) -> Result<Dataset> {
        if start > end || end > self.len() {
            return Err(Error::Size(format!(
                "window {start}..{end} outside 0..{}",
                self.len()
            )));
        }
        Ok(Dataset {
            states: self.states.columns(start, end - start + 1).into_owned(),
            controls: self.controls.columns(start, end - start).into_owned(),
            dt: self.dt,
        })
    }

    pub fn write_dir(&self, dir: &Path, meta: &DatasetMeta) -> Result<()> {
        fs::create_dir_all(dir)?;
        io::write_csv(&dir.join("states.csv"), &self.states)?;
        io::write_csv(&dir.join("controls.csv"), &self.controls)?;
        let meta = DatasetMeta {
            dt: self.dt,
            n_x: self.n_x(),
            n_u: self.n_u(),
            ..meta.clone()
        };
        let text = serde_json::to_string_pretty(&meta).map_err(|e| Error::Parse(e.to_string()))?;
        fs::write(dir.join("meta.json"), text + "\n")?;
        Ok(())
    }

    pub fn read_dir(dir: &Path) -> Result<(Dataset, DatasetMeta)> {
        let meta_text = fs::read_to_string(dir.join("meta.json"))?;
        let meta: DatasetMeta =
            serde_json::from_str(&meta_text).map_err(|e| Error::Parse(e.to_string()))?;
        let states = io::read_csv(&dir.join("states.csv"))?;
        let mut controls = io::read_csv(&dir.join("controls.csv"))?;
        if controls.nrows() == 0 && meta.n_u == 0 {
            controls = DMatrix::zeros(0, states.ncols().saturating_sub(1));
        }
        if states.nrows() != meta.n_x || controls.nrows() != meta.n_u {
            return Err(dim_err("CSV shapes disagree with meta.json"));
        }
        Ok((Dataset::new(states, controls, meta.dt)?, meta))
    }
}

/// Per-row minimum and maximum of the fitting data.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalerParams {
    pub min: DVector<f64>,
    pub max: DVector<f64>,
}

impl ScalerParams {
    pub fn fit(x: &DMatrix<f64>) -> Result<Self> {
        if x.is_empty() {
            return Err(Error::Size("cannot fit a scaler on an empty matrix".into()));
        }
        check_finite(x, "scaler input")?;
        let min = DVector::from_iterator(x.nrows(), x.row_iter().map(|r| r.min()));
        let max = DVector::from_iterator(x.nrows(), x.row_iter().map(|r| r.max()));
        Ok(Self { min, max })
    }

    pub fn dim(&self) -> usize {
        self.min.len()
    }

    fn check_rows(&self, n: usize) -> Result<()> {
        if n != self.dim() {
            return Err(dim_err(format!("scaler has {} rows, data {n}", self.dim())));
        }
        Ok(())
    }

    /// Range of row `i`; zero for a degenerate row.
    pub fn range(&self, i: usize) -> f64 {
        self.max[i] - self.min[i]
    }

    pub fn apply_value(&self, i: usize, v: f64) -> f64 {
        let r = self.range(i);
        if r > 0.0 {
            (v - self.min[i]) / r
        } else {
            0.5
        }
    }

    pub fn invert_value(&self, i: usize, v: f64) -> f64 {
        let r = self.range(i);
        if r > 0.0 {
            self.min[i] + v * r
        } else {
            self.min[i]
        }
    }

    pub fn apply(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_rows(x.nrows())?;
        check_finite(x, "scaler input")?;
        Ok(DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| self.apply_value(i, x[(i, j)])))
    }

    pub fn invert(&self, xs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_rows(xs.nrows())?;
        Ok(DMatrix::from_fn(xs.nrows(), xs.ncols(), |i, j| self.invert_value(i, xs[(i, j)])))
    }

    pub fn apply_vec(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(x.len(), |i, _| self.apply_value(i, x[i]))
    }

    pub fn invert_vec(&self, xs: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(xs.len(), |i, _| self.invert_value(i, xs[i]))
    }
}

/// Fits (when `params` is `None`) or reuses a row-wise min-max scaler and applies it.
pub fn minmax_fit_apply(
    x: &DMatrix<f64>,
    params: Option<&ScalerParams>,
) -> Result<(DMatrix<f64>, ScalerParams)> {
    let p = match params {
        Some(p) => p.clone(),
        None => ScalerParams::fit(x)?,
    };
    Ok((p.apply(x)?, p))
}

pub fn minmax_invert(xs: &DMatrix<f64>, params: &ScalerParams) -> Result<DMatrix<f64>> {
    params.invert(xs)
}

/// State and control scalers, fit on training data and frozen afterwards.
#[derive(Debug, Clone, PartialEq)]
pub struct Scalers {
    pub states: ScalerParams,
    pub controls: ScalerParams,
}

impl Scalers {
    pub fn fit(data: &Dataset) -> Result<Self> {
        Ok(Self {
            states: ScalerParams::fit(&data.states)?,
            controls: if data.n_u() == 0 {
                ScalerParams {
                    min: DVector::zeros(0),
                    max: DVector::zeros(0),
                }
            } else {
                ScalerParams::fit(&data.controls)?
            },
        })
    }

    pub fn scale(&self, data: &Dataset) -> Result<Dataset> {
        Dataset::new(
            self.states.apply(&data.states)?,
            self.controls.apply(&data.controls)?,
            data.dt,
        )
    }

    /// Writes the four scaler vectors as column blocks of a model container.
    pub fn store(&self, c: &mut Container) {
        let col = |v: &DVector<f64>| DMatrix::from_column_slice(v.len(), 1, v.as_slice());
        c.put("scaler_state_min", col(&self.states.min));
        c.put("scaler_state_max", col(&self.states.max));
        c.put("scaler_control_min", col(&self.controls.min));
        c.put("scaler_control_max", col(&self.controls.max));
    }

    pub fn restore(c: &Container) -> Result<Self> {
        let v = |name: &str| -> Result<DVector<f64>> {
            Ok(DVector::from_column_slice(c.dense(name)?.as_slice()))
        };
        Ok(Self {
            states: ScalerParams { min: v("scaler_state_min")?, max: v("scaler_state_max")? },
            controls: ScalerParams { min: v("scaler_control_min")?, max: v("scaler_control_max")? },
        })
    }

    pub fn unscale(&self, data: &Dataset) -> Result<Dataset> {
        Dataset::new(
            self.states.invert(&data.states)?,
            self.controls.invert(&data.controls)?,
            data.dt,
        )
    }
}

/// Scaled training data together with the scalers that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSet {
    pub scaled: Dataset,
    pub scalers: Scalers,
}

impl TrainingSet {
    /// Optionally corrupts the states with training noise, then fits and applies min-max scaling.
    pub fn prepare(raw: &Dataset, noise: Option<&NoiseSpec>) -> Result<Self> {
        let states = match noise {
            Some(spec) => corrupt_with_noise(&raw.states, spec)?,
            None => raw.states.clone(),
        };
        let noisy = Dataset::new(states, raw.controls.clone(), raw.dt)?;
        let scalers = Scalers::fit(&noisy)?;
        Ok(Self {
            scaled: scalers.scale(&noisy)?,
            scalers,
        })
    }

    /// Scales another dataset (validation, control history) with the frozen training scalers.
    pub fn scale_other(&self, raw: &Dataset) -> Result<Dataset> {
        self.scalers.scale(raw)
    }
}

/// Gaussian white training noise with per-row variance `variance_scale · σ_row²`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub variance_scale: f64,
    pub seed: u64,
}

impl NoiseSpec {
    pub const DEFAULT_VARIANCE_SCALE: f64 = 0.001;

    pub fn new(variance_scale: f64, seed: u64) -> Result<Self> {
        if !(variance_scale >= 0.0 && variance_scale.is_finite()) {
            return Err(Error::Config(format!("noise variance scale {variance_scale}")));
        }
        Ok(Self { variance_scale, seed })
    }
}

/// Population standard deviation of each row.
pub fn row_std(x: &DMatrix<f64>) -> DVector<f64> {
    let n = x.ncols() as f64;
    DVector::from_iterator(
        x.nrows(),
        x.row_iter().map(|r| {
            let mean = r.sum() / n;
            (r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
        }),
    )
}

/// Adds zero-mean Gaussian noise column by column; row `i` gets standard deviation
/// `sqrt(variance_scale) · σ_i` where `σ_i` is the empirical standard deviation of that row.
pub fn corrupt_with_noise(x: &DMatrix<f64>, spec: &NoiseSpec) -> Result<DMatrix<f64>> {
    if x.ncols() < 2 {
        return Err(Error::Size("noise injection needs at least two columns".into()));
    }
    if spec.variance_scale < 0.0 {
        return Err(Error::Config("negative noise variance scale".into()));
    }
    let sd = row_std(x) * spec.variance_scale.sqrt();
    let mut rng = rng::seeded(spec.seed);
    let mut out = x.clone();
    for j in 0..x.ncols() {
        for i in 0..x.nrows() {
            let z: f64 = StandardNormal.sample(&mut rng);
            out[(i, j)] += sd[i] * z;
        }
    }
    Ok(out)
}

/// Delay-embedded regression problem.
#[derive(Debug, Clone, PartialEq)]
pub struct DelayEmbedding {
    pub delays: usize,
    /// Column for time `t`: `[y_t; …; y_{t−k}; u_t; …; u_{t−k}]`, for `t = k..N−1`.
    pub inputs: DMatrix<f64>,
    /// Column for time `t`: `y_{t+1}`.
    pub targets: DMatrix<f64>,
}

/// Stacks `k` delays of measurements `y` (`n_y × (N+1)`) and controls `u` (`n_u × N`, may have
/// zero rows) into one-step regression inputs and targets.
pub fn delay_embed(y: &DMatrix<f64>, u: &DMatrix<f64>, k: usize) -> Result<DelayEmbedding> {
    let n = y.ncols().saturating_sub(1);
    if u.nrows() > 0 && u.ncols() < n {
        return Err(dim_err(format!(
            "controls have {} columns, need {n}",
            u.ncols()
        )));
    }
    if n <= k {
        return Err(Error::Size(format!(
            "{} samples cannot support {k} delays",
            y.ncols()
        )));
    }
    let (ny, nu) = (y.nrows(), u.nrows());
    let cols = n - k;
    let rows = (k + 1) * (ny + nu);
    let mut inputs = DMatrix::zeros(rows, cols);
    for c in 0..cols {
        let t = c + k;
        for lag in 0..=k {
            for i in 0..ny {
                inputs[(lag * ny + i, c)] = y[(i, t - lag)];
            }
            for i in 0..nu {
                inputs[((k + 1) * ny + lag * nu + i, c)] = u[(i, t - lag)];
            }
        }
    }
    let targets = y.columns(k + 1, cols).into_owned();
    Ok(DelayEmbedding {
        delays: k,
        inputs,
        targets,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn row(v: &[f64]) -> DMatrix<f64> {
        DMatrix::from_row_slice(1, v.len(), v)
    }

    #[test]
    fn minmax_maps_endpoints() {
        let (s, p) = minmax_fit_apply(&row(&[2.0, 4.0, 6.0]), None).unwrap();
        assert_eq!(s, row(&[0.0, 0.5, 1.0]));
        assert_eq!(p.min[0], 2.0);
        assert_eq!(p.max[0], 6.0);
    }

    #[test]
    fn constant_row_maps_to_half_and_inverts_to_min() {
        let (s, p) = minmax_fit_apply(&row(&[3.0, 3.0, 3.0]), None).unwrap();
        assert_eq!(s, row(&[0.5, 0.5, 0.5]));
        assert_eq!(minmax_invert(&row(&[0.5]), &p).unwrap(), row(&[3.0]));
    }

    #[test]
    fn invert_known_params() {
        let p = ScalerParams {
            min: DVector::from_element(1, 2.0),
            max: DVector::from_element(1, 6.0),
        };
        assert_eq!(minmax_invert(&row(&[0.0, 1.0]), &p).unwrap(), row(&[2.0, 6.0]));
    }

    #[test]
    fn round_trip_small_row() {
        let x = row(&[0.1, 0.7, 0.3]);
        let (s, p) = minmax_fit_apply(&x, None).unwrap();
        let back = minmax_invert(&s, &p).unwrap();
        for (a, b) in back.iter().zip(x.iter()) {
            assert!((a - b).abs() <= 1e-12 * b.abs());
        }
    }

    #[test]
    fn rejects_non_finite_and_mismatched_rows() {
        assert!(matches!(
            minmax_fit_apply(&row(&[1.0, f64::NAN]), None),
            Err(Error::DataQuality(_))
        ));
        let (_, p) = minmax_fit_apply(&row(&[1.0, 2.0]), None).unwrap();
        assert!(matches!(
            minmax_invert(&DMatrix::zeros(2, 2), &p),
            Err(Error::Dimension(_))
        ));
        assert!(minmax_fit_apply(&DMatrix::zeros(2, 2), Some(&p)).is_err());
    }

    #[test]
    fn round_trip_random_rows() {
        let mut r = rng::seeded(11);
        use rand::Rng;
        for _ in 0..1000 {
            let n = r.gen_range(2..20);
            let scale = 10f64.powf(r.gen_range(-3.0..3.0));
            let x = DMatrix::from_fn(1, n, |_, _| r.gen_range(-1.0..1.0) * scale);
            let (s, p) = minmax_fit_apply(&x, None).unwrap();
            let back = minmax_invert(&s, &p).unwrap();
            let tol = 1e-12 * x.amax().max(f64::MIN_POSITIVE);
            assert!((back - &x).amax() <= tol);
        }
    }

    proptest! {
        #[test]
        fn scaled_training_rows_lie_in_unit_interval(
            v in proptest::collection::vec(-1e6f64..1e6, 2..40)
        ) {
            let (s, _) = minmax_fit_apply(&row(&v), None).unwrap();
            prop_assert!(s.iter().all(|x| (0.0..=1.0).contains(x)));
        }
    }

    #[test]
    fn noise_level_matches_closed_form() {
        // Row with unit empirical standard deviation: alternating ±1.
        let n = 100_000;
        let x = DMatrix::from_fn(1, n, |_, j| if j % 2 == 0 { 1.0 } else { -1.0 });
        assert!((row_std(&x)[0] - 1.0).abs() < 1e-12);
        let spec = NoiseSpec::new(0.001, 5).unwrap();
        let noisy = corrupt_with_noise(&x, &spec).unwrap();
        let g = &noisy - &x;
        let mean = g.mean();
        let sd = (g.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
        let expected = 0.001f64.sqrt();
        assert!((sd - expected).abs() / expected < 0.02, "sd {sd}");
        // Mean preserved within 3 standard errors.
        assert!(mean.abs() < 3.0 * expected / (n as f64).sqrt());
    }

    #[test]
    fn constant_row_unchanged_and_seed_deterministic() {
        let x = DMatrix::from_fn(2, 50, |i, j| if i == 0 { 4.0 } else { j as f64 });
        let spec = NoiseSpec::new(0.001, 9).unwrap();
        let a = corrupt_with_noise(&x, &spec).unwrap();
        let b = corrupt_with_noise(&x, &spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.row(0), x.row(0));
        assert_ne!(a.row(1), x.row(1));
        assert_eq!(a.shape(), x.shape());
    }

    #[test]
    fn embed_without_delays() {
        let y = DMatrix::from_fn(2, 4, |i, j| (10 * i + j) as f64);
        let e = delay_embed(&y, &DMatrix::zeros(0, 3), 0).unwrap();
        assert_eq!(e.inputs, y.columns(0, 3).into_owned());
        assert_eq!(e.targets, y.columns(1, 3).into_owned());
    }

    #[test]
    fn embed_scalar_series_with_one_delay() {
        let y = row(&[1.0, 2.0, 3.0, 4.0]);
        let e = delay_embed(&y, &DMatrix::zeros(0, 3), 1).unwrap();
        assert_eq!(e.inputs, DMatrix::from_row_slice(2, 2, &[2.0, 3.0, 1.0, 2.0]));
        assert_eq!(e.targets, row(&[3.0, 4.0]));
    }

    #[test]
    fn embed_rejects_too_many_delays() {
        let y = row(&[1.0, 2.0, 3.0]);
        assert!(matches!(
            delay_embed(&y, &DMatrix::zeros(0, 2), 2),
            Err(Error::Size(_))
        ));
    }

    proptest! {
        #[test]
        fn embed_shape_and_stacking(ny in 1usize..4, nu in 0usize..3, k in 0usize..5, extra in 1usize..10) {
            let n = k + extra;
            let y = DMatrix::from_fn(ny, n + 1, |i, j| (100 * i + j) as f64);
            let u = DMatrix::from_fn(nu, n, |i, j| -((100 * i + j) as f64) - 1.0);
            let e = delay_embed(&y, &u, k).unwrap();
            prop_assert_eq!(e.inputs.nrows(), (k + 1) * (ny + nu));
            prop_assert_eq!(e.inputs.ncols(), e.targets.ncols());
            let c = e.inputs.ncols() - 1;
            let t = c + k;
            for lag in 0..=k {
                for i in 0..ny {
                    prop_assert_eq!(e.inputs[(lag * ny + i, c)], y[(i, t - lag)]);
                }
                for i in 0..nu {
                    prop_assert_eq!(e.inputs[((k + 1) * ny + lag * nu + i, c)], u[(i, t - lag)]);
                }
            }
            prop_assert_eq!(e.targets.column(c), y.column(t + 1));
        }
    }

    #[test]
    fn dataset_invariants_and_dir_round_trip() {
        assert!(Dataset::new(DMatrix::zeros(1, 3), DMatrix::zeros(1, 3), 0.1).is_err());
        assert!(Dataset::new(DMatrix::zeros(1, 3), DMatrix::zeros(1, 2), 0.0).is_err());
        let d = Dataset::new(
            DMatrix::from_fn(2, 5, |i, j| (i + j) as f64 * 0.1),
            DMatrix::from_fn(1, 4, |_, j| j as f64),
            0.01,
        )
        .unwrap();
        let dir = std::env::temp_dir().join(format!("esnmpc-ds-{}", std::process::id()));
        d.write_dir(&dir, &DatasetMeta { seed: Some(3), ..Default::default() }).unwrap();
        let (back, meta) = Dataset::read_dir(&dir).unwrap();
        assert_eq!(back, d);
        assert_eq!(meta.seed, Some(3));
        assert_eq!(meta.n_x, 2);
        let w = d.window(1, 3).unwrap();
        assert_eq!(w.len(), 2);
        assert_eq!(w.states.column(0), d.states.column(1));
        std::fs::remove_dir_all(dir).ok();
    }
}
