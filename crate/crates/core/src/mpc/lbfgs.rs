//! Limited-memory BFGS with a strong-Wolfe line search.

use std::collections::VecDeque;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LbfgsOptions {
    pub memory: usize,
    pub max_iter: usize,
    pub grad_tol: f64,
    pub rel_tol: f64,
    pub c1: f64,
    pub c2: f64,
    pub max_line_search: usize,
}

impl Default for LbfgsOptions {
    fn default() -> Self {
        Self {
            memory: 10,
            max_iter: 100,
            grad_tol: 1e-6,
            rel_tol: 1e-9,
            c1: 1e-4,
            c2: 0.9,
            max_line_search: 30,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LbfgsStatus {
    GradientTolerance,
    RelativeDecrease,
    MaxIterations,
    /// No acceptable step was found; the best iterate so far is returned.
    LineSearchFailed,
    /// The objective was not finite at the starting point.
    NonFiniteStart,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LbfgsResult {
    /// Best iterate, clamped when bounds were given.
    pub x: DVector<f64>,
    /// Objective at the unclamped best iterate.
    pub f: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub status: LbfgsStatus,
}

struct Probe {
    alpha: f64,
    f: f64,
    g: DVector<f64>,
    dphi: f64,
}

/// Minimizes `fg` (returning value and gradient) from `x0`. The result is clamped elementwise to
/// `clamp` after the unconstrained solve.
pub fn lbfgs_minimize<F>(mut fg: F, x0: &DVector<f64>, opts: &LbfgsOptions, clamp: Option<(f64, f64)>) -> LbfgsResult
where
    F: FnMut(&DVector<f64>) -> (f64, DVector<f64>),
{
    let finish = |x: DVector<f64>, f, iterations, evaluations, status| {
        let x = match clamp {
            Some((lo, hi)) => x.map(|v| v.clamp(lo, hi)),
            None => x,
        };
        LbfgsResult { x, f, iterations, evaluations, status }
    };
    let mut x = x0.clone();
    let (mut f, mut g) = fg(&x);
    let mut evals = 1;
    if !f.is_finite() {
        return finish(x, f, 0, evals, LbfgsStatus::NonFiniteStart);
    }
    let mut mem: VecDeque<(DVector<f64>, DVector<f64>, f64)> = VecDeque::with_capacity(opts.memory);
    for iter in 0..opts.max_iter {
        if g.norm() < opts.grad_tol {
            return finish(x, f, iter, evals, LbfgsStatus::GradientTolerance);
        }
        let mut d = two_loop(&g, &mem);
        let mut dphi0 = g.dot(&d);
        if !(dphi0 < 0.0) {
            mem.clear();
            d = -&g;
            dphi0 = -g.norm_squared();
        }
        let alpha0 = if mem.is_empty() { (1.0 / d.norm()).min(1.0) } else { 1.0 };
        let mut eval = |alpha: f64| {
            let xt = &x + &d * alpha;
            let (ft, gt) = fg(&xt);
            let ft = if ft.is_finite() { ft } else { f64::INFINITY };
            Probe { alpha, f: ft, dphi: gt.dot(&d), g: gt }
        };
        let (step, n) = strong_wolfe(&mut eval, f, dphi0, alpha0, opts);
        evals += n;
        let Some(p) = step else {
            return finish(x, f, iter, evals, LbfgsStatus::LineSearchFailed);
        };
        let s = &d * p.alpha;
        let y = &p.g - &g;
        let f_old = f;
        x += &s;
        f = p.f;
        g = p.g;
        let sy = s.dot(&y);
        if sy > 1e-12 * s.norm() * y.norm() {
            if mem.len() == opts.memory {
                mem.pop_front();
            }
            mem.push_back((s, y, 1.0 / sy));
        }
        if f_old - f <= opts.rel_tol * f_old.abs().max(f.abs()) {
            return finish(x, f, iter + 1, evals, LbfgsStatus::RelativeDecrease);
        }
    }
    let status = if g.norm() < opts.grad_tol { LbfgsStatus::GradientTolerance } else { LbfgsStatus::MaxIterations };
    finish(x, f, opts.max_iter, evals, status)
}

fn two_loop(g: &DVector<f64>, mem: &VecDeque<(DVector<f64>, DVector<f64>, f64)>) -> DVector<f64> {
    let mut q = g.clone();
    let mut a = vec![0.0; mem.len()];
    for (k, (s, y, rho)) in mem.iter().enumerate().rev() {
        a[k] = rho * s.dot(&q);
        q.axpy(-a[k], y, 1.0);
    }
    if let Some((s, y, _)) = mem.back() {
        q *= s.dot(y) / y.norm_squared();
    }
    for (k, (s, y, rho)) in mem.iter().enumerate() {
        let b = rho * y.dot(&q);
        q.axpy(a[k] - b, s, 1.0);
    }
    -q
}

/// Bracketing phase of the strong-Wolfe search; returns the accepted probe and the number of
/// evaluations.
fn strong_wolfe<E>(eval: &mut E, f0: f64, dphi0: f64, alpha0: f64, opts: &LbfgsOptions) -> (Option<Probe>, usize)
where
    E: FnMut(f64) -> Probe,
{
    let armijo = |p: &Probe| p.f <= f0 + opts.c1 * p.alpha * dphi0;
    let curvature = |p: &Probe| p.dphi.abs() <= -opts.c2 * dphi0;
    let mut prev = Probe { alpha: 0.0, f: f0, g: DVector::zeros(0), dphi: dphi0 };
    let mut alpha = alpha0;
    let mut n = 0;
    let mut best: Option<Probe> = None;
    while n < opts.max_line_search {
        let p = eval(alpha);
        n += 1;
        if !armijo(&p) || (n > 1 && p.f >= prev.f) {
            return zoom(eval, prev, p, f0, dphi0, opts, n, best);
        }
        if curvature(&p) {
            return (Some(p), n);
        }
        if p.dphi >= 0.0 {
            return zoom(eval, p, prev, f0, dphi0, opts, n, best);
        }
        alpha = 2.0 * p.alpha;
        best = Some(Probe { g: p.g.clone(), ..p });
        prev = p;
    }
    (best, n)
}

#[allow(clippy::too_many_arguments)]
fn zoom<E>(
    eval: &mut E,
    mut lo: Probe,
    mut hi: Probe,
    f0: f64,
    dphi0: f64,
    opts: &LbfgsOptions,
    mut n: usize,
    mut best: Option<Probe>,
) -> (Option<Probe>, usize)
where
    E: FnMut(f64) -> Probe,
{
    // `lo` always satisfies sufficient decrease and has the lowest value seen in the bracket.
    if lo.alpha > 0.0 && best.as_ref().map_or(true, |b| lo.f < b.f) {
        best = Some(Probe { g: lo.g.clone(), ..lo });
    }
    while n < opts.max_line_search {
        let (a, b) = (lo.alpha.min(hi.alpha), lo.alpha.max(hi.alpha));
        let width = b - a;
        if width <= 1e-16 * b.max(1.0) {
            break;
        }
        let trial = interpolate(&lo, &hi)
            .filter(|t| *t > a + 0.1 * width && *t < b - 0.1 * width)
            .unwrap_or(0.5 * (a + b));
        let p = eval(trial);
        n += 1;
        if p.f > f0 + opts.c1 * p.alpha * dphi0 || p.f >= lo.f {
            hi = p;
            continue;
        }
        if p.dphi.abs() <= -opts.c2 * dphi0 {
            return (Some(p), n);
        }
        if p.dphi * (hi.alpha - lo.alpha) >= 0.0 {
            hi = lo;
        }
        best = Some(Probe { g: p.g.clone(), ..p });
        lo = p;
    }
    (best, n)
}

/// Minimizer of the cubic matching values and slopes at both ends, when it exists.
fn interpolate(a: &Probe, b: &Probe) -> Option<f64> {
    if !(a.f.is_finite() && b.f.is_finite()) {
        return None;
    }
    let d1 = a.dphi + b.dphi - 3.0 * (a.f - b.f) / (a.alpha - b.alpha);
    let disc = d1 * d1 - a.dphi * b.dphi;
    if disc < 0.0 {
        return None;
    }
    let d2 = (b.alpha - a.alpha).signum() * disc.sqrt();
    let t = b.alpha - (b.alpha - a.alpha) * (b.dphi + d2 - d1) / (b.dphi - a.dphi + 2.0 * d2);
    t.is_finite().then_some(t)
}
