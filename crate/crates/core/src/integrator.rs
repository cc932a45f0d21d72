//! Adaptive Rosenbrock integration for stiff systems, a fixed-step RK4
//! reference, and dense-output sampling onto a uniform grid.
//!
//! The stiff solver is the four-stage L-stable Rosenbrock method of order 4
//! with an embedded order-3 solution (Hairer & Wanner, *Solving ODEs II*,
//! the "L-stable" coefficient set of `ROS4`; its 5-digit gamma leaves
//! `|R(-inf)|` near 1.5e-5). Each step factors
//! `I/(h*gamma) - J` once and reuses the factorization for all stages.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::dataset::TimeSeries;
use crate::kinetics::OdeSystem;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum IntegrateError {
    #[error("step size {h:e} fell below the minimum {min:e} at t = {t}")]
    StepSizeUnderflow { t: f64, h: f64, min: f64 },
    #[error("non-finite state encountered at t = {t}")]
    NonFiniteState { t: f64 },
    #[error("singular iteration matrix at t = {t}")]
    SingularMatrix { t: f64 },
    #[error("step budget of {0} steps exhausted")]
    TooManySteps(usize),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("requested range [{start}, {end}] lies outside the integrated span [{t0}, {t_end}]")]
    Range { start: f64, end: f64, t0: f64, t_end: f64 },
    #[error("concentration {value:e} in channel {channel} at t = {t} is below -atol")]
    NegativeConcentration { t: f64, channel: usize, value: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToleranceSpec {
    pub rtol: f64,
    pub atol: f64,
}

impl ToleranceSpec {
    pub fn new(rtol: f64, atol: f64) -> Result<Self, IntegrateError> {
        let tol = ToleranceSpec { rtol, atol };
        tol.validate()?;
        Ok(tol)
    }

    pub fn validate(&self) -> Result<(), IntegrateError> {
        if !(self.rtol > 0.0 && self.rtol < 1.0) {
            return Err(IntegrateError::InvalidInput(format!("rtol {} not in (0, 1)", self.rtol)));
        }
        if !(self.atol > 0.0 && self.atol.is_finite()) {
            return Err(IntegrateError::InvalidInput(format!("atol {} must be > 0", self.atol)));
        }
        Ok(())
    }
}

impl Default for ToleranceSpec {
    /// Dataset-generation defaults: far tighter than any forecast error of interest.
    fn default() -> Self {
        ToleranceSpec { rtol: 1e-8, atol: 1e-10 }
    }
}

/// Step-size controller settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepControl {
    pub initial_step: f64,
    pub safety: f64,
    pub min_factor: f64,
    pub max_factor: f64,
    pub max_steps: usize,
    /// When set, steps are shortened so that every grid time is an accepted
    /// step. Sampling that grid then copies integrator states instead of
    /// interpolating them, which matters for stiff components whose RHS
    /// values (the Hermite slopes) amplify tiny state errors.
    pub stops: Option<SamplingSpec>,
}

impl Default for StepControl {
    fn default() -> Self {
        StepControl {
            initial_step: 1e-6,
            safety: 0.9,
            min_factor: 0.2,
            max_factor: 5.0,
            max_steps: 10_000_000,
            stops: None,
        }
    }
}

/// Accepted steps of one integration run.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub dimension: usize,
    /// Accepted step times, strictly increasing, from `t0` to `t_end`.
    pub times: Vec<f64>,
    /// Row-major states, `times.len() * dimension` values.
    pub states: Vec<f64>,
    /// `f(t, y)` at every stored state, used for Hermite dense output.
    pub derivatives: Vec<f64>,
    /// Weighted error norm of each accepted step (first entry is 0 for the initial state).
    pub error_estimates: Vec<f64>,
    pub accepted_steps: usize,
    pub rejected_steps: usize,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn state(&self, i: usize) -> &[f64] {
        &self.states[i * self.dimension..(i + 1) * self.dimension]
    }

    pub fn derivative(&self, i: usize) -> &[f64] {
        &self.derivatives[i * self.dimension..(i + 1) * self.dimension]
    }

    pub fn last_state(&self) -> &[f64] {
        self.state(self.len() - 1)
    }

    pub fn t0(&self) -> f64 {
        self.times[0]
    }

    pub fn t_end(&self) -> f64 {
        *self.times.last().unwrap()
    }

    fn push(&mut self, t: f64, y: &[f64], dy: &[f64], err: f64) {
        self.times.push(t);
        self.states.extend_from_slice(y);
        self.derivatives.extend_from_slice(dy);
        self.error_estimates.push(err);
    }

    fn start(dimension: usize, t0: f64, y0: &[f64], dy0: &[f64]) -> Self {
        let mut tr = Trajectory {
            dimension,
            times: Vec::new(),
            states: Vec::new(),
            derivatives: Vec::new(),
            error_estimates: Vec::new(),
            accepted_steps: 0,
            rejected_steps: 0,
        };
        tr.push(t0, y0, dy0, 0.0);
        tr
    }
}

/// A uniform sampling grid `t0, t0 + dt, ..., t_end`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplingSpec {
    pub dt: f64,
    pub t0: f64,
    pub t_end: f64,
}

impl SamplingSpec {
    pub fn new(t0: f64, t_end: f64, dt: f64) -> Result<Self, IntegrateError> {
        let spec = SamplingSpec { dt, t0, t_end };
        spec.intervals()?;
        Ok(spec)
    }

    /// Number of sampling intervals; the grid has one more sample than this.
    pub fn intervals(&self) -> Result<usize, IntegrateError> {
        if !(self.dt > 0.0 && self.dt.is_finite()) || !(self.t_end > self.t0) {
            return Err(IntegrateError::InvalidInput(format!(
                "sampling requires dt > 0 and t_end > t0 (dt={}, t0={}, t_end={})",
                self.dt, self.t0, self.t_end
            )));
        }
        let ratio = (self.t_end - self.t0) / self.dt;
        let n = ratio.round();
        if n < 1.0 || (ratio - n).abs() > 1e-9 * n.max(1.0) {
            return Err(IntegrateError::InvalidInput(format!("(t_end - t0) / dt = {ratio} is not a positive integer")));
        }
        Ok(n as usize)
    }

    pub fn sample_count(&self) -> Result<usize, IntegrateError> {
        Ok(self.intervals()? + 1)
    }

    pub fn time(&self, i: usize) -> f64 {
        self.t0 + i as f64 * self.dt
    }
}

// L-stable ROS4 coefficients (transformed-variable form).
const GAMMA: f64 = 0.57282;
const A21: f64 = 2.0;
const A31: f64 = 1.867943637803922;
const A32: f64 = 0.2344449711399156;
const C21: f64 = -7.137615036412310;
const C31: f64 = 2.580708087951457;
const C32: f64 = 0.6515950076447975;
const C41: f64 = -2.137148994382534;
const C42: f64 = -0.3214669691237626;
const C43: f64 = -0.6949742501781779;
const B1: f64 = 2.255570073418735;
const B2: f64 = 0.2870493262186792;
const B3: f64 = 0.4353179431840180;
const B4: f64 = 1.093502252409163;
const E1: f64 = -0.2815431932141155;
const E2: f64 = -0.07276199124938920;
const E3: f64 = -0.1082196201495311;
const E4: f64 = -1.093502252409163;
const STAGE_C2: f64 = 1.145640000000000;
const STAGE_C3: f64 = 0.6552168638155900;
const D1: f64 = 0.57282;
const D2: f64 = -1.769193891319233;
const D3: f64 = 0.7592633437920482;
const D4: f64 = -0.1049021087100450;

/// Embedded error estimator order plus one, the PI controller's exponent base.
const ERROR_EXPONENT_BASE: f64 = 4.0;

fn weighted_norm(err: &[f64], y_old: &[f64], y_new: &[f64], tol: &ToleranceSpec) -> f64 {
    let n = err.len() as f64;
    let sum: f64 = err
        .iter()
        .zip(y_old.iter().zip(y_new))
        .map(|(e, (a, b))| {
            let scale = tol.atol + tol.rtol * a.abs().max(b.abs());
            (e / scale).powi(2)
        })
        .sum();
    (sum / n).sqrt()
}

struct RosenbrockWork {
    n: usize,
    jac: Vec<f64>,
    dfdt: Vec<f64>,
    f: Vec<f64>,
    ytmp: Vec<f64>,
    k: [Vec<f64>; 4],
}

impl RosenbrockWork {
    fn new(n: usize) -> Self {
        RosenbrockWork {
            n,
            jac: vec![0.0; n * n],
            dfdt: vec![0.0; n],
            f: vec![0.0; n],
            ytmp: vec![0.0; n],
            k: [vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]],
        }
    }
}

/// One Rosenbrock step from `(t, y)` with derivative `f0 = f(t, y)`.
/// Writes the order-4 solution into `y_new` and the error estimate into `err`.
fn rosenbrock_step<S: OdeSystem + ?Sized>(
    system: &S,
    t: f64,
    y: &[f64],
    f0: &[f64],
    h: f64,
    w: &mut RosenbrockWork,
    y_new: &mut [f64],
    err: &mut [f64],
) -> Result<(), IntegrateError> {
    let n = w.n;
    system.jacobian(t, y, &mut w.jac);
    system.time_derivative(t, y, &mut w.dfdt);
    let fac = 1.0 / (h * GAMMA);
    let m = DMatrix::from_fn(n, n, |i, j| {
        let diag = if i == j { fac } else { 0.0 };
        diag - w.jac[i * n + j]
    });
    let lu = m.lu();
    let solve = |rhs: &[f64]| -> Result<Vec<f64>, IntegrateError> {
        lu.solve(&DVector::from_column_slice(rhs))
            .map(|v| v.as_slice().to_vec())
            .ok_or(IntegrateError::SingularMatrix { t })
    };

    // Stage 1
    let rhs: Vec<f64> = (0..n).map(|i| f0[i] + h * D1 * w.dfdt[i]).collect();
    w.k[0] = solve(&rhs)?;

    // Stage 2
    for i in 0..n {
        w.ytmp[i] = y[i] + A21 * w.k[0][i];
    }
    system.rhs(t + STAGE_C2 * h, &w.ytmp, &mut w.f);
    let rhs: Vec<f64> = (0..n).map(|i| w.f[i] + h * D2 * w.dfdt[i] + C21 * w.k[0][i] / h).collect();
    w.k[1] = solve(&rhs)?;

    // Stages 3 and 4 share their evaluation point.
    for i in 0..n {
        w.ytmp[i] = y[i] + A31 * w.k[0][i] + A32 * w.k[1][i];
    }
    system.rhs(t + STAGE_C3 * h, &w.ytmp, &mut w.f);
    let rhs: Vec<f64> = (0..n).map(|i| w.f[i] + h * D3 * w.dfdt[i] + (C31 * w.k[0][i] + C32 * w.k[1][i]) / h).collect();
    w.k[2] = solve(&rhs)?;
    let rhs: Vec<f64> = (0..n)
        .map(|i| w.f[i] + h * D4 * w.dfdt[i] + (C41 * w.k[0][i] + C42 * w.k[1][i] + C43 * w.k[2][i]) / h)
        .collect();
    w.k[3] = solve(&rhs)?;

    for i in 0..n {
        let [k1, k2, k3, k4] = [w.k[0][i], w.k[1][i], w.k[2][i], w.k[3][i]];
        y_new[i] = y[i] + B1 * k1 + B2 * k2 + B3 * k3 + B4 * k4;
        err[i] = E1 * k1 + E2 * k2 + E3 * k3 + E4 * k4;
    }
    Ok(())
}

fn check_span(y0: &[f64], dim: usize, t0: f64, t_end: f64) -> Result<(), IntegrateError> {
    if y0.len() != dim {
        return Err(IntegrateError::InvalidInput(format!(
            "initial state has {} components, system dimension is {dim}",
            y0.len()
        )));
    }
    if !(t_end > t0) || !t0.is_finite() || !t_end.is_finite() {
        return Err(IntegrateError::InvalidInput(format!("span ({t0}, {t_end}) must satisfy t_end > t0")));
    }
    if y0.iter().any(|v| !v.is_finite()) {
        return Err(IntegrateError::NonFiniteState { t: t0 });
    }
    Ok(())
}

/// Integrates `system` from `y0` over `span` with the default step controller.
pub fn integrate_stiff<S: OdeSystem + ?Sized>(
    system: &S,
    y0: &[f64],
    span: (f64, f64),
    tol: &ToleranceSpec,
) -> Result<Trajectory, IntegrateError> {
    integrate_stiff_with(system, y0, span, tol, &StepControl::default())
}

pub fn integrate_stiff_with<S: OdeSystem + ?Sized>(
    system: &S,
    y0: &[f64],
    span: (f64, f64),
    tol: &ToleranceSpec,
    control: &StepControl,
) -> Result<Trajectory, IntegrateError> {
    let n = system.dimension();
    let (t0, t_end) = span;
    check_span(y0, n, t0, t_end)?;
    tol.validate()?;

    let length = t_end - t0;
    let h_min = 1e-14 * length;
    let mut f = vec![0.0; n];
    system.rhs(t0, y0, &mut f);
    let mut traj = Trajectory::start(n, t0, y0, &f);

    let mut work = RosenbrockWork::new(n);
    let mut y = y0.to_vec();
    let mut y_new = vec![0.0; n];
    let mut f_new = vec![0.0; n];
    let mut err = vec![0.0; n];
    let mut t = t0;
    let mut h = control.initial_step.min(length);
    let mut err_prev: Option<f64> = None;
    let mut last_rejected = false;
    let stop_count = match &control.stops {
        Some(spec) => spec.intervals()?,
        None => 0,
    };
    let mut next_stop = 1usize;

    while t < t_end {
        if traj.accepted_steps + traj.rejected_steps >= control.max_steps {
            return Err(IntegrateError::TooManySteps(control.max_steps));
        }
        let mut target = t_end;
        if let Some(spec) = &control.stops {
            while next_stop < stop_count && spec.time(next_stop) <= t {
                next_stop += 1;
            }
            if next_stop < stop_count && spec.time(next_stop) < t_end {
                target = spec.time(next_stop);
            }
        }
        // Land exactly on the target; avoid a sliver step before it.
        let remaining = target - t;
        let last = h >= remaining || remaining - h < 1e-12 * length;
        let h_step = if last { remaining } else { h };

        rosenbrock_step(system, t, &y, &f, h_step, &mut work, &mut y_new, &mut err)?;
        let err_norm =
            if y_new.iter().all(|v| v.is_finite()) { weighted_norm(&err, &y, &y_new, tol) } else { f64::INFINITY };

        if err_norm <= 1.0 {
            let t_new = if last { target } else { t + h_step };
            system.rhs(t_new, &y_new, &mut f_new);
            if f_new.iter().any(|v| !v.is_finite()) {
                return Err(IntegrateError::NonFiniteState { t: t_new });
            }
            traj.push(t_new, &y_new, &f_new, err_norm);
            traj.accepted_steps += 1;
            std::mem::swap(&mut y, &mut y_new);
            std::mem::swap(&mut f, &mut f_new);
            t = t_new;

            let e = err_norm.max(1e-10);
            let mut factor = control.safety * e.powf(-0.7 / ERROR_EXPONENT_BASE);
            if let Some(prev) = err_prev {
                factor *= prev.max(1e-10).powf(0.4 / ERROR_EXPONENT_BASE);
            }
            factor = factor.clamp(control.min_factor, control.max_factor);
            if last_rejected {
                factor = factor.min(1.0);
            }
            h = h_step * factor;
            err_prev = Some(e);
            last_rejected = false;
        } else {
            traj.rejected_steps += 1;
            let factor = if err_norm.is_finite() {
                (control.safety * err_norm.powf(-1.0 / ERROR_EXPONENT_BASE)).max(control.min_factor)
            } else {
                control.min_factor
            };
            h = h_step * factor;
            last_rejected = true;
            if h < h_min {
                return Err(IntegrateError::StepSizeUnderflow { t, h, min: h_min });
            }
        }
    }
    Ok(traj)
}

/// Classical RK4 with a fixed step. Diverges on stiff problems unless the
/// step is tiny; divergence is reported as [`IntegrateError::NonFiniteState`].
pub fn integrate_reference<S: OdeSystem + ?Sized>(
    system: &S,
    y0: &[f64],
    span: (f64, f64),
    step: f64,
) -> Result<Trajectory, IntegrateError> {
    let n = system.dimension();
    let (t0, t_end) = span;
    check_span(y0, n, t0, t_end)?;
    if !(step > 0.0) {
        return Err(IntegrateError::InvalidInput(format!("fixed step {step} must be > 0")));
    }
    let ratio = (t_end - t0) / step;
    let steps = ratio.round();
    if steps < 1.0 || (ratio - steps).abs() > 1e-9 * steps {
        return Err(IntegrateError::InvalidInput(format!(
            "span length is not an integer multiple of the step ({ratio} steps)"
        )));
    }
    let steps = steps as usize;

    let mut f = vec![0.0; n];
    system.rhs(t0, y0, &mut f);
    let mut traj = Trajectory::start(n, t0, y0, &f);
    let mut y = y0.to_vec();
    let mut k2 = vec![0.0; n];
    let mut k3 = vec![0.0; n];
    let mut k4 = vec![0.0; n];
    let mut tmp = vec![0.0; n];

    for i in 0..steps {
        let t = t0 + i as f64 * step;
        let half = 0.5 * step;
        for j in 0..n {
            tmp[j] = y[j] + half * f[j];
        }
        system.rhs(t + half, &tmp, &mut k2);
        for j in 0..n {
            tmp[j] = y[j] + half * k2[j];
        }
        system.rhs(t + half, &tmp, &mut k3);
        for j in 0..n {
            tmp[j] = y[j] + step * k3[j];
        }
        system.rhs(t + step, &tmp, &mut k4);
        for j in 0..n {
            y[j] += step / 6.0 * (f[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j]);
        }
        let t_new = if i + 1 == steps { t_end } else { t0 + (i + 1) as f64 * step };
        system.rhs(t_new, &y, &mut f);
        if y.iter().chain(f.iter()).any(|v| !v.is_finite()) {
            return Err(IntegrateError::NonFiniteState { t: t_new });
        }
        traj.push(t_new, &y, &f, 0.0);
        traj.accepted_steps += 1;
    }
    Ok(traj)
}

/// Cubic Hermite interpolation on `[ta, tb]` from endpoint states and slopes.
fn hermite(t: f64, ta: f64, tb: f64, ya: &[f64], yb: &[f64], fa: &[f64], fb: &[f64], out: &mut [f64]) {
    let h = tb - ta;
    let s = (t - ta) / h;
    let s2 = s * s;
    let s3 = s2 * s;
    let h00 = 2.0 * s3 - 3.0 * s2 + 1.0;
    let h10 = s3 - 2.0 * s2 + s;
    let h01 = -2.0 * s3 + 3.0 * s2;
    let h11 = s3 - s2;
    for i in 0..out.len() {
        out[i] = h00 * ya[i] + h10 * h * fa[i] + h01 * yb[i] + h11 * h * fb[i];
    }
}

/// Samples `trajectory` on the uniform grid of `spec` by cubic Hermite dense
/// output. Grid points that coincide with an accepted step return that
/// step's state exactly.
pub fn sample(
    trajectory: &Trajectory,
    spec: &SamplingSpec,
    channel_names: Vec<String>,
) -> Result<TimeSeries, IntegrateError> {
    let count = spec.sample_count()?;
    let n = trajectory.dimension;
    if trajectory.is_empty() || spec.t0 < trajectory.t0() || spec.t_end > trajectory.t_end() {
        return Err(IntegrateError::Range {
            start: spec.t0,
            end: spec.t_end,
            t0: trajectory.times.first().copied().unwrap_or(f64::NAN),
            t_end: trajectory.times.last().copied().unwrap_or(f64::NAN),
        });
    }
    if channel_names.len() != n {
        return Err(IntegrateError::InvalidInput(format!(
            "{} channel names for a {n}-dimensional trajectory",
            channel_names.len()
        )));
    }

    let mut values = vec![0.0; n * count];
    let mut times = Vec::with_capacity(count);
    let mut point = vec![0.0; n];
    let mut seg = 0usize;
    let last = trajectory.len() - 1;
    for i in 0..count {
        let t = if i + 1 == count { spec.t_end } else { spec.time(i) };
        times.push(t);
        while seg < last && trajectory.times[seg + 1] < t {
            seg += 1;
        }
        if trajectory.times[seg] == t || last == 0 {
            point.copy_from_slice(trajectory.state(seg));
        } else if seg < last && trajectory.times[seg + 1] == t {
            point.copy_from_slice(trajectory.state(seg + 1));
        } else {
            hermite(
                t,
                trajectory.times[seg],
                trajectory.times[seg + 1],
                trajectory.state(seg),
                trajectory.state(seg + 1),
                trajectory.derivative(seg),
                trajectory.derivative(seg + 1),
                &mut point,
            );
        }
        for (ch, v) in point.iter().enumerate() {
            values[ch * count + i] = *v;
        }
    }
    Ok(TimeSeries::from_channel_major(times, values, channel_names).expect("sampled grid is uniform and finite"))
}

/// Clamps values in `(-atol, 0)` to zero; anything more negative is an error.
pub fn clamp_small_negatives(series: &mut TimeSeries, atol: f64) -> Result<(), IntegrateError> {
    for ch in 0..series.channels() {
        let mut offending = None;
        for (i, v) in series.channel_mut(ch).iter_mut().enumerate() {
            if *v < 0.0 {
                if *v > -atol {
                    *v = 0.0;
                } else {
                    offending = Some((i, *v));
                    break;
                }
            }
        }
        if let Some((i, value)) = offending {
            return Err(IntegrateError::NegativeConcentration { t: series.times()[i], channel: ch, value });
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kinetics::{mass_total, RateConstants, Rober, StateVector};

    struct Zero;
    impl OdeSystem for Zero {
        fn dimension(&self) -> usize {
            3
        }
        fn rhs(&self, _t: f64, _y: &[f64], dy: &mut [f64]) {
            dy.iter_mut().for_each(|v| *v = 0.0);
        }
        fn jacobian(&self, _t: f64, _y: &[f64], jac: &mut [f64]) {
            jac.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    struct Linear(f64);
    impl OdeSystem for Linear {
        fn dimension(&self) -> usize {
            1
        }
        fn rhs(&self, _t: f64, y: &[f64], dy: &mut [f64]) {
            dy[0] = self.0 * y[0];
        }
        fn jacobian(&self, _t: f64, _y: &[f64], jac: &mut [f64]) {
            jac[0] = self.0;
        }
    }

    /// y' = -y + cos(t) + sin(t)... solved by y = sin(t) + c e^{-t}; exercises the time derivative.
    struct Forced;
    impl OdeSystem for Forced {
        fn dimension(&self) -> usize {
            1
        }
        fn rhs(&self, t: f64, y: &[f64], dy: &mut [f64]) {
            dy[0] = -y[0] + t.cos() + t.sin();
        }
        fn jacobian(&self, _t: f64, _y: &[f64], jac: &mut [f64]) {
            jac[0] = -1.0;
        }
        fn time_derivative(&self, t: f64, _y: &[f64], dfdt: &mut [f64]) {
            dfdt[0] = -t.sin() + t.cos();
        }
    }

    /// A nonlinear non-stiff system with a known solution: y1' = y2, y2' = -y1 (kept nonlinear
    /// through a Riccati equation y3' = -y3^2, y3 = 1 / (1 + t)).
    struct Mixed;
    impl OdeSystem for Mixed {
        fn dimension(&self) -> usize {
            3
        }
        fn rhs(&self, _t: f64, y: &[f64], dy: &mut [f64]) {
            dy[0] = y[1];
            dy[1] = -y[0];
            dy[2] = -y[2] * y[2];
        }
        fn jacobian(&self, _t: f64, y: &[f64], jac: &mut [f64]) {
            jac.copy_from_slice(&[0.0, 1.0, 0.0, -1.0, 0.0, 0.0, 0.0, 0.0, -2.0 * y[2]]);
        }
    }

    fn fixed_step_errors(h: f64) -> (f64, f64) {
        let mut w = RosenbrockWork::new(3);
        let mut y = vec![0.0, 1.0, 1.0];
        let mut f = vec![0.0; 3];
        let mut y_new = vec![0.0; 3];
        let mut err = vec![0.0; 3];
        let steps = (1.0 / h).round() as usize;
        let mut t = 0.0;
        let mut lower = [0.0; 3];
        for _ in 0..steps {
            Mixed.rhs(t, &y, &mut f);
            rosenbrock_step(&Mixed, t, &y, &f, h, &mut w, &mut y_new, &mut err).unwrap();
            y.copy_from_slice(&y_new);
            for i in 0..3 {
                lower[i] = y_new[i] - err[i];
            }
            t += h;
        }
        let exact = [1f64.sin(), 1f64.cos(), 0.5];
        let e_high = (0..3).map(|i| (y[i] - exact[i]).abs()).fold(0.0, f64::max);
        // Local error of the embedded solution over a single step.
        Mixed.rhs(0.0, &[0.0, 1.0, 1.0], &mut f);
        let y0 = [0.0, 1.0, 1.0];
        rosenbrock_step(&Mixed, 0.0, &y0, &f, h, &mut w, &mut y_new, &mut err).unwrap();
        let exact1 = [h.sin(), h.cos(), 1.0 / (1.0 + h)];
        let e_low = (0..3).map(|i| (y_new[i] - err[i] - exact1[i]).abs()).fold(0.0, f64::max);
        (e_high, e_low)
    }

    #[test]
    fn method_has_order_four_with_order_three_embedding() {
        let (g1, l1) = fixed_step_errors(0.05);
        let (g2, l2) = fixed_step_errors(0.025);
        let global_order = (g1 / g2).log2();
        // The embedded solution is order 3, so its local error is O(h^4).
        let local_order = (l1 / l2).log2();
        assert!((global_order - 4.0).abs() < 0.3, "global order {global_order}");
        assert!((local_order - 4.0).abs() < 0.3, "embedded local order {local_order}");
    }

    #[test]
    fn stability_function_vanishes_at_infinity() {
        // For y' = lambda y one step gives y1 = R(h lambda) y0. The tabulated gamma is
        // rounded to 5 digits, which leaves |R(-inf)| at about 1.5e-5 instead of 0.
        let mut w = RosenbrockWork::new(1);
        let mut y_new = [0.0];
        let mut err = [0.0];
        for z in [-1e4, -1e6, -1e9, -1e12] {
            let sys = Linear(z);
            rosenbrock_step(&sys, 0.0, &[1.0], &[z], 1.0, &mut w, &mut y_new, &mut err).unwrap();
            assert!(y_new[0].abs() < 2e-5 + 10.0 / z.abs(), "R({z}) = {}", y_new[0]);
        }
        for z in [-0.5, -3.0, -50.0] {
            let sys = Linear(z);
            rosenbrock_step(&sys, 0.0, &[1.0], &[z], 1.0, &mut w, &mut y_new, &mut err).unwrap();
            assert!(y_new[0].abs() < 1.0);
        }
    }

    #[test]
    fn constant_system_gives_constant_trajectory() {
        let tr = integrate_stiff(&Zero, &[1.0, 2.0, 3.0], (0.0, 100.0), &ToleranceSpec::default()).unwrap();
        for i in 0..tr.len() {
            assert_eq!(tr.state(i), &[1.0, 2.0, 3.0]);
        }
        assert_eq!(tr.t_end(), 100.0);
        let rk = integrate_reference(&Zero, &[1.0, 2.0, 3.0], (0.0, 1.0), 0.25).unwrap();
        assert_eq!(rk.last_state(), &[1.0, 2.0, 3.0]);
        let s = sample(&tr, &SamplingSpec::new(0.0, 100.0, 7.0 + 3.0).unwrap(), names(3)).unwrap();
        for ch in 0..3 {
            assert!(s.channel(ch).iter().all(|v| *v == (ch + 1) as f64));
        }
    }

    fn names(n: usize) -> Vec<String> {
        (1..=n).map(|i| format!("y{i}")).collect()
    }

    #[test]
    fn exponential_decay_stiff() {
        let tol = ToleranceSpec::new(1e-8, 1e-10).unwrap();
        let tr = integrate_stiff(&Linear(-1.0), &[1.0], (0.0, 1.0), &tol).unwrap();
        assert!((tr.last_state()[0] - (-1f64).exp()).abs() < 1e-7);
        assert!(tr.error_estimates.iter().all(|e| *e <= 1.0));
        assert!(tr.times.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn non_autonomous_forcing() {
        let tol = ToleranceSpec::new(1e-9, 1e-12).unwrap();
        let tr = integrate_stiff(&Forced, &[1.0], (0.0, 3.0), &tol).unwrap();
        let exact = 3f64.sin() + (-3f64).exp();
        assert!((tr.last_state()[0] - exact).abs() < 1e-7);
    }

    #[test]
    fn exponential_decay_reference() {
        let tr = integrate_reference(&Linear(-1.0), &[1.0], (0.0, 1.0), 1e-3).unwrap();
        assert!((tr.last_state()[0] - (-1f64).exp()).abs() < 1e-10);
        assert_eq!(tr.len(), 1001);
    }

    #[test]
    fn reference_rejects_incommensurate_step() {
        let r = integrate_reference(&Linear(-1.0), &[1.0], (0.0, 1.0), 0.3);
        assert!(matches!(r, Err(IntegrateError::InvalidInput(_))));
    }

    #[test]
    fn rejects_bad_inputs() {
        let tol = ToleranceSpec::default();
        assert!(integrate_stiff(&Linear(-1.0), &[f64::NAN], (0.0, 1.0), &tol).is_err());
        assert!(integrate_stiff(&Linear(-1.0), &[1.0], (1.0, 1.0), &tol).is_err());
        assert!(ToleranceSpec::new(1.5, 1e-3).is_err());
        assert!(ToleranceSpec::new(1e-3, 0.0).is_err());
    }

    #[test]
    fn underflow_is_reported() {
        // Finite-time blow-up: y' = y^2, y(0) = 1 explodes at t = 1.
        struct Blowup;
        impl OdeSystem for Blowup {
            fn dimension(&self) -> usize {
                1
            }
            fn rhs(&self, _t: f64, y: &[f64], dy: &mut [f64]) {
                dy[0] = y[0] * y[0];
            }
            fn jacobian(&self, _t: f64, y: &[f64], jac: &mut [f64]) {
                jac[0] = 2.0 * y[0];
            }
        }
        let r = integrate_stiff(&Blowup, &[1.0], (0.0, 2.0), &ToleranceSpec::default());
        assert!(
            matches!(r, Err(IntegrateError::StepSizeUnderflow { .. }) | Err(IntegrateError::NonFiniteState { .. })),
            "{r:?}"
        );
    }

    #[test]
    fn rober_short_horizon_matches_reference() {
        let sys = Rober::new(RateConstants::ROBERTSON);
        let tol = ToleranceSpec::new(1e-8, 1e-10).unwrap();
        let stiff = integrate_stiff(&sys, &[1.0, 0.0, 0.0], (0.0, 0.1), &tol).unwrap();
        let rk = integrate_reference(&sys, &[1.0, 0.0, 0.0], (0.0, 0.1), 1e-5).unwrap();
        for i in 0..3 {
            assert!((stiff.last_state()[i] - rk.last_state()[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn rober_to_forty_seconds() {
        // Reference values from the same integrator at rtol = 1e-12.
        let sys = Rober::new(RateConstants::ROBERTSON);
        let tol = ToleranceSpec::new(1e-8, 1e-10).unwrap();
        let tr = integrate_stiff(&sys, &[1.0, 0.0, 0.0], (0.0, 40.0), &tol).unwrap();
        let y = tr.last_state();
        let expect = [0.7158, 9.185e-6, 0.2842];
        for i in 0..3 {
            assert!(((y[i] - expect[i]) / expect[i]).abs() < 5e-4, "{i}: {}", y[i]);
        }
        assert!((mass_total(&StateVector::from_slice(y)) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sample_counts_and_exact_nodes() {
        let tr = integrate_stiff(&Linear(-1.0), &[1.0], (0.0, 2.0), &ToleranceSpec::default()).unwrap();
        let spec = SamplingSpec::new(0.0, 2.0, 0.5).unwrap();
        let s = sample(&tr, &spec, names(1)).unwrap();
        assert_eq!(s.len(), 5);
        assert_eq!(s.channel(0)[0].to_bits(), 1f64.to_bits());
        assert_eq!(s.channel(0)[4].to_bits(), tr.last_state()[0].to_bits());
        for (i, v) in s.channel(0).iter().enumerate() {
            assert!((v - (-0.5 * i as f64).exp()).abs() < 1e-6);
        }
        let out = SamplingSpec::new(0.0, 3.0, 0.5).unwrap();
        assert!(matches!(sample(&tr, &out, names(1)), Err(IntegrateError::Range { .. })));
    }

    #[test]
    fn grid_stops_make_samples_accepted_states() {
        let sys = Rober::new(RateConstants::ROBERTSON);
        let spec = SamplingSpec::new(0.0, 2e4, 1.0).unwrap();
        let control = StepControl { stops: Some(spec), ..StepControl::default() };
        let y0 = [0.776, 6.913e-5, 0.081];
        let tr = integrate_stiff_with(&sys, &y0, (0.0, 2e4), &ToleranceSpec::default(), &control).unwrap();
        let s = sample(&tr, &spec, names(3)).unwrap();
        let mut node = 0;
        for i in 0..s.len() {
            while tr.times[node] < s.times()[i] {
                node += 1;
            }
            assert_eq!(tr.times[node], s.times()[i]);
            for ch in 0..3 {
                assert_eq!(s.channel(ch)[i].to_bits(), tr.state(node)[ch].to_bits());
            }
        }
        // Past the initial transient y2 decays monotonically and stays positive.
        let y2 = s.channel(1);
        assert!(y2.iter().all(|v| *v > 0.0));
        assert!(y2[1000..].windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn paper_grid_size() {
        let spec = SamplingSpec::new(0.0, 1e5, 1.0).unwrap();
        assert_eq!(spec.sample_count().unwrap(), 100_001);
        assert!(SamplingSpec::new(0.0, 10.0, 3.0).is_err());
    }

    #[test]
    fn stiffness_evidence() {
        let sys = Rober::new(RateConstants::ROBERTSON);
        let tr = integrate_stiff(&sys, &[1.0, 0.0, 0.0], (0.0, 100.0), &ToleranceSpec::default()).unwrap();
        assert!(tr.accepted_steps < 10_000);
        for h in [1e-3, 1e-2, 1e-1] {
            match integrate_reference(&sys, &[1.0, 0.0, 0.0], (0.0, 100.0), h) {
                Err(IntegrateError::NonFiniteState { .. }) => {}
                Ok(rk) => {
                    let err = (0..3).map(|i| (rk.last_state()[i] - tr.last_state()[i]).abs()).fold(0.0, f64::max);
                    assert!(err > 1e-2, "h={h} err={err}");
                }
                Err(e) => panic!("{e}"),
            }
        }
    }

    #[test]
    fn deterministic() {
        let sys = Rober::new(RateConstants::ROBERTSON);
        let a = integrate_stiff(&sys, &[1.0, 0.0, 0.0], (0.0, 10.0), &ToleranceSpec::default()).unwrap();
        let b = integrate_stiff(&sys, &[1.0, 0.0, 0.0], (0.0, 10.0), &ToleranceSpec::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn clamp_rules() {
        let mut s = TimeSeries::from_channel_major(vec![0.0, 1.0], vec![1.0, -1e-12], names(1)).unwrap();
        clamp_small_negatives(&mut s, 1e-10).unwrap();
        assert_eq!(s.channel(0), &[1.0, 0.0]);
        let mut s = TimeSeries::from_channel_major(vec![0.0, 1.0], vec![1.0, -1e-6], names(1)).unwrap();
        assert!(clamp_small_negatives(&mut s, 1e-10).is_err());
    }
}
