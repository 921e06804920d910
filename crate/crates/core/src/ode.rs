//! Fixed-step and adaptive integrators over tape variables.
//!
//! [`ode_solve`] runs Euler or classical RK4 on the tape, so the returned
//! checkpoint states can be differentiated through every stage. The
//! integration grid is `{k·h}` merged with the checkpoints, which makes every
//! checkpoint an exact grid point and means adding checkpoints never moves
//! existing grid points.
//!
//! [`dopri5_solve`] is a forward-only Dormand–Prince 5(4) integrator with PI
//! step control and dense output, intended for inference.

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{SolverError, TensorError};
use crate::tensor::Tensor;

/// Right-hand side `f(t, state)` of an autonomous or time-dependent ODE.
pub trait VectorField<'t> {
    fn eval(&self, t: f64, state: Var<'t>) -> Result<Var<'t>, TensorError>;

    /// Called once before each solver step with the step's start time. Fields
    /// that switch behaviour per time segment latch the segment here so all
    /// stages of one step see the same branch.
    fn begin_step(&self, _t0: f64) {}
}

impl<'t, F> VectorField<'t> for F
where
    F: Fn(f64, Var<'t>) -> Result<Var<'t>, TensorError>,
{
    fn eval(&self, t: f64, state: Var<'t>) -> Result<Var<'t>, TensorError> {
        self(t, state)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Euler,
    #[default]
    Rk4,
    Dopri5,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub method: Method,
    /// Fixed step for Euler/RK4, in forecast-step units.
    pub step: f64,
    pub rtol: f64,
    pub atol: f64,
    pub max_steps: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            method: Method::Rk4,
            step: 0.1,
            rtol: 1e-3,
            atol: 1e-6,
            max_steps: 100_000,
        }
    }
}

impl SolverConfig {
    pub fn rk4(step: f64) -> Self {
        Self {
            step,
            ..Self::default()
        }
    }

    pub fn dopri5(rtol: f64, atol: f64) -> Self {
        Self {
            method: Method::Dopri5,
            rtol,
            atol,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), SolverError> {
        if !(self.step > 0.0) || !self.step.is_finite() {
            return Err(SolverError::Config(format!("step must be positive, got {}", self.step)));
        }
        if !(self.rtol > 0.0) || !(self.atol > 0.0) {
            return Err(SolverError::Config(format!(
                "rtol and atol must be positive, got {} and {}",
                self.rtol, self.atol
            )));
        }
        if self.max_steps == 0 {
            return Err(SolverError::Config("max_steps must be at least 1".into()));
        }
        Ok(())
    }
}

const H_MIN: f64 = 1e-10;

fn stage<'t>(
    f: &impl VectorField<'t>,
    t: f64,
    state: Var<'t>,
    index: usize,
) -> Result<Var<'t>, SolverError> {
    f.eval(t, state).map_err(|source| SolverError::Stage {
        t,
        stage: index,
        source,
    })
}

fn wrap<T>(t: f64, index: usize, r: Result<T, TensorError>) -> Result<T, SolverError> {
    r.map_err(|source| SolverError::Stage {
        t,
        stage: index,
        source,
    })
}

pub fn euler_step<'t>(
    f: &impl VectorField<'t>,
    z: Var<'t>,
    t: f64,
    h: f64,
) -> Result<Var<'t>, SolverError> {
    f.begin_step(t);
    let k1 = stage(f, t, z, 1)?;
    wrap(t, 1, k1.scale(h).and_then(|d| z.add(d)))
}

/// One classical Runge–Kutta step of size `h` from `(t, z)`.
pub fn rk4_step<'t>(
    f: &impl VectorField<'t>,
    z: Var<'t>,
    t: f64,
    h: f64,
) -> Result<Var<'t>, SolverError> {
    if !(h > 0.0) {
        return Err(SolverError::Config(format!("step must be positive, got {h}")));
    }
    f.begin_step(t);
    let half = 0.5 * h;
    let k1 = stage(f, t, z, 1)?;
    let z2 = wrap(t, 2, k1.scale(half).and_then(|d| z.add(d)))?;
    let k2 = stage(f, t + half, z2, 2)?;
    let z3 = wrap(t, 3, k2.scale(half).and_then(|d| z.add(d)))?;
    let k3 = stage(f, t + half, z3, 3)?;
    let z4 = wrap(t, 4, k3.scale(h).and_then(|d| z.add(d)))?;
    let k4 = stage(f, t + h, z4, 4)?;
    // z + h/6 (k1 + 2 k2 + 2 k3 + k4)
    wrap(t + h, 4, (|| {
        let mid = k2.add(k3)?.scale(2.0)?;
        let total = k1.add(mid)?.add(k4)?;
        z.add(total.scale(h / 6.0)?)
    })())
}

fn validate_checkpoints(checkpoints: &[f64]) -> Result<(), SolverError> {
    let ok = !checkpoints.is_empty()
        && checkpoints.iter().all(|t| t.is_finite())
        && checkpoints[0] > 0.0
        && checkpoints.windows(2).all(|w| w[1] > w[0]);
    if ok {
        Ok(())
    } else {
        Err(SolverError::Checkpoints(checkpoints.to_vec()))
    }
}

fn same_point(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9 * a.abs().max(1.0)
}

/// Integration grid for a fixed step: every `k·h` short of the last
/// checkpoint, plus the checkpoints themselves. Returns `(time, checkpoint
/// index)` pairs; a grid point that coincides with a checkpoint takes the
/// checkpoint's exact value.
pub fn fixed_grid(checkpoints: &[f64], h: f64) -> Vec<(f64, Option<usize>)> {
    let t_end = *checkpoints.last().expect("non-empty checkpoints");
    let mut grid: Vec<(f64, Option<usize>)> = Vec::new();
    let mut next_cp = 0;
    let mut k = 1usize;
    loop {
        let t = k as f64 * h;
        while next_cp < checkpoints.len() && checkpoints[next_cp] < t && !same_point(checkpoints[next_cp], t) {
            grid.push((checkpoints[next_cp], Some(next_cp)));
            next_cp += 1;
        }
        if next_cp < checkpoints.len() && same_point(checkpoints[next_cp], t) {
            grid.push((checkpoints[next_cp], Some(next_cp)));
            next_cp += 1;
        } else if t < t_end {
            grid.push((t, None));
        }
        if next_cp == checkpoints.len() {
            break;
        }
        k += 1;
    }
    grid
}

/// Integrates from `t = 0` and returns the state at each checkpoint.
pub fn ode_solve<'t>(
    f: &impl VectorField<'t>,
    z0: Var<'t>,
    checkpoints: &[f64],
    cfg: &SolverConfig,
) -> Result<Vec<Var<'t>>, SolverError> {
    cfg.validate()?;
    validate_checkpoints(checkpoints)?;
    let step = match cfg.method {
        Method::Euler => euler_step,
        Method::Rk4 => rk4_step,
        Method::Dopri5 => {
            let tape = z0.tape();
            return dopri5_solve(f, z0, checkpoints, cfg).map(|states| {
                states.iter().map(|s| tape.constant(s)).collect()
            });
        }
    };
    let grid = fixed_grid(checkpoints, cfg.step);
    if grid.len() > cfg.max_steps {
        return Err(SolverError::MaxSteps {
            max_steps: cfg.max_steps,
            target: checkpoints[checkpoints.len() - 1],
        });
    }
    let mut out = Vec::with_capacity(checkpoints.len());
    let (mut t, mut z) = (0.0, z0);
    for (t_next, cp) in grid {
        z = step(f, z, t, t_next - t)?;
        t = t_next;
        if cp.is_some() {
            out.push(z);
        }
    }
    Ok(out)
}

const A: [[f64; 6]; 6] = [
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
const C: [f64; 7] = [0.0, 0.2, 0.3, 0.8, 8.0 / 9.0, 1.0, 1.0];
const E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];
const D: [f64; 7] = [
    -12715105075.0 / 11282082432.0,
    0.0,
    87487479700.0 / 32700410799.0,
    -10690763975.0 / 1880347072.0,
    701980252875.0 / 199316789632.0,
    -1453857185.0 / 822651844.0,
    69997945.0 / 29380423.0,
];

/// Evaluates a tape-based field on plain values, with no gradient recorded.
fn eval_values<'t>(
    f: &impl VectorField<'t>,
    tape: &'t crate::autodiff::Tape,
    shape: &[usize],
    t: f64,
    y: &[f64],
    index: usize,
) -> Result<Vec<f64>, SolverError> {
    let state = tape.constant_raw(shape.to_vec(), y.to_vec());
    let d = stage(f, t, state, index)?;
    Ok(d.value_rc().as_ref().clone())
}

fn axpy(y: &[f64], terms: &[(f64, &[f64])]) -> Vec<f64> {
    let mut out = y.to_vec();
    for (c, k) in terms {
        if *c == 0.0 {
            continue;
        }
        out.iter_mut().zip(k.iter()).for_each(|(o, v)| *o += c * v);
    }
    out
}

/// Adaptive Dormand–Prince 5(4) from `t = 0`; forward only.
///
/// Stage inputs are recorded as constants on `z0`'s tape, which must be the
/// tape the field's own variables live on.
pub fn dopri5_solve<'t>(
    f: &impl VectorField<'t>,
    z0: Var<'t>,
    checkpoints: &[f64],
    cfg: &SolverConfig,
) -> Result<Vec<Tensor>, SolverError> {
    cfg.validate()?;
    validate_checkpoints(checkpoints)?;
    dopri5_inner(f, z0.tape(), &z0.value(), checkpoints, cfg)
}

fn dopri5_inner<'t>(
    f: &impl VectorField<'t>,
    tape: &'t crate::autodiff::Tape,
    z0: &Tensor,
    checkpoints: &[f64],
    cfg: &SolverConfig,
) -> Result<Vec<Tensor>, SolverError> {
    let shape = z0.shape().to_vec();
    let n = z0.len() as f64;
    let (rtol, atol) = (cfg.rtol, cfg.atol);
    let t_end = checkpoints[checkpoints.len() - 1];
    let err_norm = |y0: &[f64], y1: &[f64], e: &[f64]| -> f64 {
        let s: f64 = y0
            .iter()
            .zip(y1)
            .zip(e)
            .map(|((a, b), e)| {
                let sc = atol + rtol * a.abs().max(b.abs());
                (e / sc).powi(2)
            })
            .sum();
        (s / n).sqrt()
    };

    let mut t = 0.0;
    let mut y = z0.data().to_vec();
    f.begin_step(t);
    let mut k1 = eval_values(f, tape, &shape, t, &y, 1)?;

    // Initial step guess (Hairer & Wanner, II.4).
    let mut h = {
        let d0 = err_norm(&y, &y, &y);
        let d1 = err_norm(&y, &y, &k1);
        let h0 = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
        let y1 = axpy(&y, &[(h0, &k1)]);
        let k2 = eval_values(f, tape, &shape, t + h0, &y1, 1)?;
        let diff: Vec<f64> = k2.iter().zip(&k1).map(|(a, b)| (a - b) / h0).collect();
        let d2 = err_norm(&y, &y, &diff);
        let h1 = if d1.max(d2) <= 1e-15 {
            (h0 * 1e-3).max(1e-6)
        } else {
            (0.01 / d1.max(d2)).powf(0.2)
        };
        (100.0 * h0).min(h1).min(t_end)
    };

    let (beta, safe, fac_min, fac_max) = (0.04, 0.9, 0.2, 10.0);
    let expo = 0.2 - beta * 0.75;
    let mut fac_old: f64 = 1e-4;
    let mut out = Vec::with_capacity(checkpoints.len());
    let mut next_cp = 0;
    let mut steps = 0;

    while next_cp < checkpoints.len() {
        if steps >= cfg.max_steps {
            return Err(SolverError::MaxSteps {
                max_steps: cfg.max_steps,
                target: t_end,
            });
        }
        if h < H_MIN {
            return Err(SolverError::StepUnderflow { t, h });
        }
        let last = t + h >= t_end;
        if last {
            h = t_end - t;
        }
        steps += 1;
        f.begin_step(t);

        let mut k: Vec<Vec<f64>> = vec![k1.clone()];
        for s in 0..5 {
            let terms: Vec<(f64, &[f64])> = (0..=s).map(|j| (h * A[s][j], k[j].as_slice())).collect();
            let ys = axpy(&y, &terms);
            k.push(eval_values(f, tape, &shape, t + C[s + 1] * h, &ys, s + 2)?);
        }
        let terms: Vec<(f64, &[f64])> = (0..6).map(|j| (h * A[5][j], k[j].as_slice())).collect();
        let y_new = axpy(&y, &terms);
        let k7 = eval_values(f, tape, &shape, t + h, &y_new, 7)?;
        k.push(k7);

        let mut err_vec = vec![0.0; y.len()];
        for (j, kj) in k.iter().enumerate() {
            err_vec.iter_mut().zip(kj).for_each(|(e, v)| *e += h * E[j] * v);
        }
        let err = err_norm(&y, &y_new, &err_vec);
        let fac11 = err.powf(expo);

        if err <= 1.0 {
            // Dense output on [t, t + h].
            let t_new = t + h;
            while next_cp < checkpoints.len() && (checkpoints[next_cp] <= t_new || last) {
                let theta = if last && next_cp == checkpoints.len() - 1 {
                    1.0
                } else {
                    ((checkpoints[next_cp] - t) / h).clamp(0.0, 1.0)
                };
                let dense: Vec<f64> = if theta == 1.0 {
                    y_new.clone()
                } else {
                    let th1 = 1.0 - theta;
                    (0..y.len())
                        .map(|i| {
                            let ydiff = y_new[i] - y[i];
                            let bspl = h * k[0][i] - ydiff;
                            let c4 = ydiff - h * k[6][i] - bspl;
                            let c5: f64 = h * (0..7).map(|j| D[j] * k[j][i]).sum::<f64>();
                            y[i] + theta * (ydiff + th1 * (bspl + theta * (c4 + th1 * c5)))
                        })
                        .collect()
                };
                out.push(Tensor::from_parts(shape.clone(), dense));
                next_cp += 1;
            }
            let fac = (fac11 / fac_old.powf(beta) / safe).clamp(1.0 / fac_max, 1.0 / fac_min);
            fac_old = err.max(1e-4);
            t = t_new;
            y = y_new;
            k1 = k.swap_remove(6);
            h /= fac;
        } else {
            h /= (fac11 / safe).min(1.0 / fac_min);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;

    fn identity_field<'t>() -> impl Fn(f64, Var<'t>) -> Result<Var<'t>, TensorError> {
        |_, z| Ok(z)
    }

    fn linear_field<'t>(c: f64) -> impl Fn(f64, Var<'t>) -> Result<Var<'t>, TensorError> {
        move |_, z| z.scale(c)
    }

    #[test]
    fn zero_field_leaves_state_unchanged() {
        let tape = Tape::new();
        let z = tape.constant(&Tensor::vector(vec![0.3, -2.0]).unwrap());
        let zero = linear_field(0.0);
        let next = rk4_step(&zero, z, 0.0, 0.1).unwrap();
        assert_eq!(next.value(), z.value());
        let states = ode_solve(&zero, z, &[1.0, 1.5, 2.5], &SolverConfig::rk4(0.1)).unwrap();
        for s in states {
            assert_eq!(s.value(), z.value());
        }
        let d = dopri5_solve(&zero, z, &[1.0, 1.5, 2.5], &SolverConfig::dopri5(1e-6, 1e-9))
            .unwrap();
        assert!(d.iter().all(|s| *s == z.value()));
    }

    #[test]
    fn rk4_single_step_of_exponential() {
        let tape = Tape::new();
        let z = tape.constant(&Tensor::scalar(1.0));
        let next = rk4_step(&identity_field(), z, 0.0, 0.1).unwrap().item();
        // 1 + h + h²/2 + h³/6 + h⁴/24
        assert!((next - 1.105_170_833_333_333_3).abs() < 1e-15);
        // the truncation error is h⁵/120 + O(h⁶) ≈ 8.5e-8
        let err = (next - 0.1f64.exp()).abs();
        assert!(err > 8e-8 && err < 9e-8, "{err}");
    }

    #[test]
    fn rk4_local_error_order() {
        let tape = Tape::new();
        let z = tape.constant(&Tensor::scalar(1.0));
        let f = linear_field(-2.0);
        let local = |h: f64| (rk4_step(&f, z, 0.0, h).unwrap().item() - (-2.0 * h).exp()).abs();
        let ratio = local(0.1) / local(0.05);
        // local error is O(h⁵); the global error is O(h⁴)
        assert!(ratio > 16.0 && ratio < 40.0, "ratio {ratio}");
    }

    #[test]
    fn grid_hits_checkpoints_exactly() {
        let grid = fixed_grid(&[1.0, 1.5, 2.5], 0.4);
        let times: Vec<f64> = grid.iter().map(|g| g.0).collect();
        let expected = [0.4, 0.8, 1.0, 1.2, 1.5, 1.6, 2.0, 2.4, 2.5];
        assert_eq!(times.len(), expected.len());
        for (a, b) in times.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
        let cps: Vec<usize> = grid.iter().filter_map(|g| g.1).collect();
        assert_eq!(cps, vec![0, 1, 2]);
        // 15 × 0.1 is not exactly 1.5 in binary; the checkpoint wins
        let grid = fixed_grid(&[1.5], 0.1);
        assert_eq!(grid.len(), 15);
        assert_eq!(grid.last().unwrap().0, 1.5);
    }

    #[test]
    fn ode_solve_exponential_checkpoints() {
        let tape = Tape::new();
        let z = tape.constant(&Tensor::scalar(1.0));
        let states = ode_solve(&identity_field(), z, &[1.0, 2.0, 3.0], &SolverConfig::rk4(0.01)).unwrap();
        for (s, t) in states.iter().zip([1.0f64, 2.0, 3.0]) {
            let rel = (s.item() - t.exp()).abs() / t.exp();
            assert!(rel < 1e-7, "t={t} rel={rel}");
        }
    }

    #[test]
    fn checkpoint_validation() {
        let tape = Tape::new();
        let z = tape.constant(&Tensor::scalar(1.0));
        let cfg = SolverConfig::default();
        for bad in [&[][..], &[0.0, 1.0], &[2.0, 1.0], &[1.0, 1.0]] {
            assert!(matches!(
                ode_solve(&identity_field(), z, bad, &cfg),
                Err(SolverError::Checkpoints(_))
            ));
        }
    }

    #[test]
    fn max_steps_is_enforced() {
        let tape = Tape::new();
        let z = tape.constant(&Tensor::scalar(1.0));
        let cfg = SolverConfig {
            max_steps: 5,
            ..SolverConfig::rk4(0.1)
        };
        assert!(matches!(
            ode_solve(&identity_field(), z, &[1.0], &cfg),
            Err(SolverError::MaxSteps { max_steps: 5, .. })
        ));
    }

    fn cubic_blowup<'t>() -> impl Fn(f64, Var<'t>) -> Result<Var<'t>, TensorError> {
        |_, z| z.mul(z)?.mul(z)?.scale(1e200)
    }

    #[test]
    fn blow_up_reports_time_and_stage() {
        let tape = Tape::new();
        let z = tape.constant(&Tensor::scalar(1.0));
        let f = cubic_blowup();
        match ode_solve(&f, z, &[1.0], &SolverConfig::rk4(0.1)) {
            Err(SolverError::Stage { t, stage, .. }) => {
                assert!(t >= 0.0);
                assert!((1..=4).contains(&stage));
            }
            other => panic!("expected stage error, got {other:?}"),
        }
    }

    #[test]
    fn dopri5_exponential() {
        let tape = Tape::new();
        let z = tape.constant(&Tensor::scalar(1.0));
        let cps = [0.5, 1.0, 1.7, 3.0];
        let out = dopri5_solve(&identity_field(), z, &cps, &SolverConfig::dopri5(1e-6, 1e-9)).unwrap();
        for (s, t) in out.iter().zip(cps) {
            let rel = (s.data()[0] - t.exp()).abs() / t.exp();
            assert!(rel < 1e-5, "t={t} rel={rel}");
        }
    }

    #[test]
    fn dopri5_via_ode_solve_method_switch() {
        let tape = Tape::new();
        let z = tape.constant(&Tensor::scalar(1.0));
        let out = ode_solve(&identity_field(), z, &[2.0], &SolverConfig::dopri5(1e-8, 1e-10)).unwrap();
        assert!((out[0].item() - 2f64.exp()).abs() / 2f64.exp() < 1e-6);
    }

    #[test]
    fn euler_is_first_order() {
        let tape = Tape::new();
        let z = tape.constant(&Tensor::scalar(1.0));
        let cfg = |h| SolverConfig {
            method: Method::Euler,
            ..SolverConfig::rk4(h)
        };
        let err = |h| {
            (ode_solve(&identity_field(), z, &[1.0], &cfg(h)).unwrap()[0].item() - 1f64.exp()).abs()
        };
        let ratio = err(0.01) / err(0.005);
        assert!(ratio > 1.8 && ratio < 2.2, "{ratio}");
    }
}
