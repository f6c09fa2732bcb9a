//! Initial-value solvers over tensor states.
//!
//! Both solvers run their state arithmetic through the tape, so a backward
//! pass differentiates the *computed* discretization exactly
//! (discretize-then-optimize). No continuous adjoint, no dense output; only
//! terminal-state solves are provided.

use serde::{Deserialize, Serialize};

use crate::error::{GodeError, Result};
use crate::scalar::Scalar;
use crate::tensor::{tape::Tape, Tensor};

/// Right-hand side of `dz/dt = f(z, t)`. Output shape must equal input shape
/// and the evaluation must be deterministic for fixed `(z, t, parameters)`.
pub trait Dynamics<S: Scalar> {
    fn eval(&self, tape: &Tape<S>, z: &Tensor<S>, t: f64) -> Result<Tensor<S>>;
}

impl<S: Scalar, F> Dynamics<S> for F
where
    F: Fn(&Tape<S>, &Tensor<S>, f64) -> Result<Tensor<S>>,
{
    fn eval(&self, tape: &Tape<S>, z: &Tensor<S>, t: f64) -> Result<Tensor<S>> {
        self(tape, z, t)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Euler,
    Dopri5,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub method: Method,
    pub t0: f64,
    pub t1: f64,
    /// Fixed step size (Euler).
    pub step: f64,
    /// Relative tolerance (Dormand–Prince).
    pub rtol: f64,
    /// Absolute tolerance (Dormand–Prince).
    pub atol: f64,
    pub max_steps: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            method: Method::Euler,
            t0: 0.0,
            t1: 1.0,
            step: 0.05,
            rtol: 1e-3,
            atol: 1e-6,
            max_steps: 10_000,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.t0.is_finite() || !self.t1.is_finite() || self.t1 <= self.t0 {
            return Err(GodeError::Config(format!(
                "solver needs t1 > t0, got [{}, {}]",
                self.t0, self.t1
            )));
        }
        match self.method {
            Method::Euler => {
                if self.step.is_nan() || self.step <= 0.0 {
                    return Err(GodeError::Config(format!(
                        "euler needs step > 0, got {}",
                        self.step
                    )));
                }
                self.euler_steps()?;
            }
            Method::Dopri5 => {
                if !(self.rtol.is_finite() && self.rtol > 0.0)
                    || !(self.atol.is_finite() && self.atol > 0.0)
                {
                    return Err(GodeError::Config(format!(
                        "dopri5 needs rtol, atol > 0, got {} and {}",
                        self.rtol, self.atol
                    )));
                }
            }
        }
        if self.max_steps == 0 {
            return Err(GodeError::Config("max_steps must be at least 1".into()));
        }
        Ok(())
    }

    /// Number of Euler steps; `(t1 - t0)/step` must be an integer to within
    /// one ulp.
    pub fn euler_steps(&self) -> Result<usize> {
        let ratio = (self.t1 - self.t0) / self.step;
        let rounded = ratio.round();
        if rounded < 1.0 || (ratio - rounded).abs() > rounded.max(1.0) * f64::EPSILON {
            return Err(GodeError::Config(format!(
                "({} - {})/{} = {ratio} is not an integral step count",
                self.t1, self.t0, self.step
            )));
        }
        Ok(rounded as usize)
    }
}

/// Fixed-step Euler: `z_{j+1} = z_j + h f(z_j, t_j)`.
///
/// The grid is `t_j = t0 + (t1-t0) * j/N`, the same expression a clamped
/// uniform knot vector uses, so degree-0 spline knots aligned to the step
/// count compare bit-equal against the evaluation times.
pub fn euler_solve<S: Scalar>(
    f: &dyn Dynamics<S>,
    z0: &Tensor<S>,
    cfg: &SolverConfig,
    tape: &Tape<S>,
) -> Result<Tensor<S>> {
    cfg.validate()?;
    if cfg.method != Method::Euler {
        return Err(GodeError::Config(
            "euler_solve called with a non-euler config".into(),
        ));
    }
    let n = cfg.euler_steps()?;
    let span = cfg.t1 - cfg.t0;
    let h = S::from_f64(span / n as f64);
    let mut z = z0.clone();
    for j in 0..n {
        let t = cfg.t0 + span * (j as f64 / n as f64);
        let dz = f.eval(tape, &z, t)?;
        z = tape.add_scaled(&z, &dz, h)?;
        if !z.is_finite() {
            return Err(GodeError::Divergence { step: j });
        }
    }
    Ok(z)
}

// Dormand–Prince 5(4) tableau.
const C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const A: [[f64; 6]; 6] = [
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [
        19372.0 / 6561.0,
        -25360.0 / 2187.0,
        64448.0 / 6561.0,
        -212.0 / 729.0,
        0.0,
        0.0,
    ],
    [
        9017.0 / 3168.0,
        -355.0 / 33.0,
        46732.0 / 5247.0,
        49.0 / 176.0,
        -5103.0 / 18656.0,
        0.0,
    ],
    [
        35.0 / 384.0,
        0.0,
        500.0 / 1113.0,
        125.0 / 192.0,
        -2187.0 / 6784.0,
        11.0 / 84.0,
    ],
];
const B: [f64; 6] = A[5]; // fifth-order weights; FSAL makes row 7 the solution
const ER: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];

const SAFETY: f64 = 0.9;
const BETA: f64 = 0.04; // PI stabilization
const FAC_MIN: f64 = 0.2; // max shrink per step
const FAC_MAX: f64 = 10.0; // max growth per step

/// Adaptive Dormand–Prince 5(4) with PI step-size control. The error norm is
/// the RMS of component errors scaled by `atol + rtol*max(|z|, |z_new|)`; the
/// final step is clipped to land exactly on `t1`. Accepted steps stay on the
/// tape, so gradients propagate through the realized step sequence.
pub fn dopri5_solve<S: Scalar>(
    f: &dyn Dynamics<S>,
    z0: &Tensor<S>,
    cfg: &SolverConfig,
    tape: &Tape<S>,
) -> Result<Tensor<S>> {
    cfg.validate()?;
    if cfg.method != Method::Dopri5 {
        return Err(GodeError::Config(
            "dopri5_solve called with a non-dopri5 config".into(),
        ));
    }
    let span = cfg.t1 - cfg.t0;
    let mut t = cfg.t0;
    let mut h = 0.01 * span;
    let mut z = z0.clone();
    let mut k1 = f.eval(tape, &z, t)?;
    let mut facold: f64 = 1e-4;
    let expo1 = 0.2 - BETA * 0.75;
    let mut steps = 0usize;
    let done_eps = 1e-12 * span;

    while cfg.t1 - t > done_eps {
        if steps >= cfg.max_steps {
            return Err(GodeError::NonConvergence {
                max_steps: cfg.max_steps,
            });
        }
        steps += 1;
        if t + h > cfg.t1 {
            h = cfg.t1 - t;
        }
        let hs = S::from_f64(h);

        // Stages 2..6 and the fifth-order candidate, each a single
        // linear-combination node.
        let mut ks: Vec<Tensor<S>> = vec![k1.clone()];
        for stage in 0..5 {
            let mut xs = vec![z.clone()];
            let mut ws = vec![S::ONE];
            for (j, kj) in ks.iter().enumerate() {
                xs.push(kj.clone());
                ws.push(S::from_f64(A[stage][j]) * hs);
            }
            let yi = tape.lincomb(&xs, &ws)?;
            let ki = f.eval(tape, &yi, t + C[stage + 1] * h)?;
            ks.push(ki);
        }
        let mut xs = vec![z.clone()];
        let mut ws = vec![S::ONE];
        for (j, kj) in ks.iter().enumerate() {
            xs.push(kj.clone());
            ws.push(S::from_f64(B[j]) * hs);
        }
        let z_new = tape.lincomb(&xs, &ws)?;
        let k7 = f.eval(tape, &z_new, t + h)?;
        ks.push(k7);

        // Embedded error estimate, off the tape: it only steers step size.
        let err = {
            let zd = z.data();
            let znd = z_new.data();
            let mut acc = 0.0f64;
            let dim = zd.len();
            for i in 0..dim {
                let mut e = 0.0f64;
                for (j, kj) in ks.iter().enumerate() {
                    let c = ER[j];
                    if c != 0.0 {
                        e += c * kj.data()[i].to_f64();
                    }
                }
                e *= h;
                let sk = cfg.atol + cfg.rtol * zd[i].to_f64().abs().max(znd[i].to_f64().abs());
                acc += (e / sk) * (e / sk);
            }
            let rms = (acc / dim as f64).sqrt();
            if rms.is_finite() {
                rms
            } else {
                f64::INFINITY
            }
        };

        let fac11 = err.powf(expo1);
        if err <= 1.0 {
            // accept
            t += h;
            z = z_new;
            k1 = ks.pop().expect("k7 pushed above");
            if !z.is_finite() {
                return Err(GodeError::Divergence { step: steps });
            }
            let fac = (fac11 / facold.powf(BETA) / SAFETY).clamp(1.0 / FAC_MAX, 1.0 / FAC_MIN);
            facold = err.max(1e-4);
            h /= fac;
        } else {
            let fac = (fac11 / SAFETY).clamp(1.0 / FAC_MAX, 1.0 / FAC_MIN);
            h /= fac.max(1.0); // only shrink after a rejection
        }
    }
    Ok(z)
}

/// Dispatch on the configured method.
pub fn solve<S: Scalar>(
    f: &dyn Dynamics<S>,
    z0: &Tensor<S>,
    cfg: &SolverConfig,
    tape: &Tape<S>,
) -> Result<Tensor<S>> {
    match cfg.method {
        Method::Euler => euler_solve(f, z0, cfg, tape),
        Method::Dopri5 => dopri5_solve(f, z0, cfg, tape),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn euler_cfg(t1: f64, step: f64) -> SolverConfig {
        SolverConfig {
            method: Method::Euler,
            t1,
            step,
            ..Default::default()
        }
    }

    fn dopri_cfg(rtol: f64, atol: f64) -> SolverConfig {
        SolverConfig {
            method: Method::Dopri5,
            rtol,
            atol,
            ..Default::default()
        }
    }

    fn exp_growth(tape: &Tape<f64>, z: &Tensor<f64>, _t: f64) -> crate::error::Result<Tensor<f64>> {
        tape.scale(z, 1.0)
    }

    #[test]
    fn euler_exponential_growth_closed_form() {
        let tape = Tape::inference();
        let z0 = Tensor::scalar(1.0f64);
        let z = euler_solve(&exp_growth, &z0, &euler_cfg(1.0, 0.05), &tape).unwrap();
        let h = 1.0f64 / 20.0;
        let expect = (1.0 + h).powi(20);
        assert!((z.item() - expect).abs() < 1e-14);
        assert!((z.item() - 2.65329770514).abs() < 1e-9);
    }

    #[test]
    fn euler_zero_dynamics_is_identity() {
        let tape = Tape::inference();
        let z0 = Tensor::from_vec(vec![3], vec![1.0f64, -2.0, 0.5]).unwrap();
        let f = |t: &Tape<f64>, z: &Tensor<f64>, _: f64| t.scale(z, 0.0);
        let z = euler_solve(&f, &z0, &euler_cfg(1.0, 0.05), &tape).unwrap();
        assert_eq!(z.to_vec(), z0.to_vec());
    }

    #[test]
    fn euler_constant_dynamics_exact_on_dyadic_grid() {
        let tape = Tape::inference();
        let z0 = Tensor::scalar(0.25f64);
        let f =
            |_: &Tape<f64>, z: &Tensor<f64>, _: f64| Ok(Tensor::filled(z.shape().to_vec(), 2.0));
        let z = euler_solve(&f, &z0, &euler_cfg(1.0, 0.25), &tape).unwrap();
        assert_eq!(z.item(), 0.25 + 1.0 * 2.0);
    }

    #[test]
    fn euler_rejects_non_integral_step_count() {
        let cfg = euler_cfg(1.0, 0.3);
        assert!(matches!(cfg.euler_steps(), Err(GodeError::Config(_))));
    }

    #[test]
    fn euler_order_one_convergence() {
        // error against e halves when h halves
        let tape = Tape::inference();
        let z0 = Tensor::scalar(1.0f64);
        let errs: Vec<f64> = [0.1, 0.05, 0.025, 0.0125]
            .iter()
            .map(|&h| {
                let z = euler_solve(&exp_growth, &z0, &euler_cfg(1.0, h), &tape).unwrap();
                (z.item() - std::f64::consts::E).abs()
            })
            .collect();
        for w in errs.windows(2) {
            let ratio = w[1] / w[0];
            assert!((0.45..=0.55).contains(&ratio), "ratio {ratio}");
        }
    }

    #[test]
    fn euler_reports_divergence_step() {
        let tape = Tape::inference();
        let z0 = Tensor::scalar(1e30f64);
        let f = |t: &Tape<f64>, z: &Tensor<f64>, _: f64| {
            let sq = t.mul(z, z)?;
            t.scale(&sq, 1e30)
        };
        match euler_solve(&f, &z0, &euler_cfg(1.0, 0.05), &tape) {
            Err(GodeError::Divergence { .. }) | Err(GodeError::NonFinite { .. }) => {}
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn dopri5_exponential_to_tolerance() {
        let tape = Tape::inference();
        let z0 = Tensor::scalar(1.0f64);
        let z = dopri5_solve(&exp_growth, &z0, &dopri_cfg(1e-6, 1e-9), &tape).unwrap();
        let rel = (z.item() - std::f64::consts::E).abs() / std::f64::consts::E;
        assert!(rel < 1e-5, "rel err {rel}");
    }

    #[test]
    fn dopri5_decay_to_tolerance() {
        let tape = Tape::inference();
        let z0 = Tensor::scalar(1.0f64);
        let f = |t: &Tape<f64>, z: &Tensor<f64>, _: f64| t.scale(z, -1.0);
        let z = dopri5_solve(&f, &z0, &dopri_cfg(1e-6, 1e-9), &tape).unwrap();
        let expect = (-1.0f64).exp();
        assert!((z.item() - expect).abs() / expect < 1e-5);
    }

    #[test]
    fn dopri5_time_dependent_rhs() {
        // dz/dt = cos(t), z(0) = 0 -> z(1) = sin(1)
        let tape = Tape::inference();
        let z0 = Tensor::scalar(0.0f64);
        let f = |_: &Tape<f64>, z: &Tensor<f64>, t: f64| {
            Ok(Tensor::filled(z.shape().to_vec(), t.cos()))
        };
        let z = dopri5_solve(&f, &z0, &dopri_cfg(1e-6, 1e-9), &tape).unwrap();
        assert!((z.item() - 1.0f64.sin()).abs() < 1e-5);
    }

    #[test]
    fn dopri5_error_tracks_rtol() {
        let tape = Tape::inference();
        let z0 = Tensor::scalar(1.0f64);
        for exp in 3..=8 {
            let rtol = 10.0f64.powi(-exp);
            let z = dopri5_solve(&exp_growth, &z0, &dopri_cfg(rtol, rtol * 1e-3), &tape).unwrap();
            let rel = (z.item() - std::f64::consts::E).abs() / std::f64::consts::E;
            assert!(rel <= 10.0 * rtol, "rtol {rtol}: rel err {rel}");
        }
    }

    #[test]
    fn dopri5_max_steps_exceeded() {
        let z0 = Tensor::scalar(1.0f64);
        let cfg = SolverConfig {
            method: Method::Dopri5,
            rtol: 1e-14,
            atol: 1e-16,
            max_steps: 3,
            ..Default::default()
        };
        let tape = Tape::inference();
        assert!(matches!(
            dopri5_solve(&exp_growth, &z0, &cfg, &tape),
            Err(GodeError::NonConvergence { max_steps: 3 })
        ));
    }

    #[test]
    fn euler_gradient_is_exact_growth_factor() {
        // f(z) = a z: dz(T)/dz(0) = (1 + a h)^N, matched to 1e-12.
        let a = -0.7;
        let f = move |t: &Tape<f64>, z: &Tensor<f64>, _: f64| t.scale(z, a);
        let z0 = Tensor::param(vec![1], vec![1.3f64]).unwrap();
        let tape = Tape::new();
        let cfg = euler_cfg(1.0, 0.05);
        let z = euler_solve(&f, &z0, &cfg, &tape).unwrap();
        let loss = tape.reduce_sum(&z).unwrap();
        tape.backward(&loss).unwrap();
        let h = 1.0 / 20.0;
        let expect = (1.0 + a * h).powi(20);
        let got = z0.grad().unwrap()[0];
        assert!((got - expect).abs() < 1e-12, "{got} vs {expect}");
    }

    #[test]
    fn solve_dispatch_is_bitwise_identical() {
        let tape = Tape::inference();
        let z0 = Tensor::from_vec(vec![2], vec![1.0f64, 2.0]).unwrap();
        let via_euler = euler_solve(&exp_growth, &z0, &euler_cfg(1.0, 0.05), &tape).unwrap();
        let via_solve = solve(&exp_growth, &z0, &euler_cfg(1.0, 0.05), &tape).unwrap();
        assert_eq!(via_euler.to_vec(), via_solve.to_vec());

        let d1 = dopri5_solve(&exp_growth, &z0, &dopri_cfg(1e-5, 1e-8), &tape).unwrap();
        let d2 = solve(&exp_growth, &z0, &dopri_cfg(1e-5, 1e-8), &tape).unwrap();
        assert_eq!(d1.to_vec(), d2.to_vec());
    }

    #[test]
    fn unknown_method_string_fails_to_parse() {
        let err = serde_json::from_str::<SolverConfig>(r#"{"method": "rk4"}"#);
        assert!(err.is_err());
    }

    #[test]
    fn dopri5_backward_reaches_initial_state() {
        let z0 = Tensor::param(vec![1], vec![1.0f64]).unwrap();
        let tape = Tape::new();
        let z = dopri5_solve(&exp_growth, &z0, &dopri_cfg(1e-6, 1e-9), &tape).unwrap();
        let loss = tape.reduce_sum(&z).unwrap();
        tape.backward(&loss).unwrap();
        // dz(1)/dz(0) = e for linear growth
        let g = z0.grad().unwrap()[0];
        assert!((g - std::f64::consts::E).abs() / std::f64::consts::E < 1e-5);
    }
}
