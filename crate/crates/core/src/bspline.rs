//! Clamped uniform B-spline bases on `[0, T]`.
//!
//! A basis of degree `k` with `n` control points uses a knot vector of length
//! `n + k + 1` whose first and last `k + 1` entries sit on the domain
//! endpoints, with uniformly spaced interior knots. Evaluation runs the
//! Cox–de Boor recursion upward from the degree-0 indicators, with two
//! conventions baked in:
//!
//! * `0/0` terms arising from repeated knots count as 0;
//! * the last span is closed on the right, so the final basis function
//!   evaluates to 1 at `t = T` instead of everything vanishing there
//!   (solvers evaluate the dynamics at the endpoint).

use crate::error::{GodeError, Result};
use crate::scalar::Scalar;
use crate::tensor::{tape::Tape, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct BSplineBasis {
    degree: usize,
    n_control: usize,
    knots: Vec<f64>,
    domain_end: f64,
}

impl BSplineBasis {
    /// Clamped basis with uniform interior knots over `[0, t_max]`.
    ///
    /// Fails with an invalid-basis error when `n < k + 1` (the basis functions
    /// would be degenerate) and a configuration error when `t_max <= 0`.
    pub fn clamped_uniform(degree: usize, n_control: usize, t_max: f64) -> Result<Self> {
        if n_control < degree + 1 {
            return Err(GodeError::InvalidBasis { degree, n_control });
        }
        if t_max <= 0.0 || !t_max.is_finite() {
            return Err(GodeError::Config(format!(
                "B-spline domain end must be positive and finite, got {t_max}"
            )));
        }
        let spans = n_control - degree; // positive-width spans between the clamps
        let mut knots = Vec::with_capacity(n_control + degree + 1);
        knots.extend(std::iter::repeat_n(0.0, degree + 1));
        for j in 1..spans {
            // Same expression the Euler stepper uses for its grid, so degree-0
            // knots aligned to solver steps compare bit-equal.
            knots.push(t_max * (j as f64 / spans as f64));
        }
        knots.extend(std::iter::repeat_n(t_max, degree + 1));
        debug_assert_eq!(knots.len(), n_control + degree + 1);
        Ok(BSplineBasis {
            degree,
            n_control,
            knots,
            domain_end: t_max,
        })
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn n_control(&self) -> usize {
        self.n_control
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn domain_end(&self) -> f64 {
        self.domain_end
    }

    /// All `n` basis values at `t`: `(B_0, ..., B_{n-1})` for this degree.
    pub fn eval(&self, t: f64) -> Result<Vec<f64>> {
        if !(0.0 <= t && t <= self.domain_end) {
            return Err(GodeError::Domain {
                t,
                t_max: self.domain_end,
            });
        }
        let knots = &self.knots;
        let m = knots.len() - 1;
        // Degree-0 indicators over every span; the last positive-width span
        // is closed at the right endpoint.
        let mut level: Vec<f64> = (0..m)
            .map(|i| {
                let inside = knots[i] <= t && t < knots[i + 1];
                let at_end = t == self.domain_end
                    && knots[i] < knots[i + 1]
                    && knots[i + 1] == self.domain_end;
                if inside || at_end {
                    1.0
                } else {
                    0.0
                }
            })
            .collect();
        for d in 1..=self.degree {
            let count = m - d;
            let mut next = vec![0.0f64; count];
            for (i, slot) in next.iter_mut().enumerate() {
                let left_den = knots[i + d] - knots[i];
                let right_den = knots[i + d + 1] - knots[i + 1];
                let mut v = 0.0;
                if left_den > 0.0 {
                    v += (t - knots[i]) / left_den * level[i];
                }
                if right_den > 0.0 {
                    v += (knots[i + d + 1] - t) / right_den * level[i + 1];
                }
                *slot = v;
            }
            level = next;
        }
        level.truncate(self.n_control);
        Ok(level)
    }
}

/// Weighted combination of control tensors at time `t`. The basis weights are
/// constants on the tape, so gradients flow to each control tensor scaled by
/// its basis value; `t` itself is not trainable.
pub fn eval_spline<S: Scalar>(
    tape: &Tape<S>,
    basis: &BSplineBasis,
    control: &[Tensor<S>],
    t: f64,
) -> Result<Tensor<S>> {
    if control.len() != basis.n_control() {
        return Err(GodeError::Config(format!(
            "spline expects {} control tensors, got {}",
            basis.n_control(),
            control.len()
        )));
    }
    let weights = basis.eval(t)?;
    let ws: Vec<S> = weights.iter().map(|&w| S::from_f64(w)).collect();
    tape.lincomb(control, &ws)
}
