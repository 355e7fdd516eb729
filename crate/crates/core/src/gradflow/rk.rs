//! Dormand–Prince 5(4) with a PI step-size controller.

use std::ops::ControlFlow;

use crate::error::{Error, Result};

/// Right-hand side of `dy/dt = f(t, y)`.
///
/// `rhs` returns an auxiliary scalar evaluated at `y` (the loss, for gradient
/// flows); the value from the last stage of an accepted step belongs to the
/// accepted state.
pub trait OdeSystem {
    fn dim(&self) -> usize;
    fn rhs(&mut self, t: f64, y: &[f64], dy: &mut [f64]) -> Result<f64>;
}

/// Accepted state handed to the step observer.
pub struct StepEvent<'a> {
    pub t: f64,
    pub y: &'a [f64],
    pub dy: &'a [f64],
    pub aux: f64,
    /// Set when `t` is one of the requested stop times.
    pub stop_index: Option<usize>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Stats {
    pub accepted: usize,
    pub rejected: usize,
    pub evaluations: usize,
}

#[derive(Debug, Clone)]
pub struct Dopri5 {
    pub rtol: f64,
    /// Absolute tolerance per component (length 1 broadcasts).
    pub atol: Vec<f64>,
    pub max_steps: usize,
    pub initial_step: Option<f64>,
    pub max_step: f64,
}

const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const A71: f64 = 35.0 / 384.0;
const A73: f64 = 500.0 / 1113.0;
const A74: f64 = 125.0 / 192.0;
const A75: f64 = -2187.0 / 6784.0;
const A76: f64 = 11.0 / 84.0;
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

// PI controller constants (Hairer, Nørsett & Wanner).
const SAFETY: f64 = 0.9;
const BETA: f64 = 0.04;
const EXPO1: f64 = 0.2 - BETA * 0.75;
const FAC_MIN: f64 = 0.2;
const FAC_MAX: f64 = 10.0;

impl Dopri5 {
    pub fn new(rtol: f64, atol: f64) -> Self {
        Self {
            rtol,
            atol: vec![atol],
            max_steps: 2_000_000,
            initial_step: None,
            max_step: f64::INFINITY,
        }
    }

    fn atol(&self, i: usize) -> f64 {
        if self.atol.len() == 1 {
            self.atol[0]
        } else {
            self.atol[i]
        }
    }

    /// Integrates from `t0` to `t_end`, landing exactly on every time in
    /// `stops` (strictly increasing, within `(t0, t_end]`). The observer sees
    /// every accepted step and may stop the integration early.
    pub fn integrate<S, F>(
        &self,
        sys: &mut S,
        t0: f64,
        y0: &[f64],
        t_end: f64,
        stops: &[f64],
        mut observe: F,
    ) -> Result<Stats>
    where
        S: OdeSystem + ?Sized,
        F: FnMut(&StepEvent<'_>) -> Result<ControlFlow<()>>,
    {
        let n = sys.dim();
        if y0.len() != n || (self.atol.len() != 1 && self.atol.len() != n) {
            return Err(Error::invalid("integrator state/tolerance length mismatch"));
        }
        if !(self.rtol > 0.0) || self.atol.iter().any(|a| !(*a >= 0.0)) {
            return Err(Error::invalid("tolerances must be positive"));
        }
        if stops.windows(2).any(|w| w[1] <= w[0]) || stops.iter().any(|&s| s <= t0 || s > t_end) {
            return Err(Error::invalid("stop times must be strictly increasing within (t0, t_end]"));
        }

        let mut stats = Stats::default();
        let mut t = t0;
        let mut y = y0.to_vec();
        let mut k1 = vec![0.0; n];
        let mut aux = sys.rhs(t, &y, &mut k1)?;
        stats.evaluations += 1;
        if let ControlFlow::Break(()) = observe(&StepEvent {
            t,
            y: &y,
            dy: &k1,
            aux,
            stop_index: None,
        })? {
            return Ok(stats);
        }
        if t_end <= t0 {
            return Ok(stats);
        }

        let mut k2 = vec![0.0; n];
        let mut k3 = vec![0.0; n];
        let mut k4 = vec![0.0; n];
        let mut k5 = vec![0.0; n];
        let mut k6 = vec![0.0; n];
        let mut k7 = vec![0.0; n];
        let mut stage = vec![0.0; n];
        let mut y_new = vec![0.0; n];

        let mut h = match self.initial_step {
            Some(h) => h,
            None => self.initial_step_guess(&y, &k1),
        }
        .min(self.max_step)
        .min(t_end - t0);
        let mut fac_old: f64 = 1e-4;
        let mut next_stop = 0usize;
        let mut last_rejected = false;

        loop {
            if stats.accepted + stats.rejected >= self.max_steps {
                return Err(Error::Stiffness {
                    t,
                    detail: format!("step budget of {} exhausted", self.max_steps),
                });
            }
            let target = stops.get(next_stop).copied().unwrap_or(t_end);
            let mut h_try = h.min(self.max_step);
            let mut hits_target = false;
            if t + h_try >= target || target - (t + h_try) < 1e-12 * target.abs().max(1.0) {
                h_try = target - t;
                hits_target = true;
            }
            if h_try < 1e-14 * t.abs().max(1.0) {
                return Err(Error::Stiffness {
                    t,
                    detail: format!("step size {h_try:e} underflowed"),
                });
            }

            let attempt = self.attempt(
                sys,
                t,
                h_try,
                &y,
                &k1,
                [&mut k2, &mut k3, &mut k4, &mut k5, &mut k6, &mut k7],
                &mut stage,
                &mut y_new,
            );
            stats.evaluations += 6;
            let (err, new_aux) = match attempt {
                Ok(v) => v,
                Err(Error::NumericOverflow(_)) | Err(Error::Numeric(_)) => {
                    // A trial stage left the region where the RHS is finite; retry smaller.
                    stats.rejected += 1;
                    h = h_try * 0.1;
                    last_rejected = true;
                    continue;
                }
                Err(e) => return Err(e),
            };

            let fac11 = err.powf(EXPO1);
            if err <= 1.0 {
                let mut fac = fac11 / fac_old.powf(BETA);
                fac = (fac / SAFETY).clamp(1.0 / FAC_MAX, 1.0 / FAC_MIN);
                let mut h_next = h_try / fac;
                if last_rejected {
                    h_next = h_next.min(h_try);
                }
                fac_old = err.max(1e-4);
                stats.accepted += 1;
                last_rejected = false;

                t = if hits_target { target } else { t + h_try };
                std::mem::swap(&mut y, &mut y_new);
                std::mem::swap(&mut k1, &mut k7);
                aux = new_aux;
                let stop_index = if hits_target && next_stop < stops.len() {
                    next_stop += 1;
                    Some(next_stop - 1)
                } else {
                    None
                };
                if let ControlFlow::Break(()) = observe(&StepEvent {
                    t,
                    y: &y,
                    dy: &k1,
                    aux,
                    stop_index,
                })? {
                    return Ok(stats);
                }
                if hits_target && t >= t_end {
                    return Ok(stats);
                }
                // Do not let a step clipped to a stop time shrink the next one.
                h = if hits_target { h_next.max(h) } else { h_next };
            } else {
                stats.rejected += 1;
                last_rejected = true;
                h = h_try / (fac11 / SAFETY).min(1.0 / FAC_MIN);
            }
        }
    }

    fn initial_step_guess(&self, y: &[f64], f0: &[f64]) -> f64 {
        let mut d0 = 0.0;
        let mut d1 = 0.0;
        for i in 0..y.len() {
            let sc = self.atol(i) + self.rtol * y[i].abs();
            d0 += (y[i] / sc).powi(2);
            d1 += (f0[i] / sc).powi(2);
        }
        let (d0, d1) = ((d0 / y.len() as f64).sqrt(), (d1 / y.len() as f64).sqrt());
        if d0 < 1e-5 || d1 < 1e-5 {
            1e-6
        } else {
            0.01 * d0 / d1
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attempt<S: OdeSystem + ?Sized>(
        &self,
        sys: &mut S,
        t: f64,
        h: f64,
        y: &[f64],
        k1: &[f64],
        ks: [&mut Vec<f64>; 6],
        stage: &mut [f64],
        y_new: &mut [f64],
    ) -> Result<(f64, f64)> {
        let [k2, k3, k4, k5, k6, k7] = ks;
        let n = y.len();
        for i in 0..n {
            stage[i] = y[i] + h * A21 * k1[i];
        }
        sys.rhs(t + C2 * h, stage, k2)?;
        for i in 0..n {
            stage[i] = y[i] + h * (A31 * k1[i] + A32 * k2[i]);
        }
        sys.rhs(t + C3 * h, stage, k3)?;
        for i in 0..n {
            stage[i] = y[i] + h * (A41 * k1[i] + A42 * k2[i] + A43 * k3[i]);
        }
        sys.rhs(t + C4 * h, stage, k4)?;
        for i in 0..n {
            stage[i] = y[i] + h * (A51 * k1[i] + A52 * k2[i] + A53 * k3[i] + A54 * k4[i]);
        }
        sys.rhs(t + C5 * h, stage, k5)?;
        for i in 0..n {
            stage[i] = y[i] + h * (A61 * k1[i] + A62 * k2[i] + A63 * k3[i] + A64 * k4[i] + A65 * k5[i]);
        }
        sys.rhs(t + h, stage, k6)?;
        for i in 0..n {
            y_new[i] = y[i] + h * (A71 * k1[i] + A73 * k3[i] + A74 * k4[i] + A75 * k5[i] + A76 * k6[i]);
        }
        let aux = sys.rhs(t + h, y_new, k7)?;

        let mut acc = 0.0;
        for i in 0..n {
            let e = h * (E1 * k1[i] + E3 * k3[i] + E4 * k4[i] + E5 * k5[i] + E6 * k6[i] + E7 * k7[i]);
            let sc = self.atol(i) + self.rtol * y[i].abs().max(y_new[i].abs());
            acc += (e / sc).powi(2);
        }
        let err = (acc / n as f64).sqrt();
        if !err.is_finite() {
            return Err(Error::Numeric("non-finite error estimate".into()));
        }
        Ok((err, aux))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Decay(f64);

    impl OdeSystem for Decay {
        fn dim(&self) -> usize {
            1
        }
        fn rhs(&mut self, _t: f64, y: &[f64], dy: &mut [f64]) -> Result<f64> {
            dy[0] = -self.0 * y[0];
            Ok(0.0)
        }
    }

    struct Oscillator;

    impl OdeSystem for Oscillator {
        fn dim(&self) -> usize {
            2
        }
        fn rhs(&mut self, _t: f64, y: &[f64], dy: &mut [f64]) -> Result<f64> {
            dy[0] = y[1];
            dy[1] = -y[0];
            Ok(0.0)
        }
    }

    #[test]
    fn exponential_decay_hits_stops_exactly() {
        let solver = Dopri5::new(1e-10, 1e-12);
        let stops = [0.5, 1.0, 2.0];
        let mut seen = Vec::new();
        solver
            .integrate(&mut Decay(1.3), 0.0, &[1.0], 2.0, &stops, |ev| {
                if let Some(i) = ev.stop_index {
                    seen.push((i, ev.t, ev.y[0]));
                }
                Ok(ControlFlow::Continue(()))
            })
            .unwrap();
        assert_eq!(seen.len(), 3);
        for (i, t, y) in seen {
            assert_eq!(t, stops[i]);
            assert!((y - (-1.3 * t).exp()).abs() < 1e-9, "t={t}");
        }
    }

    #[test]
    fn oscillator_period() {
        let solver = Dopri5::new(1e-11, 1e-13);
        let mut last = vec![];
        let period = 2.0 * std::f64::consts::PI;
        solver
            .integrate(&mut Oscillator, 0.0, &[1.0, 0.0], period, &[], |ev| {
                last = ev.y.to_vec();
                Ok(ControlFlow::Continue(()))
            })
            .unwrap();
        assert!((last[0] - 1.0).abs() < 1e-9 && last[1].abs() < 1e-9);
    }

    #[test]
    fn observer_can_stop_early() {
        let solver = Dopri5::new(1e-8, 1e-10);
        let mut final_t = 0.0;
        solver
            .integrate(&mut Decay(1.0), 0.0, &[1.0], 100.0, &[], |ev| {
                final_t = ev.t;
                Ok(if ev.y[0] < 1e-3 {
                    ControlFlow::Break(())
                } else {
                    ControlFlow::Continue(())
                })
            })
            .unwrap();
        assert!(final_t > 6.0 && final_t < 20.0);
    }

    #[test]
    fn step_budget_is_reported() {
        let mut solver = Dopri5::new(1e-12, 1e-14);
        solver.max_steps = 5;
        let res = solver.integrate(&mut Oscillator, 0.0, &[1.0, 0.0], 100.0, &[], |_| Ok(ControlFlow::Continue(())));
        assert!(matches!(res, Err(Error::Stiffness { .. })));
    }

    #[test]
    fn bad_stops_rejected() {
        let solver = Dopri5::new(1e-8, 1e-10);
        let res = solver.integrate(&mut Decay(1.0), 0.0, &[1.0], 1.0, &[0.5, 0.5], |_| Ok(ControlFlow::Continue(())));
        assert!(res.is_err());
        let res = solver.integrate(&mut Decay(1.0), 0.0, &[1.0], 1.0, &[2.0], |_| Ok(ControlFlow::Continue(())));
        assert!(res.is_err());
    }
}
