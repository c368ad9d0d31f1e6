//! Integration of `L h = -lambda h` as the first-order system `(h, h')`,
//! with positivity tracking.
//!
//! The integrator is an adaptive Dormand-Prince 5(4) pair that lands exactly
//! on every lattice node (taking as many internal substeps as stiffness
//! requires), so node values of `h` and `w = h'/h` come straight from the
//! solver rather than from interpolation. Whenever `|h|` leaves
//! `[1e-150, 1e150]` the state is rescaled and the factor absorbed into a
//! running log scale, which keeps `log h` exact and `w` untouched; solutions
//! spanning hundreds of log-units of state space therefore never overflow.
//!
//! Zero crossings of `h` are detected per accepted step (including interior
//! dips) and refined by bisection on the cubic Hermite dense output, far
//! below the slope tolerances of the bisections layered on top.

use std::sync::Arc;

use crate::error::Error;
use crate::model::{DiffusionModel, Grid, Spacing};
use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Left,
    Right,
}

/// A solution of `L h = -lambda h` normalized to `h(xi) = 1`, stored as
/// lattice values of `log h` and of the log-derivative `w = h'/h`.
///
/// Nodes past a zero crossing hold NaN; `valid` is the inclusive index range
/// actually populated. When a horizon is absent on a side, the profile
/// extends to the corresponding end of the deepest refinement window.
#[derive(Debug, Clone)]
pub struct SolutionProfile {
    pub lambda: f64,
    pub slope0: f64,
    pub log_h: Vec<f64>,
    pub w: Vec<f64>,
    pub left_horizon: Option<f64>,
    pub right_horizon: Option<f64>,
    pub valid: (usize, usize),
    pub grid: Arc<Grid>,
}

/// Residual tolerance of the defining ODE, relative to `(|lambda| + max r)`.
pub const RESIDUAL_TOL: f64 = 1e-8;

const RENORM_HI: f64 = 1e150;
const RENORM_LO: f64 = 1e-150;
const MAX_SUBSTEPS_PER_CELL: usize = 200_000;

/// Integrate from `xi` in both directions over the deepest refinement
/// window and return the profile. The returned profile always satisfies the
/// residual bound; a violation surfaces as an error instead of a silently
/// degraded profile.
pub fn integrate_solution(model: &DiffusionModel, lambda: f64, slope0: f64) -> Result<SolutionProfile> {
    let grid = &model.grid;
    let n = grid.len();
    let mut log_h = vec![f64::NAN; n];
    let mut w = vec![f64::NAN; n];
    let (lo, hi) = grid.deepest_range();
    let xi_idx = grid.xi_index;

    let right = shoot(model, lambda, xi_idx, hi, 1.0, slope0, &mut log_h, &mut w)?;
    let left = shoot(model, lambda, xi_idx, lo, 1.0, slope0, &mut log_h, &mut w)?;

    let valid = (
        if left.crossing.is_some() { left.last } else { lo },
        if right.crossing.is_some() { right.last } else { hi },
    );
    let profile = SolutionProfile {
        lambda,
        slope0,
        log_h,
        w,
        left_horizon: left.crossing,
        right_horizon: right.crossing,
        valid,
        grid: grid.clone(),
    };
    let report = profile.residual_report(model)?;
    if !report.ok {
        return Err(Error::ResidualExceeded {
            x: report.worst_x,
            observed: report.max_residual,
            bound: report.bound_at_worst,
        });
    }
    Ok(profile)
}

/// First zero crossing of the solution in the given direction, or `None`
/// when it stays positive through the deepest window edge.
pub fn positivity_horizon(
    model: &DiffusionModel,
    lambda: f64,
    slope0: f64,
    direction: Direction,
) -> Result<Option<f64>> {
    let grid = &model.grid;
    let (lo, hi) = grid.deepest_range();
    let stop = match direction {
        Direction::Left => lo,
        Direction::Right => hi,
    };
    let mut log_h = vec![f64::NAN; grid.len()];
    let mut w = vec![f64::NAN; grid.len()];
    let shot = shoot(model, lambda, grid.xi_index, stop, 1.0, slope0, &mut log_h, &mut w)?;
    Ok(shot.crossing)
}

impl SolutionProfile {
    pub fn xs(&self) -> &[f64] {
        &self.grid.xs
    }

    pub fn has_horizon(&self) -> bool {
        self.left_horizon.is_some() || self.right_horizon.is_some()
    }

    fn coord(&self, x: f64) -> f64 {
        match self.grid.spacing {
            Spacing::Uniform => x,
            Spacing::Logarithmic => x.ln(),
        }
    }

    fn cell_for_interp(&self, x: f64) -> usize {
        self.grid
            .cell_of(x)
            .clamp(self.valid.0, self.valid.1.saturating_sub(1).max(self.valid.0))
    }

    /// Interpolate `log h` at `x` with a cubic Hermite in the lattice
    /// coordinate; the derivative of `log h` there is `w * dx/dt`, which is
    /// known exactly at the nodes.
    pub fn log_h_interp(&self, x: f64) -> f64 {
        let grid = &self.grid;
        let i = self.cell_for_interp(x);
        crate::numeric::hermite(
            self.coord(x),
            grid.ts[i],
            grid.ts[i + 1],
            self.log_h[i],
            self.log_h[i + 1],
            self.w[i] * grid.jacobian(i),
            self.w[i + 1] * grid.jacobian(i + 1),
        )
    }

    /// Interpolate `w` at `x` (linear in the lattice coordinate).
    pub fn w_interp(&self, x: f64) -> f64 {
        let grid = &self.grid;
        let i = self.cell_for_interp(x);
        let s = ((self.coord(x) - grid.ts[i]) / grid.step).clamp(0.0, 1.0);
        self.w[i] * (1.0 - s) + self.w[i + 1] * s
    }

    /// Verify the defining equation at every interior populated node.
    ///
    /// The residual is evaluated per unit of `h`:
    /// `|1/2 sigma^2 (w' + w^2) + k w - r + lambda|`, with `w'` obtained from
    /// a seven-point central difference in the lattice coordinate. This is
    /// the equation residual divided by `h` (using `h'' = (w' + w^2) h`),
    /// the only form that stays finite once `h` spans hundreds of orders of
    /// magnitude. The bound is `RESIDUAL_TOL * (|lambda| + max r)` plus a
    /// machine-rounding allowance proportional to the magnitudes of the
    /// cancelling terms, which is what makes zero-rate models checkable at
    /// all in floating point.
    pub fn residual_report(&self, model: &DiffusionModel) -> Result<ResidualReport> {
        let grid = &self.grid;
        let d = grid.step;
        let (lo, hi) = self.valid;
        let mut worst = ResidualReport {
            max_residual: 0.0,
            bound_at_worst: f64::INFINITY,
            worst_x: f64::NAN,
            ok: true,
        };
        if hi < lo + 6 {
            return Ok(worst);
        }
        let scale = RESIDUAL_TOL * (self.lambda.abs() + model.r_max());
        const W7: [f64; 7] = [
            -1.0 / 60.0,
            3.0 / 20.0,
            -3.0 / 4.0,
            0.0,
            3.0 / 4.0,
            -3.0 / 20.0,
            1.0 / 60.0,
        ];
        let mut max_excess = f64::NEG_INFINITY;
        for i in lo + 3..=hi - 3 {
            let x = grid.xs[i];
            let mut dw_dt = 0.0;
            let mut w_loc = 0.0f64;
            for (o, c) in W7.iter().enumerate() {
                let wv = self.w[i + o - 3];
                dw_dt += c * wv;
                w_loc = w_loc.max(wv.abs());
            }
            dw_dt /= d;
            let jac = grid.jacobian(i);
            let w_prime = dw_dt / jac;
            let wi = self.w[i];
            let s2h = 0.5 * model.sigma2_at(x)?;
            let k = model.drift_at(x)?;
            let r = model.rate_at(x)?;
            let residual = (s2h * (w_prime + wi * wi) + k * wi - r + self.lambda).abs();
            let rounding = 256.0
                * f64::EPSILON
                * (s2h * w_loc * 2.8 / (d * jac)
                    + s2h * w_loc * w_loc
                    + (k * wi).abs()
                    + r.abs()
                    + self.lambda.abs());
            let bound = scale + rounding;
            let excess = residual - bound;
            if excess > max_excess {
                max_excess = excess;
                worst.max_residual = residual;
                worst.bound_at_worst = bound;
                worst.worst_x = x;
            }
        }
        worst.ok = max_excess <= 0.0;
        Ok(worst)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ResidualReport {
    pub max_residual: f64,
    pub bound_at_worst: f64,
    pub worst_x: f64,
    pub ok: bool,
}

pub(crate) struct ShotOutcome {
    /// Last node index that received values.
    pub last: usize,
    /// Zero crossing of `h`, if one occurred before the stop node.
    pub crossing: Option<f64>,
}

/// Integrate from node `start` to node `stop` (either direction), writing
/// `log h` and `w` at every node reached, `start` included. `h0` must be
/// positive; integration stops early at the first zero crossing of `h`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn shoot(
    model: &DiffusionModel,
    lambda: f64,
    start: usize,
    stop: usize,
    h0: f64,
    p0: f64,
    log_h: &mut [f64],
    w: &mut [f64],
) -> Result<ShotOutcome> {
    debug_assert!(h0 > 0.0);
    let grid = &model.grid;
    let dir: isize = if stop >= start { 1 } else { -1 };

    let mut state = [h0, p0];
    let mut log_scale = 0.0f64;
    if let Some(s) = renormalize(&mut state) {
        log_scale += s.ln();
    }
    log_h[start] = state[0].ln() + log_scale;
    w[start] = state[1] / state[0];
    if start == stop {
        return Ok(ShotOutcome { last: start, crossing: None });
    }

    let rhs = |x: f64, y: &[f64; 2]| -> Result<[f64; 2]> {
        let s2 = model.sigma2_at(x)?;
        let r = model.rate_at(x)?;
        let k = model.drift_at(x)?;
        Ok([y[1], (2.0 / s2) * ((r - lambda) * y[0] - k * y[1])])
    };

    let rtol = model.tolerances.ode_rel;
    let atol = model.tolerances.ode_abs;

    let mut x = grid.xs[start];
    let mut node = start;
    let mut step = (grid.xs[(start as isize + dir) as usize] - grid.xs[start]).abs();
    let mut k1 = rhs(x, &state)?;

    loop {
        let next_node = (node as isize + dir) as usize;
        let x_target = grid.xs[next_node];
        let mut substeps = 0usize;
        while (x_target - x) * dir as f64 > 0.0 {
            substeps += 1;
            if substeps > MAX_SUBSTEPS_PER_CELL {
                return Err(Error::StepSizeUnderflow { x });
            }
            let remaining = (x_target - x).abs();
            let h_try = step.min(remaining).max(f64::MIN_POSITIVE);
            if h_try <= 16.0 * f64::EPSILON * x.abs().max(1e-280) {
                return Err(Error::StepSizeUnderflow { x });
            }
            let h_signed = dir as f64 * h_try;
            let (y_new, err, k_last) = dp54_step(&rhs, x, &state, h_signed, &k1, rtol, atol)?;
            if err <= 1.0 {
                let x_new = if h_try >= remaining { x_target } else { x + h_signed };
                if let Some(cross) =
                    crossing_in_step(x, x_new, state[0], state[1], y_new[0], y_new[1])
                {
                    return Ok(ShotOutcome { last: node, crossing: Some(cross) });
                }
                x = x_new;
                state = y_new;
                k1 = k_last;
                if let Some(s) = renormalize(&mut state) {
                    log_scale += s.ln();
                    // the equation is linear, so the cached FSAL stage
                    // rescales with the state
                    k1[0] /= s;
                    k1[1] /= s;
                }
                let grow = (0.9 * err.max(1e-10).powf(-0.2)).clamp(0.2, 5.0);
                step = (h_try * grow).min(max_step_for(grid, x));
            } else {
                let shrink = (0.9 * err.powf(-0.2)).clamp(0.1, 0.5);
                step = h_try * shrink;
            }
        }
        if state[0] <= 0.0 {
            // crossing exactly at the node, missed by the in-step check
            return Ok(ShotOutcome { last: node, crossing: Some(x) });
        }
        log_h[next_node] = state[0].ln() + log_scale;
        w[next_node] = state[1] / state[0];
        node = next_node;
        if node == stop {
            return Ok(ShotOutcome { last: node, crossing: None });
        }
    }
}

fn renormalize(state: &mut [f64; 2]) -> Option<f64> {
    let a = state[0].abs();
    if a > RENORM_HI || (a > 0.0 && a < RENORM_LO) {
        state[0] /= a;
        state[1] /= a;
        Some(a)
    } else {
        None
    }
}

fn max_step_for(grid: &Grid, x: f64) -> f64 {
    match grid.spacing {
        Spacing::Uniform => grid.step,
        Spacing::Logarithmic => grid.step * x.abs().max(f64::MIN_POSITIVE),
    }
}

/// One Dormand-Prince 5(4) step from `(x, y)` with signed step `h`.
/// Returns the fifth-order solution, the scaled error norm and the FSAL
/// stage.
#[allow(clippy::type_complexity)]
fn dp54_step<F: Fn(f64, &[f64; 2]) -> Result<[f64; 2]>>(
    rhs: &F,
    x: f64,
    y: &[f64; 2],
    h: f64,
    k1: &[f64; 2],
    rtol: f64,
    atol: f64,
) -> Result<([f64; 2], f64, [f64; 2])> {
    const C: [f64; 6] = [0.2, 0.3, 0.8, 8.0 / 9.0, 1.0, 1.0];
    const A1: [f64; 1] = [0.2];
    const A2: [f64; 2] = [3.0 / 40.0, 9.0 / 40.0];
    const A3: [f64; 3] = [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0];
    const A4: [f64; 4] = [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0];
    const A5: [f64; 5] = [
        9017.0 / 3168.0,
        -355.0 / 33.0,
        46732.0 / 5247.0,
        49.0 / 176.0,
        -5103.0 / 18656.0,
    ];
    const A6: [f64; 6] = [
        35.0 / 384.0,
        0.0,
        500.0 / 1113.0,
        125.0 / 192.0,
        -2187.0 / 6784.0,
        11.0 / 84.0,
    ];
    const E: [f64; 7] = [
        35.0 / 384.0 - 5179.0 / 57600.0,
        0.0,
        500.0 / 1113.0 - 7571.0 / 16695.0,
        125.0 / 192.0 - 393.0 / 640.0,
        -2187.0 / 6784.0 + 92097.0 / 339200.0,
        11.0 / 84.0 - 187.0 / 2100.0,
        -1.0 / 40.0,
    ];

    let mut k = [[0.0f64; 2]; 7];
    k[0] = *k1;
    let stage = |coeffs: &[f64], k: &[[f64; 2]; 7]| -> [f64; 2] {
        let mut out = *y;
        for (j, a) in coeffs.iter().enumerate() {
            out[0] += h * a * k[j][0];
            out[1] += h * a * k[j][1];
        }
        out
    };
    k[1] = rhs(x + C[0] * h, &stage(&A1, &k))?;
    k[2] = rhs(x + C[1] * h, &stage(&A2, &k))?;
    k[3] = rhs(x + C[2] * h, &stage(&A3, &k))?;
    k[4] = rhs(x + C[3] * h, &stage(&A4, &k))?;
    k[5] = rhs(x + C[4] * h, &stage(&A5, &k))?;
    let y5 = stage(&A6, &k);
    k[6] = rhs(x + h, &y5)?;

    let mut err_sq = 0.0;
    for i in 0..2 {
        let mut e = 0.0;
        for (j, c) in E.iter().enumerate() {
            e += c * k[j][i];
        }
        e *= h;
        let sc = atol + rtol * y[i].abs().max(y5[i].abs());
        let ratio = e / sc;
        err_sq += ratio * ratio;
    }
    Ok((y5, (0.5 * err_sq).sqrt(), k[6]))
}

/// Locate a zero of `h` inside an accepted step, if any, using the cubic
/// Hermite dense output. Endpoint sign change first, then interior dips.
fn crossing_in_step(x0: f64, x1: f64, h0: f64, p0: f64, h1: f64, p1: f64) -> Option<f64> {
    let eval = |x: f64| crate::numeric::hermite(x, x0, x1, h0, h1, p0, p1);
    let refine = |mut a: f64, mut b: f64| -> f64 {
        // h(a) > 0 >= h(b)
        for _ in 0..80 {
            let mid = 0.5 * (a + b);
            if mid == a || mid == b {
                break;
            }
            if eval(mid) > 0.0 {
                a = mid;
            } else {
                b = mid;
            }
        }
        0.5 * (a + b)
    };
    if h1 <= 0.0 {
        return Some(refine(x0, x1));
    }
    for frac in [0.25, 0.5, 0.75] {
        let xm = x0 + frac * (x1 - x0);
        if eval(xm) <= 0.0 {
            return Some(refine(x0, xm));
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, fixtures};
    use approx::assert_relative_eq;

    #[test]
    fn lognormal_linear_solution() {
        // slope 1 gives h(x) = x: log_h(2) = ln 2, w(2) = 0.5
        let m = build_model(&fixtures::lognormal(1025, 1)).unwrap();
        let p = integrate_solution(&m, 0.0, 1.0).unwrap();
        assert!(p.left_horizon.is_none() && p.right_horizon.is_none());
        let g = &m.grid;
        let i = g.cell_of(2.0);
        let i = if (g.xs[i] - 2.0).abs() < (g.xs[i + 1] - 2.0).abs() { i } else { i + 1 };
        let x = g.xs[i];
        assert_relative_eq!(p.log_h[i], x.ln(), epsilon = 1e-9);
        assert_relative_eq!(p.w[i], 1.0 / x, max_relative = 1e-9);
        assert_relative_eq!(p.log_h_interp(2.0), 2.0f64.ln(), epsilon = 1e-8);
        assert_relative_eq!(p.w_interp(2.0), 0.5, max_relative = 1e-6);
    }

    #[test]
    fn lognormal_power_solution() {
        // slope -2.5 gives h(x) = x^(-2.5), w = -2.5/x
        let m = build_model(&fixtures::lognormal(1025, 1)).unwrap();
        let p = integrate_solution(&m, 0.0, -2.5).unwrap();
        assert!(!p.has_horizon());
        let g = &m.grid;
        for i in (0..g.len()).step_by(97) {
            let x = g.xs[i];
            // right of ~x = 10 the dominant component excited by solver
            // roundoff becomes visible; the closed form is only meaningful
            // where x^(-2.5) dominates
            if !(1e-4..=10.0).contains(&x) {
                continue;
            }
            assert_relative_eq!(p.w[i] * x, -2.5, max_relative = 1e-7);
            assert_relative_eq!(p.log_h[i], -2.5 * x.ln(), epsilon = 2e-7 * (1.0 + x.ln().abs()));
        }
    }

    #[test]
    fn brownian_constant_solution() {
        let m = build_model(&fixtures::brownian(513, 1)).unwrap();
        let p = integrate_solution(&m, 0.0, 0.0).unwrap();
        assert!(!p.has_horizon());
        for i in 0..m.grid.len() {
            assert!(p.log_h[i].abs() < 1e-12);
            assert!(p.w[i].abs() < 1e-12);
        }
    }

    #[test]
    fn brownian_left_horizon_of_affine_solution() {
        // h = 1 + x crosses zero at -1
        let m = build_model(&fixtures::brownian(513, 1)).unwrap();
        let hz = positivity_horizon(&m, 0.0, 1.0, Direction::Left).unwrap();
        assert_relative_eq!(hz.unwrap(), -1.0, epsilon = 1e-9);
        assert!(positivity_horizon(&m, 0.0, 1.0, Direction::Right).unwrap().is_none());
    }

    #[test]
    fn lognormal_interior_slope_has_no_horizon() {
        // h = (6/7) x + (1/7) x^(-2.5) > 0 everywhere
        let m = build_model(&fixtures::lognormal(1025, 2)).unwrap();
        assert!(positivity_horizon(&m, 0.0, 0.5, Direction::Left).unwrap().is_none());
        assert!(positivity_horizon(&m, 0.0, 0.5, Direction::Right).unwrap().is_none());
    }

    #[test]
    fn lognormal_steep_slope_crosses_on_the_left() {
        // slope 2: h = (9/7) x - (2/7) x^(-2.5), root at (2/9)^(2/7)
        let m = build_model(&fixtures::lognormal(1025, 2)).unwrap();
        let hz = positivity_horizon(&m, 0.0, 2.0, Direction::Left).unwrap().unwrap();
        assert_relative_eq!(hz, (2.0f64 / 9.0).powf(2.0 / 7.0), max_relative = 1e-8);
    }

    #[test]
    fn profile_invariants_at_xi() {
        let m = build_model(&fixtures::lognormal(1025, 1)).unwrap();
        let p = integrate_solution(&m, 0.03, 0.4).unwrap();
        let i = m.grid.xi_index;
        assert_eq!(p.log_h[i], 0.0);
        assert_eq!(p.w[i], 0.4);
        assert!(p.residual_report(&m).unwrap().ok);
    }

    #[test]
    fn renormalization_does_not_disturb_w() {
        // Deep windows force |h| ~ x^(-2.5) through the renormalization
        // threshold; compare w against a shallow run on shared nodes.
        let deep = build_model(&fixtures::lognormal(1025, 4)).unwrap();
        let shallow = build_model(&fixtures::lognormal(1025, 1)).unwrap();
        let pd = integrate_solution(&deep, 0.0, -2.5).unwrap();
        let ps = integrate_solution(&shallow, 0.0, -2.5).unwrap();
        let off = deep.grid.xi_index - shallow.grid.xi_index;
        let (lo, hi) = shallow.grid.deepest_range();
        let deep_min_logh = pd
            .log_h
            .iter()
            .filter(|v| v.is_finite())
            .fold(f64::INFINITY, |a, &b| a.min(b));
        assert!(deep_min_logh < -360.0, "expected a deep excursion, got {deep_min_logh}");
        for i in (lo..=hi).step_by(13) {
            let a = ps.w[i];
            let b = pd.w[i + off];
            assert!(
                (a - b).abs() <= 1e-10 * (1.0 + a.abs()),
                "w mismatch at node {i}: {a} vs {b}"
            );
        }
    }

    #[test]
    fn restart_from_interior_node_reproduces_w() {
        let m = build_model(&fixtures::lognormal(1025, 1)).unwrap();
        let p = integrate_solution(&m, 0.02, 0.3).unwrap();
        let g = &m.grid;
        let mid = g.cell_of(7.0);
        let (_, hi) = g.deepest_range();
        let mut log_h = vec![f64::NAN; g.len()];
        let mut w = vec![f64::NAN; g.len()];
        let shot = shoot(&m, 0.02, mid, hi, 1.0, p.w[mid], &mut log_h, &mut w).unwrap();
        assert!(shot.crossing.is_none());
        for i in (mid..=hi).step_by(29) {
            assert!(
                (w[i] - p.w[i]).abs() <= 1e-8 * (1.0 + p.w[i].abs()),
                "restart mismatch at {i}: {} vs {}",
                w[i],
                p.w[i]
            );
        }
    }

    #[test]
    fn coefficient_singularity_reports_step_underflow() {
        let mut spec = fixtures::lognormal(257, 0);
        // sigma nearly vanishes between nodes near x = 4.99
        spec.sigma = "abs(x - 4.99) + 1e-200".into();
        spec.parameters = vec![("r".into(), 0.05)];
        spec.truncation = (0.5, 10.0);
        let m = build_model(&spec).unwrap();
        let err = integrate_solution(&m, 0.0, 0.5).unwrap_err();
        assert!(matches!(err, Error::StepSizeUnderflow { .. }), "got {err:?}");
    }
}
