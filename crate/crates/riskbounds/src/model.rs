//! Risk-neutral market model and its computational grid.
//!
//! A model consists of the diffusion coefficients `k(x)` and `sigma(x)`, a
//! short-rate function `r(x)`, a state interval `(c, d)`, the initial state
//! `xi` and a truncation window `[x_min, x_max]` strictly inside the
//! interval. Infinite or singular endpoints are handled by working on the
//! truncated window and estimating boundary-limit quantities on a ladder of
//! geometrically expanding windows (the refinement levels).
//!
//! The grid is a lattice, uniform either in `x` or in `ln x`, anchored so
//! that `xi` is exactly a lattice node. Refinement level `j` extends the
//! level-0 window by doubling its lattice offset from `xi` on each side,
//! which doubles the log-scale distance to an infinite (or zero) boundary
//! per level. That doubling is what the divergence detectors downstream key
//! on. Finite nonzero endpoints are instead approached by shrinking the
//! remaining gap by 4x per level.

use std::sync::Arc;

use crate::error::Error;
use crate::expr::{BoundExpr, Expression};
use crate::numeric::gauss2;
use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Spacing {
    Uniform,
    Logarithmic,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GridPolicy {
    pub n_points: usize,
    pub spacing: Spacing,
    #[serde(default = "default_refinement_levels")]
    pub refinement_levels: usize,
}

fn default_refinement_levels() -> usize {
    3
}

/// Numerical tolerances threaded through the pipeline.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct Tolerances {
    /// Bisection tolerance for candidate-interval endpoints, in slope units.
    pub slope: f64,
    /// Bisection tolerance for the critical-eigenvalue search.
    pub lambda: f64,
    pub ode_rel: f64,
    pub ode_abs: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            slope: 1e-9,
            lambda: 1e-6,
            ode_rel: 1e-10,
            ode_abs: 1e-12,
        }
    }
}

/// Lattice in the grid coordinate `t` (`ln x` for logarithmic spacing, `x`
/// for uniform), with `xi` at an exact node and nested refinement windows.
#[derive(Debug, Clone)]
pub struct Grid {
    pub xs: Vec<f64>,
    pub ts: Vec<f64>,
    pub xi_index: usize,
    pub spacing: Spacing,
    /// Lattice step in the `t` coordinate.
    pub step: f64,
    /// Inclusive `(left, right)` node index per refinement level; level 0 is
    /// the truncation window itself.
    levels: Vec<(usize, usize)>,
    /// True when the requested ladder had to stop early to keep `x`
    /// representable.
    pub levels_capped: bool,
}

// Representable range guard for log lattices: exp(+-650) stays comfortably
// inside f64.
const MAX_LOG_EXTENT: f64 = 650.0;
const MAX_UNIFORM_EXTENT: f64 = 1e14;

impl Grid {
    pub fn len(&self) -> usize {
        self.xs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xs.is_empty()
    }

    pub fn n_levels(&self) -> usize {
        self.levels.len()
    }

    /// Inclusive node range of refinement level `j`.
    pub fn level_range(&self, j: usize) -> (usize, usize) {
        self.levels[j.min(self.levels.len() - 1)]
    }

    pub fn base_range(&self) -> (usize, usize) {
        self.levels[0]
    }

    pub fn deepest_range(&self) -> (usize, usize) {
        *self.levels.last().unwrap()
    }

    /// Largest node index with `xs[i] <= x`, clamped to valid cells.
    pub fn cell_of(&self, x: f64) -> usize {
        let t = match self.spacing {
            Spacing::Uniform => x,
            Spacing::Logarithmic => x.ln(),
        };
        let raw = (t - self.ts[0]) / self.step;
        (raw.floor().max(0.0) as usize).min(self.len() - 2)
    }

    /// Jacobian dx/dt at node `i` (trapezoid weights in `t` need it).
    pub fn jacobian(&self, i: usize) -> f64 {
        match self.spacing {
            Spacing::Uniform => 1.0,
            Spacing::Logarithmic => self.xs[i],
        }
    }

    fn build(
        spacing: Spacing,
        xi: f64,
        truncation: (f64, f64),
        interval: (f64, f64),
        n_points: usize,
        refinement_levels: usize,
    ) -> Result<Grid> {
        let (x_min, x_max) = truncation;
        let (c, d) = interval;
        let coord = |x: f64| match spacing {
            Spacing::Uniform => x,
            Spacing::Logarithmic => x.ln(),
        };
        let t_lo = coord(x_min);
        let t_hi = coord(x_max);
        let t_xi = coord(xi);
        let step = (t_hi - t_lo) / (n_points - 1) as f64;
        if !step.is_finite() || step <= 0.0 {
            return Err(Error::InvalidModel {
                reason: "degenerate truncation window".into(),
            });
        }

        // Level-0 offsets from xi, in whole lattice cells, covering the
        // requested window (possibly overshooting by less than one cell).
        let off_l0 = ((t_xi - t_lo) / step).ceil().max(1.0) as usize;
        let off_r0 = ((t_hi - t_xi) / step).ceil().max(1.0) as usize;

        let t_c = if c == f64::NEG_INFINITY {
            f64::NEG_INFINITY
        } else if spacing == Spacing::Logarithmic && c <= 0.0 {
            f64::NEG_INFINITY // zero is a log-infinite boundary
        } else {
            coord(c)
        };
        let t_d = if d == f64::INFINITY { f64::INFINITY } else { coord(d) };

        let max_extent = match spacing {
            Spacing::Uniform => MAX_UNIFORM_EXTENT,
            Spacing::Logarithmic => MAX_LOG_EXTENT,
        };

        let side_offsets = |off0: usize, t_bound: f64, toward_lower: bool| -> Vec<usize> {
            let mut offs = vec![off0];
            for j in 1..=refinement_levels {
                let prev = offs[j - 1];
                let next = if t_bound.is_infinite() {
                    // Double the lattice offset: the log-scale distance to
                    // the boundary doubles each level.
                    prev.saturating_mul(2)
                } else {
                    // Finite endpoint: shrink the remaining gap by 4x.
                    let dist = if toward_lower { t_xi - t_bound } else { t_bound - t_xi };
                    let gap0 = (dist - off0 as f64 * step).max(step);
                    let gap = gap0 / 4f64.powi(j as i32);
                    let target = dist - gap;
                    ((target / step).floor() as usize).max(prev + 1)
                };
                let t_next = t_xi + if toward_lower { -(next as f64 * step) } else { next as f64 * step };
                let inside = if toward_lower {
                    t_next > t_bound && t_next > -max_extent
                } else {
                    t_next < t_bound && t_next < max_extent
                };
                if !inside {
                    break;
                }
                offs.push(next);
            }
            offs
        };

        let left_offs = side_offsets(off_l0, t_c, true);
        let right_offs = side_offsets(off_r0, t_d, false);
        let n_levels = left_offs.len().min(right_offs.len());
        let capped = n_levels < refinement_levels + 1;

        let n_left = left_offs[n_levels - 1];
        let n_right = right_offs[n_levels - 1];
        let total = n_left + n_right + 1;
        let xi_index = n_left;

        let mut ts = Vec::with_capacity(total);
        let mut xs = Vec::with_capacity(total);
        for i in 0..total {
            let t = t_xi + (i as f64 - xi_index as f64) * step;
            ts.push(t);
            xs.push(match spacing {
                Spacing::Uniform => t,
                Spacing::Logarithmic => t.exp(),
            });
        }
        // xi is an exact node by construction.
        ts[xi_index] = t_xi;
        xs[xi_index] = xi;

        let levels = (0..n_levels)
            .map(|j| (xi_index - left_offs[j], xi_index + right_offs[j]))
            .collect();

        Ok(Grid {
            xs,
            ts,
            xi_index,
            spacing,
            step,
            levels,
            levels_capped: capped,
        })
    }
}

/// Everything needed to build a model, before validation.
#[derive(Debug, Clone)]
pub struct ModelSpec {
    pub name: String,
    pub parameters: Vec<(String, f64)>,
    pub drift: String,
    pub sigma: String,
    pub rate: String,
    pub interval: (f64, f64),
    pub xi: f64,
    pub truncation: (f64, f64),
    pub policy: GridPolicy,
    pub state_is_asset: bool,
    pub tolerances: Tolerances,
    pub allow_zero_rate: bool,
}

/// Validated model: coefficients bound to parameter values, grid built, and
/// positivity of `sigma` and `r` checked on every lattice node. Immutable
/// after construction and safe to share across threads.
#[derive(Debug)]
pub struct DiffusionModel {
    pub name: String,
    drift: BoundExpr,
    sigma: BoundExpr,
    rate: BoundExpr,
    pub drift_text: String,
    pub sigma_text: String,
    pub rate_text: String,
    pub interval: (f64, f64),
    pub xi: f64,
    pub truncation: (f64, f64),
    pub grid: Arc<Grid>,
    pub policy: GridPolicy,
    pub tolerances: Tolerances,
    pub state_is_asset: bool,
    pub allow_zero_rate: bool,
    r_max: f64,
}

pub fn build_model(spec: &ModelSpec) -> Result<DiffusionModel> {
    let (c, d) = spec.interval;
    let (x_min, x_max) = spec.truncation;
    if !(c < d) {
        return Err(Error::InvalidModel {
            reason: format!("malformed interval: c = {c} must be below d = {d}"),
        });
    }
    if !(c < x_min && x_min < spec.xi && spec.xi < x_max && x_max < d) {
        return Err(Error::InvalidModel {
            reason: format!(
                "need c < x_min < xi < x_max < d, got c={c}, x_min={x_min}, xi={}, x_max={x_max}, d={d}",
                spec.xi
            ),
        });
    }
    if spec.policy.n_points < 64 {
        return Err(Error::InvalidModel {
            reason: format!("n_points = {} below the minimum of 64", spec.policy.n_points),
        });
    }
    if spec.policy.refinement_levels > 10 {
        return Err(Error::InvalidModel {
            reason: "refinement_levels above 10 is not supported".into(),
        });
    }
    if spec.policy.spacing == Spacing::Logarithmic && (x_min <= 0.0 || c < 0.0) {
        return Err(Error::InvalidModel {
            reason: "logarithmic spacing requires a positive window".into(),
        });
    }

    let names: Vec<String> = spec.parameters.iter().map(|(n, _)| n.clone()).collect();
    let values: Vec<f64> = spec.parameters.iter().map(|(_, v)| *v).collect();
    let drift = Expression::parse(&spec.drift, &names)?.bind(&values)?;
    let sigma = Expression::parse(&spec.sigma, &names)?.bind(&values)?;
    let rate = Expression::parse(&spec.rate, &names)?.bind(&values)?;

    let grid = Grid::build(
        spec.policy.spacing,
        spec.xi,
        spec.truncation,
        spec.interval,
        spec.policy.n_points,
        spec.policy.refinement_levels,
    )?;

    // Scan nodes outward from xi so the reported violation is the one
    // nearest the initial state.
    let mut r_max = f64::NEG_INFINITY;
    let n = grid.len();
    let xi_idx = grid.xi_index;
    let mut order: Vec<usize> = Vec::with_capacity(n);
    for k in 0..n {
        if xi_idx >= k {
            order.push(xi_idx - k);
        }
        if k > 0 && xi_idx + k < n {
            order.push(xi_idx + k);
        }
    }
    for &i in &order {
        let x = grid.xs[i];
        let s = sigma.eval(x)?;
        if s <= 0.0 {
            return Err(Error::InvalidModel {
                reason: format!("sigma({x}) = {s} is not positive"),
            });
        }
        let r = rate.eval(x)?;
        if r < 0.0 || (r == 0.0 && !spec.allow_zero_rate) {
            return Err(Error::InvalidModel {
                reason: format!(
                    "rate({x}) = {r} violates the positive-rate assumption{}",
                    if r == 0.0 { " (pass --allow-zero-rate to accept a zero rate)" } else { "" }
                ),
            });
        }
        r_max = r_max.max(r);
    }

    Ok(DiffusionModel {
        name: spec.name.clone(),
        drift,
        sigma,
        rate,
        drift_text: spec.drift.clone(),
        sigma_text: spec.sigma.clone(),
        rate_text: spec.rate.clone(),
        interval: spec.interval,
        xi: spec.xi,
        truncation: spec.truncation,
        grid: Arc::new(grid),
        policy: spec.policy,
        tolerances: spec.tolerances,
        state_is_asset: spec.state_is_asset,
        allow_zero_rate: spec.allow_zero_rate,
        r_max,
    })
}

impl DiffusionModel {
    pub fn drift_at(&self, x: f64) -> Result<f64> {
        self.drift.eval(x)
    }

    pub fn sigma_at(&self, x: f64) -> Result<f64> {
        self.sigma.eval(x)
    }

    pub fn sigma2_at(&self, x: f64) -> Result<f64> {
        let s = self.sigma.eval(x)?;
        Ok(s * s)
    }

    pub fn rate_at(&self, x: f64) -> Result<f64> {
        self.rate.eval(x)
    }

    /// Maximum of the rate function over the lattice; scales the ODE
    /// residual bound.
    pub fn r_max(&self) -> f64 {
        self.r_max
    }
}

/// Scale density `q(x) = exp(-int_xi^x k/sigma^2)`, stored in log form so
/// deep windows cannot overflow. `q(xi) = 1` exactly.
pub struct ScaleDensity {
    pub log_q: Vec<f64>,
}

impl ScaleDensity {
    pub fn q(&self, i: usize) -> f64 {
        self.log_q[i].exp()
    }
}

/// Accumulate the scale density over the lattice by two-point Gauss-Legendre
/// quadrature of `k/sigma^2` on each cell, working outward from `xi`.
pub fn scale_density(model: &DiffusionModel) -> Result<ScaleDensity> {
    let grid = &model.grid;
    let n = grid.len();
    let f = |x: f64| -> Result<f64> { Ok(model.drift_at(x)? / model.sigma2_at(x)?) };
    let mut log_q = vec![0.0; n];
    let xi_idx = grid.xi_index;
    for i in (0..xi_idx).rev() {
        let seg = gauss2(&f, grid.xs[i], grid.xs[i + 1])?;
        log_q[i] = log_q[i + 1] + seg;
        if !log_q[i].is_finite() {
            return Err(Error::Quadrature {
                reason: format!("scale density diverged at x = {}", grid.xs[i]),
            });
        }
    }
    for i in xi_idx + 1..n {
        let seg = gauss2(&f, grid.xs[i - 1], grid.xs[i])?;
        log_q[i] = log_q[i - 1] - seg;
        if !log_q[i].is_finite() {
            return Err(Error::Quadrature {
                reason: format!("scale density diverged at x = {}", grid.xs[i]),
            });
        }
    }
    Ok(ScaleDensity { log_q })
}
