//! Exact per-agent best responses for the dual subproblems.
//!
//! Each agent maximizes a per-edge linear gain plus a concave function of its
//! total trade, optionally damped by a proximal term, over the box
//! `{z >= 0, t_min <= sum z <= t_max}`. With `rho = 0` the gain is linear per
//! edge and the optimum concentrates the total on the best-priced edge(s);
//! with `rho > 0` the split is the unique solution of a continuous quadratic
//! knapsack coupled with a scalar total, solved exactly by walking the
//! breakpoints of the knapsack multiplier.

use crate::error::{Error, Result};
use crate::model::{ConsumerParams, ProducerParams};
use serde::{Deserialize, Serialize};

/// How a `rho = 0` best response splits the total across equally-priced edges.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TieBreak {
    #[default]
    LowestIndex,
    ProportionalToPrevious,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BestResponseConfig {
    /// Proximal damping weight ($/kWh^2); 0 reproduces the literal argmax.
    pub rho: f64,
    pub tie_break: TieBreak,
}

impl Default for BestResponseConfig {
    fn default() -> Self {
        Self { rho: 1e-3, tie_break: TieBreak::LowestIndex }
    }
}

impl BestResponseConfig {
    pub fn exact() -> Self {
        Self { rho: 0.0, tie_break: TieBreak::LowestIndex }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rho >= 0.0 && self.rho.is_finite()) {
            return Err(Error::InvalidParameter(format!("rho must be >= 0, got {}", self.rho)));
        }
        Ok(())
    }
}

/// Marginal value of the total-trade term, as a nonincreasing piecewise-affine
/// function of the total.
#[derive(Debug, Clone, Copy)]
enum TotalMarginal {
    /// `-C'(t) = -(a t + b)`
    Cost { a: f64, b: f64 },
    /// `U'(t) = max(0, omega - delta t)`
    Utility { omega: f64, delta: f64 },
}

impl TotalMarginal {
    fn eval(&self, t: f64) -> f64 {
        match *self {
            TotalMarginal::Cost { a, b } => -(a * t + b),
            TotalMarginal::Utility { omega, delta } => (omega - delta * t).max(0.0),
        }
    }

    /// Breakpoint of the marginal in `t`, if any.
    fn knee(&self) -> Option<f64> {
        match *self {
            TotalMarginal::Cost { .. } => None,
            TotalMarginal::Utility { omega, delta } => Some(omega / delta),
        }
    }

    /// Affine pieces `(slope, intercept)` valid on `t <=` / `t >` the knee.
    fn piece_at(&self, t: f64) -> (f64, f64) {
        match *self {
            TotalMarginal::Cost { a, b } => (-a, -b),
            TotalMarginal::Utility { omega, delta } => {
                if t <= omega / delta {
                    (-delta, omega)
                } else {
                    (0.0, 0.0)
                }
            }
        }
    }
}

/// Producer update: argmax of `lambda_hat^T x - C(sum x) - (rho/2)||x - x_prev||^2`
/// over `x >= 0`, `x_min <= sum x <= x_max`.
pub fn producer_best_response(
    p: &ProducerParams,
    lambda_hat: &[f64],
    x_prev: &[f64],
    cfg: &BestResponseConfig,
) -> Result<Vec<f64>> {
    p.validate()?;
    best_response(
        lambda_hat,
        x_prev,
        TotalMarginal::Cost { a: p.a, b: p.b },
        p.x_min,
        p.x_max,
        cfg,
        "producer",
    )
}

/// Consumer update: argmax of
/// `U(sum y) + (alpha - lambda_hat)^T y - (rho/2)||y - y_prev||^2`
/// over `y >= 0`, `y_min <= sum y <= y_max`.
pub fn consumer_best_response(
    c: &ConsumerParams,
    lambda_hat: &[f64],
    alpha: &[f64],
    y_prev: &[f64],
    cfg: &BestResponseConfig,
) -> Result<Vec<f64>> {
    c.validate()?;
    if alpha.len() != lambda_hat.len() {
        return Err(Error::IndexMismatch {
            what: "consumer alpha",
            expected: lambda_hat.len(),
            got: alpha.len(),
        });
    }
    let gains: Vec<f64> = lambda_hat.iter().zip(alpha).map(|(l, a)| a - l).collect();
    best_response(
        &gains,
        y_prev,
        TotalMarginal::Utility { omega: c.omega, delta: c.delta },
        c.y_min,
        c.y_max,
        cfg,
        "consumer",
    )
}

/// Largest dual step size `1/L` with `L = (sigma_i + sigma_j)/(sigma_i sigma_j)`,
/// where the strong-concavity constants are the cost curvature `a` and the
/// utility slope `delta`. Undefined when the consumer's feasible set reaches
/// into the flat utility branch.
pub fn step_size_bound(p: &ProducerParams, c: &ConsumerParams) -> Result<f64> {
    p.validate()?;
    c.validate()?;
    let knee = c.knee();
    if c.y_max > knee {
        return Err(Error::FlatBranch { y_min: c.y_min, y_max: c.y_max, knee });
    }
    let l = (p.a + c.delta) / (p.a * c.delta);
    Ok(1.0 / l)
}

/// Objective of the producer subproblem, for oracles and diagnostics.
pub fn producer_objective(
    p: &ProducerParams,
    lambda_hat: &[f64],
    x_prev: &[f64],
    rho: f64,
    x: &[f64],
) -> f64 {
    let t: f64 = x.iter().sum();
    let revenue: f64 = lambda_hat.iter().zip(x).map(|(l, q)| l * q).sum();
    let prox: f64 = x.iter().zip(x_prev).map(|(q, pv)| (q - pv) * (q - pv)).sum();
    revenue - (0.5 * p.a * t * t + p.b * t + p.c) - 0.5 * rho * prox
}

/// Objective of the consumer subproblem, for oracles and diagnostics.
pub fn consumer_objective(
    c: &ConsumerParams,
    lambda_hat: &[f64],
    alpha: &[f64],
    y_prev: &[f64],
    rho: f64,
    y: &[f64],
) -> f64 {
    let t: f64 = y.iter().sum();
    let u = if t <= c.knee() {
        c.omega * t - 0.5 * c.delta * t * t
    } else {
        c.omega * c.omega / (2.0 * c.delta)
    };
    let net: f64 = y
        .iter()
        .zip(lambda_hat.iter().zip(alpha))
        .map(|(q, (l, a))| (a - l) * q)
        .sum();
    let prox: f64 = y.iter().zip(y_prev).map(|(q, pv)| (q - pv) * (q - pv)).sum();
    u + net - 0.5 * rho * prox
}

fn best_response(
    gains: &[f64],
    prev: &[f64],
    marginal: TotalMarginal,
    t_min: f64,
    t_max: f64,
    cfg: &BestResponseConfig,
    who: &'static str,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if gains.is_empty() {
        return Err(Error::EmptyEdgeSet(who));
    }
    if prev.len() != gains.len() {
        return Err(Error::IndexMismatch {
            what: "previous allocation",
            expected: gains.len(),
            got: prev.len(),
        });
    }
    if !(t_min <= t_max) || t_max < 0.0 {
        return Err(Error::InfeasibleBounds(format!(
            "{} total bounds [{}, {}]",
            who, t_min, t_max
        )));
    }
    if gains.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("edge gains"));
    }
    let t_min = t_min.max(0.0);

    if cfg.rho == 0.0 {
        Ok(concentrate(gains, prev, marginal, t_min, t_max, cfg.tie_break))
    } else {
        Ok(knapsack_response(gains, prev, marginal, t_min, t_max, cfg.rho))
    }
}

/// `rho = 0` path: the total is the scalar argmax of `g_max t + G(t)` and all
/// of it goes to the best-gain edge(s).
fn concentrate(
    gains: &[f64],
    prev: &[f64],
    marginal: TotalMarginal,
    t_min: f64,
    t_max: f64,
    tie_break: TieBreak,
) -> Vec<f64> {
    let g_max = gains.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let slope = |t: f64| g_max + marginal.eval(t);

    let total = if slope(t_min) <= 0.0 {
        t_min
    } else if slope(t_max) >= 0.0 {
        t_max
    } else {
        // interior root of an affine piece; the endpoint tests guarantee it
        // falls on a strictly decreasing piece
        let (m, q) = marginal.piece_at(t_min);
        debug_assert!(m < 0.0);
        let t = -(g_max + q) / m;
        t.clamp(t_min, t_max)
    };

    let tied: Vec<usize> = gains
        .iter()
        .enumerate()
        .filter(|(_, g)| **g == g_max)
        .map(|(e, _)| e)
        .collect();
    let mut z = vec![0.0; gains.len()];
    match tie_break {
        TieBreak::LowestIndex => z[tied[0]] = total,
        TieBreak::ProportionalToPrevious => {
            let w: f64 = tied.iter().map(|&e| prev[e]).sum();
            if w > 0.0 {
                for &e in &tied {
                    z[e] = total * prev[e] / w;
                }
            } else {
                for &e in &tied {
                    z[e] = total / tied.len() as f64;
                }
            }
        }
    }
    z
}

/// `rho > 0` path. For a fixed total `t` the inner split solves
/// `max sum g_e z_e - (rho/2)(z_e - prev_e)^2 s.t. z >= 0, sum z = t`, whose
/// KKT point is `z_e = max(0, prev_e + (g_e - nu)/rho)` with a multiplier
/// `nu(t)` that is piecewise affine and decreasing. The outer condition is
/// `nu(t) = -G'(t)`; both sides are piecewise affine, so the crossing is exact.
fn knapsack_response(
    gains: &[f64],
    prev: &[f64],
    marginal: TotalMarginal,
    t_min: f64,
    t_max: f64,
    rho: f64,
) -> Vec<f64> {
    let n = gains.len();
    // breakpoints nu_e = g_e + rho prev_e, descending
    let mut order: Vec<usize> = (0..n).collect();
    let bp = |e: usize| gains[e] + rho * prev[e];
    order.sort_by(|&a, &b| bp(b).partial_cmp(&bp(a)).unwrap());

    // prefix sums S_m = sum_{first m} (prev_e + g_e / rho)
    let mut s = Vec::with_capacity(n + 1);
    s.push(0.0);
    for &e in &order {
        s.push(s.last().unwrap() + prev[e] + gains[e] / rho);
    }

    // t value when the multiplier sits exactly at breakpoint m (m edges active)
    let t_at_bp = |m: usize| -> f64 {
        if m == 0 {
            return 0.0;
        }
        let nu = bp(order[m]); // next breakpoint below the active set
        (s[m] - (m as f64) * nu / rho).max(0.0)
    };

    // nu as a function of t (t > 0): find the active count m with
    // t in [t_at_bp(m-1), t_at_bp(m)]
    let nu_of_t = |t: f64| -> f64 {
        if t <= 0.0 {
            return bp(order[0]);
        }
        let mut m = 1;
        while m < n && t > t_at_bp(m) {
            m += 1;
        }
        rho * (s[m] - t) / (m as f64)
    };

    let residual = |t: f64| nu_of_t(t) + marginal.eval(t);

    let total = if residual(t_min) <= 0.0 {
        t_min
    } else if residual(t_max) >= 0.0 {
        t_max
    } else {
        solve_crossing(&s, nu_of_t(0.0), &t_at_bp, marginal, t_min, t_max, rho, n, residual)
    };

    let nu = nu_of_t(total);
    let mut z: Vec<f64> = (0..n)
        .map(|e| (prev[e] + (gains[e] - nu) / rho).max(0.0))
        .collect();
    // remove the rounding drift of the multiplier representation
    let sum: f64 = z.iter().sum();
    if sum > 0.0 && total > 0.0 {
        let scale = total / sum;
        for v in &mut z {
            *v *= scale;
        }
    } else if total == 0.0 {
        z.iter_mut().for_each(|v| *v = 0.0);
    }
    z
}

#[allow(clippy::too_many_arguments)]
fn solve_crossing(
    s: &[f64],
    nu_at_zero: f64,
    t_at_bp: &dyn Fn(usize) -> f64,
    marginal: TotalMarginal,
    t_min: f64,
    t_max: f64,
    rho: f64,
    n: usize,
    residual: impl Fn(f64) -> f64,
) -> f64 {
    let _ = nu_at_zero;
    // candidate t-interval edges: knapsack breakpoints, the marginal's knee,
    // and the bounds
    let mut cuts = vec![t_min, t_max];
    for m in 1..n {
        let t = t_at_bp(m);
        if t > t_min && t < t_max {
            cuts.push(t);
        }
    }
    if let Some(k) = marginal.knee() {
        if k > t_min && k < t_max {
            cuts.push(k);
        }
    }
    cuts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    cuts.dedup();

    for w in cuts.windows(2) {
        let (lo, hi) = (w[0], w[1]);
        let (r_lo, r_hi) = (residual(lo), residual(hi));
        if r_lo < 0.0 {
            return lo;
        }
        if r_hi > 0.0 {
            continue;
        }
        // affine on (lo, hi): nu(t) = rho (S_m - t)/m, G' from piece_at
        let mid = 0.5 * (lo + hi);
        let mut m = 1;
        while m < n && mid > t_at_bp(m) {
            m += 1;
        }
        let (gm, gq) = marginal.piece_at(mid);
        // rho*S_m/m - (rho/m) t + gm t + gq = 0
        let a_coef = gm - rho / (m as f64);
        let b_coef = rho * s[m] / (m as f64) + gq;
        debug_assert!(a_coef < 0.0);
        let t = (-b_coef / a_coef).clamp(lo, hi);
        return t;
    }
    t_max
}
