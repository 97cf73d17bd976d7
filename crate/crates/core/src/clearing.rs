//! Market-clearing iteration loops: the accelerated price update and the plain
//! dual-gradient baseline, with stopping, tracing, and grid-constraint policy.
//!
//! One synchronous round does: best responses against the frozen extrapolated
//! prices, the per-edge price update `lambda = lambda_hat - eta (x - y)`, and
//! (in accelerated mode) the momentum update of `gamma` and `lambda_hat`.
//!
//! The engine has two regimes, selected by `rho`:
//!
//! * `rho = 0` — the literal update: every agent plays the undamped argmax of
//!   its welfare at the frozen prices. Exact for markets whose agents trade on
//!   a single edge (where the dual is smooth and the rate guarantees hold);
//!   markets with multi-edge agents have degenerate argmax splits and the raw
//!   iteration may dither around consensus.
//! * `rho > 0` — the damped regime. The dual optimum ties an agent's prices
//!   across its active edges, so the per-edge split is decided by an
//!   essentially bilinear game that a fixed-step price iteration cannot damp
//!   by itself. Each side therefore anchors its proximal term to the
//!   counterparty's latest quantities with weight `max(rho, eta)` (consumers
//!   respond after producers within the round), which is the
//!   method-of-multipliers structure for the consensus constraint and leaves
//!   every fixed point of the undamped iteration unchanged. Momentum then
//!   extrapolates prices and anchors together, engages only while the
//!   contraction stalls, and restarts when the residual grows.

use crate::error::{Error, Result};
use crate::grid::{self, ConstraintReport, ProsumerKind, SensitivityMatrices};
use crate::instance::Instance;
use crate::model::{self, Allocation};
use crate::subproblem::{self, BestResponseConfig, TieBreak};
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::time::Instant;

/// Named step-size rules.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EtaRule {
    /// Per-edge `1/L_ij` where computable, 0.1 otherwise.
    StepSizeBound,
}

/// Step-size policy: a named rule, one constant for every edge, or explicit
/// per-edge values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum EtaPolicy {
    Rule(EtaRule),
    Constant(f64),
    PerEdge(Vec<f64>),
}

impl Default for EtaPolicy {
    fn default() -> Self {
        EtaPolicy::Rule(EtaRule::StepSizeBound)
    }
}

/// Initial-price policy. Producers quote the opening price, so the default
/// starts just above their marginal cost at zero output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LambdaPolicy {
    /// Per-edge `b_i + offset`.
    ProducerCostOffset(f64),
    Constant(f64),
    PerEdge(Vec<f64>),
}

impl Default for LambdaPolicy {
    fn default() -> Self {
        LambdaPolicy::ProducerCostOffset(1.0)
    }
}

/// How grid constraints interact with the clearing loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NetworkMode {
    /// Evaluate voltages and flows along the trajectory without altering the
    /// updates.
    #[default]
    ReportOnly,
    /// A market-operator role keeps subgradient-ascent multipliers on the
    /// voltage and flow limits and charges every trade at a bus accordingly.
    Penalty,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClearingConfig {
    pub eta: EtaPolicy,
    /// Stopping tolerance on every per-edge mismatch |x - y| (kWh).
    pub epsilon: f64,
    pub max_iter: usize,
    pub accelerated: bool,
    pub network_mode: NetworkMode,
    /// Proximal damping forwarded to the best responses.
    pub rho: f64,
    pub tie_break: TieBreak,
    pub lambda0: LambdaPolicy,
    /// Subgradient step for the penalty-mode operator multipliers.
    pub network_eta: f64,
}

impl Default for ClearingConfig {
    fn default() -> Self {
        Self {
            eta: EtaPolicy::default(),
            epsilon: 1e-3,
            max_iter: 20_000,
            accelerated: true,
            network_mode: NetworkMode::default(),
            rho: 1e-3,
            tie_break: TieBreak::default(),
            lambda0: LambdaPolicy::default(),
            network_eta: 0.5,
        }
    }
}

impl ClearingConfig {
    pub fn validate(&self, edge_count: usize) -> Result<()> {
        if !(self.epsilon > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        if self.max_iter == 0 {
            return Err(Error::InvalidParameter("max_iter must be at least 1".into()));
        }
        if !(self.rho >= 0.0) {
            return Err(Error::InvalidParameter(format!("rho must be >= 0, got {}", self.rho)));
        }
        match &self.eta {
            EtaPolicy::Constant(v) if !(*v > 0.0) => {
                return Err(Error::InvalidParameter(format!("eta must be positive, got {}", v)))
            }
            EtaPolicy::PerEdge(v) => {
                if v.len() != edge_count {
                    return Err(Error::IndexMismatch {
                        what: "eta",
                        expected: edge_count,
                        got: v.len(),
                    });
                }
                if v.iter().any(|e| !(*e > 0.0)) {
                    return Err(Error::InvalidParameter("eta entries must be positive".into()));
                }
            }
            _ => {}
        }
        if let LambdaPolicy::PerEdge(v) = &self.lambda0 {
            if v.len() != edge_count {
                return Err(Error::IndexMismatch {
                    what: "lambda0",
                    expected: edge_count,
                    got: v.len(),
                });
            }
        }
        Ok(())
    }
}

/// Per-edge prices and quantities of one clearing run at iteration `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct MarketState {
    pub k: usize,
    pub lambda: Vec<f64>,
    pub lambda_prev: Vec<f64>,
    pub lambda_hat: Vec<f64>,
    pub gamma: f64,
    pub allocation: Allocation,
}

/// One row of the per-iteration trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub k: usize,
    /// max over edges of |x - y| (kWh).
    pub mismatch_inf: f64,
    /// Primal objective on the current (possibly mismatched) allocation.
    pub welfare: f64,
    /// Dual function value at the current prices, evaluated with rho = 0.
    pub dual_value: f64,
    /// `q(lambda^k) - q(lambda*)` when a reference optimum is supplied.
    pub dual_gap: Option<f64>,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClearingResult {
    pub converged: bool,
    pub iterations: usize,
    pub allocation: Allocation,
    pub prices: Vec<f64>,
    pub welfare: f64,
    #[serde(skip)]
    pub trace: Vec<IterationRecord>,
    pub constraint_report: Option<ConstraintReport>,
    /// Worst voltage / flow violations seen anywhere along the trajectory.
    pub trajectory_worst_voltage: Option<f64>,
    pub trajectory_worst_flow: Option<f64>,
    pub wall_ms: f64,
    pub warnings: Vec<String>,
}

/// Contraction ratio above which the damped regime considers itself stalled
/// and lets the momentum extrapolation engage.
const STALL_GATE: f64 = 0.7;

/// Plain rounds enforced after a restart before momentum may re-engage.
const RESTART_COOLDOWN: usize = 8;

/// Penalty-mode feasibility tolerances: a run only counts as converged once
/// the worst violations drop below these.
const PENALTY_V_TOL: f64 = 2e-4;
const PENALTY_F_TOL: f64 = 0.1;

/// Momentum recurrence: `gamma_{k+1} = (k+1)(1 + sqrt(1 + 4 (gamma_k/k)^2))/2`.
pub fn gamma_next(k: usize, gamma_k: f64) -> f64 {
    let r = gamma_k / k as f64;
    (k as f64 + 1.0) * (1.0 + (1.0 + 4.0 * r * r).sqrt()) / 2.0
}

/// Price extrapolation
/// `lambda_hat_{k+1} = lambda_k + (k+1)(gamma_k - k)/(k gamma_{k+1}) (lambda_k - lambda_{k-1})`.
pub fn momentum_extrapolate(
    k: usize,
    gamma_k: f64,
    gamma_next: f64,
    lambda: &[f64],
    lambda_prev: &[f64],
) -> Vec<f64> {
    let coeff = (k as f64 + 1.0) * (gamma_k - k as f64) / (k as f64 * gamma_next);
    lambda
        .iter()
        .zip(lambda_prev)
        .map(|(l, lp)| l + coeff * (l - lp))
        .collect()
}

/// Per-edge dual ascent step `lambda = lambda_hat - eta (x - y)`.
pub fn price_update(lambda_hat: &[f64], eta: &[f64], x: &[f64], y: &[f64]) -> Result<Vec<f64>> {
    if lambda_hat.len() != eta.len() || lambda_hat.len() != x.len() || lambda_hat.len() != y.len()
    {
        return Err(Error::IndexMismatch {
            what: "price update vectors",
            expected: lambda_hat.len(),
            got: eta.len().min(x.len()).min(y.len()),
        });
    }
    Ok(lambda_hat
        .iter()
        .zip(eta.iter().zip(x.iter().zip(y)))
        .map(|(l, (e, (xi, yi)))| l - e * (xi - yi))
        .collect())
}

/// True iff every edge satisfies `|x - y| <= epsilon` (inclusive).
pub fn stopping_check(x: &[f64], y: &[f64], epsilon: f64) -> bool {
    x.iter().zip(y).all(|(a, b)| (a - b).abs() <= epsilon)
}

fn mismatch_inf(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
}

/// Dual function `q(lambda)`: the sum of every agent's best-response value at
/// the given prices. Always evaluated with `rho = 0`, so it measures the
/// undamped dual regardless of the run's damping.
pub fn dual_value(inst: &Instance, lambda: &[f64]) -> Result<f64> {
    inst.graph.check_per_edge("lambda", lambda)?;
    let cfg = BestResponseConfig::exact();
    let mut q = 0.0;
    for (i, p) in inst.producers.iter().enumerate() {
        let edges = inst.graph.producer_edges(i);
        if edges.is_empty() {
            q -= p.c;
            continue;
        }
        let l: Vec<f64> = edges.iter().map(|&e| lambda[e]).collect();
        let prev = vec![0.0; edges.len()];
        let x = subproblem::producer_best_response(p, &l, &prev, &cfg)?;
        q += subproblem::producer_objective(p, &l, &prev, 0.0, &x);
    }
    for (j, c) in inst.consumers.iter().enumerate() {
        let edges = inst.graph.consumer_edges(j);
        if edges.is_empty() {
            continue;
        }
        let l: Vec<f64> = edges.iter().map(|&e| lambda[e]).collect();
        let a: Vec<f64> = edges.iter().map(|&e| inst.graph.alpha()[e]).collect();
        let prev = vec![0.0; edges.len()];
        let y = subproblem::consumer_best_response(c, &l, &a, &prev, &cfg)?;
        q += subproblem::consumer_objective(c, &l, &a, &prev, 0.0, &y);
    }
    Ok(q)
}

/// Resolves the step-size policy to per-edge values; flags edges that exceed
/// the `1/L_ij` rate bound and edges where the bound is undefined.
pub fn resolve_eta(inst: &Instance, policy: &EtaPolicy) -> Result<(Vec<f64>, Vec<String>)> {
    let graph = &inst.graph;
    let mut warnings = Vec::new();
    let mut bound = Vec::with_capacity(graph.edge_count());
    let mut flat_edges = 0usize;
    for e in graph.edges() {
        match subproblem::step_size_bound(&inst.producers[e.producer], &inst.consumers[e.consumer])
        {
            Ok(b) => bound.push(Some(b)),
            Err(Error::FlatBranch { .. }) => {
                flat_edges += 1;
                bound.push(None);
            }
            Err(err) => return Err(err),
        }
    }
    let eta = match policy {
        EtaPolicy::Rule(EtaRule::StepSizeBound) => {
            if flat_edges > 0 {
                warnings.push(format!(
                    "{} edge(s) have a consumer whose feasible set reaches the flat utility \
                     branch; using eta = 0.1 there",
                    flat_edges
                ));
            }
            bound.iter().map(|b| b.unwrap_or(0.1)).collect::<Vec<f64>>()
        }
        EtaPolicy::Constant(v) => vec![*v; graph.edge_count()],
        EtaPolicy::PerEdge(v) => v.clone(),
    };
    let above = eta
        .iter()
        .zip(&bound)
        .filter(|(e, b)| matches!(b, Some(b) if **e > *b + 1e-15))
        .count();
    if above > 0 {
        warnings.push(format!(
            "step size exceeds the 1/L rate bound on {} edge(s); convergence guarantees do not \
             apply",
            above
        ));
    }
    Ok((eta, warnings))
}

fn resolve_lambda0(inst: &Instance, policy: &LambdaPolicy) -> Vec<f64> {
    match policy {
        LambdaPolicy::ProducerCostOffset(off) => inst
            .graph
            .edges()
            .iter()
            .map(|e| inst.producers[e.producer].b + off)
            .collect(),
        LambdaPolicy::Constant(v) => vec![*v; inst.graph.edge_count()],
        LambdaPolicy::PerEdge(v) => v.clone(),
    }
}

/// Penalty-mode operator state: one nonnegative multiplier per constraint side.
struct OperatorState {
    mu_v_hi: Vec<f64>,
    mu_v_lo: Vec<f64>,
    mu_f_hi: Vec<f64>,
    mu_f_lo: Vec<f64>,
}

impl OperatorState {
    fn new(n_buses: usize, n_lines: usize) -> Self {
        Self {
            mu_v_hi: vec![0.0; n_buses - 1],
            mu_v_lo: vec![0.0; n_buses - 1],
            mu_f_hi: vec![0.0; n_lines],
            mu_f_lo: vec![0.0; n_lines],
        }
    }

    fn update(
        &mut self,
        grid: &grid::GridModel,
        sens: &SensitivityMatrices,
        injections: &[f64],
        step: f64,
    ) {
        let v = grid::bus_voltages(sens, injections, grid.base_kw);
        let f = grid::line_flows(sens, injections);
        for b in 1..grid.bus_count() {
            let hi = &mut self.mu_v_hi[b - 1];
            *hi = (*hi + step * (v[b] - grid.v_max[b])).max(0.0);
            let lo = &mut self.mu_v_lo[b - 1];
            *lo = (*lo + step * (grid.v_min[b] - v[b])).max(0.0);
        }
        for l in 0..sens.line_count() {
            let fmax = sens.f_max_kw(l);
            let hi = &mut self.mu_f_hi[l];
            *hi = (*hi + step * (f[l] - fmax) / fmax).max(0.0);
            let lo = &mut self.mu_f_lo[l];
            *lo = (*lo + step * (-fmax - f[l]) / fmax).max(0.0);
        }
    }

    /// Marginal charge ($/kWh) for injecting one extra kW at each non-slack bus.
    fn bus_charges(&self, grid: &grid::GridModel, sens: &SensitivityMatrices) -> Vec<f64> {
        let n = grid.bus_count();
        let mut charge = vec![0.0; n - 1];
        for (b, c) in charge.iter_mut().enumerate() {
            let bus = b + 1;
            for b2 in 1..n {
                *c += (self.mu_v_hi[b2 - 1] - self.mu_v_lo[b2 - 1]) * sens.s_v(b2, bus)
                    / grid.base_kw;
            }
            for l in 0..sens.line_count() {
                if sens.s_f(l, bus) {
                    *c += (self.mu_f_hi[l] - self.mu_f_lo[l]) / sens.f_max_kw(l);
                }
            }
        }
        charge
    }
}

/// Runs the clearing loop with the given configuration.
pub fn run(inst: &Instance, cfg: &ClearingConfig) -> Result<ClearingResult> {
    run_with_reference(inst, cfg, None)
}

/// Like [`run`], additionally filling the per-iteration dual gap against a
/// known dual optimum `q_star` (typically the oracle welfare).
pub fn run_with_reference(
    inst: &Instance,
    cfg: &ClearingConfig,
    q_star: Option<f64>,
) -> Result<ClearingResult> {
    inst.validate()?;
    cfg.validate(inst.graph.edge_count())?;
    let graph = &inst.graph;
    let edge_count = graph.edge_count();
    if edge_count == 0 {
        return Err(Error::EmptyEdgeSet("market"));
    }

    let (eta, mut warnings) = resolve_eta(inst, &cfg.eta)?;
    let lambda0 = resolve_lambda0(inst, &cfg.lambda0);
    let br_cfg = BestResponseConfig { rho: cfg.rho, tie_break: cfg.tie_break };

    let sens = match &inst.grid {
        Some(g) => Some(grid::build_sensitivities(g)?),
        None => None,
    };
    // producer/consumer bus lookup for penalty charges
    let (prod_bus, cons_bus) = match &inst.grid {
        Some(g) => {
            let mut pb = vec![0usize; graph.n_producers];
            let mut cb = vec![0usize; graph.n_consumers];
            for bp in &g.bus_prosumers {
                match bp.kind {
                    ProsumerKind::Producer => pb[bp.index] = bp.bus,
                    ProsumerKind::Consumer => cb[bp.index] = bp.bus,
                }
            }
            (pb, cb)
        }
        None => (Vec::new(), Vec::new()),
    };
    let mut operator = match (&inst.grid, cfg.network_mode) {
        (Some(g), NetworkMode::Penalty) => Some(OperatorState::new(g.bus_count(), g.lines.len())),
        _ => None,
    };
    let mut charges: Vec<f64> = inst
        .grid
        .as_ref()
        .map(|g| vec![0.0; g.bus_count() - 1])
        .unwrap_or_default();

    let mut state = MarketState {
        k: 1,
        lambda: lambda0.clone(),
        lambda_prev: lambda0.clone(),
        lambda_hat: lambda0,
        gamma: 1.0,
        allocation: Allocation::zeros(edge_count),
    };

    let damped = cfg.rho > 0.0;
    // per-agent damping weights for the consensus anchors (damped regime only)
    let agent_weight = |edges: &[usize]| -> f64 {
        edges.iter().map(|&e| eta[e]).fold(cfg.rho, f64::max)
    };

    let mut trace = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    let mut worst_v_traj: f64 = 0.0;
    let mut worst_f_traj: f64 = 0.0;
    let started = Instant::now();

    let mut x = vec![0.0; edge_count];
    let mut y = vec![0.0; edge_count];
    let mut y_prev = vec![0.0; edge_count];
    // extrapolated consumer anchor seen by producers in the damped regime
    let mut y_hat = vec![0.0; edge_count];
    let mut residual_prev = f64::INFINITY;
    let mut momentum_clock = 0usize;
    let mut cooldown = 0usize;

    for k in 1..=cfg.max_iter {
        state.k = k;

        // Step 3: best responses against the frozen extrapolated prices.
        for (i, p) in inst.producers.iter().enumerate() {
            let edges = graph.producer_edges(i);
            if edges.is_empty() {
                continue;
            }
            let charge = if operator.is_some() { charges[prod_bus[i] - 1] } else { 0.0 };
            let l: Vec<f64> = edges.iter().map(|&e| state.lambda_hat[e] - charge).collect();
            let (anchor, cfg_i): (Vec<f64>, BestResponseConfig) = if damped {
                (
                    edges.iter().map(|&e| y_hat[e]).collect(),
                    BestResponseConfig { rho: agent_weight(edges), ..br_cfg },
                )
            } else {
                (edges.iter().map(|&e| state.allocation.x[e]).collect(), br_cfg)
            };
            let xi = subproblem::producer_best_response(p, &l, &anchor, &cfg_i)?;
            for (slot, &e) in edges.iter().enumerate() {
                x[e] = xi[slot];
            }
        }
        for (j, c) in inst.consumers.iter().enumerate() {
            let edges = graph.consumer_edges(j);
            if edges.is_empty() {
                continue;
            }
            let charge = if operator.is_some() { charges[cons_bus[j] - 1] } else { 0.0 };
            let l: Vec<f64> = edges.iter().map(|&e| state.lambda_hat[e] - charge).collect();
            let a: Vec<f64> = edges.iter().map(|&e| graph.alpha()[e]).collect();
            let (anchor, cfg_j): (Vec<f64>, BestResponseConfig) = if damped {
                (
                    edges.iter().map(|&e| x[e]).collect(),
                    BestResponseConfig { rho: agent_weight(edges), ..br_cfg },
                )
            } else {
                (edges.iter().map(|&e| state.allocation.y[e]).collect(), br_cfg)
            };
            let yj = subproblem::consumer_best_response(c, &l, &a, &anchor, &cfg_j)?;
            for (slot, &e) in edges.iter().enumerate() {
                y[e] = yj[slot];
            }
        }
        state.allocation.x.copy_from_slice(&x);
        state.allocation.y.copy_from_slice(&y);

        // Step 5: dual ascent on the consensus violation.
        let lambda_new = price_update(&state.lambda_hat, &eta, &x, &y)?;
        state.lambda_prev = std::mem::replace(&mut state.lambda, lambda_new);

        iterations = k;
        let mismatch = mismatch_inf(&x, &y);
        let welfare =
            model::social_welfare(graph, &inst.producers, &inst.consumers, &state.allocation)?;
        let q = dual_value(inst, &state.lambda)?;
        trace.push(IterationRecord {
            k,
            mismatch_inf: mismatch,
            welfare,
            dual_value: q,
            dual_gap: q_star.map(|qs| q - qs),
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        });

        let mut network_ok = true;
        if let (Some(g), Some(s)) = (&inst.grid, &sens) {
            let inj = grid::bus_injections(g, graph, &state.allocation)?;
            let v = grid::bus_voltages(s, &inj, g.base_kw);
            let f = grid::line_flows(s, &inj);
            let mut worst_v: f64 = 0.0;
            let mut worst_f: f64 = 0.0;
            for b in 1..g.bus_count() {
                worst_v = worst_v.max(g.v_min[b] - v[b]).max(v[b] - g.v_max[b]);
            }
            for l in 0..s.line_count() {
                worst_f = worst_f.max(f[l].abs() - s.f_max_kw(l));
            }
            worst_v_traj = worst_v_traj.max(worst_v);
            worst_f_traj = worst_f_traj.max(worst_f);
            if let Some(op) = operator.as_mut() {
                op.update(g, s, &inj, cfg.network_eta);
                charges = op.bus_charges(g, s);
                network_ok = worst_v <= PENALTY_V_TOL && worst_f <= PENALTY_F_TOL;
            }
        }

        if stopping_check(&x, &y, cfg.epsilon) && network_ok {
            converged = true;
            break;
        }

        // Step 6: momentum extrapolation (plain mode reuses lambda directly).
        if cfg.accelerated && !damped {
            let g_next = gamma_next(k, state.gamma);
            state.lambda_hat =
                momentum_extrapolate(k, state.gamma, g_next, &state.lambda, &state.lambda_prev);
            state.gamma = g_next;
            debug_assert!(state.gamma >= ((k + 1) * (k + 1)) as f64 / 2.0 - 1e-9);
        } else if cfg.accelerated {
            // Damped regime: extrapolate prices and consumer anchors together,
            // engage only while the contraction stalls, restart the momentum
            // clock when the residual grows.
            let residual: f64 = x
                .iter()
                .zip(&y)
                .map(|(a, b)| (a - b) * (a - b))
                .chain(y.iter().zip(&y_prev).map(|(a, b)| (a - b) * (a - b)))
                .sum();
            let ratio = residual / residual_prev;
            if ratio > STALL_GATE && ratio <= 1.0 && cooldown == 0 {
                momentum_clock += 1;
                let kk = momentum_clock;
                let g_next = gamma_next(kk, state.gamma);
                state.lambda_hat = momentum_extrapolate(
                    kk,
                    state.gamma,
                    g_next,
                    &state.lambda,
                    &state.lambda_prev,
                );
                let coeff =
                    (kk as f64 + 1.0) * (state.gamma - kk as f64) / (kk as f64 * g_next);
                y_hat = y
                    .iter()
                    .zip(&y_prev)
                    .map(|(a, b)| (a + coeff * (a - b)).max(0.0))
                    .collect();
                state.gamma = g_next;
            } else {
                if ratio > 1.0 && momentum_clock > 0 {
                    cooldown = RESTART_COOLDOWN;
                } else {
                    cooldown = cooldown.saturating_sub(1);
                }
                momentum_clock = 0;
                state.gamma = 1.0;
                state.lambda_hat = state.lambda.clone();
                y_hat = y.clone();
            }
            residual_prev = residual;
        } else {
            state.lambda_hat = state.lambda.clone();
            y_hat = y.clone();
        }
        y_prev.copy_from_slice(&y);
    }

    if !converged {
        warnings.push(format!(
            "did not reach per-edge mismatch <= {} within {} iterations",
            cfg.epsilon, cfg.max_iter
        ));
    }

    let constraint_report = match (&inst.grid, &sens) {
        (Some(g), Some(s)) => Some(grid::check_constraints(g, s, &state.allocation, graph)?),
        _ => None,
    };

    Ok(ClearingResult {
        converged,
        iterations,
        allocation: state.allocation.clone(),
        prices: state.lambda.clone(),
        welfare: trace.last().map(|r| r.welfare).unwrap_or(0.0),
        trace,
        constraint_report,
        trajectory_worst_voltage: inst.grid.as_ref().map(|_| worst_v_traj.max(0.0)),
        trajectory_worst_flow: inst.grid.as_ref().map(|_| worst_f_traj.max(0.0)),
        wall_ms: started.elapsed().as_secs_f64() * 1e3,
        warnings,
    })
}

fn fmt_sig(v: f64) -> String {
    format!("{:.8e}", v)
}

/// Writes the iteration trace as CSV with nine significant digits.
pub fn write_trace_csv<W: Write>(mut w: W, trace: &[IterationRecord]) -> Result<()> {
    writeln!(w, "k,mismatch_inf,welfare,dual_value,dual_gap,wall_ms")?;
    for r in trace {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            r.k,
            fmt_sig(r.mismatch_inf),
            fmt_sig(r.welfare),
            fmt_sig(r.dual_value),
            r.dual_gap.map(fmt_sig).unwrap_or_default(),
            fmt_sig(r.wall_ms),
        )?;
    }
    Ok(())
}
