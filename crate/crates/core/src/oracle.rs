//! Centralized reference solver for the social-welfare program, used as ground
//! truth by tests and the acceptance suite.
//!
//! The consensus constraint is eliminated by substituting one variable per
//! edge (`z = x = y`). The concave objective is maximized by projected
//! gradient ascent — Dykstra's algorithm supplies the exact projection onto
//! the intersection of the per-producer and per-consumer knapsack blocks (and
//! optional network half-spaces) — followed by an active-set polish that
//! solves the equality-constrained quadratic exactly. This path shares no
//! machinery with the distributed engine it validates.

use crate::error::{Error, Result};
use crate::grid;
use crate::instance::Instance;
use crate::model::Allocation;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleSolution {
    pub allocation: Allocation,
    pub welfare: f64,
    /// Consensus prices recovered from the KKT conditions, one per edge. With
    /// binding grid constraints these ignore congestion components and are
    /// approximate.
    pub dual_prices: Vec<f64>,
    pub kkt_residual: f64,
}

/// Dual-gap bounds of the accelerated and plain variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoundKind {
    Accelerated,
    Plain,
}

/// `sum_e 2 (lambda0 - lambda*)^2 / (eta k^2)` for the accelerated variant,
/// `sum_e (lambda0 - lambda*)^2 / (2 eta k)` for the plain one.
pub fn theoretical_bound(
    kind: BoundKind,
    k: usize,
    eta: &[f64],
    lambda0: &[f64],
    lambda_star: &[f64],
) -> f64 {
    let k = k as f64;
    eta.iter()
        .zip(lambda0.iter().zip(lambda_star))
        .map(|(e, (l0, ls))| {
            let d2 = (l0 - ls) * (l0 - ls);
            match kind {
                BoundKind::Accelerated => 2.0 * d2 / (e * k * k),
                BoundKind::Plain => d2 / (2.0 * e * k),
            }
        })
        .sum()
}

// ---------------------------------------------------------------------------
// objective helpers on the substituted variable
// ---------------------------------------------------------------------------

struct Program<'a> {
    inst: &'a Instance,
    producer_edges: Vec<&'a [usize]>,
    consumer_edges: Vec<&'a [usize]>,
}

impl<'a> Program<'a> {
    fn new(inst: &'a Instance) -> Self {
        Self {
            inst,
            producer_edges: (0..inst.graph.n_producers)
                .map(|i| inst.graph.producer_edges(i))
                .collect(),
            consumer_edges: (0..inst.graph.n_consumers)
                .map(|j| inst.graph.consumer_edges(j))
                .collect(),
        }
    }

    fn producer_totals(&self, z: &[f64]) -> Vec<f64> {
        self.producer_edges
            .iter()
            .map(|edges| edges.iter().map(|&e| z[e]).sum())
            .collect()
    }

    fn consumer_totals(&self, z: &[f64]) -> Vec<f64> {
        self.consumer_edges
            .iter()
            .map(|edges| edges.iter().map(|&e| z[e]).sum())
            .collect()
    }

    fn objective(&self, z: &[f64]) -> f64 {
        let mut val = 0.0;
        for (i, p) in self.inst.producers.iter().enumerate() {
            let x: f64 = self.producer_edges[i].iter().map(|&e| z[e]).sum();
            val -= 0.5 * p.a * x * x + p.b * x + p.c;
        }
        for (j, c) in self.inst.consumers.iter().enumerate() {
            let y: f64 = self.consumer_edges[j].iter().map(|&e| z[e]).sum();
            val += if y <= c.knee() {
                c.omega * y - 0.5 * c.delta * y * y
            } else {
                c.omega * c.omega / (2.0 * c.delta)
            };
        }
        for (e, a) in self.inst.graph.alpha().iter().enumerate() {
            val += a * z[e];
        }
        val
    }

    fn gradient(&self, z: &[f64]) -> Vec<f64> {
        let xs = self.producer_totals(z);
        let ys = self.consumer_totals(z);
        self.inst
            .graph
            .edges()
            .iter()
            .enumerate()
            .map(|(e, edge)| {
                let p = &self.inst.producers[edge.producer];
                let c = &self.inst.consumers[edge.consumer];
                c.marginal_utility(ys[edge.consumer]) + self.inst.graph.alpha()[e]
                    - p.marginal_cost(xs[edge.producer])
            })
            .collect()
    }

    /// Row-sum bound on the Hessian norm, for the gradient step size.
    fn curvature_bound(&self) -> f64 {
        self.inst
            .graph
            .edges()
            .iter()
            .map(|edge| {
                let p = &self.inst.producers[edge.producer];
                let c = &self.inst.consumers[edge.consumer];
                p.a * self.producer_edges[edge.producer].len() as f64
                    + c.delta * self.consumer_edges[edge.consumer].len() as f64
            })
            .fold(0.0, f64::max)
            .max(1e-12)
    }
}

// ---------------------------------------------------------------------------
// projection machinery
// ---------------------------------------------------------------------------

/// Projects `v` onto `{u >= 0, lo <= sum u <= hi}` by shifting with the
/// knapsack multiplier: `u = max(0, v - tau)` with `tau` chosen so the sum
/// lands inside `[lo, hi]`.
fn project_block(v: &[f64], lo: f64, hi: f64) -> Vec<f64> {
    let clipped_sum: f64 = v.iter().map(|x| x.max(0.0)).sum();
    let target = if clipped_sum < lo {
        lo
    } else if clipped_sum > hi {
        hi
    } else {
        return v.iter().map(|x| x.max(0.0)).collect();
    };
    // find tau with sum max(0, v - tau) = target; breakpoints at v values
    let mut sorted: Vec<f64> = v.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let mut prefix = 0.0;
    for (m, &bp) in sorted.iter().enumerate() {
        prefix += bp;
        let m1 = (m + 1) as f64;
        // tau candidate with the first m+1 entries active
        let tau = (prefix - target) / m1;
        let next = sorted.get(m + 1).copied().unwrap_or(f64::NEG_INFINITY);
        if tau <= bp && tau > next {
            return v.iter().map(|x| (x - tau).max(0.0)).collect();
        }
    }
    // target smaller than any single entry: all mass on shifting everything
    let tau = (sorted.iter().sum::<f64>() - target) / v.len() as f64;
    v.iter().map(|x| (x - tau).max(0.0)).collect()
}

/// One closed convex piece of the feasible set.
enum Piece {
    ProducerBlock { edges: Vec<usize>, lo: f64, hi: f64 },
    ConsumerBlock { edges: Vec<usize>, lo: f64, hi: f64 },
    HalfSpace { w: Vec<f64>, r: f64, norm2: f64 },
}

impl Piece {
    fn project(&self, z: &mut [f64]) {
        match self {
            Piece::ProducerBlock { edges, lo, hi } | Piece::ConsumerBlock { edges, lo, hi } => {
                let v: Vec<f64> = edges.iter().map(|&e| z[e]).collect();
                let u = project_block(&v, *lo, *hi);
                for (slot, &e) in edges.iter().enumerate() {
                    z[e] = u[slot];
                }
            }
            Piece::HalfSpace { w, r, norm2 } => {
                let dot: f64 = w.iter().zip(z.iter()).map(|(a, b)| a * b).sum();
                if dot > *r {
                    let t = (dot - r) / norm2;
                    for (e, we) in w.iter().enumerate() {
                        z[e] -= t * we;
                    }
                }
            }
        }
    }
}

/// Dykstra's alternating projection onto the intersection of the pieces.
fn dykstra_project(z0: &[f64], pieces: &[Piece], sweeps: usize) -> Vec<f64> {
    let n = z0.len();
    let mut z = z0.to_vec();
    let mut corrections = vec![vec![0.0; n]; pieces.len()];
    let scale = 1.0 + z0.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    for _ in 0..sweeps {
        let mut moved: f64 = 0.0;
        for (p, piece) in pieces.iter().enumerate() {
            let before: Vec<f64> = z.iter().zip(&corrections[p]).map(|(a, b)| a + b).collect();
            let mut after = before.clone();
            piece.project(&mut after);
            for e in 0..n {
                corrections[p][e] = before[e] - after[e];
                moved = moved.max((after[e] - z[e]).abs());
                z[e] = after[e];
            }
        }
        if moved < 1e-14 * scale {
            break;
        }
    }
    z
}

fn feasibility_pieces(inst: &Instance, with_network: bool) -> Result<Vec<Piece>> {
    let mut pieces = Vec::new();
    for (i, p) in inst.producers.iter().enumerate() {
        let edges = inst.graph.producer_edges(i).to_vec();
        if edges.is_empty() {
            continue;
        }
        pieces.push(Piece::ProducerBlock { edges, lo: p.x_min, hi: p.x_max });
    }
    for (j, c) in inst.consumers.iter().enumerate() {
        let edges = inst.graph.consumer_edges(j).to_vec();
        if edges.is_empty() {
            continue;
        }
        pieces.push(Piece::ConsumerBlock { edges, lo: c.y_min, hi: c.y_max });
    }
    if with_network {
        let g = inst
            .grid
            .as_ref()
            .ok_or_else(|| Error::InvalidInstance("network mode requires a grid".into()))?;
        let sens = grid::build_sensitivities(g)?;
        let ne = inst.graph.edge_count();
        // injection row per non-slack bus as a linear map of z
        let mut inj_rows = vec![vec![0.0; ne]; g.bus_count() - 1];
        for bp in &g.bus_prosumers {
            let (edges, sign) = match bp.kind {
                grid::ProsumerKind::Producer => (inst.graph.producer_edges(bp.index), 1.0),
                grid::ProsumerKind::Consumer => (inst.graph.consumer_edges(bp.index), -1.0),
            };
            for &e in edges {
                inj_rows[bp.bus - 1][e] += sign;
            }
        }
        let n = g.bus_count();
        for b in 1..n {
            let mut w = vec![0.0; ne];
            for b2 in 1..n {
                let s = sens.s_v(b, b2) / g.base_kw;
                for e in 0..ne {
                    w[e] += s * inj_rows[b2 - 1][e];
                }
            }
            let norm2: f64 = w.iter().map(|v| v * v).sum();
            if norm2 > 0.0 {
                let neg: Vec<f64> = w.iter().map(|v| -v).collect();
                pieces.push(Piece::HalfSpace { w: w.clone(), r: g.v_max[b] - 1.0, norm2 });
                pieces.push(Piece::HalfSpace { w: neg, r: 1.0 - g.v_min[b], norm2 });
            }
        }
        for l in 0..sens.line_count() {
            let mut w = vec![0.0; ne];
            for b in 1..n {
                if sens.s_f(l, b) {
                    for e in 0..ne {
                        w[e] += inj_rows[b - 1][e];
                    }
                }
            }
            let norm2: f64 = w.iter().map(|v| v * v).sum();
            if norm2 > 0.0 {
                let neg: Vec<f64> = w.iter().map(|v| -v).collect();
                pieces.push(Piece::HalfSpace { w, r: sens.f_max_kw(l), norm2 });
                pieces.push(Piece::HalfSpace { w: neg, r: sens.f_max_kw(l), norm2 });
            }
        }
    }
    Ok(pieces)
}

/// Component-wise necessary feasibility: within each connected trading
/// component, supply floors cannot exceed demand caps and vice versa.
fn check_component_feasibility(inst: &Instance) -> Result<()> {
    let np = inst.graph.n_producers;
    let nc = inst.graph.n_consumers;
    let mut comp = vec![usize::MAX; np + nc];
    let mut next = 0;
    for start in 0..np {
        if comp[start] != usize::MAX || inst.graph.producer_edges(start).is_empty() {
            continue;
        }
        let mut stack = vec![start];
        comp[start] = next;
        while let Some(node) = stack.pop() {
            let neighbors: Vec<usize> = if node < np {
                inst.graph
                    .producer_edges(node)
                    .iter()
                    .map(|&e| np + inst.graph.edges()[e].consumer)
                    .collect()
            } else {
                inst.graph
                    .consumer_edges(node - np)
                    .iter()
                    .map(|&e| inst.graph.edges()[e].producer)
                    .collect()
            };
            for nb in neighbors {
                if comp[nb] == usize::MAX {
                    comp[nb] = next;
                    stack.push(nb);
                }
            }
        }
        next += 1;
    }
    for cid in 0..next {
        let mut x_lo = 0.0;
        let mut x_hi = 0.0;
        let mut y_lo = 0.0;
        let mut y_hi = 0.0;
        for i in 0..np {
            if comp[i] == cid {
                x_lo += inst.producers[i].x_min;
                x_hi += inst.producers[i].x_max;
            }
        }
        for j in 0..nc {
            if comp[np + j] == cid {
                y_lo += inst.consumers[j].y_min;
                y_hi += inst.consumers[j].y_max;
            }
        }
        if x_lo > y_hi + 1e-12 || y_lo > x_hi + 1e-12 {
            return Err(Error::InfeasibleBounds(format!(
                "trading component {}: supply [{}, {}] cannot meet demand [{}, {}]",
                cid, x_lo, x_hi, y_lo, y_hi
            )));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// active-set polish
// ---------------------------------------------------------------------------

/// Active-set polish: alternates the equality-constrained quadratic solve with
/// simplex-style walks along welfare-improving trade cycles (directions that
/// keep every agent total fixed — the objective is linear there through the
/// alpha terms, so the walk runs to the first vertex). Edges that hit zero are
/// pinned and the system re-solved.
fn polish(prog: &Program, pieces: &[Piece], z: &[f64], tol_active: f64) -> Vec<f64> {
    let inst = prog.inst;
    let n_agents = inst.graph.n_producers + inst.graph.n_consumers;
    let mut current = z.to_vec();
    let mut pinned: Vec<bool> = z.iter().map(|&v| v <= tol_active).collect();
    let mut banned_rows = vec![false; n_agents];
    for _ in 0..48 {
        let (next, blocked, rows) =
            polish_step(prog, pieces, &current, &pinned, &banned_rows, tol_active);
        let improved = prog.objective(&next) > prog.objective(&current) + 1e-13;
        let moved = next
            .iter()
            .zip(&current)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        current = next;
        if let Some(e) = blocked {
            pinned[e] = true;
            continue;
        }
        for (e, p) in pinned.iter_mut().enumerate() {
            *p = current[e] <= tol_active;
        }
        let cycled = cycle_step(prog, pieces, &mut current, &pinned);
        let scale = 1.0 + current.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if cycled || moved >= 1e-7 * scale {
            continue;
        }
        // (near-)stationary on this working set. Drop a bound row whose
        // multiplier has the wrong sign, else release a pinned edge whose
        // reduced gradient says activating it improves the objective.
        let wrong_sign = rows.iter().find(|(agent, at_upper, nu)| {
            !banned_rows[*agent] && if *at_upper { *nu < -1e-12 } else { *nu > 1e-12 }
        });
        if let Some((agent, _, _)) = wrong_sign {
            banned_rows[*agent] = true;
            continue;
        }
        match release_candidate(prog, &current, &pinned) {
            Some(e) => pinned[e] = false,
            None if !improved && moved < 1e-12 => break,
            None => {}
        }
    }
    current
}

/// Reduced gradient of pinned edges: the objective gradient minus the
/// least-squares agent potentials fitted on the free edges. Positive means the
/// edge wants to enter the working set.
fn release_candidate(prog: &Program, z: &[f64], pinned: &[bool]) -> Option<usize> {
    let inst = prog.inst;
    let ne = z.len();
    let free: Vec<usize> = (0..ne).filter(|&e| !pinned[e]).collect();
    if free.is_empty() || free.len() == ne {
        return None;
    }
    let g = prog.gradient(z);
    // fit potentials mu_i + t_j ~ g_e over free edges (normal equations via SVD)
    let np = inst.graph.n_producers;
    let nc = inst.graph.n_consumers;
    let a = DMatrix::<f64>::from_fn(free.len(), np + nc, |r, c| {
        let edge = inst.graph.edges()[free[r]];
        if c < np {
            if edge.producer == c {
                1.0
            } else {
                0.0
            }
        } else if edge.consumer == c - np {
            1.0
        } else {
            0.0
        }
    });
    let gv = DVector::<f64>::from_iterator(free.len(), free.iter().map(|&e| g[e]));
    let pot = a.clone().svd(true, true).solve(&gv, 1e-11).ok()?;
    let mut best: Option<(usize, f64)> = None;
    for e in 0..ne {
        if !pinned[e] {
            continue;
        }
        let edge = inst.graph.edges()[e];
        let reduced = g[e] - pot[edge.producer] - pot[np + edge.consumer];
        if reduced > 1e-10 && best.map(|(_, r)| reduced > r).unwrap_or(true) {
            best = Some((e, reduced));
        }
    }
    best.map(|(e, _)| e)
}

/// Walks the gradient's total-preserving component to the nearest boundary.
/// Returns whether it moved.
fn cycle_step(prog: &Program, pieces: &[Piece], z: &mut Vec<f64>, pinned: &[bool]) -> bool {
    let inst = prog.inst;
    let ne = z.len();
    let free: Vec<usize> = (0..ne).filter(|&e| !pinned[e]).collect();
    if free.len() < 2 {
        return false;
    }
    let g = prog.gradient(z);
    let g_free = DVector::<f64>::from_iterator(free.len(), free.iter().map(|&e| g[e]));

    // rows: one indicator per agent over the free edges
    let mut rows: Vec<Vec<usize>> = Vec::new();
    let col_of: Vec<Option<usize>> = {
        let mut m = vec![None; ne];
        for (c, &e) in free.iter().enumerate() {
            m[e] = Some(c);
        }
        m
    };
    for i in 0..inst.graph.n_producers {
        let cols: Vec<usize> =
            prog.producer_edges[i].iter().filter_map(|&e| col_of[e]).collect();
        if !cols.is_empty() {
            rows.push(cols);
        }
    }
    for j in 0..inst.graph.n_consumers {
        let cols: Vec<usize> =
            prog.consumer_edges[j].iter().filter_map(|&e| col_of[e]).collect();
        if !cols.is_empty() {
            rows.push(cols);
        }
    }
    let a = DMatrix::<f64>::from_fn(rows.len(), free.len(), |r, c| {
        if rows[r].contains(&c) {
            1.0
        } else {
            0.0
        }
    });
    // least-squares multipliers: g ~ A^T nu; residual is the cycle direction
    let at = a.transpose();
    let gram = &a * &at;
    let rhs = &a * &g_free;
    let nu = match gram.svd(true, true).solve(&rhs, 1e-11) {
        Ok(nu) => nu,
        Err(_) => return false,
    };
    let d = &g_free - at * nu;
    let dmax = d.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if dmax < 1e-10 {
        return false;
    }

    // largest step before an edge or half-space boundary
    let mut t_max = f64::INFINITY;
    for (c, &e) in free.iter().enumerate() {
        if d[c] < -1e-14 {
            t_max = t_max.min(-z[e] / d[c]);
        }
    }
    for piece in pieces {
        if let Piece::HalfSpace { w, r, .. } = piece {
            let wd: f64 = free.iter().enumerate().map(|(c, &e)| w[e] * d[c]).sum();
            if wd > 1e-14 {
                let wz: f64 = w.iter().zip(z.iter()).map(|(a, b)| a * b).sum();
                t_max = t_max.min((r - wz) / wd);
            }
        }
    }
    if !t_max.is_finite() || t_max <= 0.0 {
        return false;
    }
    let before = prog.objective(z);
    let mut cand = z.clone();
    for (c, &e) in free.iter().enumerate() {
        cand[e] = (cand[e] + t_max * d[c]).max(0.0);
    }
    if prog.objective(&cand) > before + 1e-14 {
        *z = cand;
        true
    } else {
        false
    }
}

/// One equality-constrained solve plus line search. Returns the new point, the
/// index of an edge newly driven to zero (if that is what capped the step),
/// and the bound-row multipliers as `(agent, at_upper, nu)` with consumers
/// offset by the producer count.
fn polish_step(
    prog: &Program,
    pieces: &[Piece],
    z: &[f64],
    pinned: &[bool],
    banned_rows: &[bool],
    tol_active: f64,
) -> (Vec<f64>, Option<usize>, Vec<(usize, bool, f64)>) {
    let inst = prog.inst;
    let ne = z.len();
    let np = inst.graph.n_producers;
    let xs = prog.producer_totals(z);
    let ys = prog.consumer_totals(z);

    let free: Vec<usize> = (0..ne).filter(|&e| !pinned[e]).collect();
    if free.is_empty() {
        return (z.to_vec(), None, Vec::new());
    }
    let col_of: Vec<Option<usize>> = {
        let mut m = vec![None; ne];
        for (c, &e) in free.iter().enumerate() {
            m[e] = Some(c);
        }
        m
    };

    // equality rows: producer/consumer totals pinned at an active bound
    let mut rows: Vec<(Vec<usize>, f64, usize, bool)> = Vec::new();
    for (i, p) in inst.producers.iter().enumerate() {
        if banned_rows[i] {
            continue;
        }
        let sum_fixed: f64 = prog.producer_edges[i]
            .iter()
            .filter(|&&e| col_of[e].is_none())
            .map(|&e| z[e])
            .sum();
        let cols: Vec<usize> =
            prog.producer_edges[i].iter().filter_map(|&e| col_of[e]).collect();
        if cols.is_empty() {
            continue;
        }
        if xs[i] >= p.x_max - tol_active {
            rows.push((cols.clone(), p.x_max - sum_fixed, i, true));
        } else if xs[i] <= p.x_min + tol_active && p.x_min > 0.0 {
            rows.push((cols, p.x_min - sum_fixed, i, false));
        }
    }
    for (j, c) in inst.consumers.iter().enumerate() {
        if banned_rows[np + j] {
            continue;
        }
        let sum_fixed: f64 = prog.consumer_edges[j]
            .iter()
            .filter(|&&e| col_of[e].is_none())
            .map(|&e| z[e])
            .sum();
        let cols: Vec<usize> =
            prog.consumer_edges[j].iter().filter_map(|&e| col_of[e]).collect();
        if cols.is_empty() {
            continue;
        }
        if ys[j] >= c.y_max - tol_active {
            rows.push((cols.clone(), c.y_max - sum_fixed, np + j, true));
        } else if ys[j] <= c.y_min + tol_active && c.y_min > 0.0 {
            rows.push((cols, c.y_min - sum_fixed, np + j, false));
        }
    }

    let nf = free.len();
    let nr = rows.len();
    let dim = nf + nr;
    let mut kkt = DMatrix::<f64>::zeros(dim, dim);
    let mut rhs = DVector::<f64>::zeros(dim);

    // Hessian (negated, so the system is for a maximum) and linear term on the
    // free block; flat-branch consumers contribute no curvature and no slope.
    for (ci, &e) in free.iter().enumerate() {
        let edge = inst.graph.edges()[e];
        let p = &inst.producers[edge.producer];
        let c = &inst.consumers[edge.consumer];
        let flat = ys[edge.consumer] > c.knee();
        let lin = if flat { 0.0 } else { c.omega } + inst.graph.alpha()[e] - p.b;
        rhs[ci] = lin;
        for (cj, &e2) in free.iter().enumerate() {
            let edge2 = inst.graph.edges()[e2];
            let mut h = 0.0;
            if edge.producer == edge2.producer {
                h += p.a;
            }
            if edge.consumer == edge2.consumer && !flat {
                h += c.delta;
            }
            kkt[(ci, cj)] = h;
        }
    }
    for (ri, (cols, b, _, _)) in rows.iter().enumerate() {
        for &cj in cols {
            kkt[(nf + ri, cj)] = 1.0;
            kkt[(cj, nf + ri)] = 1.0;
        }
        rhs[nf + ri] = *b;
    }

    let svd = kkt.svd(true, true);
    let sol = match svd.solve(&rhs, 1e-11) {
        Ok(s) => s,
        Err(_) => return (z.to_vec(), None, Vec::new()),
    };
    let row_info: Vec<(usize, bool, f64)> = rows
        .iter()
        .enumerate()
        .map(|(ri, (_, _, agent, at_upper))| (*agent, *at_upper, sol[nf + ri]))
        .collect();

    let mut target = z.to_vec();
    for (ci, &e) in free.iter().enumerate() {
        target[e] = sol[ci];
    }
    for e in 0..ne {
        if col_of[e].is_none() {
            target[e] = 0.0;
        }
    }

    // line search toward the polished point, capped at the feasible boundary;
    // the direction carries solver noise, so ignore components below its scale
    let dir: Vec<f64> = target.iter().zip(z).map(|(t, a)| t - a).collect();
    let dir_eps = 1e-10 * (1.0 + dir.iter().fold(0.0f64, |m, v| m.max(v.abs())));
    let mut t_max: f64 = 1.0;
    let mut blocking_edge: Option<usize> = None;
    for e in 0..ne {
        if dir[e] < -dir_eps {
            let t = (-z[e] / dir[e]).max(0.0);
            if t < t_max {
                t_max = t;
                blocking_edge = Some(e);
            }
        }
    }
    for (i, p) in inst.producers.iter().enumerate() {
        let d: f64 = prog.producer_edges[i].iter().map(|&e| dir[e]).sum();
        let t = if d > dir_eps {
            ((p.x_max - xs[i]) / d).max(0.0)
        } else if d < -dir_eps {
            ((p.x_min - xs[i]) / d).max(0.0)
        } else {
            continue;
        };
        if t < t_max {
            t_max = t;
            blocking_edge = None;
        }
    }
    for (j, c) in inst.consumers.iter().enumerate() {
        let d: f64 = prog.consumer_edges[j].iter().map(|&e| dir[e]).sum();
        let t = if d > dir_eps {
            ((c.y_max - ys[j]) / d).max(0.0)
        } else if d < -dir_eps {
            ((c.y_min - ys[j]) / d).max(0.0)
        } else {
            continue;
        };
        if t < t_max {
            t_max = t;
            blocking_edge = None;
        }
    }
    for piece in pieces {
        if let Piece::HalfSpace { w, r, .. } = piece {
            let wd: f64 = w.iter().zip(&dir).map(|(a, b)| a * b).sum();
            if wd > dir_eps {
                let wz: f64 = w.iter().zip(z).map(|(a, b)| a * b).sum();
                let t = ((r - wz) / wd).max(0.0);
                if t < t_max {
                    t_max = t;
                    blocking_edge = None;
                }
            }
        }
    }
    let t_max = t_max.clamp(0.0, 1.0);
    let base = prog.objective(z);
    let mut t = t_max;
    for round in 0..10 {
        let cand: Vec<f64> =
            z.iter().zip(&dir).map(|(a, d)| (a + t * d).max(0.0)).collect();
        if prog.objective(&cand) >= base - 1e-12 {
            let full_step = round == 0 && t_max < 1.0;
            return (cand, if full_step { blocking_edge } else { None }, row_info);
        }
        t *= 0.5;
    }
    (z.to_vec(), None, row_info)
}

// ---------------------------------------------------------------------------
// dual recovery and the KKT residual
// ---------------------------------------------------------------------------

fn active_threshold(z: &[f64]) -> f64 {
    1e-7 * (1.0 + z.iter().fold(0.0f64, |m, v| m.max(v.abs())))
}

/// Recovers consensus prices from a (near-)optimal point: node potentials
/// (producer ask `mu_i`, consumer bid base `c_j`) are anchored at agents with
/// interior totals and propagated along active edges; inactive edges get the
/// midpoint of their admissible interval.
pub fn recover_prices(inst: &Instance, z: &[f64]) -> Vec<f64> {
    let prog = Program::new(inst);
    let xs = prog.producer_totals(z);
    let ys = prog.consumer_totals(z);
    let np = inst.graph.n_producers;
    let nc = inst.graph.n_consumers;
    let tol = active_threshold(z);

    let mc: Vec<f64> =
        inst.producers.iter().zip(&xs).map(|(p, x)| p.marginal_cost(*x)).collect();
    let mu_util: Vec<f64> =
        inst.consumers.iter().zip(&ys).map(|(c, y)| c.marginal_utility(*y)).collect();

    // node potential = mu_i for producers, c_j for consumers
    let mut potential = vec![f64::NAN; np + nc];
    let anchored_p =
        |i: usize| xs[i] > inst.producers[i].x_min + tol && xs[i] < inst.producers[i].x_max - tol;
    let anchored_c =
        |j: usize| ys[j] > inst.consumers[j].y_min + tol && ys[j] < inst.consumers[j].y_max - tol;

    // adjacency over active edges
    let active: Vec<bool> = z.iter().map(|&v| v > tol).collect();
    let neighbors = |node: usize| -> Vec<(usize, f64)> {
        // returns (other node, delta) with potential[other] = potential[node] + delta
        if node < np {
            inst.graph
                .producer_edges(node)
                .iter()
                .filter(|&&e| active[e])
                .map(|&e| {
                    (np + inst.graph.edges()[e].consumer, -inst.graph.alpha()[e])
                })
                .collect()
        } else {
            inst.graph
                .consumer_edges(node - np)
                .iter()
                .filter(|&&e| active[e])
                .map(|&e| (inst.graph.edges()[e].producer, inst.graph.alpha()[e]))
                .collect()
        }
    };

    // components over the active-edge graph
    let mut comp = vec![usize::MAX; np + nc];
    let mut members: Vec<Vec<usize>> = Vec::new();
    for start in 0..np + nc {
        if comp[start] != usize::MAX {
            continue;
        }
        let cid = members.len();
        let mut stack = vec![start];
        comp[start] = cid;
        let mut list = vec![start];
        while let Some(node) = stack.pop() {
            for (nb, _) in neighbors(node) {
                if comp[nb] == usize::MAX {
                    comp[nb] = cid;
                    list.push(nb);
                    stack.push(stack.last().map(|_| nb).unwrap_or(nb));
                }
            }
        }
        members.push(list);
    }

    for list in &members {
        // offsets relative to the component root via BFS
        let root = list[0];
        let mut offset = vec![f64::NAN; np + nc];
        offset[root] = 0.0;
        let mut queue = std::collections::VecDeque::from([root]);
        while let Some(node) = queue.pop_front() {
            for (nb, delta) in neighbors(node) {
                if offset[nb].is_nan() {
                    offset[nb] = offset[node] + delta;
                    queue.push_back(nb);
                }
            }
        }
        // pick the root potential: prefer an anchored member, else clamp into
        // the interval allowed by the bound directions
        let mut root_val = f64::NAN;
        for &m in list {
            let anchored = if m < np { anchored_p(m) } else { anchored_c(m - np) };
            if anchored {
                let val = if m < np { mc[m] } else { mu_util[m - np] };
                root_val = val - offset[m];
                break;
            }
        }
        if root_val.is_nan() {
            let mut lo = f64::NEG_INFINITY;
            let mut hi = f64::INFINITY;
            for &m in list {
                if m < np {
                    let p = &inst.producers[m];
                    if p.x_min >= p.x_max {
                        continue; // pinned generator: no sign information
                    }
                    if xs[m] >= p.x_max - tol {
                        lo = lo.max(mc[m] - offset[m]);
                    } else if xs[m] <= p.x_min + tol {
                        hi = hi.min(mc[m] - offset[m]);
                    }
                } else {
                    let c = &inst.consumers[m - np];
                    if c.y_min >= c.y_max {
                        continue;
                    }
                    if ys[m - np] >= c.y_max - tol {
                        hi = hi.min(mu_util[m - np] - offset[m]);
                    } else if ys[m - np] <= c.y_min + tol {
                        lo = lo.max(mu_util[m - np] - offset[m]);
                    }
                }
            }
            root_val = if lo.is_finite() && hi.is_finite() {
                0.5 * (lo + hi)
            } else if lo.is_finite() {
                lo
            } else if hi.is_finite() {
                hi
            } else {
                // all members pinned: fall back to raw marginals
                if root < np {
                    mc[root]
                } else {
                    mu_util[root]
                }
            };
        }
        for &m in list {
            potential[m] = root_val + offset[m];
        }
    }

    inst.graph
        .edges()
        .iter()
        .enumerate()
        .map(|(e, edge)| {
            let mu_i = potential[edge.producer];
            let c_j = potential[np + edge.consumer];
            if active[e] {
                0.5 * (mu_i + c_j + inst.graph.alpha()[e])
            } else {
                let lo = c_j + inst.graph.alpha()[e];
                let hi = mu_i;
                0.5 * (lo + hi)
            }
        })
        .collect()
}

/// Stationarity and complementary-slackness residual of an allocation/price
/// certificate for the substituted program. Grid constraints are not part of
/// this measure.
pub fn kkt_residual(inst: &Instance, alloc: &Allocation, prices: &[f64]) -> Result<f64> {
    inst.graph.check_per_edge("prices", prices)?;
    inst.graph.check_per_edge("allocation.x", &alloc.x)?;
    inst.graph.check_per_edge("allocation.y", &alloc.y)?;
    let np = inst.graph.n_producers;
    let mut residual: f64 = 0.0;

    // consensus + nonnegativity
    for e in 0..inst.graph.edge_count() {
        residual = residual.max((alloc.x[e] - alloc.y[e]).abs());
        residual = residual.max(-alloc.x[e]).max(-alloc.y[e]);
    }
    let tol = active_threshold(&alloc.x);

    for (i, p) in inst.producers.iter().enumerate() {
        let edges = inst.graph.producer_edges(i);
        if edges.is_empty() {
            continue;
        }
        let x_i: f64 = edges.iter().map(|&e| alloc.x[e]).sum();
        residual = residual.max(x_i - p.x_max).max(p.x_min - x_i);
        let mc = p.marginal_cost(x_i);
        let active: Vec<usize> = edges.iter().copied().filter(|&e| alloc.x[e] > tol).collect();
        let s_i = if active.is_empty() {
            // never profitable to start selling
            let best = edges.iter().map(|&e| prices[e] - mc).fold(f64::NEG_INFINITY, f64::max);
            residual = residual.max(best.max(0.0));
            continue;
        } else {
            let devs: Vec<f64> = active.iter().map(|&e| prices[e] - mc).collect();
            let lo = devs.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = devs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            residual = residual.max((hi - lo) / 2.0);
            0.5 * (lo + hi)
        };
        // sign of the total-bound multiplier
        let interior = x_i > p.x_min + tol && x_i < p.x_max - tol;
        if p.x_min < p.x_max {
            if interior {
                residual = residual.max(s_i.abs());
            } else if x_i >= p.x_max - tol {
                residual = residual.max(-s_i);
            } else {
                residual = residual.max(s_i);
            }
        }
        for &e in edges {
            if alloc.x[e] <= tol {
                residual = residual.max(prices[e] - (mc + s_i));
            }
        }
    }

    for (j, c) in inst.consumers.iter().enumerate() {
        let edges = inst.graph.consumer_edges(j);
        if edges.is_empty() {
            continue;
        }
        let y_j: f64 = edges.iter().map(|&e| alloc.y[e]).sum();
        residual = residual.max(y_j - c.y_max).max(c.y_min - y_j);
        let mu = c.marginal_utility(y_j);
        let active: Vec<usize> = edges.iter().copied().filter(|&e| alloc.y[e] > tol).collect();
        let gain = |e: usize| mu + inst.graph.alpha()[e] - prices[e];
        let t_j = if active.is_empty() {
            let best = edges.iter().map(|&e| gain(e)).fold(f64::NEG_INFINITY, f64::max);
            residual = residual.max(best.max(0.0));
            continue;
        } else {
            let devs: Vec<f64> = active.iter().map(|&e| gain(e)).collect();
            let lo = devs.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = devs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            residual = residual.max((hi - lo) / 2.0);
            0.5 * (lo + hi)
        };
        let interior = y_j > c.y_min + tol && y_j < c.y_max - tol;
        if c.y_min < c.y_max {
            if interior {
                residual = residual.max(t_j.abs());
            } else if y_j >= c.y_max - tol {
                residual = residual.max(-t_j);
            } else {
                residual = residual.max(t_j);
            }
        }
        for &e in edges {
            if alloc.y[e] <= tol {
                residual = residual.max(gain(e) - t_j);
            }
        }
    }
    let _ = np;
    Ok(residual.max(0.0))
}

// ---------------------------------------------------------------------------
// the solver
// ---------------------------------------------------------------------------

/// True when any grid half-space is active at `z`; the agent-wise price
/// certificate does not model congestion, so stationarity is then measured
/// with the projected-gradient residual instead.
fn network_binding(pieces: &[Piece], z: &[f64]) -> bool {
    let scale = 1.0 + z.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    pieces.iter().any(|p| match p {
        Piece::HalfSpace { w, r, .. } => {
            let dot: f64 = w.iter().zip(z).map(|(a, b)| a * b).sum();
            dot >= r - 1e-7 * scale
        }
        _ => false,
    })
}

/// Projected-gradient fixed-point residual: vanishes exactly at first-order
/// stationary points of the constrained program, including the grid
/// half-spaces that the per-agent price certificate cannot express.
fn pg_residual(prog: &Program, pieces: &[Piece], z: &[f64], step: f64) -> f64 {
    let g = prog.gradient(z);
    let cand: Vec<f64> = z.iter().zip(&g).map(|(a, b)| a + step * b).collect();
    let proj = dykstra_project(&cand, pieces, 600);
    proj.iter().zip(z).map(|(a, b)| (a - b).abs()).fold(0.0f64, f64::max) / step
}

/// Maximizes social welfare over consensus allocations; optionally also
/// enforces the grid's voltage and flow limits.
pub fn solve_centralized(
    inst: &Instance,
    with_network: bool,
    tol: f64,
) -> Result<OracleSolution> {
    inst.validate()?;
    check_component_feasibility(inst)?;
    let ne = inst.graph.edge_count();
    if ne == 0 {
        return Err(Error::EmptyEdgeSet("oracle"));
    }
    let prog = Program::new(inst);
    let pieces = feasibility_pieces(inst, with_network)?;

    let step = 1.0 / prog.curvature_bound();
    let mut z = dykstra_project(&vec![0.0; ne], &pieces, 400);

    let mut best = z.clone();
    let mut best_obj = prog.objective(&z);
    let max_rounds = 60;
    for round in 0..max_rounds {
        // projected-gradient burst: a few larger (diminishing) steps first,
        // then the fixed safe step
        let burst = if round == 0 { 200 } else { 60 };
        for it in 0..burst {
            let g = prog.gradient(&z);
            let s = if round == 0 && it < 20 { step * (1.0 + 8.0 / (1 + it) as f64) } else { step };
            let cand: Vec<f64> = z.iter().zip(&g).map(|(a, b)| a + s * b).collect();
            let projected = dykstra_project(&cand, &pieces, 300);
            let moved = projected
                .iter()
                .zip(&z)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f64, f64::max);
            z = projected;
            if moved < 1e-13 {
                break;
            }
        }
        // polish only when the network constraints cannot be active
        z = polish(&prog, &pieces, &z, 1e-9 * (1.0 + best_obj.abs()));

        let obj = prog.objective(&z);
        if obj > best_obj {
            best_obj = obj;
            best = z.clone();
        }
        let prices = recover_prices(inst, &best);
        let alloc = Allocation::consensus(best.clone());
        let residual = if network_binding(&pieces, &best) {
            pg_residual(&prog, &pieces, &best, step)
        } else {
            kkt_residual(inst, &alloc, &prices)?
        };
        if residual <= tol {
            return Ok(OracleSolution {
                welfare: prog.objective(&best),
                allocation: alloc,
                dual_prices: prices,
                kkt_residual: residual,
            });
        }
    }
    let prices = recover_prices(inst, &best);
    let alloc = Allocation::consensus(best.clone());
    let residual = if network_binding(&pieces, &best) {
        pg_residual(&prog, &pieces, &best, step)
    } else {
        kkt_residual(inst, &alloc, &prices)?
    };
    if residual <= tol {
        return Ok(OracleSolution {
            welfare: best_obj,
            allocation: alloc,
            dual_prices: prices,
            kkt_residual: residual,
        });
    }
    Err(Error::OracleTolerance { tol, iters: max_rounds, residual })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clearing::{self, ClearingConfig};
    use crate::model::{Edge, TradingGraph};
    use rand::{Rng, SeedableRng};

    use crate::model::{ConsumerParams, ProducerParams};

    fn producer(a: f64, b: f64, c: f64, lo: f64, hi: f64) -> ProducerParams {
        ProducerParams { a, b, c, x_min: lo, x_max: hi }
    }

    fn consumer(omega: f64, delta: f64, lo: f64, hi: f64) -> ConsumerParams {
        ConsumerParams { omega, delta, y_min: lo, y_max: hi }
    }

    fn one_on_one(alpha: f64) -> Instance {
        Instance::new(
            vec![producer(1.0, 1.0, 0.0, 0.0, 10.0)],
            vec![consumer(10.0, 2.0, 0.0, 5.0)],
            TradingGraph::complete(1, 1, vec![alpha]).unwrap(),
            None,
            ClearingConfig::default(),
        )
        .unwrap()
    }

    #[test]
    fn solves_closed_form_pair() {
        let sol = solve_centralized(&one_on_one(0.0), false, 1e-9).unwrap();
        assert!((sol.allocation.x[0] - 3.0).abs() < 1e-8);
        assert!((sol.welfare - 13.5).abs() < 1e-9);
        assert!((sol.dual_prices[0] - 4.0).abs() < 1e-7);
        assert!(sol.kkt_residual <= 1e-9);
    }

    #[test]
    fn pinned_generator_forces_trade() {
        let inst = Instance::new(
            vec![producer(1.0, 1.0, 0.0, 5.0, 5.0)],
            vec![consumer(10.0, 2.0, 0.0, 10.0)],
            TradingGraph::complete(1, 1, vec![0.0]).unwrap(),
            None,
            ClearingConfig::default(),
        )
        .unwrap();
        let sol = solve_centralized(&inst, false, 1e-8).unwrap();
        assert!((sol.allocation.x[0] - 5.0).abs() < 1e-8);
        let expect = (10.0 * 5.0 - 25.0) - (0.5 * 25.0 + 5.0);
        assert!((sol.welfare - expect).abs() < 1e-8);
    }

    #[test]
    fn alpha_shifts_the_optimum() {
        let sol = solve_centralized(&one_on_one(1.0), false, 1e-9).unwrap();
        assert!((sol.allocation.x[0] - 10.0 / 3.0).abs() < 1e-7);
        assert!((sol.welfare - 50.0 / 3.0).abs() < 1e-8);
    }

    /// Lattice search over consensus allocations of tiny instances.
    fn lattice_welfare(inst: &Instance, steps: usize) -> f64 {
        let prog = Program::new(inst);
        let ne = inst.graph.edge_count();
        let hi: Vec<f64> = inst
            .graph
            .edges()
            .iter()
            .map(|e| {
                inst.producers[e.producer]
                    .x_max
                    .min(inst.consumers[e.consumer].y_max)
            })
            .collect();
        let mut idx = vec![0usize; ne];
        let mut best = f64::NEG_INFINITY;
        'outer: loop {
            let z: Vec<f64> = idx
                .iter()
                .zip(&hi)
                .map(|(&i, h)| h * i as f64 / (steps - 1) as f64)
                .collect();
            let feasible = (0..inst.graph.n_producers).all(|i| {
                let x: f64 = inst.graph.producer_edges(i).iter().map(|&e| z[e]).sum();
                x >= inst.producers[i].x_min - 1e-9 && x <= inst.producers[i].x_max + 1e-9
            }) && (0..inst.graph.n_consumers).all(|j| {
                let y: f64 = inst.graph.consumer_edges(j).iter().map(|&e| z[e]).sum();
                y >= inst.consumers[j].y_min - 1e-9 && y <= inst.consumers[j].y_max + 1e-9
            });
            if feasible {
                best = best.max(prog.objective(&z));
            }
            let mut d = 0;
            loop {
                if d == ne {
                    break 'outer;
                }
                idx[d] += 1;
                if idx[d] < steps {
                    break;
                }
                idx[d] = 0;
                d += 1;
            }
        }
        best
    }

    #[test]
    fn beats_brute_force_on_small_instances() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(31);
        for trial in 0..8 {
            let (np, nc) = if trial % 2 == 0 { (2, 2) } else { (1, 3) };
            let producers: Vec<_> = (0..np)
                .map(|_| {
                    producer(
                        rng.random_range(0.2..1.0),
                        rng.random_range(0.5..2.0),
                        0.0,
                        0.0,
                        rng.random_range(3.0..8.0),
                    )
                })
                .collect();
            let consumers: Vec<_> = (0..nc)
                .map(|_| {
                    let omega = rng.random_range(5.0..10.0);
                    let hi = rng.random_range(3.0..8.0);
                    consumer(omega, rng.random_range(omega / hi..2.0 * omega / hi), 0.0, hi)
                })
                .collect();
            let alpha: Vec<f64> = (0..np * nc).map(|_| rng.random_range(0.0..1.0)).collect();
            let inst = Instance::new(
                producers,
                consumers,
                TradingGraph::complete(np, nc, alpha).unwrap(),
                None,
                ClearingConfig::default(),
            )
            .unwrap();
            let sol = solve_centralized(&inst, false, 1e-7).unwrap();
            let lattice = lattice_welfare(&inst, 40);
            assert!(
                sol.welfare >= lattice - 1e-9,
                "trial {}: oracle {} below lattice {}",
                trial,
                sol.welfare,
                lattice
            );
            // lattice resolution bound: gradient scale x cell size
            let cell: f64 = 8.0 / 39.0;
            assert!(sol.welfare <= lattice + 20.0 * cell, "trial {}", trial);
        }
    }

    #[test]
    fn strong_duality_links_oracle_and_dual() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(77);
        for _ in 0..10 {
            let np = rng.random_range(1..=4);
            let nc = rng.random_range(1..=4);
            let producers: Vec<_> = (0..np)
                .map(|_| {
                    producer(
                        rng.random_range(0.1..0.8),
                        rng.random_range(0.5..2.5),
                        rng.random_range(0.0..1.0),
                        0.0,
                        rng.random_range(5.0..15.0),
                    )
                })
                .collect();
            let consumers: Vec<_> = (0..nc)
                .map(|_| {
                    let omega = rng.random_range(5.0..12.0);
                    let hi = rng.random_range(5.0..15.0);
                    consumer(omega, rng.random_range(omega / hi..1.5 * omega / hi), 0.0, hi.min(omega / (omega / hi)))
                })
                .collect();
            let alpha: Vec<f64> = (0..np * nc).map(|_| rng.random_range(0.0..1.0)).collect();
            let inst = Instance::new(
                producers,
                consumers,
                TradingGraph::complete(np, nc, alpha).unwrap(),
                None,
                ClearingConfig::default(),
            )
            .unwrap();
            let sol = solve_centralized(&inst, false, 1e-7).unwrap();
            let q = clearing::dual_value(&inst, &sol.dual_prices).unwrap();
            let tol = 1e-6 * (1.0 + sol.welfare.abs());
            assert!(
                (q - sol.welfare).abs() <= tol,
                "q = {}, welfare = {}",
                q,
                sol.welfare
            );
        }
    }

    #[test]
    fn constant_cost_shifts_welfare_only() {
        let base = one_on_one(0.25);
        let sol = solve_centralized(&base, false, 1e-9).unwrap();
        let mut shifted = base.clone();
        shifted.producers[0].c = 2.5;
        let sol2 = solve_centralized(&shifted, false, 1e-9).unwrap();
        assert!((sol2.welfare - (sol.welfare - 2.5)).abs() < 1e-9);
        assert!((sol2.allocation.x[0] - sol.allocation.x[0]).abs() < 1e-8);
    }

    #[test]
    fn kkt_residual_flags_perturbations() {
        let inst = one_on_one(0.0);
        let sol = solve_centralized(&inst, false, 1e-9).unwrap();
        assert!(kkt_residual(&inst, &sol.allocation, &sol.dual_prices).unwrap() <= 1e-9);

        let perturbed = Allocation::consensus(vec![sol.allocation.x[0] + 0.1]);
        let r = kkt_residual(&inst, &perturbed, &sol.dual_prices).unwrap();
        // curvature times perturbation: max(a, delta) * 0.1
        assert!(r >= 0.05, "residual {}", r);

        let zero = Allocation::zeros(1);
        let r0 = kkt_residual(&inst, &zero, &sol.dual_prices).unwrap();
        // marginal mismatch at the origin, at least (omega + alpha - b)/2
        assert!(r0 >= (10.0 + 0.0 - 1.0) / 2.0 - 1e-9, "residual {}", r0);
    }

    #[test]
    fn network_mode_respects_line_limits() {
        use crate::experiments::{self, GridTemplate, ScenarioSpec};
        use crate::grid;

        // producers on one side of a chain, consumers on the other: the
        // middle line is the bottleneck
        let inst = experiments::gen_instance(&ScenarioSpec {
            n_producers: 4,
            n_consumers: 4,
            grid: GridTemplate::Chain,
            seed: 5,
            ..ScenarioSpec::default()
        })
        .unwrap();
        let free = solve_centralized(&inst, false, 1e-6).unwrap();
        let constrained = solve_centralized(&inst, true, 1e-4).unwrap();
        assert!(constrained.welfare <= free.welfare + 1e-9);

        let g = inst.grid.as_ref().unwrap();
        let sens = grid::build_sensitivities(g).unwrap();
        let free_report =
            grid::check_constraints(g, &sens, &free.allocation, &inst.graph).unwrap();
        assert!(!free_report.flow_pass, "expected congestion without enforcement");
        let report =
            grid::check_constraints(g, &sens, &constrained.allocation, &inst.graph).unwrap();
        assert!(
            report.worst_flow_violation <= 1e-6 && report.worst_voltage_violation <= 1e-8,
            "network-constrained solution violates limits: {:?}",
            report
        );
    }

    #[test]
    fn rejects_infeasible_bounds() {
        let inst = Instance {
            producers: vec![producer(1.0, 1.0, 0.0, 8.0, 10.0)],
            consumers: vec![consumer(10.0, 2.0, 0.0, 5.0)],
            graph: TradingGraph::complete(1, 1, vec![0.0]).unwrap(),
            grid: None,
            clearing: ClearingConfig::default(),
            spec_hash: None,
        };
        assert!(matches!(
            solve_centralized(&inst, false, 1e-8),
            Err(Error::InfeasibleBounds(_))
        ));
    }

    #[test]
    fn theoretical_bound_values() {
        let b = theoretical_bound(BoundKind::Accelerated, 1, &[0.5], &[1.0], &[0.0]);
        assert!((b - 4.0).abs() < 1e-12);
        let b = theoretical_bound(BoundKind::Plain, 1, &[0.5], &[1.0], &[0.0]);
        assert!((b - 1.0).abs() < 1e-12);
        let b = theoretical_bound(BoundKind::Accelerated, 10, &[0.5], &[1.0], &[0.0]);
        assert!((b - 0.04).abs() < 1e-12);
    }

    #[test]
    fn project_block_respects_bounds() {
        let u = project_block(&[3.0, 1.0, -0.5], 0.0, 2.0);
        let s: f64 = u.iter().sum();
        assert!((s - 2.0).abs() < 1e-12);
        assert!(u.iter().all(|v| *v >= 0.0));

        let u = project_block(&[0.1, 0.2], 2.0, 5.0);
        let s: f64 = u.iter().sum();
        assert!((s - 2.0).abs() < 1e-12);

        let u = project_block(&[1.0, 1.0], 0.0, 5.0);
        assert_eq!(u, vec![1.0, 1.0]);
    }

    #[test]
    fn fixed_pair_with_edge() {
        // degenerate: both pinned to the same total
        let inst = Instance::new(
            vec![producer(0.5, 1.0, 0.0, 4.0, 4.0)],
            vec![consumer(10.0, 1.0, 4.0, 4.0)],
            TradingGraph::new(1, 1, vec![(Edge { producer: 0, consumer: 0 }, 0.3)]).unwrap(),
            None,
            ClearingConfig::default(),
        )
        .unwrap();
        let sol = solve_centralized(&inst, false, 1e-7).unwrap();
        assert!((sol.allocation.x[0] - 4.0).abs() < 1e-8);
    }
}
