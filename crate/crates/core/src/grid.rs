//! Radial distribution network model with linearized voltage and flow checks.
//!
//! Voltages use the LinDistFlow real-power linearization: the deviation at bus
//! `b` is the sum over buses `b'` of the common-path resistance between the
//! root paths of `b` and `b'` times the injection at `b'` (per unit). Line
//! flows use the subtree-indicator transfer factors of a tree.

use crate::error::{Error, Result};
use crate::model::{Allocation, TradingGraph};
use serde::{Deserialize, Serialize};

/// One distribution line, oriented arbitrarily in the input; the tree
/// orientation (parent -> child) is recovered from the root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Line {
    pub from_bus: usize,
    pub to_bus: usize,
    pub r_pu: f64,
    pub x_pu: f64,
    pub f_max_kw: f64,
}

/// Which market participant sits at a bus.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProsumerKind {
    Producer,
    Consumer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BusProsumer {
    pub bus: usize,
    pub kind: ProsumerKind,
    pub index: usize,
}

/// Radial feeder rooted at the slack bus 0; one prosumer per non-slack bus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridModel {
    pub lines: Vec<Line>,
    /// Per-bus voltage limits (p.u.), indexed by bus id including the slack.
    pub v_min: Vec<f64>,
    pub v_max: Vec<f64>,
    pub bus_prosumers: Vec<BusProsumer>,
    /// Base power for the per-unit conversion of injections.
    pub base_kw: f64,
}

impl GridModel {
    /// Number of buses including the slack, taken from the voltage-limit arrays.
    pub fn bus_count(&self) -> usize {
        self.v_min.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.bus_count();
        if self.v_max.len() != n {
            return Err(Error::IndexMismatch {
                what: "per-bus voltage limits",
                expected: n,
                got: self.v_max.len(),
            });
        }
        if self.lines.len() + 1 != n {
            return Err(Error::NotATree(format!(
                "{} lines cannot span {} buses",
                self.lines.len(),
                n
            )));
        }
        for b in 0..n {
            if !(0.0 < self.v_min[b] && self.v_min[b] < self.v_max[b]) {
                return Err(Error::InvalidParameter(format!(
                    "bus {}: need 0 < v_min < v_max, got [{}, {}]",
                    b, self.v_min[b], self.v_max[b]
                )));
            }
        }
        for l in &self.lines {
            if l.f_max_kw <= 0.0 || !l.r_pu.is_finite() || l.r_pu < 0.0 {
                return Err(Error::InvalidParameter(format!(
                    "line {}-{}: need r_pu >= 0 and f_max_kw > 0",
                    l.from_bus, l.to_bus
                )));
            }
        }
        if self.base_kw <= 0.0 {
            return Err(Error::InvalidParameter("base_kw must be positive".into()));
        }
        Ok(())
    }
}

/// Immutable linear maps from bus injections to voltages and line flows.
#[derive(Debug, Clone)]
pub struct SensitivityMatrices {
    n_buses: usize,
    /// Upper bus id per line after orienting away from the root; line k
    /// connects parent[child_bus[k]] to child_bus[k].
    child_bus: Vec<usize>,
    /// Common-path resistance matrix over non-slack buses, row-major
    /// (bus-1) x (bus-1).
    s_v: Vec<f64>,
    /// Downstream indicators: s_f[line * (n-1) + (bus-1)] == 1 iff the bus lies
    /// in the subtree below the line.
    s_f: Vec<bool>,
    /// Flow limit per oriented line, same order as `child_bus`.
    f_max_kw: Vec<f64>,
}

impl SensitivityMatrices {
    pub fn n_buses(&self) -> usize {
        self.n_buses
    }

    /// Voltage sensitivity entry for non-slack buses `b`, `b2` (1-based bus ids).
    pub fn s_v(&self, b: usize, b2: usize) -> f64 {
        let n = self.n_buses - 1;
        self.s_v[(b - 1) * n + (b2 - 1)]
    }

    /// Downstream indicator for oriented line index `line` and bus id `b`.
    pub fn s_f(&self, line: usize, b: usize) -> bool {
        let n = self.n_buses - 1;
        self.s_f[line * n + (b - 1)]
    }

    /// Bus id on the child side of an oriented line.
    pub fn line_child_bus(&self, line: usize) -> usize {
        self.child_bus[line]
    }

    pub fn line_count(&self) -> usize {
        self.child_bus.len()
    }

    pub fn f_max_kw(&self, line: usize) -> f64 {
        self.f_max_kw[line]
    }
}

/// Builds the voltage and flow sensitivities of a radial grid.
///
/// Fails if the line set does not form a tree spanning all buses from bus 0.
pub fn build_sensitivities(grid: &GridModel) -> Result<SensitivityMatrices> {
    grid.validate()?;
    let n = grid.bus_count();
    let mut adj: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n];
    for (k, l) in grid.lines.iter().enumerate() {
        if l.from_bus >= n || l.to_bus >= n || l.from_bus == l.to_bus {
            return Err(Error::NotATree(format!(
                "line {}-{} references a bus outside 0..{}",
                l.from_bus, l.to_bus, n
            )));
        }
        adj[l.from_bus].push((l.to_bus, k));
        adj[l.to_bus].push((l.from_bus, k));
    }

    // BFS from the slack; a spanning tree must reach every bus exactly once.
    let mut parent_line: Vec<Option<usize>> = vec![None; n];
    let mut visited = vec![false; n];
    visited[0] = true;
    let mut order = vec![0usize];
    let mut head = 0;
    while head < order.len() {
        let b = order[head];
        head += 1;
        for &(nb, line) in &adj[b] {
            if !visited[nb] {
                visited[nb] = true;
                parent_line[nb] = Some(line);
                order.push(nb);
            } else if parent_line[b] != Some(line) {
                return Err(Error::NotATree(format!("cycle through line {}", line)));
            }
        }
    }
    if order.len() != n {
        return Err(Error::NotATree("disconnected buses".into()));
    }

    // Path resistance from the root to every bus, and the oriented line list.
    let mut child_bus = vec![0usize; grid.lines.len()];
    let mut f_max_kw = vec![0.0; grid.lines.len()];
    for b in 1..n {
        let line = parent_line[b].unwrap();
        child_bus[line] = b;
        f_max_kw[line] = grid.lines[line].f_max_kw;
    }

    // path_lines[b] = set of line ids on the root path, as a sorted vec.
    let mut path_lines: Vec<Vec<usize>> = vec![Vec::new(); n];
    for &b in &order {
        if b == 0 {
            continue;
        }
        let line = parent_line[b].unwrap();
        let p = other_end(&grid.lines[line], b);
        let mut path = path_lines[p].clone();
        path.push(line);
        path_lines[b] = path;
    }

    let m = n - 1;
    let mut s_v = vec![0.0; m * m];
    for b in 1..n {
        for b2 in b..n {
            let common: f64 = path_lines[b]
                .iter()
                .filter(|l| path_lines[b2].contains(l))
                .map(|&l| grid.lines[l].r_pu)
                .sum();
            s_v[(b - 1) * m + (b2 - 1)] = common;
            s_v[(b2 - 1) * m + (b - 1)] = common;
        }
    }

    let mut s_f = vec![false; grid.lines.len() * m];
    for b in 1..n {
        for &l in &path_lines[b] {
            s_f[l * m + (b - 1)] = true;
        }
    }

    Ok(SensitivityMatrices {
        n_buses: n,
        child_bus,
        s_v,
        s_f,
        f_max_kw,
    })
}

fn other_end(line: &Line, b: usize) -> usize {
    if line.from_bus == b {
        line.to_bus
    } else {
        line.from_bus
    }
}

/// Voltages `V_b = 1 + (S_V p)_b` for non-slack buses; `injections` are net kW
/// per non-slack bus (producers +, consumers -), converted to p.u. on `base_kw`.
/// Returns per-bus voltages including the slack at index 0.
pub fn bus_voltages(sens: &SensitivityMatrices, injections_kw: &[f64], base_kw: f64) -> Vec<f64> {
    let m = sens.n_buses - 1;
    assert_eq!(injections_kw.len(), m, "injections indexed by non-slack buses");
    let mut v = vec![1.0; sens.n_buses];
    for b in 1..sens.n_buses {
        let mut dv = 0.0;
        for b2 in 1..sens.n_buses {
            dv += sens.s_v[(b - 1) * m + (b2 - 1)] * injections_kw[b2 - 1] / base_kw;
        }
        v[b] += dv;
    }
    v
}

/// Line flows in kW, positive toward the root: `F_l = sum of injections in the
/// subtree below l`.
pub fn line_flows(sens: &SensitivityMatrices, injections_kw: &[f64]) -> Vec<f64> {
    let m = sens.n_buses - 1;
    assert_eq!(injections_kw.len(), m, "injections indexed by non-slack buses");
    let mut flows = vec![0.0; sens.line_count()];
    for l in 0..sens.line_count() {
        let mut f = 0.0;
        for b in 1..sens.n_buses {
            if sens.s_f[l * m + (b - 1)] {
                f += injections_kw[b - 1];
            }
        }
        flows[l] = f;
    }
    flows
}

/// Outcome of evaluating the voltage and flow limits on one allocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintReport {
    pub voltage_pass: bool,
    pub flow_pass: bool,
    /// Worst amount (p.u.) by which any bus leaves its voltage band; 0 if none.
    pub worst_voltage_violation: f64,
    /// Worst amount (kW) by which any line exceeds its limit; 0 if none.
    pub worst_flow_violation: f64,
    pub min_voltage: f64,
    pub max_voltage: f64,
    pub max_abs_flow_kw: f64,
}

impl ConstraintReport {
    pub fn pass(&self) -> bool {
        self.voltage_pass && self.flow_pass
    }

    /// Trivial report for runs without a grid.
    pub fn trivial() -> Self {
        Self {
            voltage_pass: true,
            flow_pass: true,
            worst_voltage_violation: 0.0,
            worst_flow_violation: 0.0,
            min_voltage: 1.0,
            max_voltage: 1.0,
            max_abs_flow_kw: 0.0,
        }
    }
}

/// Net kW injection per non-slack bus implied by an allocation: the producer at
/// a bus injects its total sales, the consumer at a bus withdraws its total
/// purchases.
pub fn bus_injections(
    grid: &GridModel,
    graph: &TradingGraph,
    alloc: &Allocation,
) -> Result<Vec<f64>> {
    let n = grid.bus_count();
    let mut seen = vec![false; n];
    let mut inj = vec![0.0; n - 1];
    for bp in &grid.bus_prosumers {
        if bp.bus == 0 || bp.bus >= n {
            return Err(Error::BusAssignment(format!(
                "bus {} is not a non-slack bus",
                bp.bus
            )));
        }
        if seen[bp.bus] {
            return Err(Error::BusAssignment(format!("bus {} assigned twice", bp.bus)));
        }
        seen[bp.bus] = true;
        inj[bp.bus - 1] = match bp.kind {
            ProsumerKind::Producer => {
                if bp.index >= graph.n_producers {
                    return Err(Error::BusAssignment(format!(
                        "producer {} out of range",
                        bp.index
                    )));
                }
                graph.producer_edges(bp.index).iter().map(|&e| alloc.x[e]).sum()
            }
            ProsumerKind::Consumer => {
                if bp.index >= graph.n_consumers {
                    return Err(Error::BusAssignment(format!(
                        "consumer {} out of range",
                        bp.index
                    )));
                }
                -graph.consumer_edges(bp.index).iter().map(|&e| alloc.y[e]).sum::<f64>()
            }
        };
    }
    if seen.iter().skip(1).any(|s| !s) {
        return Err(Error::BusAssignment(
            "every non-slack bus needs exactly one prosumer".into(),
        ));
    }
    Ok(inj)
}

/// Evaluates the voltage and flow limits for the injections implied by an
/// allocation.
pub fn check_constraints(
    grid: &GridModel,
    sens: &SensitivityMatrices,
    alloc: &Allocation,
    graph: &TradingGraph,
) -> Result<ConstraintReport> {
    alloc.validate(graph)?;
    let inj = bus_injections(grid, graph, alloc)?;
    let v = bus_voltages(sens, &inj, grid.base_kw);
    let f = line_flows(sens, &inj);

    let mut worst_v: f64 = 0.0;
    let mut vmin = f64::INFINITY;
    let mut vmax = f64::NEG_INFINITY;
    for b in 0..grid.bus_count() {
        vmin = vmin.min(v[b]);
        vmax = vmax.max(v[b]);
        worst_v = worst_v.max(grid.v_min[b] - v[b]).max(v[b] - grid.v_max[b]);
    }
    let mut worst_f: f64 = 0.0;
    let mut max_abs: f64 = 0.0;
    for l in 0..sens.line_count() {
        max_abs = max_abs.max(f[l].abs());
        worst_f = worst_f.max(f[l].abs() - sens.f_max_kw(l));
    }
    Ok(ConstraintReport {
        voltage_pass: worst_v <= 0.0,
        flow_pass: worst_f <= 0.0,
        worst_voltage_violation: worst_v.max(0.0),
        worst_flow_violation: worst_f.max(0.0),
        min_voltage: vmin,
        max_voltage: vmax,
        max_abs_flow_kw: max_abs,
    })
}
