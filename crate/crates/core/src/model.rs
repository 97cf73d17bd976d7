//! Domain types and welfare evaluation for producers, consumers and pair trades.
//!
//! All quantities refer to a single one-hour slot, so kWh and kW are
//! numerically interchangeable throughout the engine.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Quadratic generation cost `C(x) = (a/2) x^2 + b x + c` with generation bounds.
///
/// Fixed-output producers (e.g. PV in a given slot) are modelled with
/// `x_min == x_max`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProducerParams {
    /// Cost curvature ($/kWh^2), strictly positive.
    pub a: f64,
    /// Linear cost ($/kWh), strictly positive.
    pub b: f64,
    /// Fixed cost ($), nonnegative.
    pub c: f64,
    pub x_min: f64,
    pub x_max: f64,
}

impl ProducerParams {
    pub fn new(a: f64, b: f64, c: f64, x_min: f64, x_max: f64) -> Result<Self> {
        let p = Self { a, b, c, x_min, x_max };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.a > 0.0
            && self.b > 0.0
            && self.c >= 0.0
            && self.a.is_finite()
            && self.b.is_finite()
            && self.c.is_finite();
        if !ok {
            return Err(Error::InvalidParameter(format!(
                "producer coefficients must satisfy a > 0, b > 0, c >= 0 (got a={}, b={}, c={})",
                self.a, self.b, self.c
            )));
        }
        if !(0.0 <= self.x_min && self.x_min <= self.x_max && self.x_max.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "generation bounds must satisfy 0 <= x_min <= x_max (got [{}, {}])",
                self.x_min, self.x_max
            )));
        }
        Ok(())
    }

    /// Marginal cost `C'(x) = a x + b`.
    pub fn marginal_cost(&self, x_total: f64) -> f64 {
        self.a * x_total + self.b
    }
}

/// Saturating quadratic utility with demand bounds.
///
/// `U(y) = omega y - (delta/2) y^2` up to the knee `y = omega/delta`, constant
/// `omega^2 / (2 delta)` beyond it. Inflexible loads use `y_min == y_max`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsumerParams {
    /// Marginal value at zero consumption ($/kWh), strictly positive.
    pub omega: f64,
    /// Marginal-value slope ($/kWh^2), strictly positive.
    pub delta: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl ConsumerParams {
    pub fn new(omega: f64, delta: f64, y_min: f64, y_max: f64) -> Result<Self> {
        let c = Self { omega, delta, y_min, y_max };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.omega > 0.0 && self.delta > 0.0 && self.omega.is_finite() && self.delta.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "consumer coefficients must satisfy omega > 0, delta > 0 (got omega={}, delta={})",
                self.omega, self.delta
            )));
        }
        if !(0.0 <= self.y_min && self.y_min <= self.y_max && self.y_max.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "demand bounds must satisfy 0 <= y_min <= y_max (got [{}, {}])",
                self.y_min, self.y_max
            )));
        }
        Ok(())
    }

    /// Saturation point `omega / delta` where marginal utility reaches zero.
    pub fn knee(&self) -> f64 {
        self.omega / self.delta
    }

    /// Marginal utility `U'(y) = max(0, omega - delta y)` for `y >= 0`.
    pub fn marginal_utility(&self, y_total: f64) -> f64 {
        (self.omega - self.delta * y_total).max(0.0)
    }
}

/// One term of a transaction coefficient: a preference weight `r` applied to a
/// trade characteristic `d` (distance, emissions, network fee basis, ...).
/// Signs are unrestricted; negative `r` models penalties.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriterionEntry {
    pub criterion: String,
    pub r: f64,
    pub d: f64,
}

/// Sum of criterion products `alpha = sum_s r_s d_s` ($/kWh).
pub fn transaction_coefficient(entries: &[CriterionEntry]) -> f64 {
    entries.iter().map(|e| e.r * e.d).sum()
}

/// A producer-consumer trading pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Edge {
    pub producer: usize,
    pub consumer: usize,
}

/// Bipartite trading graph with per-edge transaction coefficients.
///
/// Edges are kept sorted by (producer, consumer); all per-edge vectors in the
/// engine (prices, quantities, alphas) are indexed by position in `edges`.
/// Neighbor sets are derived from the edge list, so the producer/consumer
/// views are symmetric by construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TradingGraph {
    pub n_producers: usize,
    pub n_consumers: usize,
    edges: Vec<Edge>,
    alpha: Vec<f64>,
    #[serde(skip)]
    producer_edges: Vec<Vec<usize>>,
    #[serde(skip)]
    consumer_edges: Vec<Vec<usize>>,
}

impl TradingGraph {
    /// Builds a graph from an explicit edge list. Edges are sorted; duplicate
    /// edges, out-of-range endpoints and non-finite alphas are rejected.
    pub fn new(
        n_producers: usize,
        n_consumers: usize,
        mut edge_alpha: Vec<(Edge, f64)>,
    ) -> Result<Self> {
        edge_alpha.sort_by_key(|(e, _)| (e.producer, e.consumer));
        let mut edges = Vec::with_capacity(edge_alpha.len());
        let mut alpha = Vec::with_capacity(edge_alpha.len());
        for (e, a) in edge_alpha {
            if e.producer >= n_producers || e.consumer >= n_consumers {
                return Err(Error::InvalidParameter(format!(
                    "edge ({}, {}) out of range for {} producers / {} consumers",
                    e.producer, e.consumer, n_producers, n_consumers
                )));
            }
            if !a.is_finite() {
                return Err(Error::NonFinite("transaction coefficient"));
            }
            if edges.last() == Some(&e) {
                return Err(Error::InvalidParameter(format!(
                    "duplicate edge ({}, {})",
                    e.producer, e.consumer
                )));
            }
            edges.push(e);
            alpha.push(a);
        }
        let mut g = Self {
            n_producers,
            n_consumers,
            edges,
            alpha,
            producer_edges: Vec::new(),
            consumer_edges: Vec::new(),
        };
        g.rebuild_adjacency();
        Ok(g)
    }

    /// Complete bipartite graph with the given per-edge alphas in
    /// producer-major order.
    pub fn complete(n_producers: usize, n_consumers: usize, alpha: Vec<f64>) -> Result<Self> {
        if alpha.len() != n_producers * n_consumers {
            return Err(Error::IndexMismatch {
                what: "alpha",
                expected: n_producers * n_consumers,
                got: alpha.len(),
            });
        }
        let mut edge_alpha = Vec::with_capacity(alpha.len());
        let mut it = alpha.into_iter();
        for producer in 0..n_producers {
            for consumer in 0..n_consumers {
                edge_alpha.push((Edge { producer, consumer }, it.next().unwrap()));
            }
        }
        Self::new(n_producers, n_consumers, edge_alpha)
    }

    pub(crate) fn rebuild_adjacency(&mut self) {
        self.producer_edges = vec![Vec::new(); self.n_producers];
        self.consumer_edges = vec![Vec::new(); self.n_consumers];
        for (idx, e) in self.edges.iter().enumerate() {
            self.producer_edges[e.producer].push(idx);
            self.consumer_edges[e.consumer].push(idx);
        }
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    /// Edge indices sold by producer `i`.
    pub fn producer_edges(&self, i: usize) -> &[usize] {
        &self.producer_edges[i]
    }

    /// Edge indices bought by consumer `j`.
    pub fn consumer_edges(&self, j: usize) -> &[usize] {
        &self.consumer_edges[j]
    }

    /// Checks a per-edge vector against this graph's edge set.
    pub fn check_per_edge(&self, what: &'static str, v: &[f64]) -> Result<()> {
        if v.len() != self.edges.len() {
            return Err(Error::IndexMismatch {
                what,
                expected: self.edges.len(),
                got: v.len(),
            });
        }
        Ok(())
    }
}

// Adjacency is derived state; restore it after serde round-trips.
impl TradingGraph {
    pub fn after_deserialize(mut self) -> Self {
        self.rebuild_adjacency();
        self
    }
}

/// Per-edge sold (`x`) and purchased (`y`) energy, indexed like the graph's
/// edge list. Consensus `x == y` holds only at a converged solution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Allocation {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

impl Allocation {
    pub fn zeros(edge_count: usize) -> Self {
        Self {
            x: vec![0.0; edge_count],
            y: vec![0.0; edge_count],
        }
    }

    /// Consensus allocation with `x == y == z`.
    pub fn consensus(z: Vec<f64>) -> Self {
        Self { x: z.clone(), y: z }
    }

    pub fn validate(&self, graph: &TradingGraph) -> Result<()> {
        graph.check_per_edge("allocation.x", &self.x)?;
        graph.check_per_edge("allocation.y", &self.y)?;
        if self.x.iter().chain(self.y.iter()).any(|v| *v < 0.0 || !v.is_finite()) {
            return Err(Error::Negative("allocation entries"));
        }
        Ok(())
    }
}

/// Generation cost `C(x_total)`. Bounds are not enforced here; solvers own them.
pub fn cost(p: &ProducerParams, x_total: f64) -> Result<f64> {
    if !x_total.is_finite() {
        return Err(Error::NonFinite("x_total"));
    }
    Ok(0.5 * p.a * x_total * x_total + p.b * x_total + p.c)
}

/// Consumption utility `U(y_total)`, continuous at the knee `omega/delta`.
pub fn utility(c: &ConsumerParams, y_total: f64) -> Result<f64> {
    if !y_total.is_finite() {
        return Err(Error::NonFinite("y_total"));
    }
    if y_total < 0.0 {
        return Err(Error::Negative("y_total"));
    }
    let knee = c.knee();
    if y_total <= knee {
        Ok(c.omega * y_total - 0.5 * c.delta * y_total * y_total)
    } else {
        Ok(c.omega * c.omega / (2.0 * c.delta))
    }
}

/// Producer welfare `lambda^T x - C(sum x)` over the producer's edges.
pub fn producer_welfare(p: &ProducerParams, prices: &[f64], x: &[f64]) -> Result<f64> {
    if prices.len() != x.len() {
        return Err(Error::IndexMismatch {
            what: "producer prices/quantities",
            expected: prices.len(),
            got: x.len(),
        });
    }
    let revenue: f64 = prices.iter().zip(x).map(|(l, q)| l * q).sum();
    let total: f64 = x.iter().sum();
    Ok(revenue - cost(p, total)?)
}

/// Consumer welfare `U(sum y) + (alpha - lambda)^T y` over the consumer's edges.
pub fn consumer_welfare(
    c: &ConsumerParams,
    prices: &[f64],
    alphas: &[f64],
    y: &[f64],
) -> Result<f64> {
    if prices.len() != y.len() || alphas.len() != y.len() {
        return Err(Error::IndexMismatch {
            what: "consumer prices/alphas/quantities",
            expected: y.len(),
            got: prices.len().max(alphas.len()),
        });
    }
    let total: f64 = y.iter().sum();
    let net: f64 = y
        .iter()
        .zip(prices.iter().zip(alphas))
        .map(|(q, (l, a))| (a - l) * q)
        .sum();
    Ok(utility(c, total)? + net)
}

/// Primal objective `sum U_j - sum C_i + sum alpha y` evaluated on any
/// allocation, feasible or not.
pub fn social_welfare(
    graph: &TradingGraph,
    producers: &[ProducerParams],
    consumers: &[ConsumerParams],
    alloc: &Allocation,
) -> Result<f64> {
    graph.check_per_edge("allocation.x", &alloc.x)?;
    graph.check_per_edge("allocation.y", &alloc.y)?;
    if producers.len() != graph.n_producers {
        return Err(Error::IndexMismatch {
            what: "producers",
            expected: graph.n_producers,
            got: producers.len(),
        });
    }
    if consumers.len() != graph.n_consumers {
        return Err(Error::IndexMismatch {
            what: "consumers",
            expected: graph.n_consumers,
            got: consumers.len(),
        });
    }
    let mut w = 0.0;
    for (i, p) in producers.iter().enumerate() {
        let total: f64 = graph.producer_edges(i).iter().map(|&e| alloc.x[e]).sum();
        w -= cost(p, total)?;
    }
    for (j, c) in consumers.iter().enumerate() {
        let total: f64 = graph.consumer_edges(j).iter().map(|&e| alloc.y[e]).sum();
        w += utility(c, total)?;
    }
    for (e, a) in graph.alpha().iter().enumerate() {
        w += a * alloc.y[e];
    }
    Ok(w)
}
