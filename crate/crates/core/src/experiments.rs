//! Instance generation and the three study harnesses: feasibility on the
//! 15-bus demo market, the Monte Carlo partner-pruning study, and the
//! multi-method comparison.

use crate::clearing::{self, ClearingConfig};
use crate::error::{Error, Result};
use crate::grid::{BusProsumer, GridModel, Line, ProsumerKind};
use crate::instance::Instance;
use crate::model::{ConsumerParams, ProducerParams, TradingGraph};
use crate::selection::{self, SelectionConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;

/// Producer buses of the bundled 15-bus template, in market order.
pub const IEEE15_PRODUCER_BUSES: [usize; 7] = [1, 3, 4, 5, 9, 10, 11];
/// Consumer buses of the bundled 15-bus template, in market order.
pub const IEEE15_CONSUMER_BUSES: [usize; 7] = [2, 6, 7, 8, 12, 13, 14];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GridTemplate {
    #[default]
    None,
    /// Feeder 0-1-2-...-n with producers on the first buses.
    Chain,
    /// The 15-bus radial feeder with 7 producers and 7 consumers.
    Ieee15,
}

/// Seeded description of a random market instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioSpec {
    pub n_producers: usize,
    pub n_consumers: usize,
    pub a_range: (f64, f64),
    pub b_range: (f64, f64),
    pub c_range: (f64, f64),
    pub x_max_range: (f64, f64),
    pub omega_range: (f64, f64),
    pub y_max_range: (f64, f64),
    /// delta is sampled as this fraction of omega / y_max, keeping the
    /// saturation point at or beyond the demand cap.
    pub delta_frac_range: (f64, f64),
    pub alpha_range: (f64, f64),
    pub grid: GridTemplate,
    pub seed: u64,
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        Self {
            n_producers: 7,
            n_consumers: 7,
            a_range: (0.05, 0.2),
            b_range: (1.0, 4.0),
            c_range: (0.0, 2.0),
            x_max_range: (25.0, 60.0),
            omega_range: (5.0, 12.0),
            y_max_range: (25.0, 60.0),
            delta_frac_range: (0.5, 1.0),
            alpha_range: (0.0, 1.0),
            grid: GridTemplate::None,
            seed: 0,
        }
    }
}

impl ScenarioSpec {
    pub fn ieee15(seed: u64) -> Self {
        Self { grid: GridTemplate::Ieee15, seed, ..Self::default() }
    }

    /// Stable FNV-1a hash of the canonical JSON encoding, embedded in
    /// generated instance files for reproducibility.
    pub fn hash(&self) -> Result<String> {
        let json = serde_json::to_string(self)?;
        let mut h: u64 = 0xcbf29ce484222325;
        for b in json.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        Ok(format!("{:016x}", h))
    }
}

#[derive(Deserialize)]
struct FeederDoc {
    v_base_kv: f64,
    lines: Vec<FeederLine>,
}

#[derive(Deserialize)]
struct FeederLine {
    from_bus: usize,
    to_bus: usize,
    r_ohm: f64,
    x_ohm: f64,
}

const IEEE15_FEEDER: &str = include_str!("../data/ieee15_feeder.json");
const BASE_KW: f64 = 100.0;
const V_LIMITS: (f64, f64) = (0.9, 1.1);
const LINE_LIMIT_KW: f64 = 60.0;

fn ieee15_grid() -> Result<GridModel> {
    let doc: FeederDoc = serde_json::from_str(IEEE15_FEEDER)?;
    // per-unit impedance on the feeder voltage and the engine's power base
    let z_base_ohm = doc.v_base_kv * doc.v_base_kv * 1000.0 / BASE_KW;
    let lines = doc
        .lines
        .iter()
        .map(|l| Line {
            from_bus: l.from_bus,
            to_bus: l.to_bus,
            r_pu: l.r_ohm / z_base_ohm,
            x_pu: l.x_ohm / z_base_ohm,
            f_max_kw: LINE_LIMIT_KW,
        })
        .collect::<Vec<_>>();
    let n = lines.len() + 1;
    let mut bus_prosumers = Vec::new();
    for (i, &bus) in IEEE15_PRODUCER_BUSES.iter().enumerate() {
        bus_prosumers.push(BusProsumer { bus, kind: ProsumerKind::Producer, index: i });
    }
    for (j, &bus) in IEEE15_CONSUMER_BUSES.iter().enumerate() {
        bus_prosumers.push(BusProsumer { bus, kind: ProsumerKind::Consumer, index: j });
    }
    Ok(GridModel {
        lines,
        v_min: vec![V_LIMITS.0; n],
        v_max: vec![V_LIMITS.1; n],
        bus_prosumers,
        base_kw: BASE_KW,
    })
}

fn chain_grid(n_producers: usize, n_consumers: usize) -> GridModel {
    let n = n_producers + n_consumers + 1;
    let lines = (0..n - 1)
        .map(|b| Line { from_bus: b, to_bus: b + 1, r_pu: 0.002, x_pu: 0.002, f_max_kw: LINE_LIMIT_KW })
        .collect();
    let mut bus_prosumers = Vec::new();
    for i in 0..n_producers {
        bus_prosumers.push(BusProsumer { bus: 1 + i, kind: ProsumerKind::Producer, index: i });
    }
    for j in 0..n_consumers {
        bus_prosumers.push(BusProsumer {
            bus: 1 + n_producers + j,
            kind: ProsumerKind::Consumer,
            index: j,
        });
    }
    GridModel {
        lines,
        v_min: vec![V_LIMITS.0; n],
        v_max: vec![V_LIMITS.1; n],
        bus_prosumers,
        base_kw: BASE_KW,
    }
}

/// Samples a market instance from the scenario. The trading graph is complete
/// bipartite; transaction coefficients come from `alpha_range`.
pub fn gen_instance(spec: &ScenarioSpec) -> Result<Instance> {
    if spec.grid == GridTemplate::Ieee15
        && (spec.n_producers != IEEE15_PRODUCER_BUSES.len()
            || spec.n_consumers != IEEE15_CONSUMER_BUSES.len())
    {
        return Err(Error::InvalidParameter(format!(
            "the ieee15 template hosts exactly {} producers and {} consumers",
            IEEE15_PRODUCER_BUSES.len(),
            IEEE15_CONSUMER_BUSES.len()
        )));
    }
    let range_ok = |r: (f64, f64)| r.0 <= r.1 && r.0.is_finite() && r.1.is_finite();
    for r in [
        spec.a_range,
        spec.b_range,
        spec.c_range,
        spec.x_max_range,
        spec.omega_range,
        spec.y_max_range,
        spec.delta_frac_range,
        spec.alpha_range,
    ] {
        if !range_ok(r) {
            return Err(Error::InvalidParameter(format!("invalid sampling range {:?}", r)));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let sample = |rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)| {
        if lo == hi {
            lo
        } else {
            rng.random_range(lo..hi)
        }
    };

    let producers: Vec<ProducerParams> = (0..spec.n_producers)
        .map(|_| ProducerParams {
            a: sample(&mut rng, spec.a_range),
            b: sample(&mut rng, spec.b_range),
            c: sample(&mut rng, spec.c_range),
            x_min: 0.0,
            x_max: sample(&mut rng, spec.x_max_range),
        })
        .collect();
    let consumers: Vec<ConsumerParams> = (0..spec.n_consumers)
        .map(|_| {
            let omega = sample(&mut rng, spec.omega_range);
            let y_max = sample(&mut rng, spec.y_max_range);
            let frac = sample(&mut rng, spec.delta_frac_range);
            ConsumerParams { omega, delta: frac * omega / y_max, y_min: 0.0, y_max }
        })
        .collect();
    let alpha: Vec<f64> = (0..spec.n_producers * spec.n_consumers)
        .map(|_| sample(&mut rng, spec.alpha_range))
        .collect();
    let graph = TradingGraph::complete(spec.n_producers, spec.n_consumers, alpha)?;
    let grid = match spec.grid {
        GridTemplate::None => None,
        GridTemplate::Chain => Some(chain_grid(spec.n_producers, spec.n_consumers)),
        GridTemplate::Ieee15 => Some(ieee15_grid()?),
    };
    let mut inst = Instance::new(producers, consumers, graph, grid, ClearingConfig::default())?;
    inst.spec_hash = Some(spec.hash()?);
    Ok(inst)
}

/// A clearing method the comparison harness can run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Plain,
    Accelerated,
    /// Accelerated clearing on the selection-pruned graph.
    AcceleratedSelection,
}

impl Method {
    pub fn id(&self) -> &'static str {
        match self {
            Method::Plain => "plain",
            Method::Accelerated => "accelerated",
            Method::AcceleratedSelection => "accelerated+selection",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub method: String,
    pub converged: bool,
    pub iterations: usize,
    pub wall_ms: f64,
    pub welfare: f64,
    pub edges: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub rows: Vec<ComparisonRow>,
}

/// Runs each method on the same instance with identical stopping criteria.
pub fn run_compare(
    inst: &Instance,
    methods: &[Method],
    cfg: &ClearingConfig,
    selection: &SelectionConfig,
) -> Result<ComparisonReport> {
    if methods.len() < 2 {
        return Err(Error::InvalidParameter("compare needs at least two methods".into()));
    }
    let mut rows = Vec::new();
    for method in methods {
        let (run_inst, run_cfg) = match method {
            Method::Plain => (inst.clone(), ClearingConfig { accelerated: false, ..cfg.clone() }),
            Method::Accelerated => {
                (inst.clone(), ClearingConfig { accelerated: true, ..cfg.clone() })
            }
            Method::AcceleratedSelection => {
                let (pruned, _) = selection::apply_selection(&inst.graph, selection)?;
                (inst.with_graph(pruned)?, ClearingConfig { accelerated: true, ..cfg.clone() })
            }
        };
        let res = clearing::run(&run_inst, &run_cfg)?;
        rows.push(ComparisonRow {
            method: method.id().to_string(),
            converged: res.converged,
            iterations: res.iterations,
            wall_ms: res.wall_ms,
            welfare: res.welfare,
            edges: run_inst.graph.edge_count(),
        });
    }
    Ok(ComparisonReport { rows })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial: usize,
    /// Trading pairs kept (total consumer partners).
    pub pairs: usize,
    pub welfare: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Monte Carlo partner study: each trial keeps a uniformly random nonempty
/// neighbor subset per consumer, clears the pruned market and records the
/// outcome.
pub fn run_montecarlo(inst: &Instance, trials: usize, seed: u64) -> Result<Vec<TrialRecord>> {
    if trials == 0 {
        return Err(Error::InvalidParameter("trials must be at least 1".into()));
    }
    let mut records = Vec::with_capacity(trials);
    for trial in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(trial as u64 + 1);
        let pruned = random_prune(&inst.graph, &mut rng)?;
        let pruned_inst = inst.with_graph(pruned)?;
        let res = clearing::run(&pruned_inst, &inst.clearing)?;
        records.push(TrialRecord {
            trial,
            pairs: pruned_inst.graph.edge_count(),
            welfare: res.welfare,
            iterations: res.iterations,
            converged: res.converged,
        });
    }
    Ok(records)
}

fn random_prune(graph: &TradingGraph, rng: &mut ChaCha8Rng) -> Result<TradingGraph> {
    let mut kept = Vec::new();
    for j in 0..graph.n_consumers {
        let edges = graph.consumer_edges(j);
        if edges.is_empty() {
            continue;
        }
        // uniform over nonempty subsets by rejecting the empty mask
        let mask: Vec<bool> = loop {
            let mask: Vec<bool> = (0..edges.len()).map(|_| rng.random_bool(0.5)).collect();
            if mask.iter().any(|&m| m) {
                break mask;
            }
        };
        for (slot, &e) in edges.iter().enumerate() {
            if mask[slot] {
                kept.push((graph.edges()[e], graph.alpha()[e]));
            }
        }
    }
    TradingGraph::new(graph.n_producers, graph.n_consumers, kept)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub benchmark: f64,
    pub welfare: f64,
    pub iterations: usize,
    pub edges: usize,
    pub converged: bool,
}

/// Applies selection at each benchmark value and clears the pruned market.
pub fn run_benchmark_sweep(
    inst: &Instance,
    benchmarks: &[f64],
    cfg: &ClearingConfig,
) -> Result<Vec<SweepRecord>> {
    let mut records = Vec::with_capacity(benchmarks.len());
    for &benchmark in benchmarks {
        let sel = SelectionConfig { benchmark, ..SelectionConfig::default() };
        let (pruned, _) = selection::apply_selection(&inst.graph, &sel)?;
        let pruned_inst = inst.with_graph(pruned)?;
        let res = clearing::run(&pruned_inst, cfg)?;
        records.push(SweepRecord {
            benchmark,
            welfare: res.welfare,
            iterations: res.iterations,
            edges: pruned_inst.graph.edge_count(),
            converged: res.converged,
        });
    }
    Ok(records)
}

/// Spearman rank correlation with tie-averaged ranks.
pub fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    let n = xs.len();
    if n < 2 {
        return 0.0;
    }
    let rank = |v: &[f64]| -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].partial_cmp(&v[b]).unwrap());
        let mut ranks = vec![0.0; v.len()];
        let mut i = 0;
        while i < v.len() {
            let mut j = i;
            while j + 1 < v.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &k in &idx[i..=j] {
                ranks[k] = avg;
            }
            i = j + 1;
        }
        ranks
    };
    let rx = rank(xs);
    let ry = rank(ys);
    let mean = (n as f64 + 1.0) / 2.0;
    let mut cov = 0.0;
    let mut var_x = 0.0;
    let mut var_y = 0.0;
    for k in 0..n {
        let dx = rx[k] - mean;
        let dy = ry[k] - mean;
        cov += dx * dy;
        var_x += dx * dx;
        var_y += dy * dy;
    }
    if var_x == 0.0 || var_y == 0.0 {
        return 0.0;
    }
    cov / (var_x * var_y).sqrt()
}

fn fmt_sig(v: f64) -> String {
    format!("{:.8e}", v)
}

pub fn write_compare_csv<W: Write>(mut w: W, report: &ComparisonReport) -> Result<()> {
    writeln!(w, "method,converged,iterations,wall_ms,welfare,edges")?;
    for r in &report.rows {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            r.method,
            r.converged,
            r.iterations,
            fmt_sig(r.wall_ms),
            fmt_sig(r.welfare),
            r.edges
        )?;
    }
    Ok(())
}

pub fn write_montecarlo_csv<W: Write>(mut w: W, records: &[TrialRecord]) -> Result<()> {
    writeln!(w, "trial,pairs,welfare,iterations,converged")?;
    for r in records {
        writeln!(w, "{},{},{},{},{}", r.trial, r.pairs, fmt_sig(r.welfare), r.iterations, r.converged)?;
    }
    Ok(())
}

pub fn write_sweep_csv<W: Write>(mut w: W, records: &[SweepRecord]) -> Result<()> {
    writeln!(w, "benchmark,welfare,iterations,edges,converged")?;
    for r in records {
        writeln!(
            w,
            "{},{},{},{},{}",
            fmt_sig(r.benchmark),
            fmt_sig(r.welfare),
            r.iterations,
            r.edges,
            r.converged
        )?;
    }
    Ok(())
}
