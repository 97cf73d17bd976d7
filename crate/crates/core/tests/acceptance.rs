//! Acceptance suite: one test per criterion, each printing a PASS line with
//! the measured quantities. Run with `cargo test -p p2pclear-core --test
//! acceptance -- --nocapture` to see them.

use p2pclear_core::clearing::{self, ClearingConfig, EtaPolicy, LambdaPolicy};
use p2pclear_core::experiments::{self, GridTemplate, Method, ScenarioSpec};
use p2pclear_core::instance::Instance;
use p2pclear_core::model::{ConsumerParams, Edge, ProducerParams, TradingGraph};
use p2pclear_core::oracle::{self, BoundKind};
use p2pclear_core::selection::{self, SelectionConfig};
use p2pclear_core::subproblem::{self, BestResponseConfig, TieBreak};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

fn report(criterion: &str, detail: String) {
    println!("acceptance {}: PASS ({})", criterion, detail);
}

/// The 50 random markets shared by criteria 1, 4 and 8.
fn random_markets() -> Vec<Instance> {
    let mut sizes = ChaCha8Rng::seed_from_u64(0xC1);
    (0..50u64)
        .map(|i| {
            let spec = ScenarioSpec {
                n_producers: sizes.random_range(2..=10),
                n_consumers: sizes.random_range(2..=10),
                seed: 20_000 + i,
                ..ScenarioSpec::default()
            };
            experiments::gen_instance(&spec).unwrap()
        })
        .collect()
}

/// Degree-1 matched-pair instances with interior optima, plus their
/// closed-form optimal welfare and prices.
fn matched_pairs(seed: u64) -> (Instance, f64, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(1..=4usize);
    let mut producers = Vec::new();
    let mut consumers = Vec::new();
    let mut edges = Vec::new();
    let mut welfare = 0.0;
    let mut lambda_star = Vec::new();
    for i in 0..n {
        let a = rng.random_range(0.1..1.0);
        let b = rng.random_range(1.0..3.0);
        let omega = rng.random_range(6.0..12.0);
        let delta = rng.random_range(0.3..1.5);
        let alpha = rng.random_range(0.0..1.0);
        let z = (omega + alpha - b) / (a + delta);
        producers.push(ProducerParams { a, b, c: 0.0, x_min: 0.0, x_max: 3.0 * z });
        consumers.push(ConsumerParams {
            omega,
            delta,
            y_min: 0.0,
            y_max: (omega / delta).min(3.0 * z),
        });
        edges.push((Edge { producer: i, consumer: i }, alpha));
        welfare += omega * z - 0.5 * delta * z * z - (0.5 * a * z * z + b * z) + alpha * z;
        lambda_star.push(b + a * z);
    }
    let graph = TradingGraph::new(n, n, edges).unwrap();
    let inst =
        Instance::new(producers, consumers, graph, None, ClearingConfig::default()).unwrap();
    (inst, welfare, lambda_star)
}

#[test]
fn criterion_01_oracle_equivalence() {
    let started = Instant::now();
    let mut worst_rel: f64 = 0.0;
    for (idx, inst) in random_markets().iter().enumerate() {
        let sol = oracle::solve_centralized(inst, false, 1e-6).unwrap();
        let res = clearing::run(inst, &inst.clearing).unwrap();
        assert!(res.converged, "instance {} did not converge", idx);
        let last = res.trace.last().unwrap();
        assert!(last.mismatch_inf <= 1e-3, "instance {} mismatch {}", idx, last.mismatch_inf);
        let rel = (res.welfare - sol.welfare).abs() / sol.welfare.abs().max(1.0);
        assert!(rel <= 5e-3, "instance {} welfare off by {:.3e}", idx, rel);
        worst_rel = worst_rel.max(rel);
    }
    let secs = started.elapsed().as_secs_f64();
    assert!(secs < 60.0, "criterion 1 took {:.1} s", secs);
    report(
        "1 oracle equivalence",
        format!("50 instances, worst relative welfare gap {:.2e}, {:.1} s", worst_rel, secs),
    );
}

fn bound_holds(kind: BoundKind, slack: f64) -> (f64, f64) {
    let mut worst_slack = f64::NEG_INFINITY;
    let mut worst_gap = f64::NEG_INFINITY;
    for seed in 0..20u64 {
        let (inst, q_star, lambda_star) = matched_pairs(500 + seed);
        // the oracle must agree with the closed form before it anchors bounds
        let sol = oracle::solve_centralized(&inst, false, 1e-9).unwrap();
        assert!(
            (sol.welfare - q_star).abs() <= 1e-8 * (1.0 + q_star.abs()),
            "oracle disagrees with the closed form: {} vs {}",
            sol.welfare,
            q_star
        );
        let cfg = ClearingConfig {
            rho: 0.0,
            accelerated: kind == BoundKind::Accelerated,
            epsilon: 1e-300,
            max_iter: 2000,
            ..ClearingConfig::default()
        };
        let res = clearing::run_with_reference(&inst, &cfg, Some(q_star)).unwrap();
        let (eta, _) = clearing::resolve_eta(&inst, &EtaPolicy::default()).unwrap();
        let lambda0: Vec<f64> =
            inst.graph.edges().iter().map(|e| inst.producers[e.producer].b + 1.0).collect();
        for rec in &res.trace {
            let bound = oracle::theoretical_bound(kind, rec.k, &eta, &lambda0, &lambda_star);
            let gap = rec.dual_gap.unwrap();
            assert!(gap >= -1e-9, "negative dual gap {} at k={}", gap, rec.k);
            assert!(
                gap <= bound + slack,
                "seed {} k={}: gap {} above bound {}",
                seed,
                rec.k,
                gap,
                bound
            );
            worst_slack = worst_slack.max(gap - bound);
            worst_gap = worst_gap.max(gap);
        }
        // runs that hit exact consensus early must already be at the optimum
        if res.trace.len() < 2000 {
            let last = res.trace.last().unwrap();
            assert!(last.dual_gap.unwrap() <= slack);
        }
    }
    (worst_slack, worst_gap)
}

#[test]
fn criterion_02_accelerated_bound() {
    let (worst_slack, _) = bound_holds(BoundKind::Accelerated, 1e-7);
    report(
        "2 accelerated dual-gap bound",
        format!("20 instances x 2000 iterations, worst gap-minus-bound {:.2e}", worst_slack),
    );
}

#[test]
fn criterion_03_plain_bound() {
    let (worst_slack, _) = bound_holds(BoundKind::Plain, 1e-7);
    report(
        "3 plain dual-gap bound",
        format!("20 instances x 2000 iterations, worst gap-minus-bound {:.2e}", worst_slack),
    );
}

#[test]
fn criterion_04_acceleration_ordering() {
    let mut total_acc = 0usize;
    let mut total_plain = 0usize;
    for (idx, inst) in random_markets().iter().enumerate() {
        let acc = clearing::run(inst, &inst.clearing).unwrap();
        let plain = clearing::run(
            inst,
            &ClearingConfig { accelerated: false, ..inst.clearing.clone() },
        )
        .unwrap();
        assert!(acc.converged && plain.converged, "instance {}", idx);
        assert!(
            acc.iterations <= plain.iterations,
            "instance {}: accelerated {} > plain {}",
            idx,
            acc.iterations,
            plain.iterations
        );
        total_acc += acc.iterations;
        total_plain += plain.iterations;
    }
    report(
        "4 acceleration ordering",
        format!(
            "accelerated <= plain on all 50 instances (totals {} vs {})",
            total_acc, total_plain
        ),
    );
}

#[test]
fn criterion_05_gamma_sequence() {
    let mut gamma: f64 = 1.0;
    for k in 1..=100_000usize {
        assert!(gamma >= (k * k) as f64 / 2.0, "gamma below k^2/2 at k={}", k);
        let next = clearing::gamma_next(k, gamma);
        let lhs = (next / (k as f64 + 1.0)).powi(2) - next / (k as f64 + 1.0);
        let rhs = (gamma / k as f64).powi(2);
        assert!(
            (lhs - rhs).abs() <= 1e-9 * rhs.max(1.0),
            "telescoping identity broken at k={}",
            k
        );
        gamma = next;
    }
    report("5 gamma sequence", "k^2/2 domination and telescoping identity to k=1e5".into());
}

#[test]
fn criterion_06_selection_reproduction() {
    let row = [0.54, 0.71, 0.60, 0.54, 0.42, 0.64, 0.43];
    let normalized = selection::normalize_coefficients(&row).unwrap();
    let kept = selection::select_partners(&normalized, 0.0);
    // slots are 0-based; producers 2, 3 and 6 in 1-based labels
    assert_eq!(kept, vec![1, 2, 5]);
    report("6 selection reproduction", "alpha row selects producers {2, 3, 6}".into());
}

#[test]
fn criterion_07_benchmark_plateau() {
    let inst = experiments::gen_instance(&ScenarioSpec::ieee15(7)).unwrap();
    let records =
        experiments::run_benchmark_sweep(&inst, &[-1.0, 0.0], &inst.clearing).unwrap();
    let full = &records[0];
    let pruned = &records[1];
    assert!(full.converged && pruned.converged);
    assert!(pruned.edges < full.edges, "selection did not prune");
    let rel = (full.welfare - pruned.welfare).abs() / full.welfare.abs();
    assert!(rel <= 0.01, "plateau loss {:.3e} above 1%", rel);
    report(
        "7 benchmark plateau",
        format!(
            "welfare loss {:.4}% with edges {} -> {}",
            rel * 100.0,
            full.edges,
            pruned.edges
        ),
    );
}

#[test]
fn criterion_08_balance_and_feasibility() {
    // every converged run balances within the stopping tolerance
    let mut checked = 0;
    for inst in random_markets().iter().take(10) {
        let res = clearing::run(inst, &inst.clearing).unwrap();
        assert!(res.converged);
        let eps = inst.clearing.epsilon;
        for (x, y) in res.allocation.x.iter().zip(&res.allocation.y) {
            assert!((x - y).abs() <= eps);
        }
        let sx: f64 = res.allocation.x.iter().sum();
        let sy: f64 = res.allocation.y.iter().sum();
        assert!((sx - sy).abs() <= eps * inst.graph.edge_count() as f64);
        checked += 1;
    }
    // the demo feeder stays inside its voltage band and line ratings
    let inst = experiments::gen_instance(&ScenarioSpec::ieee15(7)).unwrap();
    let res = clearing::run(&inst, &inst.clearing).unwrap();
    assert!(res.converged);
    let rep = res.constraint_report.as_ref().unwrap();
    assert!(rep.min_voltage >= 0.9 && rep.max_voltage <= 1.1, "voltages {:?}", rep);
    assert!(rep.max_abs_flow_kw <= 60.0, "flows {:?}", rep);
    assert!(rep.pass());
    report(
        "8 balance and feasibility",
        format!(
            "{} runs balanced; demo voltages [{:.4}, {:.4}] p.u., max |flow| {:.1} kW",
            checked, rep.min_voltage, rep.max_voltage, rep.max_abs_flow_kw
        ),
    );
}

/// Lattice maximizer for the best-response subproblems: 200 points per axis,
/// table-driven so the 3-D case stays fast.
struct Lattice {
    steps: usize,
}

impl Lattice {
    fn best_producer(
        &self,
        p: &ProducerParams,
        lambda: &[f64],
        prev: &[f64],
        rho: f64,
    ) -> f64 {
        let n = lambda.len();
        let hi = p.x_max;
        let grid: Vec<f64> =
            (0..self.steps).map(|i| hi * i as f64 / (self.steps - 1) as f64).collect();
        // per-axis linear + prox contribution
        let axis: Vec<Vec<f64>> = (0..n)
            .map(|e| {
                grid.iter()
                    .map(|&z| lambda[e] * z - 0.5 * rho * (z - prev[e]) * (z - prev[e]))
                    .collect()
            })
            .collect();
        // cost of the total: totals live on the same uniform grid
        let max_idx = (self.steps - 1) * n;
        let step = hi / (self.steps - 1) as f64;
        let cost: Vec<f64> = (0..=max_idx)
            .map(|i| {
                let t = step * i as f64;
                0.5 * p.a * t * t + p.b * t + p.c
            })
            .collect();
        let lo_idx = (p.x_min / step - 1e-9).ceil().max(0.0) as usize;
        let hi_idx = ((p.x_max / step + 1e-9).floor() as usize).min(max_idx);
        let mut best = f64::NEG_INFINITY;
        match n {
            1 => {
                for (i1, a1) in axis[0].iter().enumerate() {
                    if i1 < lo_idx || i1 > hi_idx {
                        continue;
                    }
                    best = best.max(a1 - cost[i1]);
                }
            }
            2 => {
                for (i1, a1) in axis[0].iter().enumerate() {
                    for (i2, a2) in axis[1].iter().enumerate() {
                        let t = i1 + i2;
                        if t < lo_idx || t > hi_idx {
                            continue;
                        }
                        best = best.max(a1 + a2 - cost[t]);
                    }
                }
            }
            3 => {
                for (i1, a1) in axis[0].iter().enumerate() {
                    for (i2, a2) in axis[1].iter().enumerate() {
                        let partial = a1 + a2;
                        let base = i1 + i2;
                        if base > hi_idx {
                            continue;
                        }
                        let lo3 = lo_idx.saturating_sub(base);
                        let hi3 = (hi_idx - base).min(self.steps - 1);
                        for i3 in lo3..=hi3 {
                            best = best.max(partial + axis[2][i3] - cost[base + i3]);
                        }
                    }
                }
            }
            _ => unreachable!(),
        }
        best
    }

    fn best_consumer(
        &self,
        c: &ConsumerParams,
        lambda: &[f64],
        alpha: &[f64],
        prev: &[f64],
        rho: f64,
    ) -> f64 {
        let n = lambda.len();
        let hi = c.y_max;
        let grid: Vec<f64> =
            (0..self.steps).map(|i| hi * i as f64 / (self.steps - 1) as f64).collect();
        let axis: Vec<Vec<f64>> = (0..n)
            .map(|e| {
                grid.iter()
                    .map(|&z| {
                        (alpha[e] - lambda[e]) * z - 0.5 * rho * (z - prev[e]) * (z - prev[e])
                    })
                    .collect()
            })
            .collect();
        let max_idx = (self.steps - 1) * n;
        let step = hi / (self.steps - 1) as f64;
        let knee = c.knee();
        let utility: Vec<f64> = (0..=max_idx)
            .map(|i| {
                let t = step * i as f64;
                if t <= knee {
                    c.omega * t - 0.5 * c.delta * t * t
                } else {
                    c.omega * c.omega / (2.0 * c.delta)
                }
            })
            .collect();
        let lo_idx = (c.y_min / step - 1e-9).ceil().max(0.0) as usize;
        let hi_idx = ((c.y_max / step + 1e-9).floor() as usize).min(max_idx);
        let mut best = f64::NEG_INFINITY;
        match n {
            1 => {
                for (i1, a1) in axis[0].iter().enumerate() {
                    if i1 < lo_idx || i1 > hi_idx {
                        continue;
                    }
                    best = best.max(a1 + utility[i1]);
                }
            }
            2 => {
                for (i1, a1) in axis[0].iter().enumerate() {
                    for (i2, a2) in axis[1].iter().enumerate() {
                        let t = i1 + i2;
                        if t < lo_idx || t > hi_idx {
                            continue;
                        }
                        best = best.max(a1 + a2 + utility[t]);
                    }
                }
            }
            3 => {
                for (i1, a1) in axis[0].iter().enumerate() {
                    for (i2, a2) in axis[1].iter().enumerate() {
                        let partial = a1 + a2;
                        let base = i1 + i2;
                        if base > hi_idx {
                            continue;
                        }
                        let lo3 = lo_idx.saturating_sub(base);
                        let hi3 = (hi_idx - base).min(self.steps - 1);
                        for i3 in lo3..=hi3 {
                            best = best.max(partial + axis[2][i3] + utility[base + i3]);
                        }
                    }
                }
            }
            _ => unreachable!(),
        }
        best
    }
}

#[test]
fn criterion_09_subproblem_brute_force() {
    let lattice = Lattice { steps: 200 };
    let mut rng = ChaCha8Rng::seed_from_u64(0xB0);
    let mut worst_gap: f64 = f64::NEG_INFINITY;
    for call in 0..500usize {
        let dims = 1 + call % 3;
        let rho = if call % 2 == 0 { 0.0 } else { 1e-3 };
        let cfg = BestResponseConfig { rho, tie_break: TieBreak::LowestIndex };
        if call % 2 == 0 {
            let p = ProducerParams {
                a: rng.random_range(0.05..1.0),
                b: rng.random_range(0.5..4.0),
                c: 0.0,
                x_min: if call % 10 == 0 { rng.random_range(0.5..2.0) } else { 0.0 },
                x_max: rng.random_range(3.0..10.0),
            };
            let lambda: Vec<f64> = (0..dims).map(|_| rng.random_range(-1.0..8.0)).collect();
            let prev: Vec<f64> = (0..dims).map(|_| rng.random_range(0.0..p.x_max)).collect();
            let x = subproblem::producer_best_response(&p, &lambda, &prev, &cfg).unwrap();
            let val = subproblem::producer_objective(&p, &lambda, &prev, rho, &x);
            let brute = lattice.best_producer(&p, &lambda, &prev, rho);
            assert!(val >= brute - 1e-8, "call {}: {} < {}", call, val, brute);
            worst_gap = worst_gap.max(brute - val);
        } else {
            let omega = rng.random_range(4.0..12.0);
            let y_max = rng.random_range(3.0..10.0);
            let c = ConsumerParams {
                omega,
                delta: rng.random_range(0.5 * omega / y_max..1.5 * omega / y_max),
                y_min: 0.0,
                y_max,
            };
            let lambda: Vec<f64> = (0..dims).map(|_| rng.random_range(0.0..8.0)).collect();
            let alpha: Vec<f64> = (0..dims).map(|_| rng.random_range(0.0..1.0)).collect();
            let prev: Vec<f64> = (0..dims).map(|_| rng.random_range(0.0..y_max)).collect();
            let y = subproblem::consumer_best_response(&c, &lambda, &alpha, &prev, &cfg).unwrap();
            let val = subproblem::consumer_objective(&c, &lambda, &alpha, &prev, rho, &y);
            let brute = lattice.best_consumer(&c, &lambda, &alpha, &prev, rho);
            assert!(val >= brute - 1e-8, "call {}: {} < {}", call, val, brute);
            worst_gap = worst_gap.max(brute - val);
        }
    }
    report(
        "9 subproblem brute force",
        format!("500 calls vs 200^d lattice, worst lattice advantage {:.2e}", worst_gap),
    );
}

#[test]
fn criterion_10_montecarlo_trend() {
    let started = Instant::now();
    let spec = ScenarioSpec {
        n_producers: 10,
        n_consumers: 10,
        seed: 0x20A6,
        grid: GridTemplate::None,
        ..ScenarioSpec::default()
    };
    let inst = experiments::gen_instance(&spec).unwrap();
    let records = experiments::run_montecarlo(&inst, 200, 7).unwrap();
    assert!(records.iter().all(|r| r.converged));
    let pairs: Vec<f64> = records.iter().map(|r| r.pairs as f64).collect();
    let welfare: Vec<f64> = records.iter().map(|r| r.welfare).collect();
    let rho = experiments::spearman(&pairs, &welfare);
    assert!(rho > 0.0, "Spearman correlation {} not positive", rho);

    // the selection strategy's point sits above the random-pruning median at
    // equal-or-greater pair count
    let (pruned, sel_report) =
        selection::apply_selection(&inst.graph, &SelectionConfig::default()).unwrap();
    let sel_inst = inst.with_graph(pruned).unwrap();
    let sel_run = clearing::run(&sel_inst, &inst.clearing).unwrap();
    assert!(sel_run.converged);
    let mut comparable: Vec<f64> = records
        .iter()
        .filter(|r| r.pairs >= sel_report.edges_after)
        .map(|r| r.welfare)
        .collect();
    if comparable.is_empty() {
        comparable = welfare.clone();
    }
    comparable.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = comparable[comparable.len() / 2];
    assert!(
        sel_run.welfare >= median,
        "selection welfare {} below the median {} of {} comparable trials",
        sel_run.welfare,
        median,
        comparable.len()
    );
    let secs = started.elapsed().as_secs_f64();
    assert!(secs < 300.0, "criterion 10 took {:.1} s", secs);
    report(
        "10 Monte Carlo trend",
        format!(
            "Spearman {:.3} over 200 trials; selection welfare {:.2} vs median {:.2} ({} pairs); {:.1} s",
            rho, sel_run.welfare, median, sel_report.edges_after, secs
        ),
    );
}

#[test]
fn comparison_report_shape() {
    // not a numbered criterion: the Table-II style report runs end to end
    let inst = experiments::gen_instance(&ScenarioSpec::ieee15(7)).unwrap();
    let report_rows = experiments::run_compare(
        &inst,
        &[Method::Plain, Method::Accelerated, Method::AcceleratedSelection],
        &inst.clearing,
        &SelectionConfig::default(),
    )
    .unwrap();
    assert_eq!(report_rows.rows.len(), 3);
    assert!(report_rows.rows.iter().all(|r| r.converged));
    let acc = &report_rows.rows[1];
    let sel = &report_rows.rows[2];
    assert!(acc.iterations <= report_rows.rows[0].iterations);
    assert!(sel.edges < acc.edges);
    // selection loses little welfare
    let rel = (acc.welfare - sel.welfare).abs() / acc.welfare.abs();
    assert!(rel < 0.01, "selection welfare loss {:.3e}", rel);
}
