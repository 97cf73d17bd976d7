//! Market instance document: the JSON file shared by the CLI, the clearing
//! engine, the oracle and the Python bindings.

use crate::clearing::ClearingConfig;
use crate::error::{Error, Result};
use crate::grid::{GridModel, ProsumerKind};
use crate::model::{ConsumerParams, Edge, ProducerParams, TradingGraph};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// One edge entry of the `edges` section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeEntry {
    pub producer: usize,
    pub consumer: usize,
    pub alpha: f64,
}

/// A complete market instance.
#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub producers: Vec<ProducerParams>,
    pub consumers: Vec<ConsumerParams>,
    pub graph: TradingGraph,
    pub grid: Option<GridModel>,
    pub clearing: ClearingConfig,
    /// Hash of the generating scenario, when the instance came from `gen`.
    pub spec_hash: Option<String>,
}

/// Wire format with an explicit `edges` section.
#[derive(Debug, Serialize, Deserialize)]
struct InstanceDoc {
    producers: Vec<ProducerParams>,
    consumers: Vec<ConsumerParams>,
    edges: Vec<EdgeEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    grid: Option<GridModel>,
    #[serde(default)]
    clearing: ClearingConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    spec_hash: Option<String>,
}

impl Instance {
    pub fn new(
        producers: Vec<ProducerParams>,
        consumers: Vec<ConsumerParams>,
        graph: TradingGraph,
        grid: Option<GridModel>,
        clearing: ClearingConfig,
    ) -> Result<Self> {
        let inst = Self { producers, consumers, graph, grid, clearing, spec_hash: None };
        inst.validate()?;
        Ok(inst)
    }

    pub fn validate(&self) -> Result<()> {
        if self.producers.len() != self.graph.n_producers {
            return Err(Error::IndexMismatch {
                what: "producers",
                expected: self.graph.n_producers,
                got: self.producers.len(),
            });
        }
        if self.consumers.len() != self.graph.n_consumers {
            return Err(Error::IndexMismatch {
                what: "consumers",
                expected: self.graph.n_consumers,
                got: self.consumers.len(),
            });
        }
        for p in &self.producers {
            p.validate()?;
        }
        for c in &self.consumers {
            c.validate()?;
        }
        // agents without edges cannot meet a strictly positive trade floor
        for (i, p) in self.producers.iter().enumerate() {
            if self.graph.producer_edges(i).is_empty() && p.x_min > 0.0 {
                return Err(Error::InfeasibleBounds(format!(
                    "producer {} has no trading partners but x_min = {}",
                    i, p.x_min
                )));
            }
        }
        for (j, c) in self.consumers.iter().enumerate() {
            if self.graph.consumer_edges(j).is_empty() && c.y_min > 0.0 {
                return Err(Error::InfeasibleBounds(format!(
                    "consumer {} has no trading partners but y_min = {}",
                    j, c.y_min
                )));
            }
        }
        if let Some(grid) = &self.grid {
            grid.validate()?;
            let n = grid.bus_count();
            if grid.bus_prosumers.len() != n - 1 {
                return Err(Error::BusAssignment(format!(
                    "{} bus assignments for {} non-slack buses",
                    grid.bus_prosumers.len(),
                    n - 1
                )));
            }
            let mut p_seen = vec![false; self.producers.len()];
            let mut c_seen = vec![false; self.consumers.len()];
            for bp in &grid.bus_prosumers {
                let seen = match bp.kind {
                    ProsumerKind::Producer => p_seen.get_mut(bp.index),
                    ProsumerKind::Consumer => c_seen.get_mut(bp.index),
                };
                match seen {
                    Some(s) if !*s => *s = true,
                    Some(_) => {
                        return Err(Error::BusAssignment(format!(
                            "prosumer {:?} {} assigned to more than one bus",
                            bp.kind, bp.index
                        )))
                    }
                    None => {
                        return Err(Error::BusAssignment(format!(
                            "prosumer {:?} {} out of range",
                            bp.kind, bp.index
                        )))
                    }
                }
            }
            if p_seen.iter().any(|s| !s) || c_seen.iter().any(|s| !s) {
                return Err(Error::BusAssignment(
                    "every market participant needs a bus when a grid is present".into(),
                ));
            }
        }
        self.clearing.validate(self.graph.edge_count())?;
        Ok(())
    }

    /// Replaces the trading graph, e.g. after partner selection. Producer and
    /// consumer counts must be unchanged.
    pub fn with_graph(&self, graph: TradingGraph) -> Result<Self> {
        let mut inst = self.clone();
        inst.graph = graph;
        inst.validate()?;
        Ok(inst)
    }

    pub fn to_json(&self) -> Result<String> {
        let doc = InstanceDoc {
            producers: self.producers.clone(),
            consumers: self.consumers.clone(),
            edges: self
                .graph
                .edges()
                .iter()
                .zip(self.graph.alpha())
                .map(|(e, a)| EdgeEntry { producer: e.producer, consumer: e.consumer, alpha: *a })
                .collect(),
            grid: self.grid.clone(),
            clearing: self.clearing.clone(),
            spec_hash: self.spec_hash.clone(),
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let doc: InstanceDoc = serde_json::from_str(json)?;
        let n_p = doc.producers.len();
        let n_c = doc.consumers.len();
        let graph = TradingGraph::new(
            n_p,
            n_c,
            doc.edges
                .iter()
                .map(|e| (Edge { producer: e.producer, consumer: e.consumer }, e.alpha))
                .collect(),
        )?;
        let inst = Self {
            producers: doc.producers,
            consumers: doc.consumers,
            graph,
            grid: doc.grid,
            clearing: doc.clearing,
            spec_hash: doc.spec_hash,
        };
        inst.validate()?;
        Ok(inst)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clearing::ClearingConfig;

    fn tiny() -> Instance {
        let graph = TradingGraph::complete(1, 1, vec![0.25]).unwrap();
        Instance::new(
            vec![ProducerParams { a: 1.0, b: 1.0, c: 0.0, x_min: 0.0, x_max: 10.0 }],
            vec![ConsumerParams { omega: 10.0, delta: 2.0, y_min: 0.0, y_max: 5.0 }],
            graph,
            None,
            ClearingConfig::default(),
        )
        .unwrap()
    }

    #[test]
    fn json_round_trip_preserves_instance() {
        let inst = tiny();
        let json = inst.to_json().unwrap();
        let back = Instance::from_json(&json).unwrap();
        assert_eq!(inst, back);
        // section names are part of the wire contract
        for key in ["producers", "consumers", "edges", "clearing", "alpha", "omega", "x_min"] {
            assert!(json.contains(key), "missing key {}", key);
        }
    }

    #[test]
    fn rejects_mismatched_counts() {
        let graph = TradingGraph::complete(2, 1, vec![0.0, 0.0]).unwrap();
        let r = Instance::new(
            vec![ProducerParams { a: 1.0, b: 1.0, c: 0.0, x_min: 0.0, x_max: 10.0 }],
            vec![ConsumerParams { omega: 10.0, delta: 2.0, y_min: 0.0, y_max: 5.0 }],
            graph,
            None,
            ClearingConfig::default(),
        );
        assert!(r.is_err());
    }

    #[test]
    fn rejects_isolated_agent_with_trade_floor() {
        // producer 1 has no edges but x_min > 0
        let graph = TradingGraph::new(
            2,
            1,
            vec![(Edge { producer: 0, consumer: 0 }, 0.0)],
        )
        .unwrap();
        let r = Instance::new(
            vec![
                ProducerParams { a: 1.0, b: 1.0, c: 0.0, x_min: 0.0, x_max: 10.0 },
                ProducerParams { a: 1.0, b: 1.0, c: 0.0, x_min: 2.0, x_max: 10.0 },
            ],
            vec![ConsumerParams { omega: 10.0, delta: 2.0, y_min: 0.0, y_max: 5.0 }],
            graph,
            None,
            ClearingConfig::default(),
        );
        assert!(matches!(r, Err(Error::InfeasibleBounds(_))));
    }
}
