use std::collections::BTreeSet;
use std::fmt;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::ops::{Connector, GroupBy, Join, PlanConfig, Storage};

/// Owner of every partition: partition index to worker id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PartitionMap {
    assignment: Vec<usize>,
}

impl PartitionMap {
    /// Deals `partitions` out to `workers` round-robin, in ascending worker
    /// order.
    pub fn round_robin(partitions: usize, workers: &BTreeSet<usize>) -> Result<Self> {
        if workers.is_empty() {
            return Err(Error::NoWorkers);
        }
        let ws: Vec<usize> = workers.iter().copied().collect();
        Ok(PartitionMap {
            assignment: (0..partitions).map(|p| ws[p % ws.len()]).collect(),
        })
    }

    pub fn num_partitions(&self) -> usize {
        self.assignment.len()
    }

    pub fn worker_of(&self, partition: usize) -> usize {
        self.assignment[partition]
    }

    pub fn partitions_of(&self, worker: usize) -> Vec<usize> {
        (0..self.assignment.len())
            .filter(|&p| self.assignment[p] == worker)
            .collect()
    }

    pub fn workers(&self) -> BTreeSet<usize> {
        self.assignment.iter().copied().collect()
    }
}

/// Dataflow edge labels of one superstep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum Flow {
    D1,
    D2,
    D3,
    D4,
    D5,
    D6,
    D7,
    D8,
    D9,
    D11,
    D12,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Operator {
    pub id: usize,
    pub name: String,
    /// Partition the instance works on; `None` for the global operators.
    pub partition: Option<usize>,
    /// Location constraint; `None` for operators run by the coordinator.
    pub worker: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PlanEdge {
    pub from: usize,
    pub to: usize,
    pub flow: Option<Flow>,
    pub connector: &'static str,
}

/// Operator DAG of one superstep.
#[derive(Debug, Clone, Serialize)]
pub struct PhysicalPlan {
    pub config: PlanConfig,
    pub operators: Vec<Operator>,
    pub edges: Vec<PlanEdge>,
}

impl PhysicalPlan {
    /// Operator names of one partition chain, in creation order.
    pub fn chain(&self, partition: usize) -> Vec<&str> {
        self.operators
            .iter()
            .filter(|o| o.partition == Some(partition))
            .map(|o| o.name.as_str())
            .collect()
    }

    pub fn flows(&self) -> BTreeSet<String> {
        self.edges
            .iter()
            .filter_map(|e| e.flow.map(|f| format!("{f:?}")))
            .collect()
    }

    /// Structural fingerprint: operator names and edge shapes, without ids
    /// of partitions or workers.
    pub fn shape(&self) -> String {
        let mut names: Vec<_> = self.operators.iter().map(|o| o.name.clone()).collect();
        names.sort();
        names.dedup();
        let mut conns: Vec<_> = self.edges.iter().map(|e| e.connector).collect();
        conns.sort();
        conns.dedup();
        format!("{}|{}", names.join(","), conns.join(","))
    }
}

impl fmt::Display for PhysicalPlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "plan {}", self.config)?;
        for o in &self.operators {
            match (o.partition, o.worker) {
                (Some(p), Some(w)) => writeln!(f, "  [{}] {} p{} @w{}", o.id, o.name, p, w)?,
                _ => writeln!(f, "  [{}] {}", o.id, o.name)?,
            }
        }
        for e in &self.edges {
            let flow = e.flow.map(|f| format!(" {f:?}")).unwrap_or_default();
            writeln!(f, "  {} -> {} ({}){}", e.from, e.to, e.connector, flow)?;
        }
        Ok(())
    }
}

struct Builder {
    operators: Vec<Operator>,
    edges: Vec<PlanEdge>,
}

impl Builder {
    fn op(&mut self, name: &str, partition: Option<usize>, worker: Option<usize>) -> usize {
        let id = self.operators.len();
        self.operators.push(Operator {
            id,
            name: name.to_string(),
            partition,
            worker,
        });
        id
    }

    fn edge(&mut self, from: usize, to: usize, flow: Option<Flow>, connector: &'static str) {
        self.edges.push(PlanEdge {
            from,
            to,
            flow,
            connector,
        });
    }
}

/// Builds the superstep DAG for `cfg`, pinning every per-partition operator
/// to the worker that owns the partition's Vertex index.
pub fn generate_plan(cfg: PlanConfig, pmap: &PartitionMap) -> Result<PhysicalPlan> {
    cfg.validate().map_err(|e| Error::Validation(vec![e]))?;
    let n = pmap.num_partitions();
    let mut b = Builder {
        operators: Vec::new(),
        edges: Vec::new(),
    };
    let storage = match cfg.storage {
        Storage::BTree => "btree",
        Storage::Lsm => "lsm",
    };
    let sender_gb = match cfg.group_by {
        GroupBy::HashSort => "hashsort-group-by",
        GroupBy::SortBased | GroupBy::Preclustered => "sort-group-by",
    };
    let (connector, receiver_gb) = match cfg.connector {
        Connector::PartitionPipelined => ("m-to-n-partition", sender_gb),
        Connector::PartitionMergeMaterialized => {
            ("m-to-n-partition-merge", "preclustered-group-by")
        }
    };

    let halt_global = b.op("halt-and-final", None, None);
    let agg_global = b.op("aggregate-final", None, None);
    let gs_write = b.op("gs-write", None, None);
    b.edge(halt_global, gs_write, Some(Flow::D8), "one-to-one");
    b.edge(agg_global, gs_write, Some(Flow::D9), "one-to-one");

    let mut senders = Vec::with_capacity(n);
    let mut receivers = Vec::with_capacity(n);
    let mut mut_senders = Vec::with_capacity(n);
    let mut mut_receivers = Vec::with_capacity(n);
    for k in 0..n {
        let w = Some(pmap.worker_of(k));
        let p = Some(k);
        let msg_scan = b.op("msg-scan", p, w);
        let vertex_index = b.op(&format!("vertex-index-{storage}"), p, w);
        let join = match cfg.join {
            Join::FullOuter => {
                let j = b.op("index-full-outer-join", p, w);
                b.edge(msg_scan, j, None, "one-to-one");
                b.edge(vertex_index, j, None, "index-scan");
                j
            }
            Join::LeftOuter => {
                let vid_scan = b.op("vid-scan", p, w);
                let choose = b.op("merge-choose", p, w);
                let j = b.op("index-left-outer-join", p, w);
                b.edge(msg_scan, choose, None, "one-to-one");
                b.edge(vid_scan, choose, None, "one-to-one");
                b.edge(choose, j, None, "one-to-one");
                b.edge(vertex_index, j, None, "index-probe");
                j
            }
        };
        let filter = b.op("select-active", p, w);
        let compute = b.op("compute", p, w);
        b.edge(join, filter, None, "one-to-one");
        b.edge(filter, compute, Some(Flow::D1), "one-to-one");
        let update = b.op(&format!("vertex-update-{storage}"), p, w);
        b.edge(compute, update, Some(Flow::D2), "one-to-one");
        let gb = b.op(sender_gb, p, w);
        b.edge(compute, gb, Some(Flow::D3), "one-to-one");
        senders.push(gb);
        let halt_local = b.op("halt-and-local", p, w);
        b.edge(compute, halt_local, Some(Flow::D4), "one-to-one");
        b.edge(halt_local, halt_global, Some(Flow::D4), "m-to-one");
        let agg_local = b.op("aggregate-local", p, w);
        b.edge(compute, agg_local, Some(Flow::D5), "one-to-one");
        b.edge(agg_local, agg_global, Some(Flow::D5), "m-to-one");
        mut_senders.push(compute);
        if cfg.join == Join::LeftOuter {
            let null_msg = b.op("null-msg", p, w);
            let vid_load = b.op("vid-bulk-load", p, w);
            b.edge(compute, null_msg, Some(Flow::D11), "one-to-one");
            b.edge(null_msg, vid_load, Some(Flow::D12), "one-to-one");
        }
        let rgb = b.op(receiver_gb, p, w);
        let msg_write = b.op("msg-write", p, w);
        b.edge(rgb, msg_write, Some(Flow::D7), "one-to-one");
        receivers.push(rgb);
        let resolve = b.op("resolve", p, w);
        let insert_delete = b.op(&format!("index-insert-delete-{storage}"), p, w);
        b.edge(resolve, insert_delete, Some(Flow::D6), "one-to-one");
        mut_receivers.push(resolve);
    }
    for &s in &senders {
        for &r in &receivers {
            b.edge(s, r, Some(Flow::D3), connector);
        }
    }
    for &s in &mut_senders {
        for &r in &mut_receivers {
            b.edge(s, r, Some(Flow::D6), "m-to-n-partition");
        }
    }
    Ok(PhysicalPlan {
        config: cfg,
        operators: b.operators,
        edges: b.edges,
    })
}
