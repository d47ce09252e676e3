#![allow(dead_code)]

use std::collections::{BTreeMap, BinaryHeap, HashMap};
use std::cmp::Reverse;
use std::path::Path;

use dfpregel::algorithms::{resolve_largest_insert, MutationScript};
use dfpregel::ft::FailureInjector;
use dfpregel::graphio::{partition_vertices, Adjacency};
use dfpregel::runtime::{drive, Termination};
use dfpregel::{
    decode_f64, decode_u64, encode_f64, Edge, Engine, EngineConfig, MutationKind, PlanConfig,
    SuperstepStats, UserProgram, VertexTuple,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn vertices(adj: &Adjacency) -> Vec<VertexTuple> {
    adj.iter()
        .map(|(&v, edges)| {
            let edges = edges
                .iter()
                .map(|&(d, w)| Edge::new(d, encode_f64(w).to_vec()))
                .collect();
            VertexTuple::new(v, vec![], edges)
        })
        .collect()
}

/// Random directed graph over `0..n` with about `m` edges, positive weights
/// and no self loops.
pub fn random_graph(seed: u64, n: u64, m: u64) -> Adjacency {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut adj: Adjacency = (0..n).map(|v| (v, Vec::new())).collect();
    if n < 2 {
        return adj;
    }
    for _ in 0..m {
        let s = rng.gen_range(0..n);
        let d = rng.gen_range(0..n);
        if s == d {
            continue;
        }
        let list = adj.get_mut(&s).unwrap();
        if list.iter().any(|&(x, _)| x == d) {
            continue;
        }
        let w = (rng.gen_range(0.01..10.0f64) * 100.0).round() / 100.0;
        list.push((d, w));
    }
    adj
}

pub struct Outcome {
    pub vertices: Vec<VertexTuple>,
    pub stats: Vec<SuperstepStats>,
    pub termination: Termination,
    pub recoveries: u32,
}

impl Outcome {
    pub fn leaf_reads_from(&self, superstep: u64) -> u64 {
        self.stats
            .iter()
            .filter(|s| s.superstep >= superstep)
            .map(|s| s.leaf_reads)
            .sum()
    }

    pub fn spill_bytes(&self) -> u64 {
        self.stats.iter().map(|s| s.spill_bytes).sum()
    }

    pub fn f64_values(&self) -> BTreeMap<u64, f64> {
        self.vertices
            .iter()
            .map(|v| (v.vid.0, decode_f64(&v.value).unwrap_or(f64::NAN)))
            .collect()
    }

    pub fn u64_values(&self) -> BTreeMap<u64, u64> {
        self.vertices
            .iter()
            .map(|v| (v.vid.0, decode_u64(&v.value).unwrap_or(u64::MAX)))
            .collect()
    }
}

pub struct RunOptions {
    pub workers: usize,
    pub buffer_cache_bytes: Option<usize>,
    pub groupby_bytes: Option<usize>,
    pub checkpoint_every: u64,
    pub failures: FailureInjector,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            workers: 4,
            buffer_cache_bytes: None,
            groupby_bytes: None,
            checkpoint_every: 0,
            failures: FailureInjector::default(),
        }
    }
}

pub fn run_with(
    dir: &Path,
    program: UserProgram,
    plan: PlanConfig,
    n: usize,
    vs: Vec<VertexTuple>,
    opts: RunOptions,
) -> dfpregel::Result<Outcome> {
    let mut cfg = EngineConfig::new(dir.join("work"));
    cfg.num_workers = opts.workers;
    cfg.buffer_cache_bytes = opts.buffer_cache_bytes;
    if let Some(g) = opts.groupby_bytes {
        cfg.groupby_bytes = g;
    }
    cfg.failures = opts.failures;
    let mut engine = Engine::load(program, plan, cfg, partition_vertices(vs, n))?;
    let (termination, recoveries, _) = drive(&mut engine, opts.checkpoint_every, None, 8)?;
    Ok(Outcome {
        vertices: engine.vertices()?,
        stats: engine.stats().to_vec(),
        termination,
        recoveries,
    })
}

pub fn run(program: UserProgram, plan: PlanConfig, n: usize, adj: &Adjacency) -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    run_with(dir.path(), program, plan, n, vertices(adj), RunOptions::default()).unwrap()
}

pub fn dijkstra(adj: &Adjacency, source: u64) -> BTreeMap<u64, f64> {
    let mut dist: BTreeMap<u64, f64> = adj.keys().map(|&v| (v, f64::INFINITY)).collect();
    if !dist.contains_key(&source) {
        return dist;
    }
    dist.insert(source, 0.0);
    let mut heap = BinaryHeap::new();
    heap.push(Reverse((OrdF64(0.0), source)));
    while let Some(Reverse((OrdF64(d), u))) = heap.pop() {
        if d > dist[&u] {
            continue;
        }
        for &(v, w) in &adj[&u] {
            let nd = d + w;
            if nd < dist[&v] {
                dist.insert(v, nd);
                heap.push(Reverse((OrdF64(nd), v)));
            }
        }
    }
    dist
}

#[derive(PartialEq, Clone, Copy)]
struct OrdF64(f64);

impl Eq for OrdF64 {}

impl PartialOrd for OrdF64 {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for OrdF64 {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&other.0)
    }
}

/// Component label = smallest vid in the component, via union-find.
pub fn union_find_labels(adj: &Adjacency) -> BTreeMap<u64, u64> {
    let ids: Vec<u64> = adj.keys().copied().collect();
    let index: HashMap<u64, usize> = ids.iter().enumerate().map(|(i, &v)| (v, i)).collect();
    let mut parent: Vec<usize> = (0..ids.len()).collect();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    for (&v, edges) in adj {
        for &(d, _) in edges {
            let (a, b) = (find(&mut parent, index[&v]), find(&mut parent, index[&d]));
            if a != b {
                let (lo, hi) = if ids[a] < ids[b] { (a, b) } else { (b, a) };
                parent[hi] = lo;
            }
        }
    }
    ids.iter()
        .map(|&v| {
            let r = find(&mut parent, index[&v]);
            (v, ids[r])
        })
        .collect()
}

/// Dense power iteration with uniform redistribution of dangling mass.
pub fn power_iteration(adj: &Adjacency, iterations: u64, damping: f64) -> BTreeMap<u64, f64> {
    let ids: Vec<u64> = adj.keys().copied().collect();
    let index: HashMap<u64, usize> = ids.iter().enumerate().map(|(i, &v)| (v, i)).collect();
    let n = ids.len() as f64;
    let mut r = vec![1.0 / n; ids.len()];
    for _ in 0..iterations {
        let dangling: f64 = ids
            .iter()
            .enumerate()
            .filter(|(_, v)| adj[v].is_empty())
            .map(|(i, _)| r[i])
            .sum();
        let mut incoming = vec![0.0; ids.len()];
        for (i, v) in ids.iter().enumerate() {
            let out = &adj[v];
            for &(d, _) in out {
                incoming[index[&d]] += r[i] / out.len() as f64;
            }
        }
        r = incoming
            .iter()
            .map(|s| (1.0 - damping) / n + damping * (s + dangling / n))
            .collect();
    }
    ids.into_iter().zip(r).collect()
}

pub fn max_abs_diff(a: &BTreeMap<u64, f64>, b: &BTreeMap<u64, f64>) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .map(|(k, x)| (x - b[k]).abs())
        .fold(0.0, f64::max)
}

pub fn max_rel_diff(a: &BTreeMap<u64, f64>, b: &BTreeMap<u64, f64>) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .map(|(k, x)| {
            let y = b[k];
            if x == &y {
                0.0
            } else {
                (x - y).abs() / x.abs().max(y.abs())
            }
        })
        .fold(0.0, f64::max)
}

/// Single-threaded application of a mutation script: every vertex present
/// at the start of a superstep issues its scripted mutations, then each
/// vid's group is resolved (one delete, then the largest insert).
pub fn reference_mutations(
    initial: &BTreeMap<u64, u64>,
    script: &MutationScript,
) -> BTreeMap<u64, u64> {
    let mut state = initial.clone();
    for list in script.values() {
        let mut groups: BTreeMap<u64, Vec<dfpregel::Mutation>> = BTreeMap::new();
        for (issuer, m) in list {
            if state.contains_key(&issuer.0) {
                groups.entry(m.vid().0).or_default().push(m.clone());
            }
        }
        for (vid, group) in groups {
            for m in resolve_largest_insert(group) {
                match m.kind {
                    MutationKind::Delete => {
                        state.remove(&vid);
                    }
                    MutationKind::Insert => {
                        state.insert(vid, decode_u64(&m.vertex.value).unwrap());
                    }
                }
            }
        }
    }
    state
}
