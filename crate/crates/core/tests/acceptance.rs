mod common;

use std::collections::{BTreeMap, HashMap};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Instant;

use common::{
    dijkstra, max_abs_diff, max_rel_diff, power_iteration, reference_mutations, run, run_with,
    union_find_labels, vertices, Outcome, RunOptions,
};
use dfpregel::algorithms::{
    cc_program, mutation_program, pagerank_program, sssp_program, MutationScript,
};
use dfpregel::ft::{FailureInjector, InjectedFailure};
use dfpregel::graphio::{gen_graph, symmetrize, Adjacency, GraphKind};
use dfpregel::ops::groupby::{preclustered_group_by, SpillingGroupBy, Strategy};
use dfpregel::ops::{mton_partition, mton_partition_merge, Join, PlanConfig, Storage};
use dfpregel::storage::{BufferCache, IndexOptions, VertexIndex};
use dfpregel::{Combiner, Error, Mutation, UserProgram, VertexId, VertexTuple};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

enum Verdict {
    Pass(String),
    Fail(String),
    Unverified(String),
}

type Check = fn() -> Verdict;

fn ensure(ok: bool, detail: String) -> Verdict {
    if ok {
        Verdict::Pass(detail)
    } else {
        Verdict::Fail(detail)
    }
}

fn main() -> ExitCode {
    let checks: [(&str, Check); 9] = [
        ("1 plan equivalence", plan_equivalence),
        ("2 oracle correctness", oracle_correctness),
        ("3 out-of-core transparency", out_of_core),
        ("4 join-strategy direction", join_direction),
        ("5 crash recovery", crash_recovery),
        ("6 group-by strategy equivalence", group_by_equivalence),
        ("7 storage oracle", storage_oracle),
        ("8 mutation semantics", mutation_semantics),
        ("9 speedup sanity", speedup),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = false;
    for (name, check) in checks {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let verdict = catch_unwind(AssertUnwindSafe(check))
            .unwrap_or_else(|p| Verdict::Fail(format!("panicked: {}", panic_text(&p))));
        let secs = start.elapsed().as_secs_f64();
        let (tag, detail) = match verdict {
            Verdict::Pass(d) => ("PASS", d),
            Verdict::Fail(d) => {
                failed = true;
                ("FAIL", d)
            }
            Verdict::Unverified(d) => ("UNVERIFIED", d),
        };
        println!("{tag} [{name}] {detail} ({secs:.1}s)");
    }
    if failed {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}

fn panic_text(p: &Box<dyn std::any::Any + Send>) -> String {
    p.downcast_ref::<String>()
        .cloned()
        .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
        .unwrap_or_default()
}

fn pagerank(iterations: u64) -> UserProgram {
    pagerank_program(iterations, 0.85).unwrap()
}

fn plan_equivalence() -> Verdict {
    let parts = [1usize, 2, 4, 8];
    let plans = PlanConfig::all();
    let mut worst = 0.0f64;
    for g in 0..20u64 {
        let n = (100.0 * 100f64.powf(g as f64 / 19.0)).round() as u64;
        let seed = 1000 + g;
        let adj = gen_graph(GraphKind::Uniform, n, 4, seed, false);
        let mut sym = adj.clone();
        symmetrize(&mut sym);
        let p = parts[g as usize % 4];
        let source = VertexId(seed % n);

        let sssp0 = run(sssp_program(source), plans[0], p, &adj);
        let cc0 = run(cc_program(), plans[0], p, &sym);
        let pr0 = run(pagerank(5), plans[0], p, &adj);
        for plan in &plans[1..] {
            if run(sssp_program(source), *plan, p, &adj).vertices != sssp0.vertices {
                return Verdict::Fail(format!("sssp differs: n={n} p={p} plan={plan}"));
            }
            if run(cc_program(), *plan, p, &sym).vertices != cc0.vertices {
                return Verdict::Fail(format!("cc differs: n={n} p={p} plan={plan}"));
            }
            let d = max_rel_diff(&run(pagerank(5), *plan, p, &adj).f64_values(), &pr0.f64_values());
            worst = worst.max(d);
            if d > 1e-9 {
                return Verdict::Fail(format!("pagerank rel diff {d:e}: n={n} p={p} plan={plan}"));
            }
        }
    }
    Verdict::Pass(format!("20 graphs x 16 plans, max pagerank rel diff {worst:e}"))
}

fn oracle_correctness() -> Verdict {
    let plans = PlanConfig::all();
    let mut worst = 0.0f64;
    for i in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(7 + i);
        let n = rng.gen_range(1..=1000u64);
        let adj = common::random_graph(rng.gen(), n, n * rng.gen_range(0..6));
        let plan = plans[i as usize % plans.len()];
        let p = 1 + i as usize % 4;

        let source = rng.gen_range(0..n);
        let got = run(sssp_program(VertexId(source)), plan, p, &adj).f64_values();
        if got != dijkstra(&adj, source) {
            return Verdict::Fail(format!("sssp instance {i} ({plan})"));
        }

        let mut sym = adj.clone();
        symmetrize(&mut sym);
        if run(cc_program(), plan, p, &sym).u64_values() != union_find_labels(&sym) {
            return Verdict::Fail(format!("cc instance {i} ({plan})"));
        }

        let iters = rng.gen_range(1..=20);
        let got = run(pagerank(iters), plan, p, &adj).f64_values();
        let d = max_abs_diff(&got, &power_iteration(&adj, iters, 0.85));
        worst = worst.max(d);
        if d > 1e-12 {
            return Verdict::Fail(format!("pagerank instance {i} ({plan}) diff {d:e}"));
        }
    }
    Verdict::Pass(format!("50 instances each, max pagerank abs diff {worst:e}"))
}

fn out_of_core() -> Verdict {
    let adj = gen_graph(GraphKind::Uniform, 60_000, 8, 42, false);
    let vs = vertices(&adj);
    let graph_bytes: usize = vs.iter().map(|v| v.body_len()).sum();
    let cache = 512 * 1024;
    if graph_bytes < 16 * cache {
        return Verdict::Fail(format!("graph only {graph_bytes} bytes"));
    }
    let mut details = Vec::new();
    for plan in [
        PlanConfig::default(),
        PlanConfig::all().into_iter().find(|p| p.storage == Storage::Lsm && p.merging()).unwrap(),
    ] {
        let dir = tempfile::tempdir().unwrap();
        let reference = run_with(dir.path(), pagerank(10), plan, 4, vs.clone(), RunOptions::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let opts = RunOptions {
            buffer_cache_bytes: Some(cache),
            groupby_bytes: Some(256 * 1024),
            ..Default::default()
        };
        let bounded = run_with(dir.path(), pagerank(10), plan, 4, vs.clone(), opts).unwrap();
        let d = max_rel_diff(&bounded.f64_values(), &reference.f64_values());
        let spill = bounded.spill_bytes();
        if d > 1e-9 || spill == 0 {
            return Verdict::Fail(format!("{plan}: rel diff {d:e}, spillBytes {spill}"));
        }
        details.push(format!("{plan}: spill {spill}B diff {d:e}"));
    }
    Verdict::Pass(format!(
        "graph {graph_bytes}B vs cache {cache}B ({}x); {}",
        graph_bytes / cache,
        details.join("; ")
    ))
}

/// Vertices in `layers` layers of `width`; each vertex links to three
/// vertices of the next layer, so the diameter is `layers - 1`.
fn layered(layers: u64, width: u64, seed: u64) -> Adjacency {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut adj = Adjacency::new();
    for l in 0..layers {
        for i in 0..width {
            let v = l * width + i;
            let mut out = Vec::new();
            if l + 1 < layers {
                for _ in 0..3 {
                    let d = (l + 1) * width + rng.gen_range(0..width);
                    if !out.iter().any(|&(x, _)| x == d) {
                        out.push((d, rng.gen_range(1..100) as f64 / 10.0));
                    }
                }
            }
            adj.insert(v, out);
        }
    }
    adj
}

fn join_plan(join: Join) -> PlanConfig {
    PlanConfig { join, storage: Storage::BTree, ..PlanConfig::default() }
}

fn join_direction() -> Verdict {
    let adj = layered(25, 4000, 3);
    let vs = vertices(&adj);
    let go = |program: UserProgram, join: Join| -> Outcome {
        let dir = tempfile::tempdir().unwrap();
        run_with(dir.path(), program, join_plan(join), 4, vs.clone(), RunOptions::default()).unwrap()
    };
    let full = go(sssp_program(VertexId(0)), Join::FullOuter);
    let left = go(sssp_program(VertexId(0)), Join::LeftOuter);
    if full.vertices != left.vertices {
        return Verdict::Fail("sssp results differ between joins".into());
    }
    let (f, l) = (full.leaf_reads_from(3), left.leaf_reads_from(3));
    let pf = go(pagerank(10), Join::FullOuter).leaf_reads_from(1);
    let pl = go(pagerank(10), Join::LeftOuter).leaf_reads_from(1);
    ensure(
        (l as f64) < 0.1 * f as f64 && pf <= pl,
        format!(
            "sssp leaf reads ss>=3 left {l} / full {f} = {:.3}; pagerank full {pf} <= left {pl}",
            l as f64 / f.max(1) as f64
        ),
    )
}

fn crash_recovery() -> Verdict {
    let adj = gen_graph(GraphKind::Uniform, 3000, 3, 77, false);
    let mut sym = gen_graph(GraphKind::Uniform, 3000, 1, 78, false);
    symmetrize(&mut sym);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let plan = PlanConfig::default();
    let programs: [(&str, fn() -> UserProgram, &Adjacency); 3] = [
        ("sssp", || sssp_program(VertexId(0)), &adj),
        ("cc", cc_program, &sym),
        ("pagerank", || pagerank(8), &adj),
    ];
    let mut runs = Vec::new();
    for (name, program, graph) in programs {
        let dir = tempfile::tempdir().unwrap();
        let clean = run_with(dir.path(), program(), plan, 4, vertices(graph), RunOptions::default()).unwrap();
        let last = clean.stats.len() as u64;
        for every in [1u64, 2, 5] {
            if last <= every {
                return Verdict::Fail(format!("{name} too short for every={every}"));
            }
            let at = rng.gen_range(every + 1..=last);
            let worker = rng.gen_range(0..4);
            let dir = tempfile::tempdir().unwrap();
            let opts = RunOptions {
                checkpoint_every: every,
                failures: FailureInjector::new([InjectedFailure { worker, superstep: at }]),
                ..Default::default()
            };
            let failed = run_with(dir.path(), program(), plan, 4, vertices(graph), opts).unwrap();
            let same = if name == "pagerank" {
                max_rel_diff(&failed.f64_values(), &clean.f64_values()) <= 1e-9
            } else {
                failed.vertices == clean.vertices
            };
            if !same || failed.recoveries != 1 {
                return Verdict::Fail(format!("{name} every={every} fail@{at}: recoveries {}", failed.recoveries));
            }
            runs.push(format!("{name}/{every}@{at}"));
        }
    }
    let dir = tempfile::tempdir().unwrap();
    let opts = RunOptions {
        checkpoint_every: 2,
        failures: FailureInjector::new([InjectedFailure { worker: 1, superstep: 1 }]),
        ..Default::default()
    };
    match run_with(dir.path(), sssp_program(VertexId(0)), plan, 4, vertices(&adj), opts) {
        Err(e @ Error::NoCheckpoint(_)) => Verdict::Pass(format!("{}; early failure: {e}", runs.join(" "))),
        Err(e) => Verdict::Fail(format!("early failure gave {e}")),
        Ok(_) => Verdict::Fail("early failure did not fail the job".into()),
    }
}

fn sum_u64() -> Arc<dyn Combiner> {
    Arc::new(|acc: &mut Vec<u8>, next: &[u8]| {
        let a = u64::from_be_bytes(acc[..8].try_into().unwrap());
        let b = u64::from_be_bytes(next[..8].try_into().unwrap());
        *acc = a.wrapping_add(b).to_be_bytes().to_vec();
    })
}

fn group_by_equivalence() -> Verdict {
    const BUDGET: usize = 1 << 20;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let producers: Vec<Vec<(VertexId, Vec<u8>)>> = (0..4)
        .map(|_| {
            (0..250_000)
                .map(|_| {
                    let vid = VertexId(rng.gen_range(0..200_000u64));
                    (vid, rng.gen_range(0..1000u64).to_be_bytes().to_vec())
                })
                .collect()
        })
        .collect();
    let mut oracle: HashMap<u64, u64> = HashMap::new();
    for (vid, p) in producers.iter().flatten() {
        *oracle.entry(vid.0).or_default() += u64::from_be_bytes(p[..8].try_into().unwrap());
    }
    let oracle: BTreeMap<u64, u64> = oracle.into_iter().collect();

    let tmp = tempfile::tempdir().unwrap();
    let mut details = Vec::new();
    for strategy in [Strategy::Sort, Strategy::HashSort] {
        let mut min_runs = usize::MAX;
        let mut sender_out = Vec::new();
        for (i, input) in producers.iter().enumerate() {
            let dir = tmp.path().join(format!("{strategy:?}-{i}"));
            std::fs::create_dir_all(&dir).unwrap();
            let mut g = SpillingGroupBy::new(strategy, sum_u64(), BUDGET, &dir);
            for (vid, p) in input {
                g.push(*vid, p).unwrap();
            }
            let grouped = g.finish().unwrap();
            min_runs = min_runs.min(grouped.runs());
            sender_out.push(grouped.collect::<dfpregel::Result<Vec<_>>>().unwrap());
        }
        if strategy == Strategy::Sort && min_runs < 4 {
            return Verdict::Fail(format!("sort produced only {min_runs} runs"));
        }

        for merging in [false, true] {
            let consumers = if merging {
                let dir = tmp.path().join(format!("{strategy:?}-merge"));
                std::fs::create_dir_all(&dir).unwrap();
                let streams = mton_partition_merge(sender_out.clone(), 4, &dir).unwrap();
                streams.into_iter().map(|s| preclustered_group_by(s, sum_u64()).unwrap()).collect::<Vec<_>>()
            } else {
                let streams = mton_partition(sender_out.clone(), 4).unwrap();
                streams
                    .into_iter()
                    .enumerate()
                    .map(|(c, s)| {
                        let dir = tmp.path().join(format!("{strategy:?}-recv-{c}"));
                        std::fs::create_dir_all(&dir).unwrap();
                        let mut g = SpillingGroupBy::new(strategy, sum_u64(), BUDGET, &dir);
                        for (vid, p) in s {
                            g.push(vid, &p).unwrap();
                        }
                        g.finish().unwrap().collect::<dfpregel::Result<Vec<_>>>().unwrap()
                    })
                    .collect()
            };
            let mut got = BTreeMap::new();
            for stream in consumers {
                if stream.windows(2).any(|w| w[0].0 >= w[1].0) {
                    return Verdict::Fail(format!("{strategy:?} merging={merging}: output not grouped"));
                }
                for (vid, p) in stream {
                    if got.insert(vid.0, u64::from_be_bytes(p[..8].try_into().unwrap())).is_some() {
                        return Verdict::Fail(format!("{strategy:?}: vid {vid:?} on two consumers"));
                    }
                }
            }
            if got != oracle {
                return Verdict::Fail(format!("{strategy:?} merging={merging} differs from oracle"));
            }
            let connector = if merging { "merge" } else { "pipelined" };
            details.push(format!("{strategy:?}/{connector}"));
        }
        if strategy == Strategy::Sort {
            details.push(format!("sort runs >= {min_runs}"));
        }
    }
    Verdict::Pass(format!("10^6 tuples, 1 MB budget: {}", details.join(", ")))
}

fn storage_oracle() -> Verdict {
    let mut details = Vec::new();
    for mode in [Storage::BTree, Storage::Lsm] {
        let dir = tempfile::tempdir().unwrap();
        let opts = IndexOptions {
            mode,
            cache: BufferCache::new(32),
            dir: dir.path().to_path_buf(),
            lsm_mem_budget: 16 * 1024,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(mode as u64 + 1);
        let mut oracle: BTreeMap<u64, VertexTuple> = BTreeMap::new();
        for v in 0..2000u64 {
            oracle.insert(v * 3, VertexTuple::new(v * 3, vec![v as u8; 5], vec![]));
        }
        let mut index = VertexIndex::bulk_load(&opts, oracle.values().cloned().map(Ok)).unwrap();
        let (mut flushes, mut merges) = (0, 0);
        for op in 0..100_000u32 {
            let vid = rng.gen_range(0..10_000u64);
            match rng.gen_range(0..10) {
                0..=3 => {
                    let len = rng.gen_range(0..40);
                    let v = VertexTuple::new(vid, vec![rng.gen(); len], vec![]);
                    index.upsert(&v).unwrap();
                    oracle.insert(vid, v);
                }
                4..=5 => {
                    index.delete(VertexId(vid)).unwrap();
                    oracle.remove(&vid);
                }
                _ => {
                    if index.lookup(VertexId(vid)).unwrap().as_ref() != oracle.get(&vid) {
                        return Verdict::Fail(format!("{mode:?}: lookup {vid} at op {op}"));
                    }
                }
            }
            if mode == Storage::Lsm && op % 7919 == 0 {
                index.lsm_flush().unwrap();
                flushes += 1;
            }
            if mode == Storage::Lsm && op % 25_013 == 0 {
                index.lsm_merge().unwrap();
                merges += 1;
            }
            if op % 20_000 == 19_999 {
                let all = index.scan_all().unwrap();
                if all.len() != oracle.len() || all.iter().zip(oracle.values()).any(|(a, b)| a != b) {
                    return Verdict::Fail(format!("{mode:?}: scan differs at op {op}"));
                }
            }
        }
        let all = index.scan_all().unwrap();
        if !all.iter().eq(oracle.values()) {
            return Verdict::Fail(format!("{mode:?}: final scan differs"));
        }
        details.push(format!("{mode:?} ok ({flushes} flushes, {merges} merges)"));
    }
    Verdict::Pass(format!("10^5 ops: {}", details.join(", ")))
}

fn mutation_semantics() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let plans = PlanConfig::all();
    let vertex = |vid: u64, value: u64| VertexTuple::new(vid, value.to_be_bytes().to_vec(), vec![]);
    let mut delete_then_insert = 0;
    for i in 0..200 {
        let initial: BTreeMap<u64, u64> =
            (0..rng.gen_range(0..40)).map(|_| (rng.gen_range(0..50), rng.gen_range(0..1000))).collect();
        let mut script = MutationScript::new();
        for s in 1..=rng.gen_range(1..5u64) {
            let list: Vec<_> = (0..rng.gen_range(0..30))
                .map(|_| {
                    let issuer = VertexId(rng.gen_range(0..50));
                    let vid = rng.gen_range(0..50);
                    let m = if rng.gen_bool(0.4) {
                        Mutation::delete(vid)
                    } else {
                        Mutation::insert(vertex(vid, rng.gen_range(0..1000)))
                    };
                    (issuer, m)
                })
                .collect();
            let mut kinds: HashMap<u64, (bool, bool)> = HashMap::new();
            for (_, m) in &list {
                let e = kinds.entry(m.vid().0).or_default();
                match m.kind {
                    dfpregel::MutationKind::Delete => e.0 = true,
                    dfpregel::MutationKind::Insert => e.1 = true,
                }
            }
            delete_then_insert += kinds.values().filter(|(d, i)| *d && *i).count();
            script.insert(s, list);
        }
        let want = reference_mutations(&initial, &script);
        let dir = tempfile::tempdir().unwrap();
        let vs = initial.iter().map(|(&v, &x)| vertex(v, x)).collect();
        let plan = plans[i % plans.len()];
        let out = run_with(dir.path(), mutation_program(script), plan, 1 + i % 4, vs, RunOptions::default()).unwrap();
        if out.u64_values() != want {
            return Verdict::Fail(format!("script {i} ({plan}) differs from reference"));
        }
    }
    Verdict::Pass(format!("200 scripts, {delete_then_insert} delete+insert groups"))
}

fn speedup() -> Verdict {
    let adj = gen_graph(GraphKind::Uniform, 100_000, 8, 8, false);
    let vs = vertices(&adj);
    let time = |n: usize| {
        let dir = tempfile::tempdir().unwrap();
        let opts = RunOptions { workers: n, ..Default::default() };
        let start = Instant::now();
        let out = run_with(dir.path(), pagerank(10), PlanConfig::default(), n, vs.clone(), opts).unwrap();
        (start.elapsed().as_secs_f64(), out)
    };
    let (t1, o1) = time(1);
    let (t8, o8) = time(8);
    if max_rel_diff(&o1.f64_values(), &o8.f64_values()) > 1e-9 {
        return Verdict::Fail("results differ between 1 and 8 partitions".into());
    }
    let cores = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    let detail = format!("1 partition {t1:.2}s, 8 partitions {t8:.2}s, ratio {:.2}, {cores} cores", t8 / t1);
    if cores < 8 {
        Verdict::Unverified(format!("{detail}; needs >= 8 cores"))
    } else {
        ensure(t8 <= 0.5 * t1, detail)
    }
}
