use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::thread::ScopedJoinHandle;
use std::time::Instant;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use crossbeam_channel::{bounded, Receiver, Select, Sender};
use serde::{Deserialize, Serialize};

use crate::api::{
    default_resolve, halt_contribution, singleton_list, Aggregator, Combiner, ComputeInput, GlobalState, Mutation,
    MutationKind, Resolver, UserProgram, VertexId, VertexTuple,
};
use crate::error::{Error, Result};
use crate::ft::FailureInjector;
use crate::ops::connector::{
    channel, materialized_lane, merge_receiver, receive_pipelined, Frame, Outbox, CHANNEL_BATCHES,
};
use crate::ops::groupby::{Preclustered, SpillingGroupBy};
use crate::ops::join::{index_full_outer_join, index_left_outer_join, merge_msg_vid, JoinRow};
use crate::ops::{partition_fn, Join, PlanConfig, Storage};
use crate::runtime::plan::{generate_plan, PartitionMap};
use crate::storage::{
    BufferCache, IndexOptions, MsgReader, MsgWriter, RunFile, VertexIndex, VidIndex, PAGE_SIZE,
};

pub const GS_FILE: &str = "gs.json";
pub const DEFAULT_GROUPBY_BYTES: usize = 64 << 20;

const MUTATION_BATCH: usize = 256;
const UNBOUNDED_LSM_BUDGET: usize = 32 << 20;

/// Counters of one executed superstep.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct SuperstepStats {
    pub superstep: u64,
    pub live_vertices: u64,
    pub total_vertices: u64,
    pub messages: u64,
    pub combined_messages: u64,
    pub leaf_reads: u64,
    pub spill_bytes: u64,
    pub channel_bytes: u64,
    pub wall_millis: u64,
}

impl SuperstepStats {
    pub const CSV_HEADER: &'static str =
        "superstep,liveVertices,messages,combinedMessages,leafReads,spillBytes,channelBytes,wallMillis";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.superstep,
            self.live_vertices,
            self.messages,
            self.combined_messages,
            self.leaf_reads,
            self.spill_bytes,
            self.channel_bytes,
            self.wall_millis
        )
    }
}

#[derive(Debug, Clone)]
pub struct EngineConfig {
    pub workdir: PathBuf,
    /// Defaults to `<workdir>/ckpt`.
    pub checkpoint_dir: Option<PathBuf>,
    pub num_workers: usize,
    /// `None` means an unbounded buffer cache.
    pub buffer_cache_bytes: Option<usize>,
    /// Memory budget of each group-by instance.
    pub groupby_bytes: usize,
    /// Memory component budget per LSM partition; derived from the cache
    /// size when unset.
    pub lsm_mem_bytes: Option<usize>,
    pub failures: FailureInjector,
    pub max_recoveries: u32,
}

impl EngineConfig {
    pub fn new(workdir: impl Into<PathBuf>) -> Self {
        EngineConfig {
            workdir: workdir.into(),
            checkpoint_dir: None,
            num_workers: std::thread::available_parallelism().map_or(1, |n| n.get()),
            buffer_cache_bytes: None,
            groupby_bytes: DEFAULT_GROUPBY_BYTES,
            lsm_mem_bytes: None,
            failures: FailureInjector::default(),
            max_recoveries: 8,
        }
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.checkpoint_dir
            .clone()
            .unwrap_or_else(|| self.workdir.join("ckpt"))
    }

    fn lsm_budget(&self, partitions: usize) -> usize {
        self.lsm_mem_bytes.unwrap_or_else(|| match self.buffer_cache_bytes {
            Some(b) => (b / 4 / partitions.max(1)).max(4 * PAGE_SIZE),
            None => UNBOUNDED_LSM_BUDGET / partitions.max(1),
        })
    }
}

/// The durable form of the global state, as kept in `gs.json` and in
/// checkpoint manifests.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GsRecord {
    pub halt: bool,
    pub aggregate: Option<String>,
    pub superstep: u64,
}

impl From<&GlobalState> for GsRecord {
    fn from(gs: &GlobalState) -> Self {
        GsRecord {
            halt: gs.halt,
            aggregate: gs.aggregate.as_ref().map(|a| B64.encode(a)),
            superstep: gs.superstep,
        }
    }
}

impl TryFrom<GsRecord> for GlobalState {
    type Error = Error;

    fn try_from(r: GsRecord) -> Result<Self> {
        let aggregate = r
            .aggregate
            .map(|a| B64.decode(a))
            .transpose()
            .map_err(|e| Error::corrupt(format!("bad aggregate encoding: {e}")))?;
        Ok(GlobalState {
            halt: r.halt,
            aggregate,
            superstep: r.superstep,
        })
    }
}

pub fn write_gs(workdir: &Path, gs: &GlobalState) -> Result<()> {
    let tmp = workdir.join(format!("{GS_FILE}.tmp"));
    let json = serde_json::to_vec_pretty(&GsRecord::from(gs))
        .map_err(|e| Error::corrupt(e.to_string()))?;
    fs::write(&tmp, json)?;
    fs::rename(&tmp, workdir.join(GS_FILE))?;
    Ok(())
}

pub fn read_gs(workdir: &Path) -> Result<GlobalState> {
    let bytes = fs::read(workdir.join(GS_FILE))?;
    let rec: GsRecord =
        serde_json::from_slice(&bytes).map_err(|e| Error::corrupt(e.to_string()))?;
    rec.try_into()
}

/// A mutation tagged with its origin so a vid's group can be put in a
/// deterministic order before resolve.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StampedMutation {
    pub origin: usize,
    pub seq: u64,
    pub mutation: Mutation,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MutationEffect {
    /// False when an active vertex was inserted.
    pub halt_and: bool,
    pub inserted: u64,
    pub deleted: u64,
    pub live_delta: i64,
    pub total_delta: i64,
}

pub fn part_dir(workdir: &Path, partition: usize) -> PathBuf {
    workdir.join(format!("part-{partition}"))
}

/// One partition of the Vertex, Msg and Vid relations.
pub struct Partition {
    pub(crate) id: usize,
    pub(crate) dir: PathBuf,
    pub(crate) index: VertexIndex,
    pub(crate) vid: Option<VidIndex>,
    pub(crate) total: u64,
    pub(crate) live: u64,
}

impl Partition {
    pub(crate) fn msg_path(&self, superstep: u64) -> PathBuf {
        self.dir.join(format!("msg-{superstep}.dat"))
    }

    pub(crate) fn tmp_dir(&self) -> PathBuf {
        self.dir.join("tmp")
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn index(&self) -> &VertexIndex {
        &self.index
    }

    pub fn vid_index(&self) -> Option<&VidIndex> {
        self.vid.as_ref()
    }

    pub fn vertex_count(&self) -> u64 {
        self.total
    }
}

pub(crate) struct PartitionSeed<V, A> {
    pub vertices: V,
    /// Active vids for the left outer join plan; derived from `vertices`
    /// when absent.
    pub active: Option<A>,
}

/// Executes supersteps over a set of loaded partitions.
pub struct Engine {
    pub(crate) program: UserProgram,
    pub(crate) plan: PlanConfig,
    pub(crate) n: usize,
    pub(crate) cfg: EngineConfig,
    pub(crate) cache: BufferCache,
    pub(crate) pmap: PartitionMap,
    pub(crate) parts: Vec<Partition>,
    pub(crate) gs: GlobalState,
    pub(crate) blacklist: BTreeSet<usize>,
    pub(crate) stats: Vec<SuperstepStats>,
}

impl std::fmt::Debug for Engine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Engine")
            .field("program", &self.program.name)
            .field("plan", &self.plan)
            .field("partitions", &self.n)
            .field("gs", &self.gs)
            .finish()
    }
}

struct StepCtx<'a> {
    program: &'a UserProgram,
    plan: PlanConfig,
    gs: &'a GlobalState,
    n: usize,
    groupby_bytes: usize,
    combiner: Arc<dyn Combiner>,
    listed: bool,
    cache: &'a BufferCache,
}

#[derive(Default)]
struct ProducerReport {
    halt_and: bool,
    aggregate: Option<Vec<u8>>,
    messages: u64,
    live: u64,
    created: u64,
    channel_bytes: u64,
    spill_bytes: u64,
}

struct ConsumerReport {
    combined: u64,
    spill_bytes: u64,
}

enum MutFrame {
    Batch(Vec<StampedMutation>),
    End,
}

struct MutationOutbox {
    txs: Vec<Sender<MutFrame>>,
    bufs: Vec<Vec<StampedMutation>>,
    origin: usize,
    seq: u64,
}

impl MutationOutbox {
    fn new(txs: Vec<Sender<MutFrame>>, origin: usize) -> Self {
        let n = txs.len();
        MutationOutbox {
            txs,
            bufs: (0..n).map(|_| Vec::new()).collect(),
            origin,
            seq: 0,
        }
    }

    fn send(&mut self, mutation: Mutation) -> Result<()> {
        let c = partition_fn(mutation.vid(), self.txs.len());
        self.bufs[c].push(StampedMutation {
            origin: self.origin,
            seq: self.seq,
            mutation,
        });
        self.seq += 1;
        if self.bufs[c].len() >= MUTATION_BATCH {
            let batch = std::mem::take(&mut self.bufs[c]);
            self.txs[c]
                .send(MutFrame::Batch(batch))
                .map_err(|_| Error::ChannelClosed)?;
        }
        Ok(())
    }

    fn finish(mut self) -> Result<()> {
        for (tx, buf) in self.txs.iter().zip(std::mem::take(&mut self.bufs)) {
            if !buf.is_empty() {
                tx.send(MutFrame::Batch(buf)).map_err(|_| Error::ChannelClosed)?;
            }
            tx.send(MutFrame::End).map_err(|_| Error::ChannelClosed)?;
        }
        Ok(())
    }
}

fn collect_mutations(rxs: &[Receiver<MutFrame>]) -> Result<Vec<StampedMutation>> {
    let mut open = vec![true; rxs.len()];
    let mut remaining = rxs.len();
    let mut out = Vec::new();
    while remaining > 0 {
        let mut sel = Select::new();
        let mut index = Vec::with_capacity(remaining);
        for (i, rx) in rxs.iter().enumerate() {
            if open[i] {
                sel.recv(rx);
                index.push(i);
            }
        }
        let op = sel.select();
        let i = index[op.index()];
        match op.recv(&rxs[i]) {
            Ok(MutFrame::Batch(b)) => out.extend(b),
            Ok(MutFrame::End) => {
                open[i] = false;
                remaining -= 1;
            }
            Err(_) => return Err(Error::ChannelClosed),
        }
    }
    Ok(out)
}

/// Folds one value into a running aggregate.
pub fn fold_aggregate(acc: &mut Option<Vec<u8>>, next: &[u8], agg: &dyn Aggregator) {
    match acc {
        Some(a) => agg.aggregate(a, next),
        None => *acc = Some(next.to_vec()),
    }
}

/// Stage one folds each partition's contributions, stage two folds the
/// partials in partition order.
pub fn two_stage_aggregate(per_partition: &[Vec<Vec<u8>>], agg: &dyn Aggregator) -> Option<Vec<u8>> {
    let mut global = None;
    for contributions in per_partition {
        let mut partial = None;
        for c in contributions {
            fold_aggregate(&mut partial, c, agg);
        }
        if let Some(p) = partial {
            fold_aggregate(&mut global, &p, agg);
        }
    }
    global
}

/// The job ends when every vertex voted to halt and nothing is in flight.
pub fn evaluate_termination(halt_and: bool, msg_count: u64) -> bool {
    halt_and && msg_count == 0
}

fn udf_error(partition: usize, vid: VertexId, message: impl Into<String>) -> Error {
    Error::Udf {
        partition,
        vid,
        message: message.into(),
    }
}

fn panic_message(p: Box<dyn std::any::Any + Send>) -> String {
    if let Some(s) = p.downcast_ref::<&str>() {
        format!("panicked: {s}")
    } else if let Some(s) = p.downcast_ref::<String>() {
        format!("panicked: {s}")
    } else {
        "panicked".to_string()
    }
}

/// Groups mutations by vid, orders each group by origin stamp, resolves it
/// and applies the result with deletions ahead of insertions.
pub fn apply_mutations(
    index: &mut VertexIndex,
    vids: Option<&VidIndex>,
    partition: usize,
    mutations: Vec<StampedMutation>,
    resolve: Option<&dyn Resolver>,
) -> Result<MutationEffect> {
    let mut effect = MutationEffect {
        halt_and: true,
        ..Default::default()
    };
    let mut groups: BTreeMap<VertexId, Vec<StampedMutation>> = BTreeMap::new();
    for m in mutations {
        groups.entry(m.mutation.vid()).or_default().push(m);
    }
    for (vid, mut group) in groups {
        group.sort_by_key(|m| (m.origin, m.seq));
        let group: Vec<Mutation> = group.into_iter().map(|m| m.mutation).collect();
        let resolved = match resolve {
            Some(r) => catch_unwind(AssertUnwindSafe(|| r.resolve(vid, group)))
                .map_err(|p| udf_error(partition, vid, format!("resolve {}", panic_message(p))))?
                .map_err(|e| udf_error(partition, vid, format!("resolve: {e}")))?,
            None => default_resolve(group),
        };
        if let Some(bad) = resolved.iter().find(|m| m.vid() != vid) {
            return Err(udf_error(
                partition,
                vid,
                format!("resolve returned a mutation for vid {}", bad.vid()),
            ));
        }
        let (deletes, inserts): (Vec<_>, Vec<_>) = resolved
            .into_iter()
            .partition(|m| m.kind == MutationKind::Delete);
        for _ in deletes {
            if let Some(old) = index.lookup(vid)? {
                index.delete(vid)?;
                effect.deleted += 1;
                effect.total_delta -= 1;
                if !old.halt {
                    effect.live_delta -= 1;
                }
                if let Some(v) = vids {
                    v.remove(vid)?;
                }
            }
        }
        for m in inserts {
            let v = m.vertex;
            match index.lookup(vid)? {
                Some(old) if !old.halt => effect.live_delta -= 1,
                Some(_) => {}
                None => effect.total_delta += 1,
            }
            index.upsert(&v)?;
            effect.inserted += 1;
            if !v.halt {
                effect.live_delta += 1;
                effect.halt_and = false;
            }
            if let Some(ix) = vids {
                if v.halt {
                    ix.remove(vid)?;
                } else {
                    ix.insert(vid)?;
                }
            }
        }
    }
    Ok(effect)
}

impl Engine {
    /// Bulk loads vid-sorted partitions and prepares superstep 1.
    pub fn load(
        program: UserProgram,
        plan: PlanConfig,
        cfg: EngineConfig,
        partitions: Vec<Vec<VertexTuple>>,
    ) -> Result<Self> {
        let n = partitions.len();
        let mut engine = Self::empty(program, plan, n, cfg)?;
        engine.reset_dirs()?;
        for (k, vs) in partitions.into_iter().enumerate() {
            let seed: PartitionSeed<_, std::iter::Empty<Result<VertexId>>> = PartitionSeed {
                vertices: vs.into_iter().map(Ok),
                active: None,
            };
            let part = engine.build_partition(k, seed)?;
            engine.parts.push(part);
        }
        let total: u64 = engine.parts.iter().map(|p| p.total).sum();
        engine.gs = GlobalState {
            halt: total == 0,
            aggregate: None,
            superstep: 1,
        };
        write_gs(&engine.cfg.workdir, &engine.gs)?;
        Ok(engine)
    }

    pub(crate) fn empty(
        program: UserProgram,
        plan: PlanConfig,
        n: usize,
        cfg: EngineConfig,
    ) -> Result<Self> {
        if n == 0 {
            return Err(Error::Validation(vec!["numPartitions must be ≥ 1".to_string()]));
        }
        plan.validate().map_err(|e| Error::Validation(vec![e]))?;
        let workers: BTreeSet<usize> = (0..cfg.num_workers.max(1)).collect();
        let pmap = PartitionMap::round_robin(n, &workers)?;
        fs::create_dir_all(&cfg.workdir)?;
        Ok(Engine {
            program,
            plan: plan.canonical(),
            n,
            cache: BufferCache::with_bytes(cfg.buffer_cache_bytes),
            cfg,
            pmap,
            parts: Vec::new(),
            gs: GlobalState::default(),
            blacklist: BTreeSet::new(),
            stats: Vec::new(),
        })
    }

    /// Drops all partitions and recreates empty partition directories.
    pub(crate) fn reset_dirs(&mut self) -> Result<()> {
        self.parts.clear();
        if let Ok(entries) = fs::read_dir(&self.cfg.workdir) {
            for e in entries.flatten() {
                if e.file_name().to_string_lossy().starts_with("part-") {
                    fs::remove_dir_all(e.path())?;
                }
            }
        }
        for k in 0..self.n {
            fs::create_dir_all(part_dir(&self.cfg.workdir, k).join("tmp"))?;
        }
        Ok(())
    }

    pub(crate) fn index_options(&self, partition: usize) -> IndexOptions {
        IndexOptions {
            mode: self.plan.storage,
            cache: self.cache.clone(),
            dir: part_dir(&self.cfg.workdir, partition),
            lsm_mem_budget: self.cfg.lsm_budget(self.n),
        }
    }

    pub(crate) fn build_partition<V, A>(&self, k: usize, seed: PartitionSeed<V, A>) -> Result<Partition>
    where
        V: Iterator<Item = Result<VertexTuple>>,
        A: Iterator<Item = Result<VertexId>>,
    {
        let dir = part_dir(&self.cfg.workdir, k);
        let mut total = 0u64;
        let mut live = 0u64;
        let mut active = Vec::new();
        let derive_active = seed.active.is_none() && self.plan.join == Join::LeftOuter;
        let counted = seed.vertices.map(|v| {
            v.inspect(|v| {
                total += 1;
                if !v.halt {
                    live += 1;
                    if derive_active {
                        active.push(v.vid);
                    }
                }
            })
        });
        let index = VertexIndex::bulk_load(&self.index_options(k), counted)?;
        let vid = match (self.plan.join, seed.active) {
            (Join::FullOuter, _) => None,
            (Join::LeftOuter, Some(a)) => Some(VidIndex::bulk_load(
                &self.cache,
                &dir.join(format!("vid-{}.btree", self.gs.superstep)),
                a,
            )?),
            (Join::LeftOuter, None) => Some(VidIndex::bulk_load(
                &self.cache,
                &dir.join(format!("vid-{}.btree", self.gs.superstep)),
                active.into_iter().map(Ok),
            )?),
        };
        Ok(Partition {
            id: k,
            dir,
            index,
            vid,
            total,
            live,
        })
    }

    pub fn global_state(&self) -> &GlobalState {
        &self.gs
    }

    pub fn plan(&self) -> PlanConfig {
        self.plan
    }

    pub fn partition_map(&self) -> &PartitionMap {
        &self.pmap
    }

    pub fn partitions(&self) -> &[Partition] {
        &self.parts
    }

    pub fn stats(&self) -> &[SuperstepStats] {
        &self.stats
    }

    pub fn cache(&self) -> &BufferCache {
        &self.cache
    }

    pub fn program(&self) -> &UserProgram {
        &self.program
    }

    pub fn blacklist(&self) -> &BTreeSet<usize> {
        &self.blacklist
    }

    pub fn vertex_count(&self) -> u64 {
        self.parts.iter().map(|p| p.total).sum()
    }

    /// All vertices of all partitions in ascending vid order.
    pub fn vertices(&self) -> Result<Vec<VertexTuple>> {
        let mut all = Vec::new();
        for p in &self.parts {
            all.extend(p.index.scan_all()?);
        }
        all.sort_by_key(|v| v.vid);
        Ok(all)
    }

    /// Runs one superstep: join, compute, vertex updates, message grouping,
    /// halting and aggregate state, then mutations.
    pub fn run_superstep(&mut self) -> Result<SuperstepStats> {
        let s = self.gs.superstep;
        let live_workers: BTreeSet<usize> = (0..self.cfg.num_workers.max(1))
            .filter(|w| !self.blacklist.contains(w))
            .collect();
        self.cfg.failures.check(s, &live_workers)?;
        let plan = generate_plan(self.plan, &self.pmap)?;
        log::debug!("superstep {s}\n{plan}");

        let started = Instant::now();
        let n = self.n;
        let cache_written = self.cache.stats().bytes_written;
        let leaf_before: Vec<u64> = self.parts.iter().map(|p| p.index.leaf_reads()).collect();

        let mut msg_tx: Vec<Vec<Sender<Frame>>> = (0..n).map(|_| Vec::with_capacity(n)).collect();
        let mut msg_rx: Vec<Vec<Receiver<Frame>>> = (0..n).map(|_| Vec::with_capacity(n)).collect();
        let mut mut_tx: Vec<Vec<Sender<MutFrame>>> = (0..n).map(|_| Vec::with_capacity(n)).collect();
        let mut mut_rx: Vec<Vec<Receiver<MutFrame>>> = (0..n).map(|_| Vec::with_capacity(n)).collect();
        for tx_row in msg_tx.iter_mut() {
            for rx_row in msg_rx.iter_mut() {
                let (tx, rx) = channel();
                tx_row.push(tx);
                rx_row.push(rx);
            }
        }
        for tx_row in mut_tx.iter_mut() {
            for rx_row in mut_rx.iter_mut() {
                let (tx, rx) = bounded(CHANNEL_BATCHES);
                tx_row.push(tx);
                rx_row.push(rx);
            }
        }

        let ctx = StepCtx {
            program: &self.program,
            plan: self.plan,
            gs: &self.gs,
            n,
            groupby_bytes: self.cfg.groupby_bytes,
            combiner: self.program.effective_combiner(),
            listed: self.program.combine.is_none(),
            cache: &self.cache,
        };
        let dirs: Vec<PathBuf> = self.parts.iter().map(|p| p.dir.clone()).collect();
        let parts = &mut self.parts;

        let (producers, consumers, mutations) = std::thread::scope(|scope| {
            let ctx = &ctx;
            let mut consumer_handles = Vec::with_capacity(n);
            for (c, rxs) in msg_rx.into_iter().enumerate() {
                let dir = &dirs[c];
                consumer_handles.push(scope.spawn(move || consume_messages(ctx, c, dir, rxs)));
            }
            let mut mutation_handles = Vec::with_capacity(n);
            for rxs in mut_rx {
                mutation_handles.push(scope.spawn(move || collect_mutations(&rxs)));
            }
            let mut drainers = Vec::new();
            let mut producer_handles = Vec::with_capacity(n);
            let mut setup_error = None;
            for (part, (txs, mtxs)) in parts.iter_mut().zip(msg_tx.into_iter().zip(mut_tx)) {
                let outbox = if ctx.plan.merging() {
                    let mut writers = Vec::with_capacity(n);
                    for (c, tx) in txs.into_iter().enumerate() {
                        let path = part.tmp_dir().join(format!("chan-{s}-{c}.mat"));
                        match materialized_lane(scope, path, tx) {
                            Ok((w, h)) => {
                                writers.push(w);
                                drainers.push(h);
                            }
                            Err(e) => {
                                setup_error = Some(e);
                                break;
                            }
                        }
                    }
                    if setup_error.is_some() {
                        break;
                    }
                    Outbox::materialized(writers)
                } else {
                    Outbox::pipelined(txs)
                };
                let muts = MutationOutbox::new(mtxs, part.id);
                producer_handles.push(scope.spawn(move || produce(ctx, part, outbox, muts)));
            }
            let producers = join_all(producer_handles);
            let consumers = join_all(consumer_handles);
            let mutations = join_all(mutation_handles);
            let drained = join_all(drainers);
            let mut errors: Vec<Error> = setup_error.into_iter().collect();
            let producers = producers.map_err(|e| errors.push(e)).ok();
            let consumers = consumers.map_err(|e| errors.push(e)).ok();
            let mutations = mutations.map_err(|e| errors.push(e)).ok();
            if let Err(e) = drained {
                errors.push(e);
            }
            match (producers, consumers, mutations) {
                (Some(p), Some(c), Some(m)) if errors.is_empty() => Ok((p, c, m)),
                _ => Err(most_informative(errors)),
            }
        })?;

        let mut halt_and = true;
        let mut partials = Vec::with_capacity(n);
        let mut stats = SuperstepStats {
            superstep: s,
            ..Default::default()
        };
        for (part, r) in self.parts.iter_mut().zip(&producers) {
            halt_and &= r.halt_and;
            partials.push(r.aggregate.clone().into_iter().collect::<Vec<_>>());
            stats.messages += r.messages;
            stats.channel_bytes += r.channel_bytes;
            stats.spill_bytes += r.spill_bytes;
            part.live = r.live;
            part.total += r.created;
        }
        for c in &consumers {
            stats.combined_messages += c.combined;
            stats.spill_bytes += c.spill_bytes;
        }

        let resolver = self.program.resolve.clone();
        for (part, muts) in self.parts.iter_mut().zip(mutations) {
            if muts.is_empty() {
                continue;
            }
            let effect = apply_mutations(
                &mut part.index,
                part.vid.as_ref(),
                part.id,
                muts,
                resolver.as_deref(),
            )?;
            halt_and &= effect.halt_and;
            part.live = (part.live as i64 + effect.live_delta).max(0) as u64;
            part.total = (part.total as i64 + effect.total_delta).max(0) as u64;
        }

        let aggregate = match &self.program.aggregate {
            Some(a) => two_stage_aggregate(&partials, a.as_ref()),
            None => None,
        };
        let msg_count = stats.combined_messages;
        self.gs = GlobalState {
            halt: evaluate_termination(halt_and, msg_count),
            aggregate,
            superstep: s + 1,
        };

        for part in self.parts.iter_mut() {
            match fs::remove_file(part.msg_path(s)) {
                Err(e) if e.kind() != std::io::ErrorKind::NotFound => return Err(e.into()),
                _ => {}
            }
            part.index.maintain()?;
        }
        write_gs(&self.cfg.workdir, &self.gs)?;

        for (part, before) in self.parts.iter().zip(leaf_before) {
            stats.leaf_reads += part.index.leaf_reads().saturating_sub(before);
        }
        stats.spill_bytes += self.cache.stats().bytes_written.saturating_sub(cache_written);
        stats.live_vertices = self.parts.iter().map(|p| p.live).sum();
        stats.total_vertices = self.vertex_count();
        stats.wall_millis = started.elapsed().as_millis() as u64;
        debug_assert!(stats.combined_messages <= stats.messages);
        self.stats.push(stats.clone());
        Ok(stats)
    }
}

/// Anything beats a bare channel closure, which is only a symptom of another
/// task dying.
fn most_informative(errors: Vec<Error>) -> Error {
    let mut closed = None;
    for e in errors {
        match e {
            Error::ChannelClosed => closed = Some(e),
            e => return e,
        }
    }
    closed.unwrap_or_else(|| Error::contract("superstep task failed without an error"))
}

fn join_all<T>(handles: Vec<ScopedJoinHandle<'_, Result<T>>>) -> Result<Vec<T>> {
    let mut out = Vec::with_capacity(handles.len());
    let mut err: Option<Error> = None;
    for h in handles {
        let r = h
            .join()
            .unwrap_or_else(|p| Err(Error::contract(format!("partition task {}", panic_message(p)))));
        match r {
            Ok(v) => out.push(v),
            Err(e) => {
                if err.is_none() || matches!(err, Some(Error::ChannelClosed)) {
                    err = Some(e);
                }
            }
        }
    }
    match err {
        Some(e) => Err(e),
        None => Ok(out),
    }
}

fn produce(
    ctx: &StepCtx<'_>,
    part: &mut Partition,
    mut outbox: Outbox,
    mut muts: MutationOutbox,
) -> Result<ProducerReport> {
    let s = ctx.gs.superstep;
    let msgs = MsgReader::open_or_empty(&part.msg_path(s), s == 1)?;
    let tmp = part.tmp_dir();
    let mut group_by = SpillingGroupBy::new(
        ctx.plan.sender_strategy(),
        ctx.combiner.clone(),
        ctx.groupby_bytes,
        &tmp,
    );
    let deferred_file = RunFile::new(tmp.join(format!("deferred-{s}.dat")));
    let mut deferred: Option<MsgWriter> = None;
    let next_vid_file = RunFile::new(tmp.join(format!("vid-next-{s}.dat")));
    let mut next_vid = match ctx.plan.join {
        Join::LeftOuter => Some(MsgWriter::create(next_vid_file.path())?),
        Join::FullOuter => None,
    };
    let mut report = ProducerReport {
        halt_and: true,
        ..Default::default()
    };

    {
        let mut step = |row: JoinRow| -> Result<Option<VertexTuple>> {
            compute_row(ctx, part.id, row, &mut report, &mut group_by, &mut muts, next_vid.as_mut())
        };
        let mut defer = |v: &VertexTuple| -> Result<()> {
            let w = match deferred.as_mut() {
                Some(w) => w,
                None => deferred.insert(MsgWriter::create(deferred_file.path())?),
            };
            w.write(v.vid, Some(&v.body_bytes()))
        };
        let in_place = ctx.plan.storage == Storage::BTree;
        match ctx.plan.join {
            Join::FullOuter => {
                let mut join = index_full_outer_join(&part.index, msgs)?;
                while let Some(row) = join.next_row()? {
                    if let Some(v) = step(row)? {
                        if !(in_place && join.update_in_place(&v)?) {
                            defer(&v)?;
                        }
                    }
                }
            }
            Join::LeftOuter => {
                let vid_index = part.vid.as_ref().expect("left outer plan keeps a Vid index");
                let input = merge_msg_vid(msgs, vid_index.scan()?);
                let mut join = index_left_outer_join(&part.index, input);
                while let Some(row) = join.next_row()? {
                    if let Some(v) = step(row)? {
                        if !(in_place && join.update_in_place(&v)?) {
                            defer(&v)?;
                        }
                    }
                }
            }
        }
    }

    let grouped = group_by.finish()?;
    report.spill_bytes += grouped.spill_bytes();
    for t in grouped {
        let (vid, payload) = t?;
        outbox.send(vid, &payload)?;
    }
    report.channel_bytes = outbox.finish()?;
    muts.finish()?;

    if let Some(w) = deferred {
        w.finish()?;
        for m in MsgReader::open(deferred_file.path())? {
            let m = m?;
            let body = m.payload.unwrap_or_default();
            part.index.upsert(&VertexTuple::decode_body(m.vid, &body)?)?;
        }
    }
    if let Some(w) = next_vid {
        w.finish()?;
        let vids = MsgReader::open(next_vid_file.path())?.map(|m| m.map(|m| m.vid));
        let path = part.dir.join(format!("vid-{}.btree", s + 1));
        part.vid = Some(VidIndex::bulk_load(ctx.cache, &path, vids)?);
    }
    Ok(report)
}

fn compute_row(
    ctx: &StepCtx<'_>,
    partition: usize,
    row: JoinRow,
    report: &mut ProducerReport,
    group_by: &mut SpillingGroupBy,
    muts: &mut MutationOutbox,
    next_vid: Option<&mut MsgWriter>,
) -> Result<Option<VertexTuple>> {
    if !row.selected() {
        return Ok(None);
    }
    let vid = row.vid;
    let created = row.vertex.is_none();
    let vertex = row
        .vertex
        .clone()
        .unwrap_or_else(|| VertexTuple::synthesized(vid));
    let input = ComputeInput {
        vertex,
        created,
        message: row.payload.as_deref(),
        global: ctx.gs,
        listed: ctx.listed,
    };
    let out = catch_unwind(AssertUnwindSafe(|| ctx.program.compute.compute(input)))
        .map_err(|p| udf_error(partition, vid, format!("compute {}", panic_message(p))))?
        .map_err(|e| udf_error(partition, vid, e.0))?;
    if out.vertex.vid != vid {
        return Err(udf_error(
            partition,
            vid,
            format!("compute changed the vertex id to {}", out.vertex.vid),
        ));
    }
    if out.halt_contribution != halt_contribution(&out.vertex, &out.messages) {
        return Err(Error::contract(format!(
            "halt contribution of vertex {vid} disagrees with its halt flag and messages"
        )));
    }
    for m in &out.messages {
        let Some(payload) = m.payload.as_deref() else {
            return Err(udf_error(partition, vid, "compute sent a NULL payload"));
        };
        if ctx.listed {
            group_by.push(m.vid, &singleton_list(payload))?;
        } else {
            group_by.push(m.vid, payload)?;
        }
    }
    report.messages += out.messages.len() as u64;
    if let Some(agg) = &ctx.program.aggregate {
        for a in &out.aggregate {
            fold_aggregate(&mut report.aggregate, a, agg.as_ref());
        }
    }
    for m in out.mutations {
        muts.send(m)?;
    }
    report.halt_and &= out.halt_contribution;
    if created {
        report.created += 1;
    }
    if !out.vertex.halt {
        report.live += 1;
        if let Some(w) = next_vid {
            w.write(vid, None)?;
        }
    }
    if row.vertex.as_ref() == Some(&out.vertex) {
        Ok(None)
    } else {
        Ok(Some(out.vertex))
    }
}

fn consume_messages(
    ctx: &StepCtx<'_>,
    c: usize,
    dir: &Path,
    rxs: Vec<Receiver<Frame>>,
) -> Result<ConsumerReport> {
    let s = ctx.gs.superstep;
    let owned = |vid: VertexId| -> Result<()> {
        if partition_fn(vid, ctx.n) != c {
            return Err(Error::contract(format!(
                "message for vid {vid} delivered to partition {c}"
            )));
        }
        Ok(())
    };
    let mut w = MsgWriter::create(&dir.join(format!("msg-{}.dat", s + 1)))?;
    let mut spill_bytes = 0;
    if ctx.plan.merging() {
        for t in Preclustered::new(merge_receiver(rxs), ctx.combiner.clone()) {
            let (vid, payload) = t?;
            owned(vid)?;
            w.write(vid, Some(&payload))?;
        }
    } else {
        let mut group_by = SpillingGroupBy::new(
            ctx.plan.sender_strategy(),
            ctx.combiner.clone(),
            ctx.groupby_bytes,
            dir.join("tmp"),
        );
        receive_pipelined(&rxs, |vid, payload| {
            owned(vid)?;
            group_by.push(vid, payload)
        })?;
        let grouped = group_by.finish()?;
        spill_bytes += grouped.spill_bytes();
        for t in grouped {
            let (vid, payload) = t?;
            w.write(vid, Some(&payload))?;
        }
    }
    let combined = w.count();
    w.finish()?;
    Ok(ConsumerReport {
        combined,
        spill_bytes,
    })
}
