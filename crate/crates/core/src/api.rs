//! The user-facing programming abstraction: the Vertex / Msg / GlobalState
//! tuple schemas, the four user function slots (compute, combine, aggregate,
//! resolve), value codecs and job configuration.

use std::fmt;
use std::path::PathBuf;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::PlanConfig;

/// Opaque 64-bit vertex identifier. The total order on ids is the key order of
/// every index and sorted stream in the engine.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize,
)]
pub struct VertexId(pub u64);

impl fmt::Display for VertexId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl From<u64> for VertexId {
    fn from(v: u64) -> Self {
        VertexId(v)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Edge {
    pub dest: VertexId,
    pub value: Vec<u8>,
}

impl Edge {
    pub fn new(dest: impl Into<VertexId>, value: Vec<u8>) -> Self {
        Edge {
            dest: dest.into(),
            value,
        }
    }
}

/// One row of the Vertex relation. `halt == false` means the vertex is active.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VertexTuple {
    pub vid: VertexId,
    pub halt: bool,
    pub value: Vec<u8>,
    pub edges: Vec<Edge>,
}

impl VertexTuple {
    pub fn new(vid: impl Into<VertexId>, value: Vec<u8>, edges: Vec<Edge>) -> Self {
        VertexTuple {
            vid: vid.into(),
            halt: false,
            value,
            edges,
        }
    }

    /// The vertex synthesized for a message addressed to a vid with no stored
    /// vertex: active, empty value, no edges.
    pub fn synthesized(vid: VertexId) -> Self {
        VertexTuple {
            vid,
            halt: false,
            value: Vec::new(),
            edges: Vec::new(),
        }
    }

    pub fn vote_to_halt(&mut self) {
        self.halt = true;
    }

    /// Encodes everything except the vid, which is stored as the index key.
    pub fn encode_body(&self, out: &mut Vec<u8>) {
        out.push(self.halt as u8);
        put_bytes(out, &self.value);
        out.extend_from_slice(&(self.edges.len() as u32).to_be_bytes());
        for e in &self.edges {
            out.extend_from_slice(&e.dest.0.to_be_bytes());
            put_bytes(out, &e.value);
        }
    }

    pub fn body_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.body_len());
        self.encode_body(&mut out);
        out
    }

    pub fn body_len(&self) -> usize {
        1 + 4
            + self.value.len()
            + 4
            + self.edges.iter().map(|e| 12 + e.value.len()).sum::<usize>()
    }

    pub fn decode_body(vid: VertexId, mut buf: &[u8]) -> Result<Self> {
        let b = &mut buf;
        let halt = match take(b, 1)?[0] {
            0 => false,
            1 => true,
            x => return Err(Error::corrupt(format!("bad halt flag {x} for vertex {vid}"))),
        };
        let value = take_bytes(b)?.to_vec();
        let n = u32::from_be_bytes(take(b, 4)?.try_into().unwrap()) as usize;
        let mut edges = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let dest = u64::from_be_bytes(take(b, 8)?.try_into().unwrap());
            let value = take_bytes(b)?.to_vec();
            edges.push(Edge {
                dest: VertexId(dest),
                value,
            });
        }
        if !b.is_empty() {
            return Err(Error::corrupt(format!("trailing bytes in vertex {vid}")));
        }
        Ok(VertexTuple {
            vid,
            halt,
            value,
            edges,
        })
    }
}

fn put_bytes(out: &mut Vec<u8>, bytes: &[u8]) {
    out.extend_from_slice(&(bytes.len() as u32).to_be_bytes());
    out.extend_from_slice(bytes);
}

fn take<'a>(buf: &mut &'a [u8], n: usize) -> Result<&'a [u8]> {
    if buf.len() < n {
        return Err(Error::corrupt("truncated record"));
    }
    let (head, tail) = buf.split_at(n);
    *buf = tail;
    Ok(head)
}

fn take_bytes<'a>(buf: &mut &'a [u8]) -> Result<&'a [u8]> {
    let len = u32::from_be_bytes(take(buf, 4)?.try_into().unwrap()) as usize;
    take(buf, len)
}

/// One row of the Msg relation. A `None` payload is the NULL produced by
/// NullMsg or by outer-join padding, never by user code.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MsgTuple {
    pub vid: VertexId,
    pub payload: Option<Vec<u8>>,
}

impl MsgTuple {
    pub fn new(vid: impl Into<VertexId>, payload: Vec<u8>) -> Self {
        MsgTuple {
            vid: vid.into(),
            payload: Some(payload),
        }
    }

    pub fn null(vid: VertexId) -> Self {
        MsgTuple { vid, payload: None }
    }
}

/// The single GS tuple of a job.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GlobalState {
    pub halt: bool,
    pub aggregate: Option<Vec<u8>>,
    pub superstep: u64,
}

impl Default for GlobalState {
    fn default() -> Self {
        GlobalState {
            halt: false,
            aggregate: None,
            superstep: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum MutationKind {
    Delete,
    Insert,
}

/// A graph mutation. For `Delete` only `vertex.vid` is meaningful.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mutation {
    pub kind: MutationKind,
    pub vertex: VertexTuple,
}

impl Mutation {
    pub fn insert(vertex: VertexTuple) -> Self {
        Mutation {
            kind: MutationKind::Insert,
            vertex,
        }
    }

    pub fn delete(vid: impl Into<VertexId>) -> Self {
        Mutation {
            kind: MutationKind::Delete,
            vertex: VertexTuple::synthesized(vid.into()),
        }
    }

    pub fn vid(&self) -> VertexId {
        self.vertex.vid
    }
}

/// What compute sees for one vertex in one superstep.
pub struct ComputeInput<'a> {
    pub vertex: VertexTuple,
    /// True when no stored vertex existed and `vertex` was synthesized.
    pub created: bool,
    /// The combined payload for this vertex, if any message arrived.
    pub message: Option<&'a [u8]>,
    pub global: &'a GlobalState,
    /// True when the program declares no combiner and `message` is the list
    /// produced by [`default_combine`].
    pub listed: bool,
}

impl<'a> ComputeInput<'a> {
    pub fn superstep(&self) -> u64 {
        self.global.superstep
    }

    /// The delivered messages as individual payloads.
    pub fn messages(&self) -> Result<Vec<&'a [u8]>> {
        match self.message {
            None => Ok(Vec::new()),
            Some(p) if self.listed => decode_list(p),
            Some(p) => Ok(vec![p]),
        }
    }
}

/// The five-field output of compute.
#[derive(Debug, Clone)]
pub struct ComputeOutput {
    pub vertex: VertexTuple,
    pub messages: Vec<MsgTuple>,
    pub halt_contribution: bool,
    pub aggregate: Vec<Vec<u8>>,
    pub mutations: Vec<Mutation>,
}

impl ComputeOutput {
    pub fn new(vertex: VertexTuple, messages: Vec<MsgTuple>) -> Self {
        let halt_contribution = halt_contribution(&vertex, &messages);
        ComputeOutput {
            vertex,
            messages,
            halt_contribution,
            aggregate: Vec::new(),
            mutations: Vec::new(),
        }
    }

    pub fn with_aggregate(mut self, value: Vec<u8>) -> Self {
        self.aggregate.push(value);
        self
    }

    pub fn with_mutations(mut self, mutations: Vec<Mutation>) -> Self {
        self.mutations = mutations;
        self
    }
}

/// A vertex contributes `true` to the global halt state only when it voted to
/// halt and sent nothing.
pub fn halt_contribution(vertex: &VertexTuple, messages: &[MsgTuple]) -> bool {
    messages.is_empty() && vertex.halt
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UdfError(pub String);

impl fmt::Display for UdfError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for UdfError {
    fn from(s: &str) -> Self {
        UdfError(s.to_string())
    }
}

impl From<String> for UdfError {
    fn from(s: String) -> Self {
        UdfError(s)
    }
}

impl From<Error> for UdfError {
    fn from(e: Error) -> Self {
        UdfError(e.to_string())
    }
}

pub trait Compute: Send + Sync {
    fn compute(&self, input: ComputeInput<'_>) -> Result<ComputeOutput, UdfError>;
}

impl<F> Compute for F
where
    F: Fn(ComputeInput<'_>) -> Result<ComputeOutput, UdfError> + Send + Sync,
{
    fn compute(&self, input: ComputeInput<'_>) -> Result<ComputeOutput, UdfError> {
        self(input)
    }
}

/// Message combiner, folded pairwise into an accumulator. Must be
/// commutative and associative.
pub trait Combiner: Send + Sync {
    fn combine(&self, acc: &mut Vec<u8>, next: &[u8]);
}

impl<F> Combiner for F
where
    F: Fn(&mut Vec<u8>, &[u8]) + Send + Sync,
{
    fn combine(&self, acc: &mut Vec<u8>, next: &[u8]) {
        self(acc, next)
    }
}

/// Global aggregate function, folded pairwise. Must be commutative and
/// associative so the two-stage aggregation is well defined.
pub trait Aggregator: Send + Sync {
    fn aggregate(&self, acc: &mut Vec<u8>, next: &[u8]);
}

impl<F> Aggregator for F
where
    F: Fn(&mut Vec<u8>, &[u8]) + Send + Sync,
{
    fn aggregate(&self, acc: &mut Vec<u8>, next: &[u8]) {
        self(acc, next)
    }
}

/// Conflict resolution over all mutations addressed to one vid in one
/// superstep. The returned list is applied deletions first.
pub trait Resolver: Send + Sync {
    fn resolve(&self, vid: VertexId, group: Vec<Mutation>) -> Result<Vec<Mutation>, UdfError>;
}

impl<F> Resolver for F
where
    F: Fn(VertexId, Vec<Mutation>) -> Result<Vec<Mutation>, UdfError> + Send + Sync,
{
    fn resolve(&self, vid: VertexId, group: Vec<Mutation>) -> Result<Vec<Mutation>, UdfError> {
        self(vid, group)
    }
}

/// Resolution used when a program registers none: keep every mutation,
/// deletions ahead of insertions, arrival order otherwise.
pub fn default_resolve(group: Vec<Mutation>) -> Vec<Mutation> {
    let (mut deletes, inserts): (Vec<_>, Vec<_>) = group
        .into_iter()
        .partition(|m| m.kind == MutationKind::Delete);
    deletes.extend(inserts);
    deletes
}

/// Text codec for user values, used when loading and dumping graphs.
pub trait ValueCodec: Send + Sync {
    fn parse(&self, text: &str) -> Result<Vec<u8>, String>;
    fn format(&self, bytes: &[u8]) -> String;
}

/// `f64` stored as 8 big-endian bytes.
pub struct F64Codec;

impl ValueCodec for F64Codec {
    fn parse(&self, text: &str) -> Result<Vec<u8>, String> {
        if text.trim().is_empty() {
            return Ok(Vec::new());
        }
        text.trim()
            .parse::<f64>()
            .map(|v| encode_f64(v).to_vec())
            .map_err(|e| format!("bad float {text:?}: {e}"))
    }

    fn format(&self, bytes: &[u8]) -> String {
        match decode_f64(bytes) {
            Some(v) => format!("{v}"),
            None => String::new(),
        }
    }
}

/// `u64` stored as 8 big-endian bytes.
pub struct U64Codec;

impl ValueCodec for U64Codec {
    fn parse(&self, text: &str) -> Result<Vec<u8>, String> {
        if text.trim().is_empty() {
            return Ok(Vec::new());
        }
        text.trim()
            .parse::<u64>()
            .map(|v| v.to_be_bytes().to_vec())
            .map_err(|e| format!("bad integer {text:?}: {e}"))
    }

    fn format(&self, bytes: &[u8]) -> String {
        match decode_u64(bytes) {
            Some(v) => v.to_string(),
            None => String::new(),
        }
    }
}

/// Keeps the text as-is.
pub struct RawCodec;

impl ValueCodec for RawCodec {
    fn parse(&self, text: &str) -> Result<Vec<u8>, String> {
        Ok(text.as_bytes().to_vec())
    }

    fn format(&self, bytes: &[u8]) -> String {
        String::from_utf8_lossy(bytes).into_owned()
    }
}

pub fn encode_f64(v: f64) -> [u8; 8] {
    v.to_bits().to_be_bytes()
}

pub fn decode_f64(bytes: &[u8]) -> Option<f64> {
    Some(f64::from_bits(u64::from_be_bytes(bytes.try_into().ok()?)))
}

pub fn decode_u64(bytes: &[u8]) -> Option<u64> {
    Some(u64::from_be_bytes(bytes.try_into().ok()?))
}

/// Optional per-vertex check run while loading a graph.
pub type VertexCheck = Arc<dyn Fn(&VertexTuple) -> Result<(), String> + Send + Sync>;

/// A complete Pregel program. Only `compute` is mandatory.
#[derive(Clone)]
pub struct UserProgram {
    pub name: String,
    pub compute: Arc<dyn Compute>,
    pub combine: Option<Arc<dyn Combiner>>,
    pub aggregate: Option<Arc<dyn Aggregator>>,
    pub resolve: Option<Arc<dyn Resolver>>,
    pub vertex_codec: Arc<dyn ValueCodec>,
    pub edge_codec: Arc<dyn ValueCodec>,
    pub vertex_check: Option<VertexCheck>,
    /// Physical plan the program author recommends.
    pub plan_hint: Option<PlanConfig>,
}

impl UserProgram {
    pub fn new(name: impl Into<String>, compute: impl Compute + 'static) -> Self {
        UserProgram {
            name: name.into(),
            compute: Arc::new(compute),
            combine: None,
            aggregate: None,
            resolve: None,
            vertex_codec: Arc::new(RawCodec),
            edge_codec: Arc::new(RawCodec),
            vertex_check: None,
            plan_hint: None,
        }
    }

    pub fn with_combiner(mut self, c: impl Combiner + 'static) -> Self {
        self.combine = Some(Arc::new(c));
        self
    }

    pub fn with_aggregator(mut self, a: impl Aggregator + 'static) -> Self {
        self.aggregate = Some(Arc::new(a));
        self
    }

    pub fn with_resolver(mut self, r: impl Resolver + 'static) -> Self {
        self.resolve = Some(Arc::new(r));
        self
    }

    pub fn with_codecs(
        mut self,
        vertex: impl ValueCodec + 'static,
        edge: impl ValueCodec + 'static,
    ) -> Self {
        self.vertex_codec = Arc::new(vertex);
        self.edge_codec = Arc::new(edge);
        self
    }

    pub fn with_vertex_check(
        mut self,
        check: impl Fn(&VertexTuple) -> Result<(), String> + Send + Sync + 'static,
    ) -> Self {
        self.vertex_check = Some(Arc::new(check));
        self
    }

    pub fn with_plan_hint(mut self, plan: PlanConfig) -> Self {
        self.plan_hint = Some(plan);
        self
    }

    /// Combine used by the runtime: the user's, or list concatenation when
    /// the program declares none (payloads are then wrapped as singleton
    /// lists when they are sent).
    pub(crate) fn effective_combiner(&self) -> Arc<dyn Combiner> {
        match &self.combine {
            Some(c) => c.clone(),
            None => Arc::new(ListConcat),
        }
    }
}

impl fmt::Debug for UserProgram {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("UserProgram")
            .field("name", &self.name)
            .field("combine", &self.combine.is_some())
            .field("aggregate", &self.aggregate.is_some())
            .field("resolve", &self.resolve.is_some())
            .finish()
    }
}

struct ListConcat;

impl Combiner for ListConcat {
    fn combine(&self, acc: &mut Vec<u8>, next: &[u8]) {
        concat_lists(acc, next)
    }
}

/// Encodes a single payload as a one-element list.
pub fn singleton_list(payload: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + payload.len());
    out.extend_from_slice(&1u32.to_be_bytes());
    put_bytes(&mut out, payload);
    out
}

fn concat_lists(acc: &mut Vec<u8>, next: &[u8]) {
    let a = u32::from_be_bytes(acc[..4].try_into().unwrap());
    let b = u32::from_be_bytes(next[..4].try_into().unwrap());
    acc[..4].copy_from_slice(&(a + b).to_be_bytes());
    acc.extend_from_slice(&next[4..]);
}

pub fn decode_list(mut buf: &[u8]) -> Result<Vec<&[u8]>> {
    let b = &mut buf;
    let n = u32::from_be_bytes(take(b, 4)?.try_into().unwrap()) as usize;
    let mut out = Vec::with_capacity(n.min(1 << 16));
    for _ in 0..n {
        out.push(take_bytes(b)?);
    }
    Ok(out)
}

/// The combine used when a program declares none: gathers every payload into
/// one list payload, in the order given.
pub fn default_combine(payloads: &[&[u8]]) -> Result<Vec<u8>> {
    let (first, rest) = payloads
        .split_first()
        .ok_or_else(|| Error::contract("default_combine called with an empty bag"))?;
    let mut acc = singleton_list(first);
    for p in rest {
        concat_lists(&mut acc, &singleton_list(p));
    }
    Ok(acc)
}

/// Folds a bag with a pairwise combiner; `None` for an empty bag.
pub fn fold_with(combine: &dyn Combiner, payloads: &[&[u8]]) -> Option<Vec<u8>> {
    let (first, rest) = payloads.split_first()?;
    let mut acc = first.to_vec();
    for p in rest {
        combine.combine(&mut acc, p);
    }
    Some(acc)
}

#[derive(Clone, Debug)]
pub struct JobSpec {
    pub program: UserProgram,
    pub input_path: PathBuf,
    pub output_path: PathBuf,
    pub num_partitions: usize,
    pub plan: PlanConfig,
    /// Checkpoint after every n-th superstep; 0 disables checkpointing.
    pub checkpoint_every: u64,
    pub max_supersteps: Option<u64>,
}

pub const DEFAULT_MAX_SUPERSTEPS: u64 = 1_000_000;

/// Returns every violated job invariant; empty means the job is runnable.
pub fn validate_job(spec: &JobSpec) -> Vec<String> {
    let mut violations = Vec::new();
    if spec.num_partitions == 0 {
        violations.push("numPartitions must be ≥ 1".to_string());
    }
    if let Err(e) = spec.plan.validate() {
        violations.push(e);
    }
    if spec.max_supersteps == Some(0) {
        violations.push("maxSupersteps must be ≥ 1 when set".to_string());
    }
    violations
}
