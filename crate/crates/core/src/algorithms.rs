//! Built-in programs: SSSP, PageRank, connected components and a scripted
//! mutation exerciser.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::api::{
    decode_f64, decode_u64, encode_f64, ComputeInput, ComputeOutput, F64Codec, MsgTuple, Mutation,
    MutationKind, U64Codec, UdfError, UserProgram, VertexId, VertexTuple,
};
use crate::error::{Error, Result};
use crate::ops::{Join, PlanConfig};

pub const DEFAULT_DAMPING: f64 = 0.85;

pub fn min_f64(acc: &mut Vec<u8>, next: &[u8]) {
    if let (Some(a), Some(b)) = (decode_f64(acc), decode_f64(next)) {
        if b < a {
            acc.copy_from_slice(next);
        }
    }
}

pub fn sum_f64(acc: &mut Vec<u8>, next: &[u8]) {
    if let (Some(a), Some(b)) = (decode_f64(acc), decode_f64(next)) {
        acc.copy_from_slice(&encode_f64(a + b));
    }
}

pub fn min_u64(acc: &mut Vec<u8>, next: &[u8]) {
    if let (Some(a), Some(b)) = (decode_u64(acc), decode_u64(next)) {
        if b < a {
            acc.copy_from_slice(next);
        }
    }
}

fn f64_or(bytes: &[u8], default: f64) -> f64 {
    decode_f64(bytes).unwrap_or(default)
}

fn combined<'a>(input: &ComputeInput<'a>) -> Result<Vec<&'a [u8]>, UdfError> {
    input.messages().map_err(UdfError::from)
}

pub fn sssp_program(source: VertexId) -> UserProgram {
    let compute = move |input: ComputeInput<'_>| -> Result<ComputeOutput, UdfError> {
        let mut v = input.vertex.clone();
        if input.superstep() == 1 || v.value.is_empty() {
            v.value = encode_f64(f64::INFINITY).to_vec();
        }
        let current = f64_or(&v.value, f64::INFINITY);
        let mut best = if v.vid == source { 0.0 } else { f64::INFINITY };
        for m in combined(&input)? {
            let d = decode_f64(m).ok_or("malformed distance message")?;
            best = best.min(d);
        }
        let mut out = Vec::new();
        if best < current {
            v.value = encode_f64(best).to_vec();
            for e in &v.edges {
                let w = decode_f64(&e.value).unwrap_or(1.0);
                out.push(MsgTuple::new(e.dest, encode_f64(best + w).to_vec()));
            }
        }
        v.vote_to_halt();
        Ok(ComputeOutput::new(v, out))
    };
    UserProgram::new("sssp", compute)
        .with_combiner(min_f64)
        .with_codecs(F64Codec, F64Codec)
        .with_vertex_check(|v: &VertexTuple| {
            for e in &v.edges {
                match decode_f64(&e.value) {
                    Some(w) if w < 0.0 || w.is_nan() => {
                        return Err(format!("edge {}->{} has negative weight {w}", v.vid, e.dest))
                    }
                    _ => {}
                }
            }
            Ok(())
        })
        .with_plan_hint(PlanConfig {
            join: Join::LeftOuter,
            ..PlanConfig::default()
        })
}

/// PageRank aggregate: vertex count and the rank mass held by vertices
/// without out-edges.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RankAggregate {
    pub count: u64,
    pub dangling: f64,
}

impl RankAggregate {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = self.count.to_be_bytes().to_vec();
        out.extend_from_slice(&encode_f64(self.dangling));
        out
    }

    pub fn decode(bytes: &[u8]) -> Option<Self> {
        if bytes.len() != 16 {
            return None;
        }
        Some(RankAggregate {
            count: decode_u64(&bytes[..8])?,
            dangling: decode_f64(&bytes[8..])?,
        })
    }
}

pub fn sum_rank_aggregate(acc: &mut Vec<u8>, next: &[u8]) {
    if let (Some(a), Some(b)) = (RankAggregate::decode(acc), RankAggregate::decode(next)) {
        *acc = RankAggregate {
            count: a.count + b.count,
            dangling: a.dangling + b.dangling,
        }
        .encode();
    }
}

/// Fixed-iteration PageRank. Superstep 1 counts vertices, superstep 2 sets
/// every rank to 1/|V|, and each of the following `iterations` supersteps
/// applies one update. Dangling mass is spread uniformly.
pub fn pagerank_program(iterations: u64, damping: f64) -> Result<UserProgram> {
    let mut violations = Vec::new();
    if iterations < 1 {
        violations.push("pagerank iterations must be ≥ 1".to_string());
    }
    if !(damping > 0.0 && damping < 1.0) {
        violations.push(format!("pagerank damping must be in (0,1), got {damping}"));
    }
    if !violations.is_empty() {
        return Err(Error::Validation(violations));
    }
    let last = 2 + iterations;
    let compute = move |input: ComputeInput<'_>| -> Result<ComputeOutput, UdfError> {
        let s = input.superstep();
        let mut v = input.vertex.clone();
        let prev = input
            .global
            .aggregate
            .as_deref()
            .and_then(RankAggregate::decode)
            .unwrap_or_default();
        let n = prev.count.max(1) as f64;
        let rank = match s {
            1 => 0.0,
            2 => 1.0 / n,
            _ => {
                let mut sum = 0.0;
                for m in combined(&input)? {
                    sum += decode_f64(m).ok_or("malformed rank message")?;
                }
                (1.0 - damping) / n + damping * (sum + prev.dangling / n)
            }
        };
        if s >= 2 {
            v.value = encode_f64(rank).to_vec();
        }
        let dangling = if v.edges.is_empty() { f64_or(&v.value, 0.0) } else { 0.0 };
        let agg = RankAggregate { count: 1, dangling };
        let mut out = Vec::new();
        if s >= last {
            v.vote_to_halt();
        } else {
            v.halt = false;
            if s >= 2 && !v.edges.is_empty() {
                let share = encode_f64(rank / v.edges.len() as f64).to_vec();
                for e in &v.edges {
                    out.push(MsgTuple::new(e.dest, share.clone()));
                }
            }
        }
        Ok(ComputeOutput::new(v, out).with_aggregate(agg.encode()))
    };
    Ok(UserProgram::new("pagerank", compute)
        .with_combiner(sum_f64)
        .with_aggregator(sum_rank_aggregate)
        .with_codecs(F64Codec, F64Codec))
}

pub fn cc_program() -> UserProgram {
    let compute = |input: ComputeInput<'_>| -> Result<ComputeOutput, UdfError> {
        let mut v = input.vertex.clone();
        let own = if input.superstep() == 1 || v.value.is_empty() {
            u64::MAX
        } else {
            decode_u64(&v.value).unwrap_or(u64::MAX)
        };
        let mut best = if input.superstep() == 1 || v.value.is_empty() {
            v.vid.0
        } else {
            own
        };
        for m in combined(&input)? {
            best = best.min(decode_u64(m).ok_or("malformed label message")?);
        }
        let mut out = Vec::new();
        if best < own {
            v.value = best.to_be_bytes().to_vec();
            for e in &v.edges {
                out.push(MsgTuple::new(e.dest, best.to_be_bytes().to_vec()));
            }
        }
        v.vote_to_halt();
        Ok(ComputeOutput::new(v, out))
    };
    UserProgram::new("cc", compute)
        .with_combiner(min_u64)
        .with_codecs(U64Codec, F64Codec)
}

/// Mutations to issue: superstep → (issuing vid, mutation).
pub type MutationScript = BTreeMap<u64, Vec<(VertexId, Mutation)>>;

/// Deletions first, then the insertion carrying the largest value.
pub fn resolve_largest_insert(group: Vec<Mutation>) -> Vec<Mutation> {
    let mut out: Vec<Mutation> = group
        .iter()
        .filter(|m| m.kind == MutationKind::Delete)
        .take(1)
        .cloned()
        .collect();
    if let Some(best) = group
        .into_iter()
        .filter(|m| m.kind == MutationKind::Insert)
        .reduce(|a, b| if b.vertex.value > a.vertex.value { b } else { a })
    {
        out.push(best);
    }
    out
}

/// Issues the scripted mutations from their issuing vertices; every vertex
/// stays active until the last scripted superstep.
pub fn mutation_program(script: MutationScript) -> UserProgram {
    let last = script.keys().next_back().copied().unwrap_or(0);
    let script = Arc::new(script);
    let compute = move |input: ComputeInput<'_>| -> Result<ComputeOutput, UdfError> {
        let s = input.superstep();
        let mut v = input.vertex.clone();
        let mutations: Vec<Mutation> = script
            .get(&s)
            .map(|list| {
                list.iter()
                    .filter(|(issuer, _)| *issuer == v.vid)
                    .map(|(_, m)| m.clone())
                    .collect()
            })
            .unwrap_or_default();
        v.halt = s >= last;
        Ok(ComputeOutput::new(v, vec![]).with_mutations(mutations))
    };
    UserProgram::new("mutate-test", compute)
        .with_resolver(|_vid: VertexId, group: Vec<Mutation>| Ok(resolve_largest_insert(group)))
        .with_codecs(U64Codec, F64Codec)
}
