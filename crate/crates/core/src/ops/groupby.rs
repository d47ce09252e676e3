use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::api::{Combiner, VertexId};
use crate::error::{Error, Result};
use crate::storage::{MsgReader, MsgWriter, RunFile};

/// A grouped or groupable message: destination vid and payload.
pub type Keyed = (VertexId, Vec<u8>);

const SORT_ENTRY_OVERHEAD: usize = 32;
const HASH_ENTRY_OVERHEAD: usize = 64;

static RUN_SEQ: AtomicU64 = AtomicU64::new(0);

/// In-memory phase of a spilling group-by.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    /// Buffer, then sort and combine adjacent equal keys.
    Sort,
    /// Combine eagerly in a hash table; sort only when emitting or spilling.
    HashSort,
}

/// External group-by with a memory budget. Push tuples in any order, then
/// [`finish`](Self::finish) to obtain one combined tuple per vid in
/// ascending vid order.
pub struct SpillingGroupBy {
    strategy: Strategy,
    combine: Arc<dyn Combiner>,
    budget: usize,
    tmp_dir: PathBuf,
    buffer: Vec<Keyed>,
    table: HashMap<VertexId, Vec<u8>>,
    mem: usize,
    runs: Vec<RunFile>,
    spill_bytes: u64,
}

impl SpillingGroupBy {
    pub fn new(
        strategy: Strategy,
        combine: Arc<dyn Combiner>,
        budget: usize,
        tmp_dir: impl Into<PathBuf>,
    ) -> Self {
        SpillingGroupBy {
            strategy,
            combine,
            budget,
            tmp_dir: tmp_dir.into(),
            buffer: Vec::new(),
            table: HashMap::new(),
            mem: 0,
            runs: Vec::new(),
            spill_bytes: 0,
        }
    }

    pub fn push(&mut self, vid: VertexId, payload: &[u8]) -> Result<()> {
        match self.strategy {
            Strategy::Sort => {
                self.buffer.push((vid, payload.to_vec()));
                self.mem += SORT_ENTRY_OVERHEAD + payload.len();
            }
            Strategy::HashSort => match self.table.get_mut(&vid) {
                Some(acc) => {
                    let before = acc.len();
                    self.combine.combine(acc, payload);
                    self.mem = (self.mem + acc.len()).saturating_sub(before);
                }
                None => {
                    self.table.insert(vid, payload.to_vec());
                    self.mem += HASH_ENTRY_OVERHEAD + payload.len();
                }
            },
        }
        if self.mem > self.budget {
            self.spill()?;
        }
        Ok(())
    }

    pub fn runs(&self) -> usize {
        self.runs.len()
    }

    pub fn spill_bytes(&self) -> u64 {
        self.spill_bytes
    }

    fn drain_sorted(&mut self) -> Vec<Keyed> {
        self.mem = 0;
        match self.strategy {
            Strategy::Sort => {
                let mut buf = std::mem::take(&mut self.buffer);
                buf.sort_by_key(|t| t.0);
                combine_adjacent(buf, &*self.combine)
            }
            Strategy::HashSort => {
                let mut buf: Vec<Keyed> = self.table.drain().collect();
                buf.sort_unstable_by_key(|t| t.0);
                buf
            }
        }
    }

    fn spill(&mut self) -> Result<()> {
        let sorted = self.drain_sorted();
        if sorted.is_empty() {
            return Ok(());
        }
        std::fs::create_dir_all(&self.tmp_dir)?;
        let seq = RUN_SEQ.fetch_add(1, Ordering::Relaxed);
        let run = RunFile::new(
            self.tmp_dir
                .join(format!("gb-{}-{seq}.run", std::process::id())),
        );
        let mut w = MsgWriter::create(run.path())?;
        for (vid, payload) in &sorted {
            w.write(*vid, Some(payload))?;
        }
        self.spill_bytes += w.finish()?;
        self.runs.push(run);
        Ok(())
    }

    pub fn finish(mut self) -> Result<Grouped> {
        let in_memory = self.drain_sorted();
        let mut sources = Vec::with_capacity(self.runs.len() + 1);
        for run in &self.runs {
            sources.push(Source::Run(MsgReader::open(run.path())?));
        }
        sources.push(Source::Mem(in_memory.into_iter()));
        let merged = KMerge::new(sources).map(|r| r.map(|(vid, _, payload)| (vid, payload)));
        Ok(Grouped {
            inner: Preclustered::new(Box::new(merged), self.combine.clone()),
            runs: std::mem::take(&mut self.runs),
            spill_bytes: self.spill_bytes,
        })
    }
}

fn combine_adjacent(sorted: Vec<Keyed>, combine: &dyn Combiner) -> Vec<Keyed> {
    let mut out: Vec<Keyed> = Vec::with_capacity(sorted.len());
    for (vid, payload) in sorted {
        match out.last_mut() {
            Some((last, acc)) if *last == vid => combine.combine(acc, &payload),
            _ => out.push((vid, payload)),
        }
    }
    out
}

enum Source {
    Run(MsgReader),
    Mem(std::vec::IntoIter<Keyed>),
}

impl Iterator for Source {
    type Item = Result<Keyed>;

    fn next(&mut self) -> Option<Self::Item> {
        match self {
            Source::Mem(it) => it.next().map(Ok),
            Source::Run(r) => match r.next_msg() {
                Ok(Some(m)) => Some(
                    m.payload
                        .map(|p| (m.vid, p))
                        .ok_or_else(|| Error::corrupt("NULL payload in a group-by run")),
                ),
                Ok(None) => None,
                Err(e) => Some(Err(e)),
            },
        }
    }
}

type BoxedKeyed = Box<dyn Iterator<Item = Result<Keyed>> + Send>;

/// The output of a finished group-by. Run files are removed when it drops.
pub struct Grouped {
    inner: Preclustered<BoxedKeyed>,
    runs: Vec<RunFile>,
    spill_bytes: u64,
}

impl Grouped {
    pub fn runs(&self) -> usize {
        self.runs.len()
    }

    pub fn spill_bytes(&self) -> u64 {
        self.spill_bytes
    }
}

impl Iterator for Grouped {
    type Item = Result<Keyed>;

    fn next(&mut self) -> Option<Self::Item> {
        self.inner.next()
    }
}

/// k-way merge of vid-ascending streams. Equal vids come out lower source
/// index first. A stream that goes backwards is a contract violation.
pub struct KMerge<S, T> {
    sources: Vec<S>,
    heads: Vec<Option<T>>,
    last: Vec<Option<VertexId>>,
    heap: BinaryHeap<Reverse<(VertexId, usize)>>,
    primed: bool,
}

impl<S, T> KMerge<S, T>
where
    S: Iterator<Item = Result<(VertexId, T)>>,
{
    pub fn new(sources: Vec<S>) -> Self {
        let n = sources.len();
        KMerge {
            sources,
            heads: (0..n).map(|_| None).collect(),
            last: vec![None; n],
            heap: BinaryHeap::with_capacity(n),
            primed: false,
        }
    }

    fn pull(&mut self, i: usize) -> Result<()> {
        match self.sources[i].next() {
            None => Ok(()),
            Some(Err(e)) => Err(e),
            Some(Ok((vid, v))) => {
                if self.last[i].is_some_and(|last| vid < last) {
                    return Err(Error::contract(format!(
                        "merge input {i} is not vid-ascending at {vid}"
                    )));
                }
                self.last[i] = Some(vid);
                self.heads[i] = Some(v);
                self.heap.push(Reverse((vid, i)));
                Ok(())
            }
        }
    }

    fn step(&mut self) -> Result<Option<(VertexId, usize, T)>> {
        if !self.primed {
            self.primed = true;
            for i in 0..self.sources.len() {
                self.pull(i)?;
            }
        }
        let Some(Reverse((vid, i))) = self.heap.pop() else {
            return Ok(None);
        };
        let v = self.heads[i].take().expect("head present for queued source");
        self.pull(i)?;
        Ok(Some((vid, i, v)))
    }
}

impl<S, T> Iterator for KMerge<S, T>
where
    S: Iterator<Item = Result<(VertexId, T)>>,
{
    type Item = Result<(VertexId, usize, T)>;

    fn next(&mut self) -> Option<Self::Item> {
        self.step().transpose()
    }
}

/// Single-pass group-by over a vid-clustered stream.
pub struct Preclustered<I> {
    input: I,
    combine: Arc<dyn Combiner>,
    pending: Option<Keyed>,
    seen: Option<VertexId>,
}

impl<I> Preclustered<I>
where
    I: Iterator<Item = Result<Keyed>>,
{
    pub fn new(input: I, combine: Arc<dyn Combiner>) -> Self {
        Preclustered {
            input,
            combine,
            pending: None,
            seen: None,
        }
    }

    fn step(&mut self) -> Result<Option<Keyed>> {
        let (vid, mut acc) = match self.pending.take() {
            Some(t) => t,
            None => match self.input.next().transpose()? {
                Some(t) => t,
                None => return Ok(None),
            },
        };
        if self.seen.is_some_and(|s| vid <= s) {
            return Err(Error::contract(format!(
                "preclustered group-by input is not clustered at vid {vid}"
            )));
        }
        self.seen = Some(vid);
        while let Some((next, payload)) = self.input.next().transpose()? {
            if next == vid {
                self.combine.combine(&mut acc, &payload);
            } else {
                self.pending = Some((next, payload));
                break;
            }
        }
        Ok(Some((vid, acc)))
    }
}

impl<I> Iterator for Preclustered<I>
where
    I: Iterator<Item = Result<Keyed>>,
{
    type Item = Result<Keyed>;

    fn next(&mut self) -> Option<Self::Item> {
        self.step().transpose()
    }
}

/// Runs a spilling group-by over a whole input and collects its output.
pub fn group_all(
    strategy: Strategy,
    input: impl IntoIterator<Item = Keyed>,
    combine: Arc<dyn Combiner>,
    budget: usize,
    tmp_dir: &Path,
) -> Result<Vec<Keyed>> {
    let mut g = SpillingGroupBy::new(strategy, combine, budget, tmp_dir);
    for (vid, payload) in input {
        g.push(vid, &payload)?;
    }
    g.finish()?.collect()
}

pub fn sort_group_by(
    input: impl IntoIterator<Item = Keyed>,
    combine: Arc<dyn Combiner>,
    budget: usize,
    tmp_dir: &Path,
) -> Result<Vec<Keyed>> {
    group_all(Strategy::Sort, input, combine, budget, tmp_dir)
}

pub fn hashsort_group_by(
    input: impl IntoIterator<Item = Keyed>,
    combine: Arc<dyn Combiner>,
    budget: usize,
    tmp_dir: &Path,
) -> Result<Vec<Keyed>> {
    group_all(Strategy::HashSort, input, combine, budget, tmp_dir)
}

pub fn preclustered_group_by(
    input: impl IntoIterator<Item = Keyed>,
    combine: Arc<dyn Combiner>,
) -> Result<Vec<Keyed>> {
    Preclustered::new(input.into_iter().map(Ok), combine).collect()
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use super::Strategy;
    use crate::api::{decode_f64, encode_f64};

    fn min() -> Arc<dyn Combiner> {
        Arc::new(|acc: &mut Vec<u8>, next: &[u8]| {
            if decode_f64(next).unwrap() < decode_f64(acc).unwrap() {
                acc.copy_from_slice(next);
            }
        })
    }

    fn sum() -> Arc<dyn Combiner> {
        Arc::new(|acc: &mut Vec<u8>, next: &[u8]| {
            let s = u64::from_be_bytes(acc[..].try_into().unwrap())
                .wrapping_add(u64::from_be_bytes(next.try_into().unwrap()));
            acc.copy_from_slice(&s.to_be_bytes());
        })
    }

    fn f(vid: u64, x: f64) -> Keyed {
        (VertexId(vid), encode_f64(x).to_vec())
    }

    fn u(vid: u64, x: u64) -> Keyed {
        (VertexId(vid), x.to_be_bytes().to_vec())
    }

    fn hash_agg(input: &[Keyed]) -> Vec<Keyed> {
        let mut m: BTreeMap<VertexId, u64> = BTreeMap::new();
        for (vid, p) in input {
            let e = m.entry(*vid).or_default();
            *e = e.wrapping_add(u64::from_be_bytes(p[..].try_into().unwrap()));
        }
        m.into_iter().map(|(k, v)| (k, v.to_be_bytes().to_vec())).collect()
    }

    #[test]
    fn empty_input() {
        let dir = tempfile::tempdir().unwrap();
        for s in [Strategy::Sort, Strategy::HashSort] {
            assert!(group_all(s, vec![], min(), 1024, dir.path()).unwrap().is_empty());
        }
        assert!(preclustered_group_by(vec![], min()).unwrap().is_empty());
    }

    #[test]
    fn min_combine_keeps_smallest() {
        let dir = tempfile::tempdir().unwrap();
        for s in [Strategy::Sort, Strategy::HashSort] {
            let out = group_all(s, vec![f(2, 3.0), f(2, 1.0)], min(), 1024, dir.path()).unwrap();
            assert_eq!(out, vec![f(2, 1.0)]);
        }
    }

    #[test]
    fn preclustered_combines_adjacent_groups() {
        let out = preclustered_group_by(vec![u(1, 1), u(1, 2), u(2, 5)], sum()).unwrap();
        assert_eq!(out, vec![u(1, 3), u(2, 5)]);
    }

    #[test]
    fn preclustered_detects_regression() {
        let r = preclustered_group_by(vec![u(2, 1), u(1, 1), u(2, 1)], sum());
        assert!(matches!(r, Err(Error::Contract(_))));
    }

    #[test]
    fn spills_match_hash_aggregation() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let input: Vec<Keyed> = (0..200_000)
            .map(|_| u(rng.gen_range(0..50_000), rng.gen_range(0..1000)))
            .collect();
        let want = hash_agg(&input);
        for s in [Strategy::Sort, Strategy::HashSort] {
            let mut g = SpillingGroupBy::new(s, sum(), 256 * 1024, dir.path());
            for (vid, p) in &input {
                g.push(*vid, p).unwrap();
            }
            let grouped = g.finish().unwrap();
            assert!(grouped.runs() >= 4, "{s:?} spilled {} runs", grouped.runs());
            assert!(grouped.spill_bytes() > 0);
            let got: Vec<_> = grouped.collect::<Result<_>>().unwrap();
            assert_eq!(got, want, "{s:?}");
        }
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 0);
    }

    #[test]
    fn few_keys_never_spill_in_hash_mode() {
        let dir = tempfile::tempdir().unwrap();
        let mut g = SpillingGroupBy::new(Strategy::HashSort, sum(), 1 << 20, dir.path());
        for i in 0..1_000_000u64 {
            g.push(VertexId(i % 10), &1u64.to_be_bytes()).unwrap();
        }
        let grouped = g.finish().unwrap();
        assert_eq!(grouped.runs(), 0);
        let got: Vec<_> = grouped.collect::<Result<_>>().unwrap();
        assert_eq!(got, (0..10).map(|k| u(k, 100_000)).collect::<Vec<_>>());
    }

    #[test]
    fn kmerge_breaks_ties_by_source_index() {
        let a = vec![Ok((VertexId(1), 'a')), Ok((VertexId(3), 'a'))];
        let b = vec![Ok((VertexId(1), 'b')), Ok((VertexId(2), 'b'))];
        let out: Vec<_> = KMerge::new(vec![a.into_iter(), b.into_iter()])
            .map(|r| r.map(|(v, i, t)| (v.0, i, t)))
            .collect::<Result<_>>()
            .unwrap();
        assert_eq!(out, vec![(1, 0, 'a'), (1, 1, 'b'), (2, 1, 'b'), (3, 0, 'a')]);
    }

    proptest! {
        #[test]
        fn strategies_agree(
            items in proptest::collection::vec((0u64..200, 0u64..1000), 0..2000),
            budget in 256usize..8192,
        ) {
            let dir = tempfile::tempdir().unwrap();
            let input: Vec<Keyed> = items.iter().map(|&(k, v)| u(k, v)).collect();
            let want = hash_agg(&input);
            let sorted = sort_group_by(input.clone(), sum(), budget, dir.path()).unwrap();
            let hashed = hashsort_group_by(input.clone(), sum(), budget, dir.path()).unwrap();
            let mut presorted = input.clone();
            presorted.sort_by_key(|t| t.0);
            let pre = preclustered_group_by(presorted, sum()).unwrap();
            prop_assert_eq!(&sorted, &want);
            prop_assert_eq!(&hashed, &want);
            prop_assert_eq!(&pre, &want);
        }
    }
}
