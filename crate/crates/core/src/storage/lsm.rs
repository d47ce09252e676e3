//! A simplified LSM tree: one in-memory ordered component plus a stack of
//! immutable B+-tree disk components. Deletes are tombstones until a merge
//! folds every disk component into one.

use std::collections::BTreeMap;
use std::ops::Bound;
use std::path::{Path, PathBuf};
use std::sync::atomic::AtomicU64;
use std::sync::Arc;

use crate::error::Result;
use crate::storage::btree::{BTree, BTreeCursor, Stored};
use crate::storage::cache::BufferCache;

const ENTRY_OVERHEAD: usize = 32;
/// Disk components allowed before a flush merges them.
pub const MAX_COMPONENTS: usize = 4;

pub struct LsmTree {
    cache: BufferCache,
    dir: PathBuf,
    stem: String,
    mem: BTreeMap<u64, Stored>,
    mem_bytes: usize,
    mem_budget: usize,
    /// Oldest first.
    disk: Vec<BTree>,
    next_component: u64,
    leaf_reads: Arc<AtomicU64>,
}

impl std::fmt::Debug for LsmTree {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LsmTree")
            .field("mem_entries", &self.mem.len())
            .field("mem_bytes", &self.mem_bytes)
            .field("disk_components", &self.disk.len())
            .finish()
    }
}

impl LsmTree {
    pub fn create(
        cache: &BufferCache,
        dir: &Path,
        stem: &str,
        mem_budget: usize,
        leaf_reads: Arc<AtomicU64>,
    ) -> Self {
        LsmTree {
            cache: cache.clone(),
            dir: dir.to_path_buf(),
            stem: stem.to_string(),
            mem: BTreeMap::new(),
            mem_bytes: 0,
            mem_budget,
            disk: Vec::new(),
            next_component: 0,
            leaf_reads,
        }
    }

    /// Loads an ascending stream straight into a single disk component.
    pub fn bulk_load<I>(
        cache: &BufferCache,
        dir: &Path,
        stem: &str,
        mem_budget: usize,
        leaf_reads: Arc<AtomicU64>,
        entries: I,
    ) -> Result<Self>
    where
        I: IntoIterator<Item = Result<(u64, Stored)>>,
    {
        let mut t = Self::create(cache, dir, stem, mem_budget, leaf_reads);
        let path = t.component_path();
        let c = BTree::bulk_load(cache, &path, t.leaf_reads.clone(), entries)?;
        t.disk.push(c);
        Ok(t)
    }

    fn component_path(&mut self) -> PathBuf {
        let p = self.dir.join(format!("{}.lsm.{}", self.stem, self.next_component));
        self.next_component += 1;
        p
    }

    pub fn disk_components(&self) -> usize {
        self.disk.len()
    }

    pub fn mem_entries(&self) -> usize {
        self.mem.len()
    }

    pub fn lookup(&self, key: u64) -> Result<Option<Vec<u8>>> {
        if let Some(v) = self.mem.get(&key) {
            return Ok(v.clone());
        }
        for c in self.disk.iter().rev() {
            if let Some(v) = c.lookup(key)? {
                return Ok(v);
            }
        }
        Ok(None)
    }

    pub fn upsert(&mut self, key: u64, value: Vec<u8>) -> Result<()> {
        self.put(key, Some(value))
    }

    pub fn delete(&mut self, key: u64) -> Result<()> {
        self.put(key, None)
    }

    fn put(&mut self, key: u64, value: Stored) -> Result<()> {
        let add = ENTRY_OVERHEAD + value.as_ref().map_or(0, Vec::len);
        if let Some(old) = self.mem.insert(key, value) {
            self.mem_bytes -= ENTRY_OVERHEAD + old.as_ref().map_or(0, Vec::len);
        }
        self.mem_bytes += add;
        if self.mem_bytes > self.mem_budget {
            self.flush()?;
        }
        Ok(())
    }

    /// Writes the memory component out as a new disk component. Tombstones
    /// are kept so they keep shadowing older components.
    pub fn flush(&mut self) -> Result<()> {
        if self.mem.is_empty() {
            return Ok(());
        }
        let mem = std::mem::take(&mut self.mem);
        self.mem_bytes = 0;
        let path = self.component_path();
        let c = BTree::bulk_load(
            &self.cache,
            &path,
            self.leaf_reads.clone(),
            mem.into_iter().map(Ok),
        )?;
        self.disk.push(c);
        if self.disk.len() > MAX_COMPONENTS {
            self.merge_tier()?;
        }
        Ok(())
    }

    /// Merges the longest run of newest components whose oldest member is no
    /// larger than the rest of the run combined. A large base component is
    /// rewritten only once the newer data has grown to match it.
    fn merge_tier(&mut self) -> Result<()> {
        let n = self.disk.len();
        let mut newer = 0u64;
        let mut start = n - 2;
        for i in (0..n - 1).rev() {
            newer += self.disk[i + 1].len();
            if self.disk[i].len() <= newer {
                start = i;
            }
        }
        let merged = self.merge_range(start, n, start == 0)?;
        self.disk.splice(start..n, [merged]);
        Ok(())
    }

    /// Replaces all disk components with one, dropping tombstones and
    /// shadowed versions. The memory component is untouched. Components are
    /// merged oldest first in passes whose fan-in fits the buffer cache.
    pub fn merge(&mut self) -> Result<()> {
        let fan_in = match self.cache.capacity() {
            Some(frames) => frames.saturating_sub(4).max(2),
            None => usize::MAX,
        };
        while !self.disk.is_empty() {
            let k = self.disk.len().min(fan_in);
            let merged = self.merge_range(0, k, true)?;
            self.disk.splice(0..k, [merged]);
            if self.disk.len() == 1 {
                break;
            }
        }
        Ok(())
    }

    fn merge_range(&mut self, start: usize, end: usize, drop_tombstones: bool) -> Result<BTree> {
        let path = self.component_path();
        let mut heads = Vec::with_capacity(end - start);
        for c in &self.disk[start..end] {
            let mut cur = c.cursor(None)?;
            let head = cur.next_entry()?;
            heads.push((cur, head));
        }
        let live = std::iter::from_fn(|| loop {
            match next_merged(&mut heads) {
                Ok(Some((key, Some(v)))) => return Some(Ok((key, Some(v)))),
                Ok(Some((_, None))) if drop_tombstones => continue,
                Ok(Some((key, None))) => return Some(Ok((key, None))),
                Ok(None) => return None,
                Err(e) => return Some(Err(e)),
            }
        });
        BTree::bulk_load(&self.cache, &path, self.leaf_reads.clone(), live)
    }

    pub fn cursor(&self, from: Option<u64>) -> Result<LsmCursor<'_>> {
        let start = from.unwrap_or(0);
        let mut heads = Vec::with_capacity(self.disk.len());
        for c in &self.disk {
            let mut cur = c.cursor(Some(start))?;
            let head = cur.next_entry()?;
            heads.push((cur, head));
        }
        let mem_head = self
            .mem
            .range(start..)
            .next()
            .map(|(k, v)| (*k, v.clone()));
        Ok(LsmCursor {
            tree: self,
            heads,
            mem_head,
            probers: Vec::new(),
            scanning: true,
        })
    }

    pub fn prober(&self) -> LsmCursor<'_> {
        LsmCursor {
            tree: self,
            heads: Vec::new(),
            mem_head: None,
            probers: self.disk.iter().map(BTree::prober).collect(),
            scanning: false,
        }
    }

    pub fn scan_all(&self) -> Result<Vec<(u64, Vec<u8>)>> {
        let mut c = self.cursor(None)?;
        let mut out = Vec::new();
        while let Some(e) = c.next_entry()? {
            out.push(e);
        }
        Ok(out)
    }
}

type Head<'a> = (BTreeCursor<'a>, Option<(u64, Stored)>);

/// Pops the smallest key across disk heads; the newest component (highest
/// index) wins on ties and the others are advanced past it.
fn next_merged(heads: &mut [Head<'_>]) -> Result<Option<(u64, Stored)>> {
    let Some(min) = heads.iter().filter_map(|(_, h)| h.as_ref().map(|e| e.0)).min() else {
        return Ok(None);
    };
    let mut winner = None;
    for (cur, head) in heads.iter_mut().rev() {
        if head.as_ref().is_some_and(|e| e.0 == min) {
            let taken = head.take().unwrap();
            if winner.is_none() {
                winner = Some(taken);
            }
            *head = cur.next_entry()?;
        }
    }
    Ok(winner)
}

/// Scan or probe cursor over all components. Updates are never applied in
/// place: writes always go to the memory component.
pub struct LsmCursor<'a> {
    tree: &'a LsmTree,
    heads: Vec<Head<'a>>,
    mem_head: Option<(u64, Stored)>,
    probers: Vec<BTreeCursor<'a>>,
    scanning: bool,
}

impl<'a> LsmCursor<'a> {
    pub fn next_entry(&mut self) -> Result<Option<(u64, Vec<u8>)>> {
        debug_assert!(self.scanning);
        loop {
            let disk_min = self
                .heads
                .iter()
                .filter_map(|(_, h)| h.as_ref().map(|e| e.0))
                .min();
            let mem_key = self.mem_head.as_ref().map(|e| e.0);
            let key = match (disk_min, mem_key) {
                (None, None) => return Ok(None),
                (Some(d), None) => d,
                (None, Some(m)) => m,
                (Some(d), Some(m)) => d.min(m),
            };
            let value = if mem_key == Some(key) {
                let (_, v) = self.mem_head.take().unwrap();
                self.mem_head = self
                    .tree
                    .mem
                    .range((Bound::Excluded(key), Bound::Unbounded))
                    .next()
                    .map(|(k, v)| (*k, v.clone()));
                if disk_min == Some(key) {
                    next_merged(&mut self.heads)?;
                }
                v
            } else {
                next_merged(&mut self.heads)?.unwrap().1
            };
            if let Some(v) = value {
                return Ok(Some((key, v)));
            }
        }
    }

    pub fn probe(&mut self, key: u64) -> Result<Option<Vec<u8>>> {
        if let Some(v) = self.tree.mem.get(&key) {
            return Ok(v.clone());
        }
        for p in self.probers.iter_mut().rev() {
            if let Some(v) = p.probe(key)? {
                return Ok(v);
            }
        }
        Ok(None)
    }
}
