use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::api::{VertexId, VertexTuple};
use crate::error::{Error, Result};
use crate::ops::Storage;
use crate::storage::btree::{BTree, BTreeCursor};
use crate::storage::cache::BufferCache;
use crate::storage::lsm::{LsmCursor, LsmTree};

/// LSM disk components tolerated before a superstep-boundary merge.
pub const LSM_MERGE_THRESHOLD: usize = 2;

/// One partition of the Vertex relation, keyed by vid.
pub struct VertexIndex {
    inner: Inner,
    leaf_reads: Arc<AtomicU64>,
}

enum Inner {
    BTree(BTree),
    Lsm(LsmTree),
}

impl std::fmt::Debug for VertexIndex {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match &self.inner {
            Inner::BTree(t) => t.fmt(f),
            Inner::Lsm(t) => t.fmt(f),
        }
    }
}

/// Where and how a vertex index is built.
#[derive(Clone, Debug)]
pub struct IndexOptions {
    pub mode: Storage,
    pub cache: BufferCache,
    pub dir: PathBuf,
    /// Memory component budget for LSM mode.
    pub lsm_mem_budget: usize,
}

fn entries<I>(vertices: I) -> impl Iterator<Item = Result<(u64, Option<Vec<u8>>)>>
where
    I: IntoIterator<Item = Result<VertexTuple>>,
{
    vertices
        .into_iter()
        .map(|v| v.map(|v| (v.vid.0, Some(v.body_bytes()))))
}

impl VertexIndex {
    /// Bulk loads a strictly vid-ascending stream.
    pub fn bulk_load<I>(opts: &IndexOptions, vertices: I) -> Result<Self>
    where
        I: IntoIterator<Item = Result<VertexTuple>>,
    {
        let leaf_reads = Arc::new(AtomicU64::new(0));
        let inner = match opts.mode {
            Storage::BTree => Inner::BTree(BTree::bulk_load(
                &opts.cache,
                &opts.dir.join("vertex.btree"),
                leaf_reads.clone(),
                entries(vertices),
            )?),
            Storage::Lsm => Inner::Lsm(LsmTree::bulk_load(
                &opts.cache,
                &opts.dir,
                "vertex",
                opts.lsm_mem_budget,
                leaf_reads.clone(),
                entries(vertices),
            )?),
        };
        Ok(VertexIndex { inner, leaf_reads })
    }

    pub fn mode(&self) -> Storage {
        match self.inner {
            Inner::BTree(_) => Storage::BTree,
            Inner::Lsm(_) => Storage::Lsm,
        }
    }

    /// Leaf pages read by lookups, scans, probes and updates so far.
    pub fn leaf_reads(&self) -> u64 {
        self.leaf_reads.load(Ordering::Relaxed)
    }

    pub fn lookup(&self, vid: VertexId) -> Result<Option<VertexTuple>> {
        let raw = match &self.inner {
            Inner::BTree(t) => t.lookup(vid.0)?.flatten(),
            Inner::Lsm(t) => t.lookup(vid.0)?,
        };
        raw.map(|b| VertexTuple::decode_body(vid, &b)).transpose()
    }

    pub fn upsert(&mut self, v: &VertexTuple) -> Result<()> {
        match &mut self.inner {
            Inner::BTree(t) => {
                t.upsert(v.vid.0, Some(v.body_bytes()))?;
            }
            Inner::Lsm(t) => t.upsert(v.vid.0, v.body_bytes())?,
        }
        Ok(())
    }

    /// Deleting an absent vid is a no-op.
    pub fn delete(&mut self, vid: VertexId) -> Result<()> {
        match &mut self.inner {
            Inner::BTree(t) => {
                t.delete(vid.0)?;
            }
            Inner::Lsm(t) => t.delete(vid.0)?,
        }
        Ok(())
    }

    /// Ascending scan starting at the smallest vid >= `from`.
    pub fn scan(&self, from: Option<VertexId>) -> Result<IndexCursor<'_>> {
        Ok(match &self.inner {
            Inner::BTree(t) => IndexCursor::BTree(t.cursor(from.map(|v| v.0))?),
            Inner::Lsm(t) => IndexCursor::Lsm(t.cursor(from.map(|v| v.0))?),
        })
    }

    /// A cursor for ascending point probes.
    pub fn prober(&self) -> IndexCursor<'_> {
        match &self.inner {
            Inner::BTree(t) => IndexCursor::BTree(t.prober()),
            Inner::Lsm(t) => IndexCursor::Lsm(t.prober()),
        }
    }

    pub fn scan_all(&self) -> Result<Vec<VertexTuple>> {
        let mut c = self.scan(None)?;
        let mut out = Vec::new();
        while let Some(v) = c.next_vertex()? {
            out.push(v);
        }
        Ok(out)
    }

    pub fn lsm_flush(&mut self) -> Result<()> {
        match &mut self.inner {
            Inner::Lsm(t) => t.flush(),
            Inner::BTree(_) => Err(Error::contract("lsm_flush on a B-tree index")),
        }
    }

    pub fn lsm_merge(&mut self) -> Result<()> {
        match &mut self.inner {
            Inner::Lsm(t) => t.merge(),
            Inner::BTree(_) => Err(Error::contract("lsm_merge on a B-tree index")),
        }
    }

    pub fn disk_components(&self) -> usize {
        match &self.inner {
            Inner::Lsm(t) => t.disk_components(),
            Inner::BTree(_) => 1,
        }
    }

    /// Superstep-boundary housekeeping: merges LSM disk components once there
    /// are too many of them.
    pub fn maintain(&mut self) -> Result<()> {
        if let Inner::Lsm(t) = &mut self.inner {
            if t.disk_components() > LSM_MERGE_THRESHOLD {
                t.merge()?;
            }
        }
        Ok(())
    }
}

/// Scan/probe cursor over a vertex index.
pub enum IndexCursor<'a> {
    BTree(BTreeCursor<'a>),
    Lsm(LsmCursor<'a>),
}

impl<'a> IndexCursor<'a> {
    pub fn next_vertex(&mut self) -> Result<Option<VertexTuple>> {
        let raw = match self {
            IndexCursor::BTree(c) => loop {
                match c.next_entry()? {
                    Some((k, Some(v))) => break Some((k, v)),
                    Some((_, None)) => continue,
                    None => break None,
                }
            },
            IndexCursor::Lsm(c) => c.next_entry()?,
        };
        raw.map(|(k, b)| VertexTuple::decode_body(VertexId(k), &b))
            .transpose()
    }

    pub fn probe(&mut self, vid: VertexId) -> Result<Option<VertexTuple>> {
        let raw = match self {
            IndexCursor::BTree(c) => c.probe(vid.0)?.flatten(),
            IndexCursor::Lsm(c) => c.probe(vid.0)?,
        };
        raw.map(|b| VertexTuple::decode_body(vid, &b)).transpose()
    }

    /// Rewrites the vertex the cursor is positioned on. Returns false when
    /// the write cannot happen in place; the caller must then upsert through
    /// the index once the cursor is gone.
    pub fn update_current(&mut self, v: &VertexTuple) -> Result<bool> {
        match self {
            IndexCursor::BTree(c) => c.update_current(v.body_bytes()),
            IndexCursor::Lsm(_) => Ok(false),
        }
    }
}

/// The Vid relation: the set of active vertices of one partition, used by
/// the left-outer-join plan.
pub struct VidIndex {
    tree: BTree,
}

impl std::fmt::Debug for VidIndex {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        self.tree.fmt(f)
    }
}

impl VidIndex {
    pub fn bulk_load<I>(cache: &BufferCache, path: &Path, vids: I) -> Result<Self>
    where
        I: IntoIterator<Item = Result<VertexId>>,
    {
        let tree = BTree::bulk_load(
            cache,
            path,
            Arc::new(AtomicU64::new(0)),
            vids.into_iter().map(|v| v.map(|v| (v.0, Some(Vec::new())))),
        )?;
        Ok(VidIndex { tree })
    }

    pub fn insert(&self, vid: VertexId) -> Result<()> {
        self.tree.upsert(vid.0, Some(Vec::new()))?;
        Ok(())
    }

    pub fn remove(&self, vid: VertexId) -> Result<()> {
        self.tree.delete(vid.0)?;
        Ok(())
    }

    pub fn len(&self) -> u64 {
        self.tree.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tree.is_empty()
    }

    pub fn scan(&self) -> Result<VidScan<'_>> {
        Ok(VidScan(self.tree.cursor(None)?))
    }

    pub fn vids(&self) -> Result<Vec<VertexId>> {
        self.scan()?.collect()
    }
}

pub struct VidScan<'a>(BTreeCursor<'a>);

impl Iterator for VidScan<'_> {
    type Item = Result<VertexId>;

    fn next(&mut self) -> Option<Self::Item> {
        self.0.next_entry().map(|e| e.map(|(k, _)| VertexId(k))).transpose()
    }
}
