//! A paged B+-tree mapping `u64` keys to byte values, stored through the
//! buffer cache.
//!
//! Leaves are chained left to right and carry a high fence key so that a
//! cursor probing ascending keys can tell whether the next key can live in the
//! leaf it already holds. Values above [`INLINE_MAX`] bytes live in overflow
//! page chains. Deletes never merge nodes.
//!
//! A value of `None` is a tombstone; only LSM disk components store them.

use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use parking_lot::Mutex;

use crate::api::VertexId;
use crate::error::{Error, Result};
use crate::storage::cache::{BufferCache, FileId, PageId, PinnedPage, PAGE_SIZE};

const NONE: u32 = u32::MAX;

const KIND_LEAF: u8 = 1;
const KIND_INTERNAL: u8 = 2;
const KIND_OVERFLOW: u8 = 3;

const LEAF_HEADER: usize = 16;
const SLOT: usize = 2;
const RECORD_HEADER: usize = 11;

const INTERNAL_HEADER: usize = 7;
const INTERNAL_ENTRY: usize = 12;
const INTERNAL_MAX: usize = (PAGE_SIZE - INTERNAL_HEADER) / INTERNAL_ENTRY;
const INTERNAL_BULK_FILL: usize = INTERNAL_MAX * 9 / 10;

const OVERFLOW_HEADER: usize = 7;
const OVERFLOW_CAP: usize = PAGE_SIZE - OVERFLOW_HEADER;

/// Values longer than this are moved to overflow pages.
pub const INLINE_MAX: usize = 1024;
const BULK_FILL: usize = PAGE_SIZE * 9 / 10;

const F_TOMBSTONE: u8 = 1;
const F_OVERFLOW: u8 = 2;

/// A stored value, `None` being a tombstone.
pub type Stored = Option<Vec<u8>>;

#[derive(Clone, Debug)]
struct Slot {
    key: u64,
    flags: u8,
    /// Inline value, or `[total_len u32][first_page u32]` for overflow.
    data: Vec<u8>,
}

impl Slot {
    fn size(&self) -> usize {
        SLOT + RECORD_HEADER + self.data.len()
    }

    fn overflow(&self) -> Option<(usize, u32)> {
        (self.flags & F_OVERFLOW != 0).then(|| {
            (
                u32::from_be_bytes(self.data[..4].try_into().unwrap()) as usize,
                u32::from_be_bytes(self.data[4..8].try_into().unwrap()),
            )
        })
    }
}

fn slot_size_for(value: &Stored) -> usize {
    match value {
        None => SLOT + RECORD_HEADER,
        Some(v) if v.len() > INLINE_MAX => SLOT + RECORD_HEADER + 8,
        Some(v) => SLOT + RECORD_HEADER + v.len(),
    }
}

struct LeafHeader {
    n: usize,
    next: u32,
    high: Option<u64>,
}

fn read_leaf_header(page: &[u8]) -> Result<LeafHeader> {
    if page[0] != KIND_LEAF {
        return Err(Error::corrupt(format!("expected leaf page, found kind {}", page[0])));
    }
    Ok(LeafHeader {
        n: u16::from_be_bytes([page[1], page[2]]) as usize,
        next: u32::from_be_bytes(page[3..7].try_into().unwrap()),
        high: (page[7] == 1).then(|| u64::from_be_bytes(page[8..16].try_into().unwrap())),
    })
}

fn record_offset(page: &[u8], i: usize) -> usize {
    let at = LEAF_HEADER + SLOT * i;
    u16::from_be_bytes([page[at], page[at + 1]]) as usize
}

fn leaf_key(page: &[u8], i: usize) -> u64 {
    let off = record_offset(page, i);
    u64::from_be_bytes(page[off..off + 8].try_into().unwrap())
}

fn leaf_slot(page: &[u8], i: usize) -> Slot {
    let off = record_offset(page, i);
    let key = u64::from_be_bytes(page[off..off + 8].try_into().unwrap());
    let flags = page[off + 8];
    let len = u16::from_be_bytes([page[off + 9], page[off + 10]]) as usize;
    Slot {
        key,
        flags,
        data: page[off + RECORD_HEADER..off + RECORD_HEADER + len].to_vec(),
    }
}

/// Index of the first slot with key >= `key`, and whether it matches.
fn leaf_search(page: &[u8], n: usize, key: u64) -> (usize, bool) {
    let (mut lo, mut hi) = (0, n);
    while lo < hi {
        let mid = (lo + hi) / 2;
        if leaf_key(page, mid) < key {
            lo = mid + 1;
        } else {
            hi = mid;
        }
    }
    (lo, lo < n && leaf_key(page, lo) == key)
}

fn decode_leaf(page: &[u8]) -> Result<(LeafHeader, Vec<Slot>)> {
    let h = read_leaf_header(page)?;
    let slots = (0..h.n).map(|i| leaf_slot(page, i)).collect();
    Ok((h, slots))
}

fn leaf_size(slots: &[Slot]) -> usize {
    LEAF_HEADER + slots.iter().map(Slot::size).sum::<usize>()
}

fn encode_leaf(page: &mut [u8], slots: &[Slot], next: u32, high: Option<u64>) -> bool {
    if leaf_size(slots) > PAGE_SIZE {
        return false;
    }
    page[0] = KIND_LEAF;
    page[1..3].copy_from_slice(&(slots.len() as u16).to_be_bytes());
    page[3..7].copy_from_slice(&next.to_be_bytes());
    page[7] = high.is_some() as u8;
    page[8..16].copy_from_slice(&high.unwrap_or(0).to_be_bytes());
    let mut off = LEAF_HEADER + SLOT * slots.len();
    for (i, s) in slots.iter().enumerate() {
        let at = LEAF_HEADER + SLOT * i;
        page[at..at + 2].copy_from_slice(&(off as u16).to_be_bytes());
        page[off..off + 8].copy_from_slice(&s.key.to_be_bytes());
        page[off + 8] = s.flags;
        page[off + 9..off + 11].copy_from_slice(&(s.data.len() as u16).to_be_bytes());
        page[off + RECORD_HEADER..off + RECORD_HEADER + s.data.len()].copy_from_slice(&s.data);
        off += RECORD_HEADER + s.data.len();
    }
    true
}

struct Internal {
    child0: u32,
    entries: Vec<(u64, u32)>,
}

impl Internal {
    fn decode(page: &[u8]) -> Result<Self> {
        if page[0] != KIND_INTERNAL {
            return Err(Error::corrupt(format!("expected internal page, found kind {}", page[0])));
        }
        let n = u16::from_be_bytes([page[1], page[2]]) as usize;
        let child0 = u32::from_be_bytes(page[3..7].try_into().unwrap());
        let entries = (0..n)
            .map(|i| {
                let at = INTERNAL_HEADER + INTERNAL_ENTRY * i;
                (
                    u64::from_be_bytes(page[at..at + 8].try_into().unwrap()),
                    u32::from_be_bytes(page[at + 8..at + 12].try_into().unwrap()),
                )
            })
            .collect();
        Ok(Internal { child0, entries })
    }

    fn encode(&self, page: &mut [u8]) {
        debug_assert!(self.entries.len() <= INTERNAL_MAX);
        page[0] = KIND_INTERNAL;
        page[1..3].copy_from_slice(&(self.entries.len() as u16).to_be_bytes());
        page[3..7].copy_from_slice(&self.child0.to_be_bytes());
        for (i, (k, c)) in self.entries.iter().enumerate() {
            let at = INTERNAL_HEADER + INTERNAL_ENTRY * i;
            page[at..at + 8].copy_from_slice(&k.to_be_bytes());
            page[at + 8..at + 12].copy_from_slice(&c.to_be_bytes());
        }
    }
}

/// Routes a key through an internal page without decoding all of it.
fn internal_route(page: &[u8], key: u64) -> Result<(usize, u32)> {
    if page[0] != KIND_INTERNAL {
        return Err(Error::corrupt(format!("expected internal page, found kind {}", page[0])));
    }
    let n = u16::from_be_bytes([page[1], page[2]]) as usize;
    let key_at = |i: usize| {
        let at = INTERNAL_HEADER + INTERNAL_ENTRY * i;
        u64::from_be_bytes(page[at..at + 8].try_into().unwrap())
    };
    let (mut lo, mut hi) = (0, n);
    while lo < hi {
        let mid = (lo + hi) / 2;
        if key_at(mid) <= key {
            lo = mid + 1;
        } else {
            hi = mid;
        }
    }
    let child = if lo == 0 {
        u32::from_be_bytes(page[3..7].try_into().unwrap())
    } else {
        let at = INTERNAL_HEADER + INTERNAL_ENTRY * (lo - 1) + 8;
        u32::from_be_bytes(page[at..at + 4].try_into().unwrap())
    };
    Ok((lo, child))
}

struct Meta {
    root: u32,
    height: u32,
    next_page: u32,
    free: Vec<u32>,
    len: u64,
}

pub struct BTree {
    cache: BufferCache,
    file: FileId,
    meta: Mutex<Meta>,
    leaf_reads: Arc<AtomicU64>,
}

impl std::fmt::Debug for BTree {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let m = self.meta.lock();
        f.debug_struct("BTree")
            .field("len", &m.len)
            .field("height", &m.height)
            .field("pages", &m.next_page)
            .finish()
    }
}

impl Drop for BTree {
    fn drop(&mut self) {
        if let Err(e) = self.cache.delete_file(self.file) {
            log::warn!("failed to delete index file: {e}");
        }
    }
}

impl BTree {
    /// Creates an empty tree in a new file.
    pub fn create(cache: &BufferCache, path: &Path, leaf_reads: Arc<AtomicU64>) -> Result<Self> {
        Self::bulk_load(cache, path, leaf_reads, std::iter::empty())
    }

    /// Builds a tree bottom-up from a strictly ascending stream. Every leaf
    /// except the last ends up at least half full.
    pub fn bulk_load<I>(
        cache: &BufferCache,
        path: &Path,
        leaf_reads: Arc<AtomicU64>,
        entries: I,
    ) -> Result<Self>
    where
        I: IntoIterator<Item = Result<(u64, Stored)>>,
    {
        let file = cache.create_file(path)?;
        let tree = BTree {
            cache: cache.clone(),
            file,
            meta: Mutex::new(Meta {
                root: 0,
                height: 1,
                next_page: 0,
                free: Vec::new(),
                len: 0,
            }),
            leaf_reads,
        };

        let mut leaves: Vec<(u64, u32)> = Vec::new();
        let mut current: Vec<Slot> = Vec::new();
        let mut current_page = tree.alloc();
        let mut size = LEAF_HEADER;
        let mut last: Option<u64> = None;
        let mut count = 0u64;
        for item in entries {
            let (key, value) = item?;
            if let Some(prev) = last {
                if key == prev {
                    return Err(Error::DuplicateKey(VertexId(key)));
                }
                if key < prev {
                    return Err(Error::contract(format!(
                        "bulk load input not ascending: {key} after {prev}"
                    )));
                }
            }
            last = Some(key);
            let slot = tree.make_slot(key, value)?;
            if !current.is_empty() && size + slot.size() > BULK_FILL {
                let next = tree.alloc();
                tree.write_leaf(current_page, &current, next, Some(key))?;
                leaves.push((current[0].key, current_page));
                current.clear();
                size = LEAF_HEADER;
                current_page = next;
            }
            size += slot.size();
            current.push(slot);
            count += 1;
        }
        tree.write_leaf(current_page, &current, NONE, None)?;
        leaves.push((current.first().map_or(0, |s| s.key), current_page));

        let mut level = leaves;
        let mut height = 1;
        while level.len() > 1 {
            let mut parents = Vec::with_capacity(level.len() / INTERNAL_BULK_FILL + 1);
            for chunk in level.chunks(INTERNAL_BULK_FILL + 1) {
                let page = tree.alloc();
                let node = Internal {
                    child0: chunk[0].1,
                    entries: chunk[1..].to_vec(),
                };
                let mut p = tree.cache.pin_new(tree.page(page))?;
                node.encode(&mut p.write());
                parents.push((chunk[0].0, page));
            }
            level = parents;
            height += 1;
        }
        {
            let mut m = tree.meta.lock();
            m.root = level[0].1;
            m.height = height;
            m.len = count;
        }
        Ok(tree)
    }

    pub fn len(&self) -> u64 {
        self.meta.lock().len
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn height(&self) -> u32 {
        self.meta.lock().height
    }

    pub fn leaf_reads(&self) -> u64 {
        self.leaf_reads.load(Ordering::Relaxed)
    }

    fn page(&self, page: u32) -> PageId {
        PageId {
            file: self.file,
            page,
        }
    }

    fn alloc(&self) -> u32 {
        let mut m = self.meta.lock();
        if let Some(p) = m.free.pop() {
            return p;
        }
        m.next_page += 1;
        m.next_page - 1
    }

    fn pin_leaf(&self, page: u32) -> Result<PinnedPage> {
        self.leaf_reads.fetch_add(1, Ordering::Relaxed);
        self.cache.pin(self.page(page))
    }

    fn write_leaf(&self, page: u32, slots: &[Slot], next: u32, high: Option<u64>) -> Result<()> {
        let mut p = self.cache.pin_new(self.page(page))?;
        let ok = encode_leaf(&mut p.write(), slots, next, high);
        debug_assert!(ok, "leaf overfull");
        Ok(())
    }

    fn make_slot(&self, key: u64, value: Stored) -> Result<Slot> {
        Ok(match value {
            None => Slot {
                key,
                flags: F_TOMBSTONE,
                data: Vec::new(),
            },
            Some(v) if v.len() > INLINE_MAX => {
                let first = self.write_overflow(&v)?;
                let mut data = Vec::with_capacity(8);
                data.extend_from_slice(&(v.len() as u32).to_be_bytes());
                data.extend_from_slice(&first.to_be_bytes());
                Slot {
                    key,
                    flags: F_OVERFLOW,
                    data,
                }
            }
            Some(v) => Slot {
                key,
                flags: 0,
                data: v,
            },
        })
    }

    fn write_overflow(&self, value: &[u8]) -> Result<u32> {
        let chunks: Vec<&[u8]> = value.chunks(OVERFLOW_CAP).collect();
        let pages: Vec<u32> = chunks.iter().map(|_| self.alloc()).collect();
        for (i, chunk) in chunks.iter().enumerate() {
            let next = pages.get(i + 1).copied().unwrap_or(NONE);
            let mut p = self.cache.pin_new(self.page(pages[i]))?;
            let mut w = p.write();
            w[0] = KIND_OVERFLOW;
            w[1..5].copy_from_slice(&next.to_be_bytes());
            w[5..7].copy_from_slice(&(chunk.len() as u16).to_be_bytes());
            w[OVERFLOW_HEADER..OVERFLOW_HEADER + chunk.len()].copy_from_slice(chunk);
        }
        Ok(pages[0])
    }

    fn read_overflow(&self, total: usize, mut page: u32) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(total);
        while page != NONE {
            let p = self.cache.pin(self.page(page))?;
            let r = p.read();
            if r[0] != KIND_OVERFLOW {
                return Err(Error::corrupt("broken overflow chain"));
            }
            let len = u16::from_be_bytes([r[5], r[6]]) as usize;
            out.extend_from_slice(&r[OVERFLOW_HEADER..OVERFLOW_HEADER + len]);
            page = u32::from_be_bytes(r[1..5].try_into().unwrap());
        }
        if out.len() != total {
            return Err(Error::corrupt("overflow chain length mismatch"));
        }
        Ok(out)
    }

    fn free_overflow(&self, mut page: u32) -> Result<()> {
        while page != NONE {
            let next = {
                let p = self.cache.pin(self.page(page))?;
                let r = p.read();
                u32::from_be_bytes(r[1..5].try_into().unwrap())
            };
            self.meta.lock().free.push(page);
            page = next;
        }
        Ok(())
    }

    fn slot_value(&self, slot: &Slot) -> Result<Stored> {
        if slot.flags & F_TOMBSTONE != 0 {
            return Ok(None);
        }
        match slot.overflow() {
            Some((total, first)) => Ok(Some(self.read_overflow(total, first)?)),
            None => Ok(Some(slot.data.clone())),
        }
    }

    /// Descends to the leaf covering `key`, recording the internal path.
    fn find_leaf(&self, key: u64, mut path: Option<&mut Vec<(u32, usize)>>) -> Result<u32> {
        let (mut page, height) = {
            let m = self.meta.lock();
            (m.root, m.height)
        };
        for _ in 1..height {
            let p = self.cache.pin(self.page(page))?;
            let (idx, child) = internal_route(&p.read(), key)?;
            if let Some(path) = path.as_deref_mut() {
                path.push((page, idx));
            }
            page = child;
        }
        Ok(page)
    }

    /// `None` when absent, `Some(None)` for a tombstone.
    pub fn lookup(&self, key: u64) -> Result<Option<Stored>> {
        let leaf = self.find_leaf(key, None)?;
        let p = self.pin_leaf(leaf)?;
        let slot = {
            let r = p.read();
            let h = read_leaf_header(&r)?;
            match leaf_search(&r, h.n, key) {
                (i, true) => leaf_slot(&r, i),
                _ => return Ok(None),
            }
        };
        drop(p);
        Ok(Some(self.slot_value(&slot)?))
    }

    /// Inserts or replaces `key`; returns true if the key was new.
    pub fn upsert(&self, key: u64, value: Stored) -> Result<bool> {
        let mut path = Vec::new();
        let leaf = self.find_leaf(key, Some(&mut path))?;
        let mut p = self.pin_leaf(leaf)?;
        let (h, mut slots) = decode_leaf(&p.read())?;
        let slot = self.make_slot(key, value)?;
        let (idx, found) = match slots.binary_search_by_key(&key, |s| s.key) {
            Ok(i) => (i, true),
            Err(i) => (i, false),
        };
        if found {
            if let Some((_, first)) = slots[idx].overflow() {
                self.free_overflow(first)?;
            }
            slots[idx] = slot;
        } else {
            slots.insert(idx, slot);
            self.meta.lock().len += 1;
        }
        if encode_leaf(&mut p.write(), &slots, h.next, h.high) {
            return Ok(!found);
        }

        // split by bytes, keeping both halves non-empty
        let total: usize = slots.iter().map(Slot::size).sum();
        let mut acc = 0;
        let mut mid = 0;
        while mid < slots.len() - 1 && acc + slots[mid].size() <= total / 2 {
            acc += slots[mid].size();
            mid += 1;
        }
        let mid = mid.max(1);
        let right_slots = slots.split_off(mid);
        let sep = right_slots[0].key;
        let right = self.alloc();
        self.write_leaf(right, &right_slots, h.next, h.high)?;
        let ok = encode_leaf(&mut p.write(), &slots, right, Some(sep));
        debug_assert!(ok);
        drop(p);
        self.insert_into_parent(path, sep, right)?;
        Ok(!found)
    }

    fn insert_into_parent(&self, mut path: Vec<(u32, usize)>, sep: u64, right: u32) -> Result<()> {
        let Some((page, idx)) = path.pop() else {
            let new_root = self.alloc();
            let old_root = self.meta.lock().root;
            let node = Internal {
                child0: old_root,
                entries: vec![(sep, right)],
            };
            let mut p = self.cache.pin_new(self.page(new_root))?;
            node.encode(&mut p.write());
            let mut m = self.meta.lock();
            m.root = new_root;
            m.height += 1;
            return Ok(());
        };
        let mut p = self.cache.pin(self.page(page))?;
        let mut node = Internal::decode(&p.read())?;
        node.entries.insert(idx, (sep, right));
        if node.entries.len() <= INTERNAL_MAX {
            node.encode(&mut p.write());
            return Ok(());
        }
        let mid = node.entries.len() / 2;
        let mut tail = node.entries.split_off(mid);
        let (promoted, child0) = tail.remove(0);
        let right_node = Internal {
            child0,
            entries: tail,
        };
        let right_page = self.alloc();
        {
            let mut rp = self.cache.pin_new(self.page(right_page))?;
            right_node.encode(&mut rp.write());
        }
        node.encode(&mut p.write());
        drop(p);
        self.insert_into_parent(path, promoted, right_page)
    }

    /// Removes `key`; returns whether it was present. Absent keys are a no-op.
    pub fn delete(&self, key: u64) -> Result<bool> {
        let leaf = self.find_leaf(key, None)?;
        let mut p = self.pin_leaf(leaf)?;
        let (h, mut slots) = decode_leaf(&p.read())?;
        let Ok(idx) = slots.binary_search_by_key(&key, |s| s.key) else {
            return Ok(false);
        };
        let removed = slots.remove(idx);
        if let Some((_, first)) = removed.overflow() {
            self.free_overflow(first)?;
        }
        encode_leaf(&mut p.write(), &slots, h.next, h.high);
        self.meta.lock().len -= 1;
        Ok(true)
    }

    pub fn cursor(&self, from: Option<u64>) -> Result<BTreeCursor<'_>> {
        let mut c = BTreeCursor::new(self);
        c.seek(from.unwrap_or(0))?;
        Ok(c)
    }

    /// A cursor for ascending point probes.
    pub fn prober(&self) -> BTreeCursor<'_> {
        BTreeCursor::new(self)
    }

    pub fn scan_all(&self) -> Result<Vec<(u64, Stored)>> {
        let mut c = self.cursor(None)?;
        let mut out = Vec::new();
        while let Some(e) = c.next_entry()? {
            out.push(e);
        }
        Ok(out)
    }

    /// Fill fraction of every leaf in chain order.
    pub fn leaf_fill(&self) -> Result<Vec<f64>> {
        let mut page = self.find_leaf(0, None)?;
        let mut out = Vec::new();
        while page != NONE {
            let p = self.cache.pin(self.page(page))?;
            let (h, slots) = decode_leaf(&p.read())?;
            out.push(leaf_size(&slots) as f64 / PAGE_SIZE as f64);
            page = h.next;
        }
        Ok(out)
    }
}

/// A positioned leaf cursor supporting forward scans, ascending probes and
/// in-place replacement of the entry it is on.
pub struct BTreeCursor<'a> {
    tree: &'a BTree,
    leaf: Option<PinnedPage>,
    n: usize,
    next_leaf: u32,
    high: Option<u64>,
    /// Lowest key this leaf was reached for; probes below it re-descend.
    low: u64,
    pos: usize,
    current: Option<usize>,
}

impl<'a> BTreeCursor<'a> {
    fn new(tree: &'a BTree) -> Self {
        BTreeCursor {
            tree,
            leaf: None,
            n: 0,
            next_leaf: NONE,
            high: None,
            low: 0,
            pos: 0,
            current: None,
        }
    }

    fn position(&mut self, page: u32, key: u64) -> Result<()> {
        self.leaf = None;
        let p = self.tree.pin_leaf(page)?;
        let h = read_leaf_header(&p.read())?;
        self.n = h.n;
        self.next_leaf = h.next;
        self.high = h.high;
        self.low = key;
        self.leaf = Some(p);
        self.current = None;
        Ok(())
    }

    fn seek(&mut self, key: u64) -> Result<()> {
        let page = self.tree.find_leaf(key, None)?;
        self.position(page, key)?;
        let p = self.leaf.as_ref().unwrap();
        self.pos = leaf_search(&p.read(), self.n, key).0;
        Ok(())
    }

    fn covers(&self, key: u64) -> bool {
        self.leaf.is_some() && key >= self.low && self.high.is_none_or(|h| key < h)
    }

    pub fn next_entry(&mut self) -> Result<Option<(u64, Stored)>> {
        loop {
            if self.leaf.is_none() {
                return Ok(None);
            }
            if self.pos < self.n {
                let slot = leaf_slot(&self.leaf.as_ref().unwrap().read(), self.pos);
                self.current = Some(self.pos);
                self.pos += 1;
                let value = self.tree.slot_value(&slot)?;
                return Ok(Some((slot.key, value)));
            }
            if self.next_leaf == NONE {
                self.leaf = None;
                self.current = None;
                return Ok(None);
            }
            let low = self.high.unwrap_or(0);
            self.position(self.next_leaf, low)?;
            self.pos = 0;
        }
    }

    /// Point lookup that reuses the held leaf when `key` falls inside it.
    pub fn probe(&mut self, key: u64) -> Result<Option<Stored>> {
        if !self.covers(key) {
            let page = self.tree.find_leaf(key, None)?;
            self.position(page, key)?;
        }
        let slot = {
            let r = self.leaf.as_ref().unwrap().read();
            match leaf_search(&r, self.n, key) {
                (i, true) => {
                    self.current = Some(i);
                    leaf_slot(&r, i)
                }
                _ => {
                    self.current = None;
                    return Ok(None);
                }
            }
        };
        Ok(Some(self.tree.slot_value(&slot)?))
    }

    /// Replaces the value of the entry last returned by `next_entry` or a
    /// successful `probe`. Returns false, changing nothing, when the leaf has
    /// no room; the caller then falls back to [`BTree::upsert`].
    pub fn update_current(&mut self, value: Vec<u8>) -> Result<bool> {
        let Some(idx) = self.current else {
            return Err(Error::contract("update_current without a current entry"));
        };
        let tree = self.tree;
        let p = self.leaf.as_mut().unwrap();
        let (h, mut slots) = decode_leaf(&p.read())?;
        let new_value = Some(value);
        let old_size = slots[idx].size();
        if leaf_size(&slots) - old_size + slot_size_for(&new_value) > PAGE_SIZE {
            return Ok(false);
        }
        if let Some((_, first)) = slots[idx].overflow() {
            tree.free_overflow(first)?;
        }
        slots[idx] = tree.make_slot(slots[idx].key, new_value)?;
        let ok = encode_leaf(&mut p.write(), &slots, h.next, h.high);
        debug_assert!(ok);
        Ok(true)
    }
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn counter() -> Arc<AtomicU64> {
        Arc::new(AtomicU64::new(0))
    }

    fn load(cache: &BufferCache, dir: &Path, items: &[(u64, Vec<u8>)]) -> BTree {
        BTree::bulk_load(
            cache,
            &dir.join("t"),
            counter(),
            items.iter().map(|(k, v)| Ok((*k, Some(v.clone())))),
        )
        .unwrap()
    }

    #[test]
    fn empty_bulk_load() {
        let dir = tempfile::tempdir().unwrap();
        let cache = BufferCache::unbounded();
        let t = load(&cache, dir.path(), &[]);
        assert!(t.scan_all().unwrap().is_empty());
        assert_eq!(t.lookup(5).unwrap(), None);
    }

    #[test]
    fn bulk_load_rejects_bad_input() {
        let dir = tempfile::tempdir().unwrap();
        let cache = BufferCache::unbounded();
        let unsorted = [(2, Some(vec![])), (1, Some(vec![]))];
        let r = BTree::bulk_load(&cache, &dir.path().join("a"), counter(), unsorted.map(Ok));
        assert!(matches!(r, Err(Error::Contract(_))));
        let dup = [(1, Some(vec![])), (1, Some(vec![]))];
        let r = BTree::bulk_load(&cache, &dir.path().join("b"), counter(), dup.map(Ok));
        assert!(matches!(r, Err(Error::DuplicateKey(VertexId(1)))));
    }

    #[test]
    fn bulk_load_large_agrees_with_sorted_array() {
        let dir = tempfile::tempdir().unwrap();
        let cache = BufferCache::new(64);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut keys: Vec<u64> = (0..100_000).map(|_| rng.gen()).collect();
        keys.sort_unstable();
        keys.dedup();
        let items: Vec<(u64, Vec<u8>)> = keys
            .iter()
            .map(|k| (*k, k.to_le_bytes()[..(k % 9) as usize].to_vec()))
            .collect();
        let t = load(&cache, dir.path(), &items);
        assert_eq!(t.len(), items.len() as u64);
        for _ in 0..1000 {
            let probe = if rng.gen_bool(0.5) {
                keys[rng.gen_range(0..keys.len())]
            } else {
                rng.gen()
            };
            let expected = items
                .binary_search_by_key(&probe, |(k, _)| *k)
                .ok()
                .map(|i| Some(items[i].1.clone()));
            assert_eq!(t.lookup(probe).unwrap(), expected);
        }
        let fill = t.leaf_fill().unwrap();
        assert!(fill[..fill.len() - 1].iter().all(|f| *f >= 0.5));
    }

    #[test]
    fn overflow_values_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cache = BufferCache::new(8);
        let big: Vec<u8> = (0..20_000u32).map(|i| i as u8).collect();
        let t = load(&cache, dir.path(), &[(1, vec![1]), (2, big.clone()), (3, vec![3])]);
        assert_eq!(t.lookup(2).unwrap(), Some(Some(big.clone())));
        let mut bigger = big.clone();
        bigger.extend_from_slice(&big);
        t.upsert(2, Some(bigger.clone())).unwrap();
        assert_eq!(t.lookup(2).unwrap(), Some(Some(bigger)));
        t.upsert(2, Some(vec![9])).unwrap();
        assert_eq!(t.lookup(2).unwrap(), Some(Some(vec![9])));
    }

    #[test]
    fn upsert_delete_lookup() {
        let dir = tempfile::tempdir().unwrap();
        let cache = BufferCache::new(8);
        let t = BTree::create(&cache, &dir.path().join("t"), counter()).unwrap();
        assert!(t.upsert(5, Some(b"v".to_vec())).unwrap());
        assert_eq!(t.lookup(5).unwrap(), Some(Some(b"v".to_vec())));
        assert!(t.delete(5).unwrap());
        assert_eq!(t.lookup(5).unwrap(), None);
        assert!(!t.delete(5).unwrap());
    }

    #[test]
    fn scan_from_key() {
        let dir = tempfile::tempdir().unwrap();
        let cache = BufferCache::unbounded();
        let items: Vec<_> = (0..2000u64).map(|k| (k * 2, vec![0u8; 40])).collect();
        let t = load(&cache, dir.path(), &items);
        let mut c = t.cursor(Some(1001)).unwrap();
        assert_eq!(c.next_entry().unwrap().unwrap().0, 1002);
        let mut c = t.cursor(Some(4000)).unwrap();
        assert!(c.next_entry().unwrap().is_none());
    }

    #[test]
    fn probe_reuses_leaf_for_ascending_keys() {
        let dir = tempfile::tempdir().unwrap();
        let cache = BufferCache::unbounded();
        let items: Vec<_> = (0..10_000u64).map(|k| (k, vec![0u8; 20])).collect();
        let t = load(&cache, dir.path(), &items);
        let before = t.leaf_reads();
        let mut p = t.prober();
        assert!(p.probe(2).unwrap().is_some());
        assert_eq!(t.leaf_reads() - before, 1);
        assert!(t.leaf_reads() - before <= t.height() as u64);
        for k in 3..50 {
            assert!(p.probe(k).unwrap().is_some());
        }
        assert_eq!(t.leaf_reads() - before, 1);
        assert!(p.probe(20_000).unwrap().is_none());
    }

    #[test]
    fn update_in_place_through_cursor() {
        let dir = tempfile::tempdir().unwrap();
        let cache = BufferCache::new(16);
        let items: Vec<_> = (0..500u64).map(|k| (k, vec![1u8; 8])).collect();
        let t = load(&cache, dir.path(), &items);
        let mut c = t.cursor(None).unwrap();
        while let Some((k, _)) = c.next_entry().unwrap() {
            assert!(c.update_current(k.to_be_bytes().to_vec()).unwrap());
        }
        drop(c);
        for (k, v) in t.scan_all().unwrap() {
            assert_eq!(v, Some(k.to_be_bytes().to_vec()));
        }
    }

    #[test]
    fn cursor_refuses_update_that_does_not_fit() {
        let dir = tempfile::tempdir().unwrap();
        let cache = BufferCache::unbounded();
        let items: Vec<_> = (0..400u64).map(|k| (k, vec![1u8; 100])).collect();
        let t = load(&cache, dir.path(), &items);
        let mut p = t.prober();
        p.probe(10).unwrap().unwrap();
        assert!(!p.update_current(vec![2u8; 900]).unwrap());
        assert_eq!(t.lookup(10).unwrap(), Some(Some(vec![1u8; 100])));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn random_ops_match_ordered_map(
            ops in prop::collection::vec((0u8..3, 0u64..400, 0usize..1500), 1..800),
            frames in 8usize..24,
        ) {
            let dir = tempfile::tempdir().unwrap();
            let cache = BufferCache::new(frames);
            let t = BTree::create(&cache, &dir.path().join("t"), counter()).unwrap();
            let mut oracle = BTreeMap::new();
            for (op, key, len) in ops {
                match op {
                    0 | 1 => {
                        let v = vec![(key % 251) as u8; len];
                        t.upsert(key, Some(v.clone())).unwrap();
                        oracle.insert(key, v);
                    }
                    _ => {
                        prop_assert_eq!(t.delete(key).unwrap(), oracle.remove(&key).is_some());
                    }
                }
            }
            let got: Vec<(u64, Vec<u8>)> = t
                .scan_all()
                .unwrap()
                .into_iter()
                .map(|(k, v)| (k, v.unwrap()))
                .collect();
            let want: Vec<(u64, Vec<u8>)> = oracle.into_iter().collect();
            prop_assert_eq!(got, want);
            prop_assert!(cache.resident() <= frames);
        }
    }
}
