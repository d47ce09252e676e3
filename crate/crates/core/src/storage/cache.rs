//! A bounded buffer cache of fixed-size pages shared by every index in a job.
//!
//! Frames are replaced LRU among unpinned frames. Dirty frames are written
//! back before their frame is reused. All page I/O happens while holding the
//! table lock, which keeps the bookkeeping simple at the cost of serializing
//! misses.

use std::collections::{BTreeMap, HashMap};
use std::fs::{File, OpenOptions};
use std::os::unix::fs::FileExt;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU32, AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use parking_lot::{Condvar, Mutex, RwLock, RwLockReadGuard, RwLockWriteGuard};

use crate::error::{Error, Result};

pub const PAGE_SIZE: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct FileId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PageId {
    pub file: FileId,
    pub page: u32,
}

type FrameData = Arc<RwLock<Box<[u8]>>>;

struct Frame {
    page: Option<PageId>,
    pins: u32,
    dirty: bool,
    tick: u64,
    data: FrameData,
}

#[derive(Default)]
struct Table {
    pages: HashMap<PageId, usize>,
    frames: Vec<Frame>,
    /// Unpinned resident frames keyed by the tick of their last unpin.
    lru: BTreeMap<u64, usize>,
    free: Vec<usize>,
    tick: u64,
}

#[derive(Debug, Default)]
pub struct CacheStats {
    pub hits: AtomicU64,
    pub misses: AtomicU64,
    pub evictions: AtomicU64,
    pub pages_written: AtomicU64,
    pub bytes_written: AtomicU64,
    pub max_resident: AtomicU64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CacheSnapshot {
    pub hits: u64,
    pub misses: u64,
    pub evictions: u64,
    pub pages_written: u64,
    pub bytes_written: u64,
    pub max_resident: u64,
}

struct Inner {
    capacity: Option<usize>,
    pin_wait: Duration,
    table: Mutex<Table>,
    unpinned: Condvar,
    files: RwLock<HashMap<FileId, (Arc<File>, PathBuf)>>,
    next_file: AtomicU32,
    stats: CacheStats,
}

#[derive(Clone)]
pub struct BufferCache {
    inner: Arc<Inner>,
}

impl std::fmt::Debug for BufferCache {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BufferCache")
            .field("capacity", &self.inner.capacity)
            .field("resident", &self.resident())
            .finish()
    }
}

impl BufferCache {
    /// A cache holding at most `frames` pages.
    pub fn new(frames: usize) -> Self {
        Self::build(Some(frames.max(1)))
    }

    /// A cache that never evicts.
    pub fn unbounded() -> Self {
        Self::build(None)
    }

    pub fn with_bytes(bytes: Option<usize>) -> Self {
        match bytes {
            Some(b) => Self::new(b / PAGE_SIZE),
            None => Self::unbounded(),
        }
    }

    fn build(capacity: Option<usize>) -> Self {
        BufferCache {
            inner: Arc::new(Inner {
                capacity,
                pin_wait: Duration::from_secs(10),
                table: Mutex::new(Table::default()),
                unpinned: Condvar::new(),
                files: RwLock::new(HashMap::new()),
                next_file: AtomicU32::new(0),
                stats: CacheStats::default(),
            }),
        }
    }

    /// Shortens how long `pin` waits for a frame before giving up.
    pub fn set_pin_wait(&mut self, wait: Duration) {
        if let Some(inner) = Arc::get_mut(&mut self.inner) {
            inner.pin_wait = wait;
        }
    }

    pub fn capacity(&self) -> Option<usize> {
        self.inner.capacity
    }

    pub fn resident(&self) -> usize {
        self.inner.table.lock().pages.len()
    }

    pub fn stats(&self) -> CacheSnapshot {
        let s = &self.inner.stats;
        CacheSnapshot {
            hits: s.hits.load(Ordering::Relaxed),
            misses: s.misses.load(Ordering::Relaxed),
            evictions: s.evictions.load(Ordering::Relaxed),
            pages_written: s.pages_written.load(Ordering::Relaxed),
            bytes_written: s.bytes_written.load(Ordering::Relaxed),
            max_resident: s.max_resident.load(Ordering::Relaxed),
        }
    }

    /// Creates (truncating) a page file and registers it with the cache.
    pub fn create_file(&self, path: &Path) -> Result<FileId> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let file = OpenOptions::new()
            .read(true)
            .write(true)
            .create(true)
            .truncate(true)
            .open(path)?;
        let id = FileId(self.inner.next_file.fetch_add(1, Ordering::Relaxed));
        self.inner
            .files
            .write()
            .insert(id, (Arc::new(file), path.to_path_buf()));
        Ok(id)
    }

    /// Discards every cached page of `file` without writing it back, then
    /// removes the file from disk.
    pub fn delete_file(&self, file: FileId) -> Result<()> {
        {
            let mut t = self.inner.table.lock();
            let victims: Vec<(PageId, usize)> = t
                .pages
                .iter()
                .filter(|(p, _)| p.file == file)
                .map(|(p, f)| (*p, *f))
                .collect();
            for (pid, f) in victims {
                debug_assert_eq!(t.frames[f].pins, 0, "deleting file with pinned page");
                t.pages.remove(&pid);
                let tick = t.frames[f].tick;
                t.lru.remove(&tick);
                let frame = &mut t.frames[f];
                frame.page = None;
                frame.dirty = false;
                t.free.push(f);
            }
            self.inner.unpinned.notify_all();
        }
        if let Some((_, path)) = self.inner.files.write().remove(&file) {
            match std::fs::remove_file(&path) {
                Ok(()) => {}
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
                Err(e) => return Err(e.into()),
            }
        }
        Ok(())
    }

    fn file(&self, id: FileId) -> Result<Arc<File>> {
        self.inner
            .files
            .read()
            .get(&id)
            .map(|(f, _)| f.clone())
            .ok_or_else(|| Error::corrupt(format!("unknown file {id:?}")))
    }

    /// Pins an existing page, reading it from disk on a miss. Pages past the
    /// end of the file read as zeros.
    pub fn pin(&self, id: PageId) -> Result<PinnedPage> {
        self.pin_inner(id, false)
    }

    /// Pins a freshly allocated page: the frame is zero-filled and dirty, and
    /// nothing is read from disk.
    pub fn pin_new(&self, id: PageId) -> Result<PinnedPage> {
        self.pin_inner(id, true)
    }

    /// Releases a pin, marking the page dirty if it was modified.
    pub fn unpin(&self, mut page: PinnedPage, dirty: bool) {
        page.dirty |= dirty;
        drop(page);
    }

    fn pin_inner(&self, id: PageId, fresh: bool) -> Result<PinnedPage> {
        let inner = &self.inner;
        let mut t = inner.table.lock();
        loop {
            if let Some(&f) = t.pages.get(&id) {
                let frame = &mut t.frames[f];
                if frame.pins == 0 {
                    let tick = frame.tick;
                    t.lru.remove(&tick);
                }
                let frame = &mut t.frames[f];
                frame.pins += 1;
                let data = frame.data.clone();
                if fresh {
                    frame.dirty = true;
                    data.write().fill(0);
                }
                inner.stats.hits.fetch_add(1, Ordering::Relaxed);
                return Ok(self.pinned(f, id, data, fresh));
            }

            let slot = if let Some(f) = t.free.pop() {
                Some(f)
            } else if inner.capacity.is_none_or(|c| t.frames.len() < c) {
                t.frames.push(Frame {
                    page: None,
                    pins: 0,
                    dirty: false,
                    tick: 0,
                    data: Arc::new(RwLock::new(vec![0u8; PAGE_SIZE].into_boxed_slice())),
                });
                Some(t.frames.len() - 1)
            } else {
                t.lru.pop_first().map(|(_, f)| f)
            };

            let Some(f) = slot else {
                let timed_out = inner.unpinned.wait_for(&mut t, inner.pin_wait).timed_out();
                if timed_out && t.lru.is_empty() && t.free.is_empty() {
                    return Err(Error::CacheExhausted {
                        capacity: inner.capacity.unwrap_or(0),
                    });
                }
                continue;
            };

            let data = t.frames[f].data.clone();
            if let Some(old) = t.frames[f].page.take() {
                t.pages.remove(&old);
                inner.stats.evictions.fetch_add(1, Ordering::Relaxed);
                if t.frames[f].dirty {
                    let file = self.file(old.file)?;
                    file.write_at(&data.read(), old.page as u64 * PAGE_SIZE as u64)?;
                    inner.stats.pages_written.fetch_add(1, Ordering::Relaxed);
                    inner
                        .stats
                        .bytes_written
                        .fetch_add(PAGE_SIZE as u64, Ordering::Relaxed);
                }
            }
            {
                let mut buf = data.write();
                if fresh {
                    buf.fill(0);
                } else {
                    read_page(&*self.file(id.file)?, id.page, &mut buf)?;
                    inner.stats.misses.fetch_add(1, Ordering::Relaxed);
                }
            }
            let frame = &mut t.frames[f];
            frame.page = Some(id);
            frame.pins = 1;
            frame.dirty = fresh;
            t.pages.insert(id, f);
            inner
                .stats
                .max_resident
                .fetch_max(t.pages.len() as u64, Ordering::Relaxed);
            return Ok(self.pinned(f, id, data, fresh));
        }
    }

    fn pinned(&self, frame: usize, id: PageId, data: FrameData, dirty: bool) -> PinnedPage {
        PinnedPage {
            cache: self.inner.clone(),
            frame,
            id,
            data,
            dirty,
        }
    }
}

fn read_page(file: &File, page: u32, buf: &mut [u8]) -> Result<()> {
    let offset = page as u64 * PAGE_SIZE as u64;
    let mut done = 0;
    while done < buf.len() {
        let n = file.read_at(&mut buf[done..], offset + done as u64)?;
        if n == 0 {
            buf[done..].fill(0);
            break;
        }
        done += n;
    }
    Ok(())
}

/// A pinned page. Dropping it unpins the frame.
pub struct PinnedPage {
    cache: Arc<Inner>,
    frame: usize,
    id: PageId,
    data: FrameData,
    dirty: bool,
}

impl PinnedPage {
    pub fn id(&self) -> PageId {
        self.id
    }

    pub fn read(&self) -> RwLockReadGuard<'_, Box<[u8]>> {
        self.data.read()
    }

    /// Write access; the page is written back before its frame is reused.
    pub fn write(&mut self) -> RwLockWriteGuard<'_, Box<[u8]>> {
        self.dirty = true;
        self.data.write()
    }
}

impl Drop for PinnedPage {
    fn drop(&mut self) {
        let mut t = self.cache.table.lock();
        t.tick += 1;
        let tick = t.tick;
        let frame = &mut t.frames[self.frame];
        debug_assert!(frame.pins > 0);
        frame.pins -= 1;
        frame.dirty |= self.dirty;
        if frame.pins == 0 {
            frame.tick = tick;
            t.lru.insert(tick, self.frame);
            self.cache.unpinned.notify_one();
        }
    }
}
