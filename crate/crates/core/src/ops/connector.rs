use std::collections::VecDeque;
use std::fs::File;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::thread::{Scope, ScopedJoinHandle};

use crossbeam_channel::{bounded, Receiver, Select, Sender};
use parking_lot::{Condvar, Mutex};

use crate::api::VertexId;
use crate::error::{Error, Result};
use crate::ops::groupby::{KMerge, Keyed};
use crate::ops::partition::partition_fn;
use crate::storage::RunFile;

/// Upper bound on the encoded size of one batch.
pub const BATCH_BYTES: usize = 32 * 1024;
/// Batches a channel buffers before the sender blocks.
pub const CHANNEL_BATCHES: usize = 64;

const FRAME_HEADER: usize = 12;

#[derive(Debug)]
pub enum Frame {
    Batch(Vec<u8>),
    End,
}

pub fn channel() -> (Sender<Frame>, Receiver<Frame>) {
    bounded(CHANNEL_BATCHES)
}

fn encode(buf: &mut Vec<u8>, vid: VertexId, payload: &[u8]) {
    buf.extend_from_slice(&vid.0.to_be_bytes());
    buf.extend_from_slice(&(payload.len() as u32).to_be_bytes());
    buf.extend_from_slice(payload);
}

/// Iterates the tuples of one encoded batch.
pub fn decode_batch(batch: &[u8]) -> impl Iterator<Item = Result<(VertexId, &[u8])>> {
    let mut rest = batch;
    std::iter::from_fn(move || {
        if rest.is_empty() {
            return None;
        }
        if rest.len() < FRAME_HEADER {
            return Some(Err(Error::corrupt("truncated batch header")));
        }
        let vid = VertexId(u64::from_be_bytes(rest[..8].try_into().unwrap()));
        let len = u32::from_be_bytes(rest[8..12].try_into().unwrap()) as usize;
        if rest.len() < FRAME_HEADER + len {
            return Some(Err(Error::corrupt("truncated batch payload")));
        }
        let payload = &rest[FRAME_HEADER..FRAME_HEADER + len];
        rest = &rest[FRAME_HEADER + len..];
        Some(Ok((vid, payload)))
    })
}

#[derive(Default)]
struct TailState {
    batches: VecDeque<usize>,
    closed: bool,
    aborted: bool,
}

#[derive(Default)]
struct Tail {
    state: Mutex<TailState>,
    cv: Condvar,
}

/// Producer end of a sender-side materializing channel: batches go to a
/// local file and never block; a drainer thread tails the file into the
/// channel.
pub struct TailWriter {
    file: File,
    tail: Arc<Tail>,
    finished: bool,
}

impl TailWriter {
    fn append(&mut self, batch: &[u8]) -> Result<()> {
        self.file.write_all(batch)?;
        let mut st = self.tail.state.lock();
        st.batches.push_back(batch.len());
        self.tail.cv.notify_one();
        Ok(())
    }

    fn close(mut self) {
        self.finished = true;
        let mut st = self.tail.state.lock();
        st.closed = true;
        self.tail.cv.notify_one();
    }
}

impl Drop for TailWriter {
    fn drop(&mut self) {
        if !self.finished {
            let mut st = self.tail.state.lock();
            st.aborted = true;
            self.tail.cv.notify_one();
        }
    }
}

fn drain(run: RunFile, tail: Arc<Tail>, tx: Sender<Frame>) -> Result<()> {
    let mut file = File::open(run.path())?;
    loop {
        let len = {
            let mut st = tail.state.lock();
            loop {
                if let Some(len) = st.batches.pop_front() {
                    break Some(len);
                }
                if st.aborted {
                    return Ok(());
                }
                if st.closed {
                    break None;
                }
                tail.cv.wait(&mut st);
            }
        };
        let frame = match len {
            Some(len) => {
                let mut buf = vec![0u8; len];
                file.read_exact(&mut buf)?;
                Frame::Batch(buf)
            }
            None => Frame::End,
        };
        let end = matches!(frame, Frame::End);
        tx.send(frame).map_err(|_| Error::ChannelClosed)?;
        if end {
            return Ok(());
        }
    }
}

/// Opens a materializing lane backed by `path` and starts its drainer.
pub fn materialized_lane<'scope>(
    scope: &'scope Scope<'scope, '_>,
    path: PathBuf,
    tx: Sender<Frame>,
) -> Result<(TailWriter, ScopedJoinHandle<'scope, Result<()>>)> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let file = File::create(&path)?;
    let tail = Arc::new(Tail::default());
    let run = RunFile::new(path);
    let t = tail.clone();
    let handle = scope.spawn(move || drain(run, t, tx));
    Ok((
        TailWriter {
            file,
            tail,
            finished: false,
        },
        handle,
    ))
}

enum Lane {
    Pipelined(Sender<Frame>),
    Materialized(TailWriter),
}

impl Lane {
    fn ship(&mut self, batch: Vec<u8>) -> Result<()> {
        match self {
            Lane::Pipelined(tx) => tx.send(Frame::Batch(batch)).map_err(|_| Error::ChannelClosed),
            Lane::Materialized(w) => w.append(&batch),
        }
    }
}

/// Producer side of an m-to-n partitioning connector: routes each tuple to
/// lane `partition_fn(vid, n)`, batching per lane.
pub struct Outbox {
    lanes: Vec<Lane>,
    bufs: Vec<Vec<u8>>,
    last: Vec<Option<VertexId>>,
    bytes: u64,
    tuples: u64,
}

impl Outbox {
    /// Fully pipelined lanes: `send` blocks while a receiver is behind.
    pub fn pipelined(txs: Vec<Sender<Frame>>) -> Self {
        Self::with_lanes(txs.into_iter().map(Lane::Pipelined).collect())
    }

    /// Materializing lanes for the merging connector. Input must be
    /// vid-ascending.
    pub fn materialized(writers: Vec<TailWriter>) -> Self {
        Self::with_lanes(writers.into_iter().map(Lane::Materialized).collect())
    }

    fn with_lanes(lanes: Vec<Lane>) -> Self {
        assert!(!lanes.is_empty(), "connector needs at least one consumer");
        let n = lanes.len();
        Outbox {
            lanes,
            bufs: vec![Vec::new(); n],
            last: vec![None; n],
            bytes: 0,
            tuples: 0,
        }
    }

    pub fn send(&mut self, vid: VertexId, payload: &[u8]) -> Result<()> {
        let lane = partition_fn(vid, self.lanes.len());
        if let Lane::Materialized(_) = self.lanes[lane] {
            if self.last[lane].is_some_and(|l| vid < l) {
                return Err(Error::contract(format!(
                    "merging connector input is not vid-ascending at {vid}"
                )));
            }
            self.last[lane] = Some(vid);
        }
        let buf = &mut self.bufs[lane];
        if !buf.is_empty() && buf.len() + FRAME_HEADER + payload.len() > BATCH_BYTES {
            let full = std::mem::take(buf);
            self.lanes[lane].ship(full)?;
        }
        let buf = &mut self.bufs[lane];
        encode(buf, vid, payload);
        self.bytes += (FRAME_HEADER + payload.len()) as u64;
        self.tuples += 1;
        Ok(())
    }

    /// Encoded bytes handed to the connector so far.
    pub fn bytes(&self) -> u64 {
        self.bytes
    }

    pub fn tuples(&self) -> u64 {
        self.tuples
    }

    /// Flushes every lane and signals end of stream; returns bytes sent.
    pub fn finish(mut self) -> Result<u64> {
        let bufs = std::mem::take(&mut self.bufs);
        for (lane, buf) in self.lanes.iter_mut().zip(bufs) {
            if !buf.is_empty() {
                lane.ship(buf)?;
            }
        }
        for lane in self.lanes.drain(..) {
            match lane {
                Lane::Pipelined(tx) => tx.send(Frame::End).map_err(|_| Error::ChannelClosed)?,
                Lane::Materialized(w) => w.close(),
            }
        }
        Ok(self.bytes)
    }
}

/// Receiver side of the pipelined connector: hands tuples to `sink` in
/// whatever order the producers deliver them.
pub fn receive_pipelined(
    rxs: &[Receiver<Frame>],
    mut sink: impl FnMut(VertexId, &[u8]) -> Result<()>,
) -> Result<u64> {
    let mut open = vec![true; rxs.len()];
    let mut remaining = rxs.len();
    let mut bytes = 0u64;
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
            Ok(Frame::Batch(batch)) => {
                bytes += batch.len() as u64;
                for t in decode_batch(&batch) {
                    let (vid, payload) = t?;
                    sink(vid, payload)?;
                }
            }
            Ok(Frame::End) => {
                open[i] = false;
                remaining -= 1;
            }
            Err(_) => return Err(Error::ChannelClosed),
        }
    }
    Ok(bytes)
}

/// Blocking tuple stream over one channel.
pub struct FrameStream {
    rx: Receiver<Frame>,
    batch: Vec<u8>,
    pos: usize,
    done: bool,
}

impl FrameStream {
    pub fn new(rx: Receiver<Frame>) -> Self {
        FrameStream {
            rx,
            batch: Vec::new(),
            pos: 0,
            done: false,
        }
    }

    fn step(&mut self) -> Result<Option<Keyed>> {
        while self.pos >= self.batch.len() {
            if self.done {
                return Ok(None);
            }
            match self.rx.recv() {
                Ok(Frame::Batch(b)) => {
                    self.batch = b;
                    self.pos = 0;
                }
                Ok(Frame::End) => {
                    self.done = true;
                    self.batch.clear();
                    self.pos = 0;
                }
                Err(_) => return Err(Error::ChannelClosed),
            }
        }
        let mut it = decode_batch(&self.batch[self.pos..]);
        let (vid, payload) = it.next().expect("non-empty batch remainder")?;
        self.pos += FRAME_HEADER + payload.len();
        Ok(Some((vid, payload.to_vec())))
    }
}

impl Iterator for FrameStream {
    type Item = Result<Keyed>;

    fn next(&mut self) -> Option<Self::Item> {
        self.step().transpose()
    }
}

/// Receiver side of the merging connector: one globally vid-ascending
/// stream, equal vids drained lower producer first.
pub fn merge_receiver(rxs: Vec<Receiver<Frame>>) -> impl Iterator<Item = Result<Keyed>> {
    KMerge::new(rxs.into_iter().map(FrameStream::new).collect())
        .map(|r| r.map(|(vid, _, payload)| (vid, payload)))
}

fn join_all<T>(handles: Vec<ScopedJoinHandle<'_, Result<T>>>) -> Result<Vec<T>> {
    let mut out = Vec::with_capacity(handles.len());
    let mut first_err = None;
    for h in handles {
        match h.join().expect("connector thread panicked") {
            Ok(v) => out.push(v),
            Err(e) => {
                let replace = match &first_err {
                    None => true,
                    Some(Error::ChannelClosed) => !matches!(e, Error::ChannelClosed),
                    Some(_) => false,
                };
                if replace {
                    first_err = Some(e);
                }
            }
        }
    }
    match first_err {
        Some(e) => Err(e),
        None => Ok(out),
    }
}

/// Runs an m-to-n fully pipelined repartitioning of `producers` onto `n`
/// consumers. Each consumer stream keeps per-producer order.
pub fn mton_partition(producers: Vec<Vec<Keyed>>, n: usize) -> Result<Vec<Vec<Keyed>>> {
    let (txs, rxs): (Vec<Vec<_>>, Vec<Vec<_>>) = (0..producers.len())
        .map(|_| (0..n).map(|_| channel()).unzip())
        .unzip();
    std::thread::scope(|s| {
        let mut senders = Vec::new();
        for (input, tx) in producers.into_iter().zip(txs) {
            senders.push(s.spawn(move || {
                let mut out = Outbox::pipelined(tx);
                for (vid, p) in input {
                    out.send(vid, &p)?;
                }
                out.finish().map(|_| ())
            }));
        }
        let mut receivers = Vec::new();
        for c in 0..n {
            let mine: Vec<_> = rxs.iter().map(|r| r[c].clone()).collect();
            receivers.push(s.spawn(move || {
                let mut got = Vec::new();
                receive_pipelined(&mine, |vid, p| {
                    got.push((vid, p.to_vec()));
                    Ok(())
                })?;
                Ok(got)
            }));
        }
        drop(rxs);
        let out = join_all(receivers);
        join_all(senders)?;
        out
    })
}

/// Runs an m-to-n merging repartitioning of vid-ascending `producers` onto
/// `n` consumers through sender-side materialized files under `tmp_dir`.
pub fn mton_partition_merge(
    producers: Vec<Vec<Keyed>>,
    n: usize,
    tmp_dir: &Path,
) -> Result<Vec<Vec<Keyed>>> {
    let (txs, rxs): (Vec<Vec<_>>, Vec<Vec<_>>) = (0..producers.len())
        .map(|_| (0..n).map(|_| channel()).unzip())
        .unzip();
    std::thread::scope(|s| {
        let mut senders = Vec::new();
        let mut drainers = Vec::new();
        for (p, (input, tx)) in producers.into_iter().zip(txs).enumerate() {
            let mut writers = Vec::new();
            for (c, tx) in tx.into_iter().enumerate() {
                let (w, h) = materialized_lane(s, tmp_dir.join(format!("mat-{p}-{c}")), tx)?;
                writers.push(w);
                drainers.push(h);
            }
            senders.push(s.spawn(move || {
                let mut out = Outbox::materialized(writers);
                for (vid, payload) in input {
                    out.send(vid, &payload)?;
                }
                out.finish().map(|_| ())
            }));
        }
        let mut receivers = Vec::new();
        for c in 0..n {
            let mine: Vec<_> = rxs.iter().map(|r| r[c].clone()).collect();
            receivers.push(s.spawn(move || merge_receiver(mine).collect::<Result<Vec<_>>>()));
        }
        drop(rxs);
        let out = join_all(receivers);
        join_all(senders)?;
        join_all(drainers)?;
        out
    })
}
