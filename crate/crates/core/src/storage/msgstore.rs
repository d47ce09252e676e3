use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use crate::api::{MsgTuple, VertexId};
use crate::error::{Error, Result};

const HEADER: usize = 13;

/// Appends framed message tuples to a file.
pub struct MsgWriter {
    out: BufWriter<File>,
    bytes: u64,
    count: u64,
}

impl MsgWriter {
    pub fn create(path: &Path) -> Result<Self> {
        Ok(MsgWriter {
            out: BufWriter::with_capacity(64 * 1024, File::create(path)?),
            bytes: 0,
            count: 0,
        })
    }

    pub fn write(&mut self, vid: VertexId, payload: Option<&[u8]>) -> Result<()> {
        let mut head = [0u8; HEADER];
        head[..8].copy_from_slice(&vid.0.to_be_bytes());
        let body = payload.unwrap_or(&[]);
        head[8] = payload.is_some() as u8;
        head[9..].copy_from_slice(&(body.len() as u32).to_be_bytes());
        self.out.write_all(&head)?;
        self.out.write_all(body)?;
        self.bytes += (HEADER + body.len()) as u64;
        self.count += 1;
        Ok(())
    }

    pub fn write_tuple(&mut self, m: &MsgTuple) -> Result<()> {
        self.write(m.vid, m.payload.as_deref())
    }

    pub fn bytes(&self) -> u64 {
        self.bytes
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    /// Flushes and syncs; returns bytes written.
    pub fn finish(mut self) -> Result<u64> {
        self.out.flush()?;
        self.out.get_ref().sync_data()?;
        Ok(self.bytes)
    }
}

/// Sequential reader over a framed message file.
pub struct MsgReader {
    input: Option<BufReader<File>>,
}

impl MsgReader {
    pub fn open(path: &Path) -> Result<Self> {
        Ok(MsgReader {
            input: Some(BufReader::with_capacity(64 * 1024, File::open(path)?)),
        })
    }

    /// Like `open`, but a missing file reads as empty when `allow_missing`.
    pub fn open_or_empty(path: &Path, allow_missing: bool) -> Result<Self> {
        match File::open(path) {
            Ok(f) => Ok(MsgReader {
                input: Some(BufReader::with_capacity(64 * 1024, f)),
            }),
            Err(e) if e.kind() == io::ErrorKind::NotFound && allow_missing => Ok(Self::empty()),
            Err(e) => Err(e.into()),
        }
    }

    pub fn empty() -> Self {
        MsgReader { input: None }
    }

    pub fn next_msg(&mut self) -> Result<Option<MsgTuple>> {
        let Some(input) = self.input.as_mut() else {
            return Ok(None);
        };
        let mut head = [0u8; HEADER];
        match read_full(input, &mut head)? {
            0 => return Ok(None),
            HEADER => {}
            n => return Err(Error::corrupt(format!("truncated message header ({n} bytes)"))),
        }
        let vid = VertexId(u64::from_be_bytes(head[..8].try_into().unwrap()));
        let len = u32::from_be_bytes(head[9..].try_into().unwrap()) as usize;
        let payload = match head[8] {
            0 if len == 0 => None,
            1 => {
                let mut body = vec![0u8; len];
                input
                    .read_exact(&mut body)
                    .map_err(|_| Error::corrupt("truncated message payload"))?;
                Some(body)
            }
            t => return Err(Error::corrupt(format!("bad message tag {t} len {len}"))),
        };
        Ok(Some(MsgTuple { vid, payload }))
    }
}

impl Iterator for MsgReader {
    type Item = Result<MsgTuple>;

    fn next(&mut self) -> Option<Self::Item> {
        self.next_msg().transpose()
    }
}

fn read_full(r: &mut impl Read, buf: &mut [u8]) -> io::Result<usize> {
    let mut n = 0;
    while n < buf.len() {
        match r.read(&mut buf[n..]) {
            Ok(0) => break,
            Ok(k) => n += k,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    Ok(n)
}

pub fn write_msgs<'a>(path: &Path, msgs: impl IntoIterator<Item = &'a MsgTuple>) -> Result<u64> {
    let mut w = MsgWriter::create(path)?;
    for m in msgs {
        w.write_tuple(m)?;
    }
    w.finish()
}

pub fn read_msgs(path: &Path) -> Result<Vec<MsgTuple>> {
    MsgReader::open(path)?.collect()
}

/// A scratch file removed when dropped.
#[derive(Debug)]
pub struct RunFile {
    path: PathBuf,
}

impl RunFile {
    pub fn new(path: PathBuf) -> Self {
        RunFile { path }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

impl Drop for RunFile {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}
