use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File};
use std::io::{BufReader, Read};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::api::{GlobalState, VertexId, VertexTuple};
use crate::error::{Error, Result};
use crate::ops::groupby::KMerge;
use crate::ops::{partition_fn, Join, PlanConfig};
use crate::runtime::engine::{write_gs, Engine, GsRecord, PartitionSeed};
use crate::runtime::plan::PartitionMap;
use crate::storage::{MsgReader, MsgWriter};

pub const MANIFEST: &str = "manifest.json";
pub const COMMITTED: &str = "COMMITTED";

/// Workers excluded from partition placement after failing.
pub type Blacklist = BTreeSet<usize>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InjectedFailure {
    pub worker: usize,
    pub superstep: u64,
}

/// Test hook that aborts a worker's tasks at the start of a superstep. Each
/// failure fires once.
#[derive(Debug, Clone, Default)]
pub struct FailureInjector {
    pending: Vec<InjectedFailure>,
}

impl FailureInjector {
    pub fn new(failures: impl IntoIterator<Item = InjectedFailure>) -> Self {
        FailureInjector {
            pending: failures.into_iter().collect(),
        }
    }

    pub fn inject(&mut self, worker: usize, superstep: u64) {
        self.pending.push(InjectedFailure { worker, superstep });
    }

    pub fn pending(&self) -> &[InjectedFailure] {
        &self.pending
    }

    pub fn check(&mut self, superstep: u64, live_workers: &BTreeSet<usize>) -> Result<()> {
        let hit = self
            .pending
            .iter()
            .position(|f| f.superstep == superstep && live_workers.contains(&f.worker));
        match hit {
            Some(i) => {
                let f = self.pending.remove(i);
                log::warn!("injected failure of worker {} at superstep {}", f.worker, superstep);
                Err(Error::WorkerFailure {
                    worker: f.worker,
                    superstep,
                })
            }
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub superstep: u64,
    pub num_partitions: usize,
    pub plan: PlanConfig,
    pub gs: GsRecord,
    /// File name to hex sha256.
    pub files: BTreeMap<String, String>,
}

/// A sealed checkpoint on disk.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub superstep: u64,
    pub dir: PathBuf,
    pub manifest: Manifest,
}

impl Checkpoint {
    pub fn vertex_files(&self) -> Vec<PathBuf> {
        self.files_with_prefix("vertex-")
    }

    pub fn msg_files(&self) -> Vec<PathBuf> {
        self.files_with_prefix("msg-")
    }

    pub fn vid_files(&self) -> Vec<PathBuf> {
        self.files_with_prefix("vid-")
    }

    fn files_with_prefix(&self, prefix: &str) -> Vec<PathBuf> {
        (0..self.manifest.num_partitions)
            .map(|p| format!("{prefix}{p}.dat"))
            .filter(|f| self.manifest.files.contains_key(f))
            .map(|f| self.dir.join(f))
            .collect()
    }

    /// Recomputes every file hash against the manifest.
    pub fn verify(&self) -> Result<()> {
        if !self.dir.join(COMMITTED).exists() {
            return Err(Error::corrupt(format!("{} is not sealed", self.dir.display())));
        }
        for (name, want) in &self.manifest.files {
            let got = sha256_file(&self.dir.join(name))?;
            if &got != want {
                return Err(Error::corrupt(format!(
                    "{}: hash mismatch for {name}",
                    self.dir.display()
                )));
            }
        }
        Ok(())
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut r = BufReader::new(File::open(path)?);
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 64 * 1024];
    loop {
        let n = r.read(&mut buf)?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

fn sp_superstep(name: &str) -> Option<u64> {
    name.strip_prefix("sp-")?.parse().ok()
}

/// Sealed checkpoints under `dir`, newest first. Unsealed directories are
/// ignored.
pub fn list_checkpoints(dir: &Path) -> Result<Vec<Checkpoint>> {
    let mut out = Vec::new();
    let entries = match fs::read_dir(dir) {
        Ok(e) => e,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(out),
        Err(e) => return Err(e.into()),
    };
    for e in entries {
        let e = e?;
        let name = e.file_name().to_string_lossy().into_owned();
        let Some(superstep) = sp_superstep(&name) else {
            continue;
        };
        let path = e.path();
        if !path.join(COMMITTED).exists() {
            continue;
        }
        let manifest: Manifest = match fs::read(path.join(MANIFEST))
            .map_err(Error::from)
            .and_then(|b| serde_json::from_slice(&b).map_err(|e| Error::corrupt(e.to_string())))
        {
            Ok(m) => m,
            Err(err) => {
                log::warn!("skipping checkpoint {}: {err}", path.display());
                continue;
            }
        };
        out.push(Checkpoint {
            superstep,
            dir: path,
            manifest,
        });
    }
    out.sort_by_key(|c| std::cmp::Reverse(c.superstep));
    Ok(out)
}

/// The newest checkpoint whose contents verify.
pub fn latest_checkpoint(dir: &Path) -> Result<Checkpoint> {
    for c in list_checkpoints(dir)? {
        match c.verify() {
            Ok(()) => return Ok(c),
            Err(e) => log::warn!("checkpoint {} unusable: {e}", c.dir.display()),
        }
    }
    Err(Error::NoCheckpoint(dir.display().to_string()))
}

fn sync_dir(dir: &Path) -> Result<()> {
    File::open(dir)?.sync_all()?;
    Ok(())
}

fn msg_source(path: &Path) -> Result<impl Iterator<Item = Result<(VertexId, Option<Vec<u8>>)>>> {
    Ok(MsgReader::open(path)?.map(|m| m.map(|m| (m.vid, m.payload))))
}

/// Scans all `files`, keeps the tuples partition `k` owns and merges them
/// into one vid-sorted stream.
fn repartition(
    files: &[PathBuf],
    k: usize,
    n: usize,
) -> Result<impl Iterator<Item = Result<(VertexId, Option<Vec<u8>>)>>> {
    let mut sources = Vec::with_capacity(files.len());
    for f in files {
        let owned = msg_source(f)?
            .filter(move |r| r.as_ref().map_or(true, |(vid, _)| partition_fn(*vid, n) == k));
        sources.push(owned);
    }
    Ok(KMerge::new(sources).map(|r| r.map(|(vid, _, payload)| (vid, payload))))
}

impl Engine {
    /// Seals a copy of Vertex, Msg_{s+1} and (for left outer plans) Vid taken
    /// right after superstep `s`. A failed checkpoint is removed and logged;
    /// the job keeps running.
    pub fn checkpoint(&self) -> Result<Option<Checkpoint>> {
        let root = self.cfg.checkpoint_dir();
        let s = self.gs.superstep - 1;
        let dir = root.join(format!("sp-{s}"));
        match self.write_checkpoint(&dir, s) {
            Ok(c) => {
                for e in fs::read_dir(&root)? {
                    let e = e?;
                    let name = e.file_name().to_string_lossy().into_owned();
                    if sp_superstep(&name).is_some_and(|old| old < s) {
                        fs::remove_dir_all(e.path())?;
                    }
                }
                Ok(Some(c))
            }
            Err(e) => {
                log::warn!("checkpoint at superstep {s} failed, continuing without it: {e}");
                let _ = fs::remove_dir_all(&dir);
                Ok(None)
            }
        }
    }

    fn write_checkpoint(&self, dir: &Path, s: u64) -> Result<Checkpoint> {
        if dir.exists() {
            fs::remove_dir_all(dir)?;
        }
        fs::create_dir_all(dir)?;
        let mut files = BTreeMap::new();
        for part in &self.parts {
            let p = part.id;

            let name = format!("vertex-{p}.dat");
            let mut w = MsgWriter::create(&dir.join(&name))?;
            let mut cursor = part.index.scan(None)?;
            while let Some(v) = cursor.next_vertex()? {
                w.write(v.vid, Some(&v.body_bytes()))?;
            }
            drop(cursor);
            w.finish()?;
            files.insert(name.clone(), sha256_file(&dir.join(&name))?);

            let name = format!("msg-{p}.dat");
            let src = part.msg_path(s + 1);
            if src.exists() {
                fs::copy(&src, dir.join(&name))?;
            } else {
                MsgWriter::create(&dir.join(&name))?.finish()?;
            }
            File::open(dir.join(&name))?.sync_all()?;
            files.insert(name.clone(), sha256_file(&dir.join(&name))?);

            if let Some(vids) = &part.vid {
                let name = format!("vid-{p}.dat");
                let mut w = MsgWriter::create(&dir.join(&name))?;
                for vid in vids.scan()? {
                    w.write(vid?, None)?;
                }
                w.finish()?;
                files.insert(name.clone(), sha256_file(&dir.join(&name))?);
            }
        }
        let manifest = Manifest {
            superstep: s,
            num_partitions: self.n,
            plan: self.plan,
            gs: GsRecord::from(&self.gs),
            files,
        };
        let json = serde_json::to_vec_pretty(&manifest).map_err(|e| Error::corrupt(e.to_string()))?;
        let mpath = dir.join(MANIFEST);
        fs::write(&mpath, json)?;
        File::open(&mpath)?.sync_all()?;
        sync_dir(dir)?;
        let marker = dir.join(COMMITTED);
        fs::write(&marker, b"")?;
        File::open(&marker)?.sync_all()?;
        sync_dir(dir)?;
        Ok(Checkpoint {
            superstep: s,
            dir: dir.to_path_buf(),
            manifest,
        })
    }

    /// Excludes a failed worker from future placement.
    pub fn blacklist_worker(&mut self, worker: usize) {
        self.blacklist.insert(worker);
    }

    /// Reloads the newest sealed checkpoint onto the failure-free workers and
    /// returns the superstep the job resumes at.
    pub fn recover(&mut self) -> Result<u64> {
        let root = self.cfg.checkpoint_dir();
        let ckpt = latest_checkpoint(&root)?;
        let workers: BTreeSet<usize> = (0..self.cfg.num_workers.max(1))
            .filter(|w| !self.blacklist.contains(w))
            .collect();
        self.pmap = PartitionMap::round_robin(self.n, &workers)?;
        if ckpt.manifest.plan.join != self.plan.join {
            return Err(Error::corrupt(format!(
                "checkpoint {} was taken under a different join plan",
                ckpt.dir.display()
            )));
        }
        self.gs = GlobalState::try_from(ckpt.manifest.gs.clone())?;
        self.reset_dirs()?;

        let vertex_files = ckpt.vertex_files();
        let msg_files = ckpt.msg_files();
        let vid_files = ckpt.vid_files();
        let n = self.n;
        let resume = self.gs.superstep;
        for k in 0..n {
            let vertices = repartition(&vertex_files, k, n)?.map(|r| {
                r.and_then(|(vid, body)| VertexTuple::decode_body(vid, &body.unwrap_or_default()))
            });
            let active = if self.plan.join == Join::LeftOuter {
                Some(repartition(&vid_files, k, n)?.map(|r| r.map(|(vid, _)| vid)))
            } else {
                None
            };
            let part = self.build_partition(k, PartitionSeed { vertices, active })?;

            let mut w = MsgWriter::create(&part.msg_path(resume))?;
            for m in repartition(&msg_files, k, n)? {
                let (vid, payload) = m?;
                w.write(vid, payload.as_deref())?;
            }
            w.finish()?;
            self.parts.push(part);
        }
        self.stats.retain(|st| st.superstep <= ckpt.superstep);
        write_gs(&self.cfg.workdir, &self.gs)?;
        log::info!(
            "recovered from {} onto workers {:?}, resuming at superstep {resume}",
            ckpt.dir.display(),
            workers
        );
        Ok(resume)
    }
}
