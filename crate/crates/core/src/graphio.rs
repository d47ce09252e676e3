//! Text graph format: one vertex per line, `vid<TAB>value<TAB>dest:weight,...`.
//! Blank lines and lines starting with `#` are ignored.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Zipf};

use crate::api::{Edge, UserProgram, ValueCodec, VertexId, VertexTuple};
use crate::error::{Error, Result};
use crate::ops::partition_fn;
use crate::runtime::engine::Engine;

pub const POWERLAW_EXPONENT: f64 = 2.2;

#[derive(Debug, Clone, Default)]
pub struct ParsedGraph {
    /// Vertices routed by `partition_fn`, vid-sorted within each partition.
    pub partitions: Vec<Vec<VertexTuple>>,
    pub vertices: u64,
    pub edges: u64,
}

fn parse_err(line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        message: message.into(),
    }
}

fn parse_line(
    line: &str,
    lineno: usize,
    vcodec: &dyn ValueCodec,
    ecodec: &dyn ValueCodec,
) -> Result<VertexTuple> {
    let mut fields = line.split('\t');
    let vid_text = fields.next().unwrap_or_default().trim();
    let vid: u64 = vid_text
        .parse()
        .map_err(|_| parse_err(lineno, format!("bad vid {vid_text:?}")))?;
    let value = vcodec
        .parse(fields.next().unwrap_or_default())
        .map_err(|e| parse_err(lineno, format!("bad value: {e}")))?;
    let mut edges = Vec::new();
    let edge_text = fields.next().unwrap_or_default().trim();
    if fields.next().is_some() {
        return Err(parse_err(lineno, "expected at most 3 tab-separated fields"));
    }
    for item in edge_text.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let (dest, weight) = item.split_once(':').unwrap_or((item, ""));
        let dest: u64 = dest
            .trim()
            .parse()
            .map_err(|_| parse_err(lineno, format!("bad edge destination {dest:?}")))?;
        let weight = ecodec
            .parse(weight)
            .map_err(|e| parse_err(lineno, format!("bad edge value for {dest}: {e}")))?;
        edges.push(Edge::new(dest, weight));
    }
    Ok(VertexTuple::new(vid, value, edges))
}

/// Parses a graph file and routes its vertices into `n` partitions.
pub fn load_graph(path: &Path, n: usize, program: &UserProgram) -> Result<ParsedGraph> {
    if n == 0 {
        return Err(Error::Validation(vec!["numPartitions must be ≥ 1".to_string()]));
    }
    let reader = BufReader::new(File::open(path)?);
    let mut seen: HashMap<VertexId, usize> = HashMap::new();
    let mut graph = ParsedGraph {
        partitions: vec![Vec::new(); n],
        ..Default::default()
    };
    let mut violations = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let v = parse_line(
            line.trim_end_matches(['\r', '\n']),
            lineno,
            program.vertex_codec.as_ref(),
            program.edge_codec.as_ref(),
        )?;
        if let Some(first) = seen.insert(v.vid, lineno) {
            return Err(parse_err(
                lineno,
                format!("duplicate vid {} (first defined on line {first})", v.vid),
            ));
        }
        if let Some(check) = &program.vertex_check {
            if let Err(e) = check(&v) {
                violations.push(format!("line {lineno}: {e}"));
            }
        }
        graph.vertices += 1;
        graph.edges += v.edges.len() as u64;
        graph.partitions[partition_fn(v.vid, n)].push(v);
    }
    if !violations.is_empty() {
        return Err(Error::Validation(violations));
    }
    for p in &mut graph.partitions {
        p.sort_by_key(|v| v.vid);
    }
    Ok(graph)
}

/// Routes vertices by `partition_fn` and sorts each partition by vid.
pub fn partition_vertices(vertices: impl IntoIterator<Item = VertexTuple>, n: usize) -> Vec<Vec<VertexTuple>> {
    let mut parts = vec![Vec::new(); n];
    for v in vertices {
        parts[partition_fn(v.vid, n)].push(v);
    }
    for p in &mut parts {
        p.sort_by_key(|v| v.vid);
    }
    parts
}

pub fn format_vertex(v: &VertexTuple, program: &UserProgram) -> String {
    let edges: Vec<String> = v
        .edges
        .iter()
        .map(|e| {
            let w = program.edge_codec.format(&e.value);
            if w.is_empty() {
                e.dest.to_string()
            } else {
                format!("{}:{w}", e.dest)
            }
        })
        .collect();
    format!(
        "{}\t{}\t{}",
        v.vid,
        program.vertex_codec.format(&v.value),
        edges.join(",")
    )
}

/// Writes one `part-<k>.txt` per partition, vid-sorted, and returns the
/// file paths.
pub fn dump_result(engine: &Engine, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut out = Vec::new();
    for part in engine.partitions() {
        let path = dir.join(format!("part-{}.txt", part.id()));
        let mut w = BufWriter::new(File::create(&path)?);
        let mut cursor = part.index().scan(None)?;
        while let Some(v) = cursor.next_vertex()? {
            writeln!(w, "{}", format_vertex(&v, engine.program()))?;
        }
        w.flush()?;
        out.push(path);
    }
    Ok(out)
}

/// Reads every `part-*.txt` under `dir` back into vid-sorted lines.
pub fn read_dump(dir: &Path) -> Result<Vec<String>> {
    let mut lines = Vec::new();
    for e in fs::read_dir(dir)? {
        let path = e?.path();
        let name = path.file_name().unwrap_or_default().to_string_lossy();
        if name.starts_with("part-") && name.ends_with(".txt") {
            for l in BufReader::new(File::open(&path)?).lines() {
                lines.push(l?);
            }
        }
    }
    lines.sort_by_key(|l| {
        l.split('\t')
            .next()
            .and_then(|v| v.parse::<u64>().ok())
            .unwrap_or(u64::MAX)
    });
    Ok(lines)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GraphKind {
    Uniform,
    Powerlaw,
    Path,
    Cycle,
}

impl FromStr for GraphKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "uniform" => Ok(GraphKind::Uniform),
            "powerlaw" => Ok(GraphKind::Powerlaw),
            "path" => Ok(GraphKind::Path),
            "cycle" => Ok(GraphKind::Cycle),
            _ => Err(format!("unknown graph kind {s:?} (uniform|powerlaw|path|cycle)")),
        }
    }
}

/// Adjacency lists keyed by vid, weights already rounded.
pub type Adjacency = BTreeMap<u64, Vec<(u64, f64)>>;

fn weight(rng: &mut ChaCha8Rng) -> f64 {
    (rng.gen_range(0.01..10.0f64) * 100.0).round() / 100.0
}

fn distinct_targets(rng: &mut ChaCha8Rng, src: u64, n: u64, k: u64) -> BTreeSet<u64> {
    let k = k.min(n.saturating_sub(1));
    let mut out = BTreeSet::new();
    while (out.len() as u64) < k {
        let d = rng.gen_range(0..n);
        if d != src {
            out.insert(d);
        }
    }
    out
}

/// Generates a graph over vids `0..n`. Deterministic for a fixed seed.
/// Powerlaw out-degrees follow a Zipf law with exponent 2.2, so
/// `avg_degree` only applies to uniform graphs.
pub fn gen_graph(kind: GraphKind, n: u64, avg_degree: u64, seed: u64, symmetric: bool) -> Adjacency {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut adj: Adjacency = (0..n).map(|v| (v, Vec::new())).collect();
    match kind {
        GraphKind::Path => {
            for v in 1..n {
                let w = weight(&mut rng);
                adj.get_mut(&(v - 1)).expect("vid in range").push((v, w));
            }
        }
        GraphKind::Cycle => {
            for v in 0..n {
                let w = weight(&mut rng);
                let next = if n == 1 { v } else { (v + 1) % n };
                adj.get_mut(&v).expect("vid in range").push((next, w));
            }
        }
        GraphKind::Uniform => {
            for v in 0..n {
                for d in distinct_targets(&mut rng, v, n, avg_degree) {
                    let w = weight(&mut rng);
                    adj.get_mut(&v).expect("vid in range").push((d, w));
                }
            }
        }
        GraphKind::Powerlaw => {
            let zipf = (n > 1).then(|| Zipf::new(n - 1, POWERLAW_EXPONENT).expect("valid zipf"));
            for v in 0..n {
                let Some(z) = &zipf else { break };
                let k = z.sample(&mut rng) as u64;
                for d in distinct_targets(&mut rng, v, n, k) {
                    let w = weight(&mut rng);
                    adj.get_mut(&v).expect("vid in range").push((d, w));
                }
            }
        }
    }
    if symmetric {
        symmetrize(&mut adj);
    }
    adj
}

/// Adds the reverse of every edge that lacks one.
pub fn symmetrize(adj: &mut Adjacency) {
    let mut reverse: Vec<(u64, u64, f64)> = Vec::new();
    for (&v, edges) in adj.iter() {
        for &(d, w) in edges {
            reverse.push((d, v, w));
        }
    }
    for (src, dst, w) in reverse {
        let list = adj.entry(src).or_default();
        if !list.iter().any(|&(d, _)| d == dst) {
            list.push((dst, w));
        }
    }
    for list in adj.values_mut() {
        list.sort_by_key(|&(d, _)| d);
    }
}

pub fn edge_count(adj: &Adjacency) -> u64 {
    adj.values().map(|e| e.len() as u64).sum()
}

/// Writes an adjacency in the text format with empty vertex values.
pub fn write_graph(path: &Path, adj: &Adjacency) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut w = BufWriter::new(File::create(path)?);
    for (v, edges) in adj {
        let list: Vec<String> = edges.iter().map(|(d, wt)| format!("{d}:{wt}")).collect();
        writeln!(w, "{v}\t\t{}", list.join(","))?;
    }
    w.flush()?;
    Ok(())
}
