use std::path::PathBuf;

use crate::api::{validate_job, GlobalState, JobSpec, DEFAULT_MAX_SUPERSTEPS};
use crate::error::{Error, Result};
use crate::graphio::{dump_result, load_graph};
use crate::runtime::engine::{Engine, EngineConfig, SuperstepStats};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    /// Every vertex halted and no messages were in flight.
    Converged,
    MaxSupersteps,
}

#[derive(Debug, Clone)]
pub struct JobReport {
    /// One row per superstep of the surviving execution.
    pub stats: Vec<SuperstepStats>,
    /// The last superstep that was executed; 0 for a job that ran none.
    pub final_superstep: u64,
    pub termination: Termination,
    pub vertices: u64,
    pub edges: u64,
    pub recoveries: u32,
    pub checkpoints: u32,
    pub outputs: Vec<PathBuf>,
    pub final_gs: GlobalState,
}

impl JobReport {
    pub fn total_leaf_reads(&self) -> u64 {
        self.stats.iter().map(|s| s.leaf_reads).sum()
    }

    pub fn total_spill_bytes(&self) -> u64 {
        self.stats.iter().map(|s| s.spill_bytes).sum()
    }

    pub fn stats_csv(&self) -> String {
        let mut out = String::from(SuperstepStats::CSV_HEADER);
        out.push('\n');
        for s in &self.stats {
            out.push_str(&s.csv_row());
            out.push('\n');
        }
        out
    }
}

/// Loads the input graph and sets up an engine for `spec`.
pub fn prepare_job(spec: &JobSpec, cfg: EngineConfig) -> Result<(Engine, u64, u64)> {
    let violations = validate_job(spec);
    if !violations.is_empty() {
        return Err(Error::Validation(violations));
    }
    let graph = load_graph(&spec.input_path, spec.num_partitions, &spec.program)?;
    let engine = Engine::load(spec.program.clone(), spec.plan, cfg, graph.partitions)?;
    Ok((engine, graph.vertices, graph.edges))
}

/// Iterates supersteps until termination, checkpointing and recovering as
/// configured, then dumps the Vertex relation to the output path.
pub fn run_job(spec: &JobSpec, cfg: EngineConfig) -> Result<JobReport> {
    let max_recoveries = cfg.max_recoveries;
    let (mut engine, vertices, edges) = prepare_job(spec, cfg)?;
    let (termination, recoveries, checkpoints) =
        drive(&mut engine, spec.checkpoint_every, spec.max_supersteps, max_recoveries)?;
    let outputs = dump_result(&engine, &spec.output_path)?;
    Ok(JobReport {
        stats: engine.stats().to_vec(),
        final_superstep: engine.global_state().superstep - 1,
        termination,
        vertices,
        edges,
        recoveries,
        checkpoints,
        outputs,
        final_gs: engine.global_state().clone(),
    })
}

/// Runs a loaded engine to termination; returns how it ended plus the number
/// of recoveries and sealed checkpoints.
pub fn drive(
    engine: &mut Engine,
    checkpoint_every: u64,
    max_supersteps: Option<u64>,
    max_recoveries: u32,
) -> Result<(Termination, u32, u32)> {
    let max = max_supersteps.unwrap_or(DEFAULT_MAX_SUPERSTEPS);
    let mut recoveries = 0u32;
    let mut checkpoints = 0u32;
    loop {
        if engine.global_state().halt {
            return Ok((Termination::Converged, recoveries, checkpoints));
        }
        let s = engine.global_state().superstep;
        if s > max {
            return Ok((Termination::MaxSupersteps, recoveries, checkpoints));
        }
        match engine.run_superstep() {
            Ok(stats) => {
                log::debug!("superstep {s}: {stats:?}");
                if checkpoint_every > 0 && s.is_multiple_of(checkpoint_every) && !engine.global_state().halt
                    && engine.checkpoint()?.is_some() {
                        checkpoints += 1;
                    }
            }
            Err(e) if e.is_recoverable() => {
                if recoveries >= max_recoveries {
                    return Err(e);
                }
                log::warn!("superstep {s} failed: {e}; recovering");
                if let Error::WorkerFailure { worker, .. } = e {
                    engine.blacklist_worker(worker);
                }
                recoveries += 1;
                engine.recover()?;
            }
            Err(e) => return Err(e),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::algorithms::{cc_program, pagerank_program, sssp_program};
    use crate::api::{UserProgram, VertexId};
    use crate::graphio::read_dump;
    use crate::ops::PlanConfig;
    use std::collections::BTreeMap;
    use std::path::Path;

    fn spec(dir: &Path, program: UserProgram, text: &str, plan: PlanConfig, n: usize) -> JobSpec {
        let input = dir.join("in.txt");
        std::fs::write(&input, text).unwrap();
        JobSpec {
            program,
            input_path: input,
            output_path: dir.join("out"),
            num_partitions: n,
            plan,
            checkpoint_every: 0,
            max_supersteps: None,
        }
    }

    fn values(report: &JobReport, dir: &Path) -> BTreeMap<u64, String> {
        assert!(!report.outputs.is_empty());
        read_dump(&dir.join("out"))
            .unwrap()
            .into_iter()
            .map(|l| {
                let mut f = l.split('\t');
                (f.next().unwrap().parse().unwrap(), f.next().unwrap().to_string())
            })
            .collect()
    }

    const G1: &str = "1\t\t2:1.0,3:5.0\n2\t\t3:2.0\n3\t\t\n";

    #[test]
    fn sssp_g1_all_plans() {
        for plan in PlanConfig::all() {
            for n in [1, 2, 4] {
                let dir = tempfile::tempdir().unwrap();
                let s = spec(dir.path(), sssp_program(VertexId(1)), G1, plan, n);
                let report = run_job(&s, EngineConfig::new(dir.path().join("work"))).unwrap();
                let got = values(&report, dir.path());
                let want: BTreeMap<u64, String> =
                    [(1, "0"), (2, "1"), (3, "3")].map(|(k, v)| (k, v.to_string())).into();
                assert_eq!(got, want, "{plan} n={n}");
                assert_eq!(report.termination, Termination::Converged);
                assert!(report.stats.iter().all(|s| s.combined_messages <= s.messages));
            }
        }
    }

    #[test]
    fn cc_small() {
        let dir = tempfile::tempdir().unwrap();
        let s = spec(dir.path(), cc_program(), "1\t\t2\n2\t\t1\n3\t\t\n", PlanConfig::default(), 2);
        let report = run_job(&s, EngineConfig::new(dir.path().join("work"))).unwrap();
        let got = values(&report, dir.path());
        assert_eq!(got[&1], "1");
        assert_eq!(got[&2], "1");
        assert_eq!(got[&3], "3");
    }

    #[test]
    fn empty_graph_stops_at_superstep_one() {
        let dir = tempfile::tempdir().unwrap();
        let s = spec(dir.path(), cc_program(), "", PlanConfig::default(), 3);
        let report = run_job(&s, EngineConfig::new(dir.path().join("work"))).unwrap();
        assert!(report.stats.is_empty());
        assert_eq!(report.final_gs.superstep, 1);
        assert!(report.final_gs.halt);
        assert_eq!(report.outputs.len(), 3);
        assert!(read_dump(&dir.path().join("out")).unwrap().is_empty());
    }

    #[test]
    fn single_vertex_sssp_ends_at_superstep_two() {
        let dir = tempfile::tempdir().unwrap();
        let s = spec(dir.path(), sssp_program(VertexId(1)), "1\t\t\n", PlanConfig::default(), 1);
        let report = run_job(&s, EngineConfig::new(dir.path().join("work"))).unwrap();
        assert_eq!(report.final_gs.superstep, 2);
        assert_eq!(values(&report, dir.path())[&1], "0");
    }

    #[test]
    fn pagerank_two_cycle() {
        let dir = tempfile::tempdir().unwrap();
        let prog = pagerank_program(7, 0.85).unwrap();
        let s = spec(dir.path(), prog, "1\t\t2\n2\t\t1\n", PlanConfig::default(), 2);
        let report = run_job(&s, EngineConfig::new(dir.path().join("work"))).unwrap();
        for v in values(&report, dir.path()).values() {
            assert!((v.parse::<f64>().unwrap() - 0.5).abs() < 1e-12);
        }
        assert_eq!(report.final_gs.superstep, 2 + 7 + 1);
    }

    #[test]
    fn max_supersteps_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let prog = pagerank_program(50, 0.85).unwrap();
        let mut s = spec(dir.path(), prog, "1\t\t2\n2\t\t1\n", PlanConfig::default(), 1);
        s.max_supersteps = Some(4);
        let report = run_job(&s, EngineConfig::new(dir.path().join("work"))).unwrap();
        assert_eq!(report.termination, Termination::MaxSupersteps);
        assert_eq!(report.stats.len(), 4);
    }

    #[test]
    fn invalid_job_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = spec(dir.path(), cc_program(), G1, PlanConfig::default(), 0);
        s.max_supersteps = Some(0);
        match run_job(&s, EngineConfig::new(dir.path().join("work"))) {
            Err(Error::Validation(v)) => assert_eq!(v.len(), 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn negative_weight_fails_validation() {
        let dir = tempfile::tempdir().unwrap();
        let s = spec(dir.path(), sssp_program(VertexId(1)), "1\t\t2:-1\n", PlanConfig::default(), 1);
        assert!(matches!(
            run_job(&s, EngineConfig::new(dir.path().join("work"))),
            Err(Error::Validation(_))
        ));
    }
}
