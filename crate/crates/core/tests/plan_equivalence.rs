mod common;

use common::{max_rel_diff, random_graph, run};
use dfpregel::algorithms::{cc_program, pagerank_program, sssp_program};
use dfpregel::graphio::symmetrize;
use dfpregel::{PlanConfig, VertexId};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn all_plans_agree(seed in any::<u64>(), n in 2u64..600, deg in 1u64..5, parts in prop::sample::select(vec![1usize, 2, 4, 8])) {
        let adj = random_graph(seed, n, n * deg);
        let mut sym = adj.clone();
        symmetrize(&mut sym);
        let source = seed % n;

        let plans = PlanConfig::all();
        let sssp0 = run(sssp_program(VertexId(source)), plans[0], parts, &adj);
        let cc0 = run(cc_program(), plans[0], parts, &sym);
        let pr0 = run(pagerank_program(5, 0.85).unwrap(), plans[0], parts, &adj);
        for plan in &plans[1..] {
            let sssp = run(sssp_program(VertexId(source)), *plan, parts, &adj);
            prop_assert_eq!(&sssp.vertices, &sssp0.vertices, "sssp {}", plan);
            let cc = run(cc_program(), *plan, parts, &sym);
            prop_assert_eq!(&cc.vertices, &cc0.vertices, "cc {}", plan);
            let pr = run(pagerank_program(5, 0.85).unwrap(), *plan, parts, &adj);
            prop_assert!(max_rel_diff(&pr.f64_values(), &pr0.f64_values()) <= 1e-9, "pagerank {}", plan);
        }
    }
}

#[test]
fn superstep_counter_moves_by_one() {
    let adj = random_graph(9, 300, 900);
    for plan in PlanConfig::all() {
        let out = run(sssp_program(VertexId(0)), plan, 3, &adj);
        for (i, s) in out.stats.iter().enumerate() {
            assert_eq!(s.superstep, i as u64 + 1);
            assert!(s.combined_messages <= s.messages);
        }
    }
}
