mod common;

use std::collections::BTreeMap;

use common::{reference_mutations, run_with, RunOptions};
use dfpregel::algorithms::{mutation_program, MutationScript};
use dfpregel::{Mutation, PlanConfig, VertexId, VertexTuple};
use proptest::prelude::*;

fn vertex(vid: u64, value: u64) -> VertexTuple {
    VertexTuple::new(vid, value.to_be_bytes().to_vec(), vec![])
}

fn run_script(initial: &BTreeMap<u64, u64>, script: MutationScript, plan: PlanConfig, n: usize) -> (BTreeMap<u64, u64>, Vec<u64>) {
    let dir = tempfile::tempdir().unwrap();
    let vs = initial.iter().map(|(&v, &x)| vertex(v, x)).collect();
    let out = run_with(dir.path(), mutation_program(script), plan, n, vs, RunOptions::default()).unwrap();
    let counts = out.stats.iter().map(|s| s.total_vertices).collect();
    (out.u64_values(), counts)
}

fn arb_script() -> impl proptest::strategy::Strategy<Value = MutationScript> {
    let m = prop_oneof![
        (0u64..30).prop_map(Mutation::delete),
        (0u64..30, 0u64..1000).prop_map(|(v, x)| Mutation::insert(vertex(v, x))),
    ];
    prop::collection::btree_map(1u64..5, prop::collection::vec(((0u64..30).prop_map(VertexId), m), 0..20), 0..4)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn scripts_match_reference(
        initial in prop::collection::btree_map(0u64..30, 0u64..1000, 0..20),
        script in arb_script(),
        plan in prop::sample::select(PlanConfig::all()),
        n in 1usize..5,
    ) {
        let want = reference_mutations(&initial, &script);
        let (got, _) = run_script(&initial, script, plan, n);
        prop_assert_eq!(got, want);
    }
}

#[test]
fn inserted_vertices_are_counted_next_superstep() {
    let initial: BTreeMap<u64, u64> = [(1, 0), (2, 0)].into();
    let script: MutationScript = [(
        1,
        (10..15).map(|v| (VertexId(1), Mutation::insert(vertex(v, 7)))).collect(),
    )]
    .into();
    let (got, counts) = run_script(&initial, script, PlanConfig::default(), 3);
    assert_eq!(counts[0], 2 + 5);
    assert_eq!(got.len(), 7);
}

#[test]
fn delete_then_reinsert_keeps_the_new_value() {
    let initial: BTreeMap<u64, u64> = [(1, 0), (5, 3)].into();
    for plan in PlanConfig::all() {
        let script: MutationScript = [(
            1,
            vec![
                (VertexId(1), Mutation::insert(vertex(5, 42))),
                (VertexId(5), Mutation::delete(5)),
            ],
        )]
        .into();
        let (got, _) = run_script(&initial, script, plan, 2);
        assert_eq!(got[&5], 42, "{plan}");
    }
}
