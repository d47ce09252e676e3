use crate::api::VertexId;

/// Hash partitioning of vids: a 64-bit finalizer mix, then modulo `n`.
/// Stable for the lifetime of a job, so Vertex and Msg are partitioned
/// identically in every superstep.
pub fn partition_fn(vid: VertexId, n: usize) -> usize {
    assert!(n >= 1, "partition count must be at least 1");
    (mix64(vid.0) % n as u64) as usize
}

fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
