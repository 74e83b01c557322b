//! Flat `key=value` counters for a machine and optional heap.

use northcape::allocator::Heap;
use northcape::machine::Machine;
use northcape::ops::Opcode;

/// All counters in a stable order.
pub fn collect(m: &Machine, heap: Option<&Heap>) -> Vec<(String, u64)> {
    let mut out = Vec::new();
    let s = m.stats();
    for op in Opcode::ALL {
        out.push((format!("ops.{}", op.name()), s.ops.get(&op).copied().unwrap_or(0)));
    }
    out.push(("op_failures".into(), s.op_failures));
    out.push(("reads".into(), s.reads));
    out.push(("writes".into(), s.writes));
    out.push(("fetches".into(), s.fetches));
    out.push(("subsystem_calls".into(), s.subsystem_calls));
    out.push(("bus_errors".into(), s.bus_errors));
    out.push(("interrupts_taken".into(), s.interrupts_taken));
    out.push(("interrupts_masked".into(), s.interrupts_masked));

    let c = m.cmt().stats();
    out.push(("cmt_occupancy".into(), c.occupancy));
    out.push(("cmt_high_water".into(), c.high_water));
    out.push(("cmt_slot_reads".into(), c.slot_reads));
    out.push(("cmt_slot_writes".into(), c.slot_writes));
    out.push(("cmt_row_reads".into(), c.row_reads));

    let n = m.cache_stats();
    out.push(("l1_hits".into(), n.l1_hits));
    out.push(("l1_misses".into(), n.l1_misses));
    out.push(("l2_hits".into(), n.l2_hits));
    out.push(("l2_misses".into(), n.l2_misses));
    out.push(("stale_revalidations".into(), n.stale_revalidations));
    out.push(("invalidations".into(), n.invalidations));

    if let Some(h) = heap {
        let hs = h.stats();
        out.push(("heap_total_bytes".into(), h.total_bytes()));
        out.push(("heap_free_bytes".into(), hs.free_bytes));
        out.push(("heap_free_chunks".into(), hs.free_chunks));
        out.push(("heap_largest_free".into(), hs.largest_free));
        out.push(("heap_allocations".into(), hs.allocations));
        out.push(("heap_allocated_bytes".into(), hs.allocated_bytes));
    }
    out
}

pub fn render(m: &Machine, heap: Option<&Heap>) -> String {
    collect(m, heap).into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
}
