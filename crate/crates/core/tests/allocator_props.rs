use northcape::allocator::{Heap, MallocOptions, HEADER_BYTES};
use northcape::machine::{Machine, MachineConfig};
use northcape::ops::{OpRequest, Principal};
use northcape::{CapToken, Permissions, Restriction};
use proptest::prelude::*;

const ARENA: u64 = 1 << 16;

fn setup() -> (Machine, Heap) {
    let mut m =
        Machine::new(MachineConfig { memory_size: 1 << 22, cmt_slots: 1024, seed: 4, ..MachineConfig::default() })
            .unwrap();
    let cpu = m.add_cpu();
    let perms = Permissions::RW | Permissions::L | Permissions::CT;
    let arena = m.op(cpu, OpRequest::create(CapToken::ROOT, ARENA, Restriction::None, perms)).unwrap().token().unwrap();
    let heap = Heap::init(&mut m, Principal::cpu(cpu, 0), arena).unwrap();
    (m, heap)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn bytes_are_conserved_and_chunks_disjoint(ops in proptest::collection::vec((any::<bool>(), 1u64..3000, any::<usize>(), any::<bool>()), 1..200)) {
        let (mut m, mut heap) = setup();
        let mut live = Vec::new();
        for (alloc, size, pick, zeroed) in ops {
            if alloc || live.is_empty() {
                if let Ok(t) = heap.malloc(&mut m, size, MallocOptions { zeroed, ..MallocOptions::default() }) {
                    if zeroed {
                        prop_assert!(m.mem_read(0, t, size).unwrap().iter().all(|&b| b == 0));
                    }
                    m.mem_write(0, t, &vec![0xee; size as usize]).unwrap();
                    live.push(t);
                }
            } else {
                let t = live.swap_remove(pick % live.len());
                heap.free(&mut m, t).unwrap();
            }
            let mut spans: Vec<(u64, u64)> = heap.free_chunks().map(|c| (c.base, c.base + c.len)).collect();
            spans.extend(heap.allocations().map(|a| (a.base, a.end())));
            spans.sort();
            prop_assert!(spans.windows(2).all(|w| w[0].1 <= w[1].0));
            prop_assert_eq!(spans.iter().map(|(s, e)| e - s).sum::<u64>(), ARENA);
            let used: u64 = heap.allocations().map(|a| HEADER_BYTES + a.payload_len).sum();
            prop_assert_eq!(heap.stats().free_bytes + used, ARENA);
            // coalescing leaves no two free chunks touching
            let mut free: Vec<(u64, u64)> = heap.free_chunks().map(|c| (c.base, c.base + c.len)).collect();
            free.sort();
            prop_assert!(free.windows(2).all(|w| w[0].1 < w[1].0));
        }
        prop_assert!(heap.audit(&m).is_ok());
        for t in live {
            heap.free(&mut m, t).unwrap();
        }
        prop_assert_eq!(heap.free_chunks().count(), 1);
        prop_assert_eq!(heap.stats().free_bytes, ARENA);
    }
}

#[test]
fn double_free_and_foreign_tokens_are_refused() {
    let (mut m, mut heap) = setup();
    let t = heap.malloc(&mut m, 100, MallocOptions::default()).unwrap();
    heap.free(&mut m, t).unwrap();
    assert!(heap.free(&mut m, t).is_err());
    assert!(heap.free(&mut m, CapToken::ROOT).is_err());
}

#[test]
fn shared_allocation_cannot_be_freed_until_reclaimed() {
    let (mut m, mut heap) = setup();
    let t = heap.malloc(&mut m, 64, MallocOptions::default()).unwrap();
    let child = m.op(0, OpRequest::derive(t, 8, 0, Restriction::None, Permissions::RW)).unwrap().token().unwrap();
    assert!(heap.free(&mut m, t).is_err());
    let payload = heap.allocation(t).unwrap().payload;
    heap.reclaim(&mut m, payload).unwrap();
    assert_eq!(m.mem_read(0, child, 1).unwrap_err().kind(), "InvalidParent");
    assert_eq!(heap.stats().free_bytes, ARENA);
}
