//! Acceptance run: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::{Duration, Instant};

use northcape::allocator::{payload_len_for, Heap, MallocOptions, HEADER_BYTES};
use northcape::cmt::{Cmt, CmtEntry};
use northcape::loader::{boot, Manifest};
use northcape::machine::{DeviceKind, InterruptOutcome, Machine, MachineConfig, MachineError};
use northcape::ntlb::NtlbConfig;
use northcape::ops::{OpOutput, OpRequest, Principal};
use northcape::token::NONCE_BITS;
use northcape::{AccessContext, AccessKind, CapToken, OffsetType, Permissions, Regime, Restriction};
use northcape_cli::fuzz::{self, FuzzConfig};
use northcape_cli::scenario::{run, RunOptions, Scenario};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const NONE: Restriction = Restriction::None;

fn rwl() -> Permissions {
    Permissions::RW | Permissions::L | Permissions::CT
}

fn rw() -> Permissions {
    Permissions::RW | Permissions::CT
}

fn small_machine(slots: usize, seed: u64) -> Machine {
    let mut m = Machine::new(MachineConfig {
        memory_size: 1 << 24,
        cmt_slots: slots,
        seed,
        trace: false,
        ..MachineConfig::default()
    })
    .unwrap();
    m.add_device(DeviceKind::Cpu, 0);
    m.add_device(DeviceKind::Cpu, 1);
    m
}

fn token(out: OpOutput) -> CapToken {
    out.token().expect("operation mints a token")
}

fn kind(r: &Result<Vec<u8>, MachineError>) -> String {
    match r {
        Ok(_) => "ok".into(),
        Err(e) => e.kind(),
    }
}

fn inspect(m: &mut Machine, dev: u16, t: CapToken) -> (u64, u64) {
    match m.op(dev, OpRequest::inspect(t)).unwrap() {
        OpOutput::Inspected(i) => (i.base.unwrap(), i.length.unwrap()),
        other => panic!("{other}"),
    }
}

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

// 1 ------------------------------------------------------------------------

fn differential_fuzz() -> Verdict {
    let mut notes = Vec::new();
    let mut pass = true;
    for seed in [fuzz::DEFAULT_SEED, 1, 2] {
        let start = Instant::now();
        let r = fuzz::run(&FuzzConfig { seed, steps: 100_000, ..FuzzConfig::default() });
        let took = start.elapsed();
        let ok = r.clean() && r.steps_run == 100_000 && took < Duration::from_secs(60);
        if !ok {
            eprintln!("{r}");
        }
        pass &= ok;
        notes.push(format!(
            "seed {seed:#x}: {} steps, {:.1}s, stale={}",
            r.steps_run,
            took.as_secs_f64(),
            r.cache.stale_revalidations
        ));
    }
    verdict(pass, notes.join("; "))
}

// 2 ------------------------------------------------------------------------

fn unforgeability() -> Verdict {
    let mut m = small_machine(1024, 77);
    let live = token(m.op(0, OpRequest::create(CapToken::ROOT, 4096, NONE, rw())).unwrap());
    let bound = Restriction::SubsystemIdBound { device: 0, subsystem: 3 };
    let fenced = token(m.op(0, OpRequest::create(CapToken::ROOT, 4096, bound, rw())).unwrap());

    let n: u64 = 2_000_000;
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let guess = |t: CapToken, nonce: u16| {
        let d = t.decode().unwrap();
        CapToken::encode(d.offset_type, nonce, d.id, 0).unwrap()
    };
    let ctx = AccessContext::data(0, 0, AccessKind::Read);
    let mut hits = 0u64;
    for _ in 0..n {
        if m.resolve_uncached(guess(live, rng.gen()), &ctx).is_ok() {
            hits += 1;
        }
    }
    let p = 1.0 / f64::from(1u32 << NONCE_BITS);
    let p_hat = hits as f64 / n as f64;
    let sigma = (p * (1.0 - p) / n as f64).sqrt();
    let within = (p_hat - p).abs() <= 3.0 * sigma;

    let foreign = AccessContext::data(0, 4, AccessKind::Read);
    let mut fenced_hits = 0u64;
    for i in 0..n {
        // the true nonce is among the guesses at least once
        let g = if i == 0 { fenced } else { guess(fenced, rng.gen()) };
        if m.resolve_uncached(g, &foreign).is_ok() {
            fenced_hits += 1;
        }
    }
    verdict(
        within && fenced_hits == 0,
        format!("p̂={p_hat:.3e} ({hits} hits) vs 2^-16={p:.3e} ±{:.2e}; bound mismatch hits={fenced_hits}", 3.0 * sigma),
    )
}

// 3 ------------------------------------------------------------------------

fn lookup_cost() -> Verdict {
    let mut t = Cmt::new(8192, 64, 3).unwrap();
    t.reset(1 << 32);
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut live = Vec::new();
    for _ in 0..3000 {
        let ot = *OffsetType::ALL.choose(&mut rng).unwrap();
        let (id, _) = t.allocate(ot, CmtEntry::direct(0, 64, Permissions::RW, NONE)).unwrap();
        live.push(id);
    }
    let mut exact = true;
    for i in 0..10_000 {
        let id = if i % 2 == 0 {
            *live.choose(&mut rng).unwrap()
        } else {
            let ot = *OffsetType::ALL.choose(&mut rng).unwrap();
            ot.id_base() + rng.gen_range(0..ot.id_end() - ot.id_base())
        };
        let before = t.slot_reads();
        let _ = t.lookup(id);
        exact &= t.slot_reads() - before == 1;
    }

    let rows = t.row_count() as u64;
    while t.occupancy() < t.slot_count() as u64 {
        t.allocate(OffsetType::Off32, CmtEntry::direct(0, 64, Permissions::RW, NONE)).unwrap();
    }
    let before = t.row_reads();
    let full = t.allocate(OffsetType::Off32, CmtEntry::direct(0, 64, Permissions::RW, NONE)).is_err();
    let scanned = t.row_reads() - before;
    verdict(
        exact && full && scanned <= rows,
        format!("1 slot read per lookup over 10^4: {exact}; full table detected after {scanned}/{rows} row reads"),
    )
}

// 4 ------------------------------------------------------------------------

/// A node of a lock test tree: parent index (None for the direct) and its
/// window relative to the parent.
#[derive(Clone, Copy)]
struct Node {
    parent: Option<usize>,
    off: u64,
    len: u64,
}

fn grid_windows(len: u64) -> Vec<(u64, u64)> {
    let mut v = Vec::new();
    for s in (0..len).step_by(64) {
        for e in ((s + 64)..=len).step_by(64) {
            v.push((s, e - s));
        }
    }
    v
}

/// Every tree of depth ≤ 3 over a 256-byte direct with a 64-byte grid, up to
/// two children and one grandchild per child.
fn lock_trees() -> Vec<Vec<Node>> {
    let root = Node { parent: None, off: 0, len: 256 };
    let mut branches: Vec<Vec<(u64, u64)>> = Vec::new();
    for (off, len) in grid_windows(256) {
        branches.push(vec![(off, len)]);
        for g in grid_windows(len) {
            branches.push(vec![(off, len), g]);
        }
    }
    let attach = |tree: &mut Vec<Node>, b: &[(u64, u64)]| {
        let c = tree.len();
        tree.push(Node { parent: Some(0), off: b[0].0, len: b[0].1 });
        if let Some(&(off, len)) = b.get(1) {
            tree.push(Node { parent: Some(c), off, len });
        }
    };
    let mut trees = vec![vec![root]];
    for a in &branches {
        let mut t = vec![root];
        attach(&mut t, a);
        trees.push(t.clone());
        for b in &branches {
            let mut t2 = t.clone();
            attach(&mut t2, b);
            trees.push(t2);
        }
    }
    trees
}

fn lock_case(tree: &[Node], target: usize) -> Result<(), String> {
    let mut m = small_machine(64, target as u64);
    let mut toks: Vec<CapToken> = Vec::new();
    for n in tree {
        let t = match n.parent {
            None => m.op(0, OpRequest::create(CapToken::ROOT, n.len, NONE, rwl())),
            Some(p) => m.op(0, OpRequest::derive(toks[p], n.len, n.off, NONE, rwl())),
        };
        toks.push(token(t.map_err(|e| e.to_string())?));
    }
    let probe = |m: &mut Machine, toks: &[CapToken]| {
        let mut out = Vec::new();
        for (i, n) in tree.iter().enumerate() {
            for dev in [0u16, 1] {
                for o in (0..n.len).step_by(64) {
                    let r = m.mem_read(dev, toks[i].add(o).unwrap(), 1);
                    out.push((i, dev, o, kind(&r)));
                }
            }
        }
        out
    };
    let before = probe(&mut m, &toks);
    let holder = match m.op(0, OpRequest::lock(toks[target], NONE, rw())) {
        Ok(out) => token(out),
        Err(e) => return Err(format!("lock refused: {e}")),
    };
    for (i, dev, o, k) in probe(&mut m, &toks) {
        if k != "Locked" {
            return Err(format!("node {i} dev {dev} +{o}: {k} while node {target} locked"));
        }
    }
    for o in (0..tree[target].len).step_by(64) {
        let r = m.mem_read(0, holder.add(o).unwrap(), 1);
        if r.is_err() {
            return Err(format!("holder +{o}: {}", kind(&r)));
        }
    }
    m.op(0, OpRequest::drop_cap(holder)).map_err(|e| e.to_string())?;
    if probe(&mut m, &toks) != before {
        return Err("outcomes differ after unlock".into());
    }
    Ok(())
}

fn lock_exclusivity() -> Verdict {
    let start = Instant::now();
    let trees = lock_trees();
    let mut cases = 0;
    let mut failures = Vec::new();
    for tree in &trees {
        for target in 0..tree.len() {
            cases += 1;
            if let Err(e) = lock_case(tree, target) {
                failures.push(e);
            }
        }
    }
    let took = start.elapsed();
    if let Some(f) = failures.first() {
        eprintln!("first lock failure: {f}");
    }
    verdict(
        failures.is_empty() && took < Duration::from_secs(30),
        format!("{} trees, {cases} lock targets, {} failures, {:.1}s", trees.len(), failures.len(), took.as_secs_f64()),
    )
}

// 5 ------------------------------------------------------------------------

fn revoke_tree(rng: &mut ChaCha8Rng, seed: u64) -> Result<(), String> {
    let mut m = small_machine(256, seed);
    let len = rng.gen_range(1..=64u64) * 64;
    let d = token(m.op(0, OpRequest::create(CapToken::ROOT, len, NONE, rw())).unwrap());
    let (base, _) = inspect(&mut m, 0, d);
    let fill: Vec<u8> = (0..len).map(|_| rng.gen_range(1..=255)).collect();
    m.mem_write(0, d, &fill).unwrap();

    let mut nodes = vec![(d, len)];
    let mut desc = Vec::new();
    for _ in 0..rng.gen_range(1..=10) {
        let (p, plen) = *nodes.choose(rng).unwrap();
        let dev = rng.gen_range(0..2u16);
        let r = if rng.gen_ratio(1, 4) {
            m.op(dev, OpRequest::clone_cap(p, NONE, rw()))
        } else {
            let off = rng.gen_range(0..plen);
            let l = rng.gen_range(1..=plen - off);
            m.op(dev, OpRequest::derive(p, l, off, NONE, rw()))
        };
        let t = token(r.map_err(|e| format!("building tree: {e}"))?);
        let l = match m.op(0, OpRequest::inspect(t)).unwrap() {
            OpOutput::Inspected(i) => i.length.unwrap(),
            _ => unreachable!(),
        };
        nodes.push((t, l));
        desc.push(t);
    }

    let fresh = token(m.op(0, OpRequest::revoke(d, NONE, rw())).map_err(|e| e.to_string())?);
    if m.phys_read(base, len).iter().any(|&b| b != 0) {
        return Err("range not zero-filled".into());
    }
    for t in &desc {
        for dev in [0u16, 1] {
            let r = m.mem_read(dev, *t, 1);
            if kind(&r) != "InvalidParent" {
                return Err(format!("descendant {t} gave {}", kind(&r)));
            }
        }
    }
    if kind(&m.mem_read(0, d, 1)) != "InvalidToken" {
        return Err("old token still resolves".into());
    }
    if inspect(&mut m, 0, fresh) != (base, len) {
        return Err("replacement covers a different range".into());
    }
    let pattern: Vec<u8> = (0..len).map(|i| i as u8 ^ 0xa5).collect();
    m.mem_write(0, fresh, &pattern).map_err(|e| e.to_string())?;
    if m.mem_read(1, fresh, len).map_err(|e| e.to_string())? != pattern {
        return Err("replacement does not round-trip".into());
    }
    let child = m.op(1, OpRequest::derive(fresh, len, 0, NONE, rw())).map_err(|e| e.to_string())?;
    m.op(1, OpRequest::drop_cap(token(child))).map_err(|e| e.to_string())?;
    Ok(())
}

fn revocation() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let mut failures = Vec::new();
    for i in 0..1000 {
        if let Err(e) = revoke_tree(&mut rng, i) {
            failures.push(format!("tree {i}: {e}"));
        }
    }
    if let Some(f) = failures.first() {
        eprintln!("{f}");
    }
    verdict(failures.is_empty(), format!("1000 random trees, {} failures", failures.len()))
}

// 6 ------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
enum Event {
    Op(u16, OpRequest),
    Read(u16, CapToken),
    Write(u16, CapToken),
}

type Outcome = Result<Option<CapToken>, String>;

fn apply(m: &mut Machine, e: Event) -> Outcome {
    match e {
        Event::Op(dev, req) => m.op(dev, req).map(|o| o.token()).map_err(|e| e.kind()),
        Event::Read(dev, t) => m.mem_read(dev, t, 4).map(|_| None).map_err(|e| e.kind()),
        Event::Write(dev, t) => m.mem_write(dev, t, &[7; 4]).map(|_| None).map_err(|e| e.kind()),
    }
}

/// Warms both cache levels, then locks or revokes from another CPU, and
/// compares every probe against a machine without caches.
fn adversarial_trial(rng: &mut ChaCha8Rng, seed: u64, ntlb: NtlbConfig) -> (u64, u64, u64) {
    let build = |caching| {
        let mut m = Machine::new(MachineConfig {
            memory_size: 1 << 24,
            cmt_slots: 256,
            seed,
            ntlb,
            caching,
            trace: false,
            ..MachineConfig::default()
        })
        .unwrap();
        for s in 0..3 {
            m.add_device(DeviceKind::Cpu, s);
        }
        m
    };
    let (mut cached, mut plain) = (build(true), build(false));
    let mut both = |e: Event| {
        let a = apply(&mut cached, e);
        let b = apply(&mut plain, e);
        (a, b)
    };

    let (d, _) = both(Event::Op(0, OpRequest::create(CapToken::ROOT, 1024, NONE, rwl())));
    let d = d.unwrap().unwrap();
    let mut nodes = vec![d];
    for _ in 0..rng.gen_range(2..=6) {
        let p = *nodes.choose(rng).unwrap();
        let off = rng.gen_range(0..4u64) * 64;
        let (c, _) = both(Event::Op(0, OpRequest::derive(p, 64, off, NONE, rwl())));
        if let Ok(Some(c)) = c {
            nodes.push(c);
        }
    }
    let (other, _) = both(Event::Op(0, OpRequest::create(CapToken::ROOT, 64, NONE, rwl())));
    nodes.push(other.unwrap().unwrap());

    for _ in 0..rng.gen_range(1..=3) {
        for &n in &nodes {
            for dev in 1..3 {
                let _ = both(Event::Read(dev, n));
            }
        }
    }

    let target = nodes[rng.gen_range(0..nodes.len() - 1)];
    let attack = match rng.gen_range(0..3) {
        0 => OpRequest::lock(target, NONE, rw()),
        1 => OpRequest::revoke(d, NONE, rw()),
        _ => OpRequest::lock(target, NONE, rw()),
    };
    let (holder, _) = both(Event::Op(0, attack));

    let (mut forbidden, mut mismatches) = (0, 0);
    let mut probe = |both: &mut dyn FnMut(Event) -> (Outcome, Outcome)| {
        for &n in &nodes {
            for dev in 1..3 {
                for e in [Event::Read(dev, n), Event::Write(dev, n)] {
                    let (a, b) = both(e);
                    if a.is_ok() && b.is_err() {
                        forbidden += 1;
                    }
                    if a != b {
                        mismatches += 1;
                    }
                }
            }
        }
    };
    probe(&mut both);
    if let (Ok(Some(h)), true) = (holder, matches!(attack.opcode, northcape::ops::Opcode::Lock)) {
        if rng.gen_bool(0.5) {
            let _ = both(Event::Op(0, OpRequest::drop_cap(h)));
            probe(&mut both);
        }
    }
    (forbidden, mismatches, cached.cache_stats().stale_revalidations)
}

fn cache_security() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(66);
    let (mut forbidden, mut mismatches, mut stale) = (0, 0, 0);
    let tiny = NtlbConfig { l1_instruction: 1, l1_data: 2, l2_entries: 4, l2_assoc: 2 };
    for i in 0..2000 {
        let ntlb = if i % 2 == 0 { NtlbConfig::default() } else { tiny };
        let (f, mm, s) = adversarial_trial(&mut rng, i, ntlb);
        forbidden += f;
        mismatches += mm;
        stale += s;
    }
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/scenarios/cache_adversarial.json");
    let s = Scenario::load(&path).unwrap();
    let report = run(&s, &RunOptions::default()).unwrap();
    let scripted = report.passed();
    let scripted_stale: u64 =
        report.stats.lines().find_map(|l| l.strip_prefix("stale_revalidations=")).unwrap().parse().unwrap();
    verdict(
        forbidden == 0 && mismatches == 0 && stale > 0 && scripted && scripted_stale > 0,
        format!(
            "2000 warmed trials: forbidden={forbidden} mismatches={mismatches} stale_revalidations={stale}; scripted suite passed={scripted} stale={scripted_stale}"
        ),
    )
}

// 7 ------------------------------------------------------------------------

fn heap_spans(h: &Heap) -> Result<u64, String> {
    let mut spans: Vec<(u64, u64)> = h.free_chunks().map(|c| (c.base, c.end())).collect();
    spans.extend(h.allocations().map(|a| (a.base, a.end())));
    spans.sort();
    let mut total = 0;
    for w in spans.windows(2) {
        if w[0].1 > w[1].0 {
            return Err(format!("overlap {:#x?} / {:#x?}", w[0], w[1]));
        }
    }
    for (s, e) in spans {
        total += e - s;
    }
    Ok(total)
}

fn allocator() -> Verdict {
    let mut m = small_machine(8192, 70);
    let owner = Principal::cpu(0, 3);
    let arena_len = 4 << 20;
    let arena = token(
        m.op(
            0,
            OpRequest::create(
                CapToken::ROOT,
                arena_len,
                Restriction::SubsystemIdBound { device: 0, subsystem: 3 },
                rwl(),
            ),
        )
        .unwrap(),
    );
    let mut heap = Heap::init(&mut m, owner, arena).unwrap();
    let initial: Vec<(u64, u64)> = heap.free_chunks().map(|c| (c.base, c.len)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(71);
    let mut live: Vec<(CapToken, u64)> = Vec::new();
    let mut problems = Vec::new();
    let mut shadow_allocated = 0u64;

    for step in 0..10_000 {
        if live.is_empty() || rng.gen_bool(0.55) {
            let size = if rng.gen_ratio(1, 20) { rng.gen_range(4096..65536) } else { rng.gen_range(1..1024) };
            match heap.malloc(&mut m, size, MallocOptions::default()) {
                Ok(t) => {
                    let a = *heap.allocation(t).unwrap();
                    // the chunk may absorb a small tail, never less than the minimum
                    if a.payload_len < payload_len_for(size) {
                        problems.push(format!("step {step}: payload {} < {}", a.payload_len, payload_len_for(size)));
                    }
                    shadow_allocated += HEADER_BYTES + a.payload_len;
                    // an offset the token cannot encode is out of reach as well
                    let past = t.add(size).map(|o| m.mem_write(1, o, &[1]).is_ok()).unwrap_or(false);
                    if m.mem_write(1, t.add(size - 1).unwrap(), &[1]).is_err() || past {
                        problems.push(format!("step {step}: handout bounds wrong for size {size}"));
                    }
                    live.push((t, HEADER_BYTES + a.payload_len));
                }
                Err(e) if e.name() == "OutOfMemory" => {}
                Err(e) => problems.push(format!("step {step}: malloc {e}")),
            }
        } else {
            let i = rng.gen_range(0..live.len());
            let (t, span) = live.swap_remove(i);
            match heap.free(&mut m, t) {
                Ok(()) => shadow_allocated -= span,
                Err(e) => problems.push(format!("step {step}: free {e}")),
            }
        }
        match heap_spans(&heap) {
            Ok(total) if total == arena_len => {}
            Ok(total) => problems.push(format!("step {step}: spans cover {total} of {arena_len}")),
            Err(e) => problems.push(format!("step {step}: {e}")),
        }
        let st = heap.stats();
        if st.free_bytes + shadow_allocated != arena_len {
            problems.push(format!("step {step}: free {} + allocated {shadow_allocated} != {arena_len}", st.free_bytes));
        }
        if step % 500 == 0 {
            if let Err(e) = heap.audit(&m) {
                problems.push(format!("step {step}: audit {e}"));
            }
        }
        if problems.len() > 5 {
            break;
        }
    }
    for (t, _) in live.drain(..) {
        heap.free(&mut m, t).unwrap();
    }
    let drained: Vec<(u64, u64)> = heap.free_chunks().map(|c| (c.base, c.len)).collect();
    let drained_ok = drained == initial;

    // a crashed client leaves shared handouts behind; reclaim takes it all back
    let mut children = Vec::new();
    let mut payloads = Vec::new();
    for i in 0..300 {
        let Ok(t) = heap.malloc(&mut m, rng.gen_range(1..2048), MallocOptions::default()) else { break };
        payloads.push(heap.allocation(t).unwrap().payload);
        if i % 2 == 0 {
            children.push(token(m.op(1, OpRequest::derive(t, 1, 0, NONE, rw())).unwrap()));
        }
    }
    for p in payloads {
        heap.reclaim(&mut m, p).unwrap();
    }
    let reclaimed = heap.stats().free_bytes;
    let orphaned = children.iter().all(|&c| kind(&m.mem_read(1, c, 1)) == "InvalidParent");
    if let Some(p) = problems.first() {
        eprintln!("{p}");
    }
    verdict(
        problems.is_empty() && drained_ok && reclaimed == arena_len && orphaned,
        format!(
            "10^4 ops: {} invariant violations; drained to initial chunk: {drained_ok}; reclaim returned {}%",
            problems.len(),
            reclaimed * 100 / arena_len
        ),
    )
}

// 8 ------------------------------------------------------------------------

const BOOT_MANIFEST: &str = r#"{
  "ram_size": 16777216,
  "heap_size": 1048576,
  "allocator": "alloc",
  "vectors": {"3": "net_isr"},
  "nmi": [2],
  "start": "app_main",
  "images": [
    {"name": "alloc",
     "segments": [{"name": "text", "kind": "text", "size": 512}, {"name": "data", "kind": "data", "size": 256}],
     "exports": [{"symbol": "malloc", "segment": "text", "kind": "call"}],
     "init": {"segment": "text"}},
    {"name": "net",
     "segments": [{"name": "text", "kind": "text", "size": 1024, "perms": "RXI"},
                  {"name": "rx", "kind": "bss", "size": 2048},
                  {"name": "table", "kind": "rodata", "size": 64, "data": "0102030405"}],
     "exports": [{"symbol": "net_send", "segment": "text", "kind": "call", "len": 512},
                 {"symbol": "net_isr", "segment": "text", "offset": 512, "kind": "call"},
                 {"symbol": "net_table", "segment": "table", "kind": "data", "len": 8}],
     "imports": ["malloc", "mmio_33554432_4096"],
     "fixups": [{"segment": "rx", "offset": 0, "symbol": "malloc"},
                {"segment": "rx", "offset": 8, "symbol": "mmio_33554432_4096"}],
     "init": {"segment": "text", "offset": 0},
     "init_priority": 1},
    {"name": "app",
     "segments": [{"name": "text", "kind": "text", "size": 256}, {"name": "data", "kind": "data", "size": 128}],
     "exports": [{"symbol": "app_main", "segment": "text", "kind": "call"}],
     "imports": ["net_send", "net_table", "malloc", "__timer_slot"],
     "fixups": [{"segment": "data", "offset": 0, "symbol": "net_send"},
                {"segment": "data", "offset": 8, "symbol": "net_table"},
                {"segment": "data", "offset": 16, "symbol": "malloc"},
                {"segment": "data", "offset": 24, "symbol": "__timer_slot"}],
     "pool": {"count": 8}}
  ]
}"#;

fn boot_trapdoor() -> Verdict {
    let mut m =
        Machine::new(MachineConfig { memory_size: 1 << 28, cmt_slots: 4096, seed: 88, ..MachineConfig::default() })
            .unwrap();
    let cpu = m.add_cpu();
    let manifest = Manifest::parse(BOOT_MANIFEST, None).unwrap();
    let mut sys = boot(&mut m, cpu, &manifest).unwrap();
    let heap_token = sys.heap.unwrap();
    let owner = Principal::cpu(cpu, sys.heap_owner.unwrap());
    let mut heap = Heap::init(&mut m, owner, heap_token).unwrap();
    let before_replay = sys.replay_loader_tokens(&mut m).len();
    sys.trapdoor(&mut m, Some(&mut heap)).unwrap();
    let replay = sys.replay_loader_tokens(&mut m);
    let cross = sys.cross_access(&m);
    let started = m.device(cpu).unwrap().subsystem() == sys.subsystem("app").unwrap().id;
    verdict(
        before_replay > 0 && replay.is_empty() && cross.is_empty() && started,
        format!(
            "{} loader tokens ({before_replay} usable before trapdoor, {} after); {} private tokens, {} cross-subsystem successes",
            sys.loader_tokens.len(),
            replay.len(),
            sys.private.len(),
            cross.len()
        ),
    )
}

// 9 ------------------------------------------------------------------------

const IRQ: u32 = 3;
const NMI: u32 = 2;
const TIMER: u32 = 7;

fn interrupt_machine(seed: u64) -> Machine {
    let mut m = Machine::new(MachineConfig {
        memory_size: 1 << 24,
        cmt_slots: 64,
        seed,
        timer_cause: TIMER,
        trace: false,
        ..MachineConfig::default()
    })
    .unwrap();
    let cpu = m.add_cpu();
    let xi = Permissions::R | Permissions::X | Permissions::I | Permissions::CT;
    let isr = token(m.op(cpu, OpRequest::create(CapToken::ROOT, 4096, NONE, xi)).unwrap());
    let set = |s| Restriction::SubsystemIdSet { device: cpu, subsystem: s };
    let vectors = [
        (IRQ, token(m.op(cpu, OpRequest::derive(isr, 64, 0, set(9), xi)).unwrap())),
        (NMI, token(m.op(cpu, OpRequest::derive(isr, 64, 64, set(10), xi)).unwrap())),
        (TIMER, token(m.op(cpu, OpRequest::derive(isr, 64, 128, NONE, xi)).unwrap())),
    ];
    let base = m.vector_region().start;
    for (c, t) in vectors {
        m.phys_write(base + 8 * c as u64, &t.raw().to_le_bytes());
    }
    m.set_vector_base(cpu, base).unwrap();
    m.set_nmi(cpu, NMI).unwrap();
    m
}

/// One random script against a small reference model of the regimes.
fn interrupt_script(rng: &mut ChaCha8Rng, seed: u64) -> Result<(), String> {
    let mut m = interrupt_machine(seed);
    let mut regime = Regime::Normal;
    let mut stack: Vec<Regime> = Vec::new();
    let mut normal_irq = false;
    let mut normal_regs = [0u64; 8];
    for step in 0..rng.gen_range(10..40) {
        let here = |m: &Machine| m.device(0).unwrap().regime();
        match rng.gen_range(0..9) {
            0 | 1 => {
                let cause = [IRQ, NMI, TIMER][rng.gen_range(0..3)];
                let out = m.raise_interrupt(0, cause).map_err(|e| format!("step {step}: {e}"))?;
                let expect_taken = match cause {
                    NMI => regime != Regime::Nmi,
                    _ => regime == Regime::Normal && normal_irq,
                };
                if (out == InterruptOutcome::Taken) != expect_taken {
                    return Err(format!("step {step}: cause {cause} in {regime:?} irq={normal_irq}: {out:?}"));
                }
                if out == InterruptOutcome::Taken && cause != TIMER {
                    stack.push(regime);
                    regime = if cause == NMI { Regime::Nmi } else { Regime::Irq };
                }
                if cause == TIMER && here(&m) != regime {
                    return Err(format!("step {step}: timer switched regime"));
                }
            }
            2 => {
                let r = m.mret(0);
                match stack.pop() {
                    Some(back) => {
                        r.map_err(|e| format!("step {step}: mret {e}"))?;
                        regime = back;
                    }
                    None if r.is_ok() => return Err(format!("step {step}: mret from normal succeeded")),
                    None => {}
                }
            }
            3 => {
                let on = rng.gen_bool(0.6);
                m.set_irq_enable(0, on).unwrap();
                if regime == Regime::Normal {
                    normal_irq = on;
                }
            }
            4 | 5 => {
                let r = rng.gen_range(0..8);
                let marker = match regime {
                    Regime::Normal => 0x1000_0000,
                    Regime::Irq => 0x2000_0000,
                    Regime::Nmi => 0x3000_0000,
                };
                let v = marker | rng.gen_range(0..0x1000u64);
                m.reg_write(0, r, v).unwrap();
                if regime == Regime::Normal {
                    normal_regs[r] = v;
                }
            }
            6 if regime == Regime::Normal => {
                let mask = rng.gen_range(0..256u64);
                m.zero_registers(0, mask).unwrap();
                for (i, r) in normal_regs.iter_mut().enumerate() {
                    if mask >> i & 1 == 1 {
                        *r = 0;
                    }
                }
            }
            _ => {}
        }
        if here(&m) != regime {
            return Err(format!("step {step}: machine in {:?}, model in {regime:?}", here(&m)));
        }
        if regime == Regime::Normal {
            for (i, &want) in normal_regs.iter().enumerate() {
                let got = m.reg_read(0, i).unwrap();
                if got != want {
                    return Err(format!("step {step}: r{i}={got:#x}, normal regime wrote {want:#x}"));
                }
            }
        }
    }
    Ok(())
}

fn interrupt_model() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut failures = Vec::new();
    for i in 0..10_000 {
        if let Err(e) = interrupt_script(&mut rng, i) {
            failures.push(format!("script {i}: {e}"));
        }
    }
    if let Some(f) = failures.first() {
        eprintln!("{f}");
    }
    verdict(failures.is_empty(), format!("10^4 scripts, {} failures", failures.len()))
}

// 10 -----------------------------------------------------------------------

fn determinism() -> Verdict {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/scenarios");
    let mut paths: Vec<_> = std::fs::read_dir(&dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "json"))
        .collect();
    paths.sort();
    let mut same = 0;
    for p in &paths {
        let a = run(&Scenario::load(p).unwrap(), &RunOptions::default()).unwrap();
        let b = run(&Scenario::load(p).unwrap(), &RunOptions::default()).unwrap();
        if a.trace == b.trace && !a.trace.is_empty() {
            same += 1;
        }
    }
    let cfg = FuzzConfig { steps: 20_000, ..FuzzConfig::default() };
    let fuzz_same = fuzz::run(&cfg).to_string() == fuzz::run(&cfg).to_string();
    verdict(
        same == paths.len() && fuzz_same,
        format!("{same}/{} scenario traces byte-identical; fuzz report identical: {fuzz_same}", paths.len()),
    )
}

type Criterion = (&'static str, fn() -> Verdict);

fn main() {
    let criteria: [Criterion; 10] = [
        ("differential oracle", differential_fuzz),
        ("unforgeability statistics", unforgeability),
        ("CMT lookup cost", lookup_cost),
        ("lock/unlock exclusivity", lock_exclusivity),
        ("revocation", revocation),
        ("cache-security adversarial suite", cache_security),
        ("allocator", allocator),
        ("boot/trapdoor", boot_trapdoor),
        ("interrupt model", interrupt_model),
        ("determinism", determinism),
    ];
    let filter: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut results = BTreeMap::new();
    for (i, (name, f)) in criteria.iter().enumerate() {
        let n = i + 1;
        if !filter.is_empty() && !filter.contains(&n) {
            continue;
        }
        let v = f();
        println!("criterion {n:>2} {} {name}: {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
        results.insert(n, v.pass);
    }
    let failed: Vec<_> = results.iter().filter(|(_, &p)| !p).map(|(n, _)| *n).collect();
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
