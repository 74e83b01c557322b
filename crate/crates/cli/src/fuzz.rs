//! Differential fuzzer: the same random program runs on a caching machine
//! and on a machine that always resolves through the table, and every trace
//! event must match.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;

use northcape::machine::{DeviceKind, Machine, MachineConfig};
use northcape::ntlb::{CacheStats, InjectedBug, NtlbConfig};
use northcape::ops::{OpRequest, Opcode};
use northcape::{CapToken, Permissions, Restriction};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const DEFAULT_SEED: u64 = 0x6e6f_7274_6863_6170;
pub const DEFAULT_STEPS: u64 = 100_000;
const POOL_MAX: usize = 256;
const TAIL: usize = 24;
const ISR_SUBSYSTEM: u32 = 7;
const ISR_CAUSE: u32 = 3;
const NMI_CAUSE: u32 = 9;

/// Relative weights of the four step families.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Weights {
    pub ops: u32,
    pub accesses: u32,
    pub lock_revoke: u32,
    pub interrupts: u32,
}

impl Default for Weights {
    fn default() -> Self {
        Weights { ops: 40, accesses: 40, lock_revoke: 10, interrupts: 10 }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FuzzConfig {
    pub seed: u64,
    pub steps: u64,
    pub weights: Weights,
    pub ntlb: NtlbConfig,
    pub audit_every: u64,
    /// Bug planted in the caching machine only.
    pub bug: Option<InjectedBug>,
}

impl Default for FuzzConfig {
    fn default() -> Self {
        FuzzConfig {
            seed: DEFAULT_SEED,
            steps: DEFAULT_STEPS,
            weights: Weights::default(),
            ntlb: NtlbConfig::default(),
            audit_every: 1000,
            bug: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Divergence {
    pub step: u64,
    pub action: String,
    pub cached: Vec<String>,
    pub uncached: Vec<String>,
    /// Trace lines leading up to the divergence, from the caching machine.
    pub tail: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FuzzReport {
    pub seed: u64,
    pub steps_run: u64,
    pub divergence: Option<Divergence>,
    pub audit_failure: Option<(u64, String)>,
    pub cache: CacheStats,
    pub ops: u64,
    pub accesses: u64,
    pub faults: u64,
    pub fault_kinds: BTreeMap<String, u64>,
    pub interrupts_taken: u64,
    pub halted: bool,
    /// Last trace lines when the run stopped early.
    pub tail: Vec<String>,
}

impl FuzzReport {
    pub fn clean(&self) -> bool {
        self.divergence.is_none() && self.audit_failure.is_none() && !self.halted
    }
}

impl fmt::Display for FuzzReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "seed={:#x}", self.seed)?;
        writeln!(f, "steps={}", self.steps_run)?;
        writeln!(f, "ops={}", self.ops)?;
        writeln!(f, "accesses={}", self.accesses)?;
        writeln!(f, "faults={}", self.faults)?;
        for (k, n) in &self.fault_kinds {
            writeln!(f, "faults.{k}={n}")?;
        }
        writeln!(f, "interrupts_taken={}", self.interrupts_taken)?;
        let c = &self.cache;
        writeln!(f, "l1_hits={}", c.l1_hits)?;
        writeln!(f, "l1_misses={}", c.l1_misses)?;
        writeln!(f, "l2_hits={}", c.l2_hits)?;
        writeln!(f, "l2_misses={}", c.l2_misses)?;
        writeln!(f, "stale_revalidations={}", c.stale_revalidations)?;
        writeln!(f, "invalidations={}", c.invalidations)?;
        if self.halted {
            writeln!(f, "halted=true")?;
            for l in &self.tail {
                writeln!(f, "  | {l}")?;
            }
        }
        if let Some((step, e)) = &self.audit_failure {
            writeln!(f, "audit_failure step={step}: {e}")?;
        }
        match &self.divergence {
            None => writeln!(f, "result=agree"),
            Some(d) => {
                writeln!(f, "result=diverged step={} action={}", d.step, d.action)?;
                for l in &d.tail {
                    writeln!(f, "  | {l}")?;
                }
                for l in &d.cached {
                    writeln!(f, "  cached   {l}")?;
                }
                for l in &d.uncached {
                    writeln!(f, "  uncached {l}")?;
                }
                Ok(())
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum Action {
    Op { dev: u16, req: OpRequest },
    Read { dev: u16, t: CapToken, len: u64 },
    Write { dev: u16, t: CapToken, len: u64, fill: u8 },
    Fetch { dev: u16, t: CapToken },
    Interrupt { dev: u16, cause: u32 },
    Mret { dev: u16 },
    ZeroRegs { dev: u16, mask: u64 },
    SetEpc { dev: u16, t: CapToken },
}

const CPUS: [u16; 2] = [0, 1];
const DMA: u16 = 2;

fn machine(cfg: &FuzzConfig, caching: bool) -> Machine {
    let mc =
        MachineConfig { memory_size: 1 << 28, seed: cfg.seed, ntlb: cfg.ntlb, caching, ..MachineConfig::default() };
    let mut m = Machine::new(mc).expect("fuzz machine config");
    m.add_device(DeviceKind::Cpu, 0);
    m.add_device(DeviceKind::Cpu, 1);
    m.add_device(DeviceKind::Dma, 5);
    if caching {
        m.inject_cache_bug(cfg.bug);
    }
    m
}

/// Builds the starting capabilities on `m`. Returns the token pool and one
/// entry per CPU that switches it back to its starting subsystem.
fn setup(m: &mut Machine) -> (Vec<CapToken>, [CapToken; 2]) {
    let rwl = Permissions::RW.union(Permissions::L).union(Permissions::CT);
    let restrictions = [
        Restriction::None,
        Restriction::SubsystemIdBound { device: 0, subsystem: 0 },
        Restriction::SubsystemIdBound { device: 1, subsystem: 1 },
        Restriction::SubsystemIdBound { device: DMA, subsystem: 5 },
    ];
    // The root stays out of the pool: revoking it would wipe the vector table.
    let mut pool = Vec::new();
    for _ in 0..2 {
        let arena = m.op(0, OpRequest::create(CapToken::ROOT, 1 << 16, Restriction::None, rwl)).unwrap();
        pool.push(arena.token().unwrap());
    }
    for i in 0..12 {
        let perms = if i % 4 == 3 { Permissions::RW.union(Permissions::X) } else { rwl };
        let r = if i < 6 { Restriction::None } else { restrictions[i % 4] };
        let d = m.op(0, OpRequest::create(CapToken::ROOT, 4096, r, perms)).expect("setup create");
        let d = d.token().unwrap();
        pool.push(d);
        for k in 0..3u64 {
            if let Ok(c) = m.op(0, OpRequest::derive(d, 256, k * 512, r, perms)) {
                pool.push(c.token().unwrap());
            }
        }
    }

    let xi = Permissions::R.union(Permissions::X).union(Permissions::I).union(Permissions::CT);
    let isr = m.op(0, OpRequest::create(CapToken::ROOT, 4096, Restriction::None, xi)).unwrap().token().unwrap();
    let set = Restriction::SubsystemIdSet { device: 0, subsystem: ISR_SUBSYSTEM };
    let timer_cause = m.config().timer_cause;
    let vectors = [
        (ISR_CAUSE, m.op(0, OpRequest::derive(isr, 64, 0, set, xi)).unwrap().token().unwrap()),
        (NMI_CAUSE, m.op(0, OpRequest::derive(isr, 64, 64, set, xi)).unwrap().token().unwrap()),
        (timer_cause, m.op(0, OpRequest::derive(isr, 64, 128, Restriction::None, xi)).unwrap().token().unwrap()),
    ];
    let base = m.vector_region().start;
    for (cause, t) in vectors {
        m.phys_write(base + 8 * cause as u64, &t.raw().to_le_bytes());
    }
    for dev in CPUS {
        m.set_vector_base(dev, base).unwrap();
        m.set_nmi(dev, NMI_CAUSE).unwrap();
        m.set_irq_enable(dev, true).unwrap();
    }
    let rx = Permissions::R.union(Permissions::X).union(Permissions::CT);
    let code = m.op(0, OpRequest::create(CapToken::ROOT, 4096, Restriction::None, rx)).unwrap().token().unwrap();
    let homes = CPUS.map(|d| {
        let set = Restriction::SubsystemIdSet { device: d, subsystem: d as u32 };
        m.op(0, OpRequest::derive(code, 64, 64 * d as u64, set, rx)).unwrap().token().unwrap()
    });
    m.take_trace();
    (pool, homes)
}

fn pick(rng: &mut ChaCha8Rng, pool: &[CapToken]) -> CapToken {
    // Recent tokens are favoured so fresh children get exercised while warm.
    let t = if rng.gen_bool(0.5) && pool.len() > 16 {
        pool[pool.len() - 1 - rng.gen_range(0..16)]
    } else {
        *pool.choose(rng).unwrap()
    };
    if rng.gen_ratio(1, 50) {
        CapToken(t.raw() ^ (1 << rng.gen_range(0..64)))
    } else {
        t
    }
}

fn with_offset(rng: &mut ChaCha8Rng, t: CapToken) -> CapToken {
    let off = rng.gen_range(0..320u64);
    t.add(off).unwrap_or(t)
}

fn perms(rng: &mut ChaCha8Rng) -> Permissions {
    let mut p = Permissions::from_bits(rng.gen::<u8>() & 0x7f);
    if rng.gen_bool(0.7) {
        p = p.union(Permissions::RW).union(Permissions::CT);
    }
    p
}

fn restriction(rng: &mut ChaCha8Rng, cpu: u16) -> Restriction {
    let dev = rng.gen_range(0..3u16);
    let sub = [0, 1, 5, ISR_SUBSYSTEM][rng.gen_range(0..4)];
    match rng.gen_range(0..10) {
        0..=5 => Restriction::None,
        6 | 7 => Restriction::SubsystemIdBound { device: cpu, subsystem: cpu as u32 },
        8 => Restriction::SubsystemIdBound { device: dev, subsystem: sub },
        _ => Restriction::SubsystemIdSet { device: dev, subsystem: sub },
    }
}

/// The token an action mainly operates on.
fn subject(a: &Action) -> Option<CapToken> {
    match *a {
        Action::Op { req, .. } => Some(req.a),
        Action::Read { t, .. } | Action::Write { t, .. } | Action::Fetch { t, .. } | Action::SetEpc { t, .. } => {
            Some(t)
        }
        _ => None,
    }
}

fn gen_action(rng: &mut ChaCha8Rng, w: &Weights, pool: &[CapToken], homes: &[CapToken; 2], timer: u32) -> Action {
    let total = w.ops + w.accesses + w.lock_revoke + w.interrupts;
    let mut roll = rng.gen_range(0..total.max(1));
    let cpu = *CPUS.choose(rng).unwrap();
    if roll < w.ops {
        if pool.len() < 32 && rng.gen_ratio(1, 4) {
            let rwl = Permissions::RW.union(Permissions::L).union(Permissions::CT);
            let r = restriction(rng, cpu);
            return Action::Op { dev: cpu, req: OpRequest::create(CapToken::ROOT, 4096, r, rwl) };
        }
        let opcode = *Opcode::ALL.choose(rng).unwrap();
        let a = pick(rng, pool);
        let req = OpRequest {
            opcode,
            a,
            b: pick(rng, pool),
            len: [8, 64, 128, 256, 1024][rng.gen_range(0..5)],
            offset: rng.gen_range(0..8u64) * 64,
            restriction: restriction(rng, cpu),
            perms: perms(rng),
            offset_add: rng.gen_range(0..3u64) * 32,
            len_sub: rng.gen_range(0..3u64) * 32,
        };
        return Action::Op { dev: cpu, req };
    }
    roll -= w.ops;
    if roll < w.accesses {
        let dev = if rng.gen_ratio(1, 5) { DMA } else { cpu };
        let t = pick(rng, pool);
        let t = with_offset(rng, t);
        let len = rng.gen_range(1..=16u64);
        return match rng.gen_range(0..10) {
            0..=4 => Action::Read { dev, t, len },
            5..=7 => Action::Write { dev, t, len, fill: rng.gen() },
            8 => Action::Fetch { dev: cpu, t },
            _ => Action::Fetch { dev: cpu, t: homes[cpu as usize] },
        };
    }
    roll -= w.accesses;
    if roll < w.lock_revoke {
        let a = pick(rng, pool);
        let opcode = if rng.gen_bool(0.5) { Opcode::Lock } else { Opcode::Revoke };
        let req =
            OpRequest { opcode, restriction: restriction(rng, cpu), perms: perms(rng), ..OpRequest::new(opcode, a) };
        return Action::Op { dev: cpu, req };
    }
    match rng.gen_range(0..10) {
        0..=3 => Action::Interrupt { dev: cpu, cause: [ISR_CAUSE, NMI_CAUSE, timer, ISR_CAUSE][rng.gen_range(0..4)] },
        4..=7 => Action::Mret { dev: cpu },
        8 => Action::ZeroRegs { dev: cpu, mask: rng.gen() },
        _ => Action::SetEpc { dev: cpu, t: pick(rng, pool) },
    }
}

/// Runs one action; the debug form of its result is part of the comparison.
fn apply(m: &mut Machine, a: &Action) -> (String, Vec<CapToken>) {
    match *a {
        Action::Op { dev, req } => match m.op(dev, req) {
            Ok(out) => {
                let mut fresh = Vec::new();
                if let northcape::ops::OpOutput::Split { remainder: Some(r), .. } = out {
                    fresh.push(r);
                }
                fresh.extend(out.token());
                (format!("{out:?}"), fresh)
            }
            Err(e) => (e.kind(), Vec::new()),
        },
        Action::Read { dev, t, len } => (format!("{:?}", m.mem_read(dev, t, len).map_err(|e| e.kind())), Vec::new()),
        Action::Write { dev, t, len, fill } => {
            let data = vec![fill; len as usize];
            (format!("{:?}", m.mem_write(dev, t, &data).map_err(|e| e.kind())), Vec::new())
        }
        Action::Fetch { dev, t } => (format!("{:?}", m.fetch(dev, t, false).map_err(|e| e.kind())), Vec::new()),
        Action::Interrupt { dev, cause } => {
            (format!("{:?}", m.raise_interrupt(dev, cause).map_err(|e| e.kind())), Vec::new())
        }
        Action::Mret { dev } => (format!("{:?}", m.mret(dev).map_err(|e| e.kind())), Vec::new()),
        Action::ZeroRegs { dev, mask } => {
            (format!("{:?}", m.zero_registers(dev, mask).map_err(|e| e.kind())), Vec::new())
        }
        Action::SetEpc { dev, t } => (format!("{:?}", m.set_epc(dev, t).map_err(|e| e.kind())), Vec::new()),
    }
}

fn events(m: &mut Machine) -> Vec<String> {
    m.take_trace().iter().map(ToString::to_string).collect()
}

/// Runs the differential fuzzer to completion or to the first disagreement.
pub fn run(cfg: &FuzzConfig) -> FuzzReport {
    let mut cached = machine(cfg, true);
    let mut plain = machine(cfg, false);
    let (mut pool, homes) = setup(&mut cached);
    assert_eq!((pool.clone(), homes), setup(&mut plain), "setup is deterministic");

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let timer = cached.config().timer_cause;
    let mut tail: VecDeque<String> = VecDeque::with_capacity(TAIL);
    let mut report = FuzzReport {
        seed: cfg.seed,
        steps_run: 0,
        divergence: None,
        audit_failure: None,
        cache: CacheStats::default(),
        ops: 0,
        accesses: 0,
        faults: 0,
        fault_kinds: BTreeMap::new(),
        interrupts_taken: 0,
        halted: false,
        tail: Vec::new(),
    };

    for step in 0..cfg.steps {
        let action = gen_action(&mut rng, &cfg.weights, &pool, &homes, timer);
        let (r1, fresh) = apply(&mut cached, &action);
        let (r2, _) = apply(&mut plain, &action);
        let e1 = events(&mut cached);
        let e2 = events(&mut plain);
        report.steps_run = step + 1;
        match action {
            Action::Op { .. } => report.ops += 1,
            Action::Read { .. } | Action::Write { .. } | Action::Fetch { .. } => report.accesses += 1,
            _ => {}
        }
        if r1 != r2 || e1 != e2 {
            let mut c = e1.clone();
            c.push(format!("result {r1}"));
            let mut u = e2.clone();
            u.push(format!("result {r2}"));
            report.divergence = Some(Divergence {
                step,
                action: format!("{action:?}"),
                cached: c,
                uncached: u,
                tail: tail.into_iter().collect(),
            });
            break;
        }
        if let Some(k) = e1.iter().find_map(|e| e.split_once("fault:").map(|(_, k)| k.to_string())) {
            report.faults += 1;
            *report.fault_kinds.entry(k).or_default() += 1;
        }
        for e in e1.iter().cloned() {
            if tail.len() == TAIL {
                tail.pop_front();
            }
            tail.push_back(e);
        }
        // Dead tokens leave the pool; foreign ones sometimes do, so the pool
        // does not fill up with capabilities nobody can use.
        let dead = e1.iter().any(|e| e.ends_with("fault:InvalidToken") || e.ends_with("fault:InvalidParent"))
            || (e1.iter().any(|e| e.ends_with("fault:RestrictionViolation")) && rng.gen_ratio(1, 3));
        if let (true, Some(t)) = (dead, subject(&action)) {
            if pool.len() > 1 {
                pool.retain(|p| p.base() != t.base());
            }
        }
        for t in fresh.into_iter().filter(|t| t.base() != CapToken::ROOT) {
            if pool.len() >= POOL_MAX {
                let i = rng.gen_range(0..pool.len());
                pool.swap_remove(i);
            }
            pool.push(t);
        }
        if cfg.audit_every > 0 && (step + 1) % cfg.audit_every == 0 {
            if let Err(e) = cached.audit().and_then(|_| plain.audit()) {
                report.audit_failure = Some((step, e));
                break;
            }
        }
        if cached.is_halted() {
            report.halted = true;
            report.tail = tail.iter().cloned().collect();
            break;
        }
    }
    report.cache = cached.cache_stats();
    report.interrupts_taken = cached.stats().interrupts_taken;
    report
}
