//! Two-level capability translation cache.
//!
//! Each CPU has an instruction and a data L1 keyed by `(id, nonce)` that
//! remembers the outcome of a full resolution. A shared set-associative L2
//! holds copies of table entries, each annotated with the effective window
//! and lock verdict of the chain it was fetched on. Lines may be tainted
//! stale by global operations, which forces a full walk on the next hit.

use std::collections::BTreeMap;
use std::ops::Range;

use thiserror::Error;

use crate::cmt::{Cmt, CmtEntry, DeviceId, Permissions, Restriction};
use crate::resolver::{
    self, access_checks, lookup_entered, restriction_gate, result_for, AccessContext, Chain, Fault, ResolutionResult,
};
use crate::token::{CapId, CapToken};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NtlbConfig {
    pub l1_instruction: usize,
    pub l1_data: usize,
    pub l2_entries: usize,
    pub l2_assoc: usize,
}

impl Default for NtlbConfig {
    fn default() -> Self {
        NtlbConfig { l1_instruction: 16, l1_data: 32, l2_entries: 512, l2_assoc: 8 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum ConfigError {
    #[error("cache sizes must be at least 1")]
    ZeroSize,
    #[error("L2 size {entries} is not a multiple of associativity {assoc}")]
    Associativity { entries: usize, assoc: usize },
}

impl NtlbConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.l1_instruction == 0 || self.l1_data == 0 || self.l2_entries == 0 || self.l2_assoc == 0 {
            return Err(ConfigError::ZeroSize);
        }
        if !self.l2_entries.is_multiple_of(self.l2_assoc) {
            return Err(ConfigError::Associativity { entries: self.l2_entries, assoc: self.l2_assoc });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CacheStats {
    pub l1_hits: u64,
    pub l1_misses: u64,
    pub l2_hits: u64,
    pub l2_misses: u64,
    pub stale_revalidations: u64,
    pub invalidations: u64,
}

/// How much of the cache an operation commit invalidates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Invalidation {
    /// Evict exactly the touched ids.
    Local,
    /// Evict the touched ids, flush every L1 and taint every L2 line.
    Global,
}

/// Deliberate defects for checking that the differential fuzzer notices
/// broken invalidation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InjectedBug {
    /// Global commits neither flush L1 nor taint L2.
    SkipGlobalTaint,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct L1Line {
    id: CapId,
    nonce: u16,
    window_base: u64,
    window_len: u64,
    perms: Permissions,
    restriction: Restriction,
    chain_depth: usize,
}

#[derive(Debug, Clone)]
struct L1 {
    lines: Vec<Option<L1Line>>,
    next: usize,
}

impl L1 {
    fn new(size: usize) -> L1 {
        L1 { lines: vec![None; size], next: 0 }
    }

    fn find(&self, id: CapId, nonce: u16) -> Option<L1Line> {
        self.lines.iter().flatten().find(|l| l.id == id && l.nonce == nonce).copied()
    }

    fn insert(&mut self, line: L1Line) {
        if let Some(slot) = self.lines.iter_mut().find(|l| l.is_some_and(|l| l.id == line.id)) {
            *slot = Some(line);
            return;
        }
        if let Some(slot) = self.lines.iter_mut().find(|l| l.is_none()) {
            *slot = Some(line);
            return;
        }
        self.lines[self.next] = Some(line);
        self.next = (self.next + 1) % self.lines.len();
    }

    fn evict(&mut self, id: CapId) -> u64 {
        let mut n = 0;
        for l in &mut self.lines {
            if l.is_some_and(|l| l.id == id) {
                *l = None;
                n += 1;
            }
        }
        n
    }

    fn flush(&mut self) -> u64 {
        let n = self.lines.iter().flatten().count() as u64;
        self.lines.iter_mut().for_each(|l| *l = None);
        n
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct L2Line {
    pub entry: CmtEntry,
    pub stale: bool,
    pub speculative: bool,
    pub window_base: u64,
    pub window_len: u64,
    pub lock_ok: bool,
    /// Length of the chain from this entry to its direct ancestor.
    pub depth: usize,
}

#[derive(Debug, Clone)]
struct L2 {
    sets: Vec<Vec<Option<L2Line>>>,
    next: Vec<usize>,
}

impl L2 {
    fn new(entries: usize, assoc: usize) -> L2 {
        let n = entries / assoc;
        L2 { sets: vec![vec![None; assoc]; n], next: vec![0; n] }
    }

    fn set_of(&self, id: CapId) -> usize {
        (id % self.sets.len() as u64) as usize
    }

    fn find_mut(&mut self, id: CapId) -> Option<&mut L2Line> {
        let s = self.set_of(id);
        self.sets[s].iter_mut().flatten().find(|l| l.entry.id == id)
    }

    fn insert(&mut self, line: L2Line) {
        let s = self.set_of(line.entry.id);
        let set = &mut self.sets[s];
        if let Some(slot) = set.iter_mut().find(|l| l.is_some_and(|l| l.entry.id == line.entry.id)) {
            *slot = Some(line);
            return;
        }
        if let Some(slot) = set.iter_mut().find(|l| l.is_none()) {
            *slot = Some(line);
            return;
        }
        let victim = self.next[s];
        set[victim] = Some(line);
        self.next[s] = (victim + 1) % set.len();
    }

    fn evict(&mut self, id: CapId) -> u64 {
        let s = self.set_of(id);
        let mut n = 0;
        for l in &mut self.sets[s] {
            if l.is_some_and(|l| l.entry.id == id) {
                *l = None;
                n += 1;
            }
        }
        n
    }

    fn lines(&self) -> impl Iterator<Item = &L2Line> {
        self.sets.iter().flatten().flatten()
    }

    fn lines_mut(&mut self) -> impl Iterator<Item = &mut L2Line> {
        self.sets.iter_mut().flatten().flatten()
    }
}

#[derive(Debug, Clone)]
pub struct Ntlb {
    config: NtlbConfig,
    l1: BTreeMap<DeviceId, [L1; 2]>,
    l2: L2,
    stats: CacheStats,
    bug: Option<InjectedBug>,
}

impl Ntlb {
    pub fn new(config: NtlbConfig) -> Result<Ntlb, ConfigError> {
        config.validate()?;
        Ok(Ntlb {
            config,
            l1: BTreeMap::new(),
            l2: L2::new(config.l2_entries, config.l2_assoc),
            stats: CacheStats::default(),
            bug: None,
        })
    }

    pub fn config(&self) -> NtlbConfig {
        self.config
    }

    /// Gives a CPU its private instruction and data L1.
    pub fn attach_cpu(&mut self, device: DeviceId) {
        self.l1.insert(device, [L1::new(self.config.l1_instruction), L1::new(self.config.l1_data)]);
    }

    pub fn inject_bug(&mut self, bug: Option<InjectedBug>) {
        self.bug = bug;
    }

    pub fn stats(&self) -> CacheStats {
        self.stats
    }

    pub fn l2_lines(&self) -> Vec<L2Line> {
        self.l2.lines().copied().collect()
    }

    pub fn l2_contains(&self, id: CapId) -> bool {
        self.l2.lines().any(|l| l.entry.id == id)
    }

    pub fn l1_occupancy(&self, device: DeviceId) -> usize {
        self.l1.get(&device).map(|[i, d]| i.lines.iter().chain(&d.lines).flatten().count()).unwrap_or(0)
    }

    pub fn resolve(&mut self, cmt: &Cmt, t: CapToken, ctx: &AccessContext) -> Result<ResolutionResult, Fault> {
        let d = t.decode().map_err(|_| Fault::Malformed)?;
        let which = usize::from(!ctx.is_fetch);
        let has_l1 = ctx.cpu && self.l1.contains_key(&ctx.device);

        if has_l1 {
            let hit = self.l1[&ctx.device][which].find(d.id, d.nonce);
            match hit {
                Some(line) => {
                    self.stats.l1_hits += 1;
                    restriction_gate(line.restriction, ctx)?;
                    access_checks(line.perms, line.window_len, ctx)?;
                    let entry = CmtEntry::direct(0, 0, line.perms, line.restriction);
                    return Ok(result_for(&entry, (line.window_base, line.window_len), line.chain_depth));
                }
                None => self.stats.l1_misses += 1,
            }
        }

        let res = self.resolve_l2(cmt, t, d.id, d.nonce, ctx)?;
        if has_l1 {
            let line = L1Line {
                id: d.id,
                nonce: d.nonce,
                window_base: res.phys_base,
                window_len: res.window_len,
                perms: res.perms,
                restriction: res.restriction,
                chain_depth: res.chain_depth,
            };
            self.l1.get_mut(&ctx.device).unwrap()[which].insert(line);
        }
        Ok(res)
    }

    fn resolve_l2(
        &mut self,
        cmt: &Cmt,
        t: CapToken,
        id: CapId,
        nonce: u16,
        ctx: &AccessContext,
    ) -> Result<ResolutionResult, Fault> {
        if let Some(line) = self.l2.find_mut(id).copied() {
            self.stats.l2_hits += 1;
            if line.stale {
                return match resolver::resolve_chain(cmt, t, ctx) {
                    Ok((_, chain)) => {
                        let entered = chain.entered();
                        let window = chain.window();
                        let revalidated = L2Line {
                            entry: entered.entry,
                            stale: false,
                            speculative: false,
                            window_base: entered.window_base,
                            window_len: entered.window_len,
                            lock_ok: entered.lock_ok,
                            depth: chain.links.len(),
                        };
                        self.l2.insert(revalidated);
                        self.stats.stale_revalidations += 1;
                        access_checks(entered.entry.perms, window.1, ctx)?;
                        Ok(result_for(&entered.entry, window, chain.links.len()))
                    }
                    Err(f) => {
                        self.stats.invalidations += self.l2.evict(id);
                        Err(f)
                    }
                };
            }
            if line.entry.nonce != nonce {
                return Err(Fault::InvalidToken);
            }
            restriction_gate(line.entry.restriction, ctx)?;
            if line.lock_ok {
                let window = (line.window_base, line.window_len);
                access_checks(line.entry.perms, window.1, ctx)?;
                return Ok(result_for(&line.entry, window, line.depth));
            }
            return resolver::resolve(cmt, t, ctx);
        }

        self.stats.l2_misses += 1;
        let (_, entered) = lookup_entered(cmt, t)?;
        restriction_gate(entered.restriction, ctx)?;
        match resolver::walk(cmt, entered) {
            Err(we) => {
                for e in &we.fetched {
                    self.insert_speculative(e);
                }
                self.evict_speculative();
                Err(we.fault)
            }
            Ok(chain) => {
                for l in &chain.links {
                    self.insert_speculative(&l.entry);
                }
                self.commit_speculative(&chain);
                resolver::lock_gate(&chain.links)?;
                let window = chain.window();
                access_checks(entered.perms, window.1, ctx)?;
                Ok(result_for(&entered, window, chain.links.len()))
            }
        }
    }

    fn insert_speculative(&mut self, e: &CmtEntry) {
        if !e.perms.contains(Permissions::CT) {
            return;
        }
        self.l2.insert(L2Line {
            entry: *e,
            stale: false,
            speculative: true,
            window_base: 0,
            window_len: 0,
            lock_ok: false,
            depth: 0,
        });
    }

    fn evict_speculative(&mut self) {
        for set in &mut self.l2.sets {
            for l in set.iter_mut() {
                if l.is_some_and(|l| l.speculative) {
                    *l = None;
                }
            }
        }
    }

    fn commit_speculative(&mut self, chain: &Chain) {
        let n = chain.links.len();
        for (i, link) in chain.links.iter().enumerate() {
            if let Some(line) = self.l2.find_mut(link.entry.id) {
                if line.speculative {
                    line.speculative = false;
                    line.window_base = link.window_base;
                    line.window_len = link.window_len;
                    line.lock_ok = link.lock_ok;
                    line.depth = n - i;
                }
            }
        }
    }

    /// Applies the invalidation an operation commit requires.
    pub fn notify_op_commit(&mut self, scope: Invalidation, touched: &[CapId]) {
        for &id in touched {
            for [i, d] in self.l1.values_mut() {
                self.stats.invalidations += i.evict(id) + d.evict(id);
            }
            self.stats.invalidations += self.l2.evict(id);
        }
        if scope == Invalidation::Global && self.bug != Some(InjectedBug::SkipGlobalTaint) {
            for [i, d] in self.l1.values_mut() {
                self.stats.invalidations += i.flush() + d.flush();
            }
            for line in self.l2.lines_mut() {
                line.stale = true;
            }
        }
    }

    /// Checks that every usable L2 line matches the table and a fresh walk.
    pub fn audit(&self, cmt: &Cmt) -> Result<(), String> {
        for line in self.l2.lines() {
            if line.speculative {
                return Err(format!("speculative line for id {} outside a walk", line.entry.id));
            }
            if line.stale {
                continue;
            }
            let current = cmt.peek(line.entry.id);
            if current != Some(line.entry) {
                return Err(format!("L2 line {} differs from the table", line.entry.id));
            }
            if !line.entry.perms.contains(Permissions::CT) {
                return Err(format!("non-cacheable entry {} in L2", line.entry.id));
            }
            let chain = resolver::walk(cmt, line.entry)
                .map_err(|e| format!("L2 line {} has a broken chain ({})", line.entry.id, e.fault))?;
            let entered = chain.entered();
            if (entered.window_base, entered.window_len, entered.lock_ok, chain.links.len())
                != (line.window_base, line.window_len, line.lock_ok, line.depth)
            {
                return Err(format!("L2 line {} carries an outdated annotation", line.entry.id));
            }
        }
        Ok(())
    }
}

/// Cached counterpart of [`resolver::translate`].
pub fn translate(
    ntlb: &mut Ntlb,
    cmt: &Cmt,
    t: CapToken,
    ctx: &AccessContext,
    len: u64,
    reserved: &Range<u64>,
) -> Result<Range<u64>, Fault> {
    let res = ntlb.resolve(cmt, t, ctx)?;
    let p = resolver::bounds(&res, t.offset(), len, reserved)?;
    Ok(p..p + len)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cmt::{DEFAULT_ROW_WIDTH, DEFAULT_SLOT_COUNT};
    use crate::memory::Memory;
    use crate::ops::{execute, OpRequest, Principal};

    const MEM: u64 = 1 << 32;
    const NONE: Restriction = Restriction::None;
    const RWL_CT: Permissions = Permissions::from_bits(0b100_1011);

    struct Env {
        cmt: Cmt,
        mem: Memory,
        ntlb: Ntlb,
        who: Principal,
    }

    impl Env {
        fn new(config: NtlbConfig) -> Env {
            let mut cmt = Cmt::new(DEFAULT_SLOT_COUNT, DEFAULT_ROW_WIDTH, 11).unwrap();
            cmt.reset(MEM);
            let mut ntlb = Ntlb::new(config).unwrap();
            ntlb.attach_cpu(0);
            Env { cmt, mem: Memory::new(MEM), ntlb, who: Principal::cpu(0, 0) }
        }

        fn op(&mut self, req: OpRequest) -> CapToken {
            let c = execute(&mut self.cmt, &mut self.mem, &self.who, &req);
            self.ntlb.notify_op_commit(c.scope, &c.touched);
            c.output.unwrap().token().unwrap()
        }

        fn read(&mut self, t: CapToken) -> Result<ResolutionResult, Fault> {
            let ctx = self.who.context();
            let cached = self.ntlb.resolve(&self.cmt, t, &ctx);
            assert_eq!(cached, resolver::resolve(&self.cmt, t, &ctx));
            self.ntlb.audit(&self.cmt).unwrap();
            cached
        }
    }

    #[test]
    fn fresh_cache_has_zero_stats() {
        let env = Env::new(NtlbConfig::default());
        assert_eq!(env.ntlb.stats(), CacheStats::default());
        assert_eq!(env.ntlb.l1_occupancy(0), 0);
        assert!(env.ntlb.l2_lines().is_empty());
    }

    #[test]
    fn bad_geometry_rejected() {
        let bad = NtlbConfig { l2_entries: 30, l2_assoc: 8, ..Default::default() };
        assert!(Ntlb::new(bad).is_err());
    }

    #[test]
    fn second_access_hits_l1() {
        let mut env = Env::new(NtlbConfig::default());
        let d = env.op(OpRequest::create(CapToken::ROOT, 0x100, NONE, RWL_CT));
        env.read(d).unwrap();
        env.read(d).unwrap();
        let s = env.ntlb.stats();
        assert_eq!((s.l1_misses, s.l1_hits, s.l2_misses), (1, 1, 1));
    }

    #[test]
    fn non_cacheable_entries_stay_out_of_l2() {
        let mut env = Env::new(NtlbConfig::default());
        let d = env.op(OpRequest::create(CapToken::ROOT, 0x100, NONE, Permissions::RW));
        env.read(d).unwrap();
        assert!(!env.ntlb.l2_contains(d.decode().unwrap().id));
        let c = env.op(OpRequest::create(CapToken::ROOT, 0x100, NONE, RWL_CT));
        env.read(c).unwrap();
        assert!(env.ntlb.l2_contains(c.decode().unwrap().id));
    }

    #[test]
    fn unrelated_lock_forces_revalidation() {
        let mut env = Env::new(NtlbConfig::default());
        let d = env.op(OpRequest::create(CapToken::ROOT, 0x100, NONE, RWL_CT));
        let a = env.op(OpRequest::derive(d, 0x80, 0, NONE, RWL_CT));
        let other = env.op(OpRequest::create(CapToken::ROOT, 0x100, NONE, RWL_CT));
        env.read(a).unwrap();
        env.read(other).unwrap();
        env.op(OpRequest::lock(a, NONE, RWL_CT));
        assert_eq!(env.ntlb.l1_occupancy(0), 0);
        env.read(other).unwrap();
        assert_eq!(env.ntlb.stats().stale_revalidations, 1);
        assert_eq!(env.read(a), Err(Fault::Locked));
    }

    #[test]
    fn local_restrict_evicts_only_target() {
        let mut env = Env::new(NtlbConfig::default());
        let d = env.op(OpRequest::create(CapToken::ROOT, 0x100, NONE, RWL_CT));
        let a = env.op(OpRequest::derive(d, 0x80, 0, NONE, RWL_CT));
        let b = env.op(OpRequest::derive(d, 0x80, 0x80, NONE, RWL_CT));
        env.read(a).unwrap();
        env.read(b).unwrap();
        let before = env.ntlb.l1_occupancy(0);
        let c = execute(
            &mut env.cmt,
            &mut env.mem,
            &env.who,
            &OpRequest::restrict(a, NONE, Permissions::R | Permissions::CT, 0, 0),
        );
        assert_eq!(c.scope, Invalidation::Local);
        env.ntlb.notify_op_commit(c.scope, &c.touched);
        assert_eq!(env.ntlb.l1_occupancy(0), before - 1);
        let ida = a.decode().unwrap().id;
        assert!(!env.ntlb.l2_contains(ida));
        assert!(env.ntlb.l2_contains(b.decode().unwrap().id));
        let ctx = crate::resolver::AccessContext { access: crate::resolver::AccessKind::Write, ..env.who.context() };
        assert_eq!(env.ntlb.resolve(&env.cmt, a, &ctx), Err(Fault::PermissionDenied));
    }

    #[test]
    fn skipped_taint_is_caught_by_equivalence() {
        let mut env = Env::new(NtlbConfig::default());
        env.ntlb.inject_bug(Some(InjectedBug::SkipGlobalTaint));
        let d = env.op(OpRequest::create(CapToken::ROOT, 0x100, NONE, RWL_CT));
        let a = env.op(OpRequest::derive(d, 0x80, 0, NONE, RWL_CT));
        let g = env.op(OpRequest::derive(a, 0x10, 0, NONE, RWL_CT));
        let ctx = env.who.context();
        env.ntlb.resolve(&env.cmt, g, &ctx).unwrap();
        env.op(OpRequest::lock(a, NONE, RWL_CT));
        assert!(env.ntlb.resolve(&env.cmt, g, &ctx).is_ok());
        assert_eq!(resolver::resolve(&env.cmt, g, &ctx), Err(Fault::Locked));
    }

    #[test]
    fn tiny_caches_keep_agreeing() {
        let config = NtlbConfig { l1_instruction: 1, l1_data: 1, l2_entries: 2, l2_assoc: 1 };
        let mut env = Env::new(config);
        let d = env.op(OpRequest::create(CapToken::ROOT, 0x1000, NONE, RWL_CT));
        let kids: Vec<CapToken> =
            (0..6).map(|i| env.op(OpRequest::derive(d, 0x100, i * 0x100, NONE, RWL_CT))).collect();
        for round in 0..3 {
            for (i, &k) in kids.iter().enumerate() {
                // locking any child locks the shared direct for everyone else
                let r = env.read(k);
                assert_eq!(r.is_err(), round == 2, "round {round} kid {i}: {r:?}");
            }
            if round == 1 {
                env.op(OpRequest::lock(kids[2], NONE, RWL_CT));
            }
        }
        assert!(env.ntlb.stats().l1_misses > 0);
    }
}
