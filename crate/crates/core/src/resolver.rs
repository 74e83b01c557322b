//! Uncached token resolution.
//!
//! This is the reference path every cached lookup must agree with. Checks
//! run in a fixed order and the first failing check decides the fault.

use std::fmt;
use std::ops::Range;

use thiserror::Error;

use crate::cmt::{Cmt, CmtEntry, DeviceId, EntryKind, Permissions, Restriction, SubsystemId};
use crate::token::{CapToken, DecodedToken};

pub const MAX_CHAIN_DEPTH: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Regime {
    Normal,
    Irq,
    Nmi,
}

impl Regime {
    pub const ALL: [Regime; 3] = [Regime::Normal, Regime::Irq, Regime::Nmi];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn is_interrupt(self) -> bool {
        self != Regime::Normal
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Regime::Normal => "n",
            Regime::Irq => "i",
            Regime::Nmi => "m",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AccessKind {
    Read,
    Write,
    Execute,
}

impl AccessKind {
    pub fn required(self) -> Permissions {
        match self {
            AccessKind::Read => Permissions::R,
            AccessKind::Write => Permissions::W,
            AccessKind::Execute => Permissions::X,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct AccessContext {
    pub device: DeviceId,
    pub subsystem: SubsystemId,
    pub regime: Regime,
    pub access: AccessKind,
    pub is_fetch: bool,
    /// CPUs are subject to the interrupt-regime check; DMA engines are not.
    pub cpu: bool,
}

impl AccessContext {
    pub fn data(device: DeviceId, subsystem: SubsystemId, access: AccessKind) -> AccessContext {
        AccessContext { device, subsystem, regime: Regime::Normal, access, is_fetch: false, cpu: true }
    }

    pub fn fetch(device: DeviceId, subsystem: SubsystemId) -> AccessContext {
        AccessContext {
            access: AccessKind::Execute,
            is_fetch: true,
            ..AccessContext::data(device, subsystem, AccessKind::Execute)
        }
    }

    pub fn in_regime(self, regime: Regime) -> AccessContext {
        AccessContext { regime, ..self }
    }

    pub fn dma(self) -> AccessContext {
        AccessContext { cpu: false, ..self }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Error)]
pub enum Fault {
    #[error("malformed token")]
    Malformed,
    #[error("invalid token")]
    InvalidToken,
    #[error("invalid parent")]
    InvalidParent,
    #[error("restriction violation")]
    RestrictionViolation,
    #[error("locked")]
    Locked,
    #[error("permission denied")]
    PermissionDenied,
    #[error("out of bounds")]
    OutOfBounds,
    #[error("access overlaps the capability table")]
    CmtOverlap,
    #[error("not accessible in interrupt regime")]
    IrqInaccessible,
    #[error("not an entry point")]
    NotEntryPoint,
}

impl Fault {
    pub fn name(self) -> &'static str {
        match self {
            Fault::Malformed => "Malformed",
            Fault::InvalidToken => "InvalidToken",
            Fault::InvalidParent => "InvalidParent",
            Fault::RestrictionViolation => "RestrictionViolation",
            Fault::Locked => "Locked",
            Fault::PermissionDenied => "PermissionDenied",
            Fault::OutOfBounds => "OutOfBounds",
            Fault::CmtOverlap => "CmtOverlap",
            Fault::IrqInaccessible => "IrqInaccessible",
            Fault::NotEntryPoint => "NotEntryPoint",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ResolutionResult {
    pub phys_base: u64,
    pub window_len: u64,
    pub perms: Permissions,
    pub restriction: Restriction,
    pub device_payload: Option<u64>,
    pub chain_depth: usize,
}

/// One entry on a resolution chain together with the effective window of
/// the chain suffix starting at it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChainLink {
    pub entry: CmtEntry,
    pub window_base: u64,
    pub window_len: u64,
    /// Whether resolving through this entry passes the lock gate.
    pub lock_ok: bool,
}

/// Entries from the entered capability (first) to its direct ancestor (last).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Chain {
    pub links: Vec<ChainLink>,
}

impl Chain {
    pub fn entered(&self) -> &ChainLink {
        &self.links[0]
    }

    pub fn direct(&self) -> &CmtEntry {
        &self.links.last().expect("chains are never empty").entry
    }

    pub fn window(&self) -> (u64, u64) {
        (self.links[0].window_base, self.links[0].window_len)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WalkError {
    pub fault: Fault,
    /// Entries read from the table before the walk failed, entered first.
    pub fetched: Vec<CmtEntry>,
}

/// Steps 1 and 2: decode and fetch the entered entry.
pub fn lookup_entered(cmt: &Cmt, t: CapToken) -> Result<(DecodedToken, CmtEntry), Fault> {
    let d = t.decode().map_err(|_| Fault::Malformed)?;
    match cmt.lookup(d.id) {
        Some(e) if e.nonce == d.nonce => Ok((d, e)),
        _ => Err(Fault::InvalidToken),
    }
}

/// Step 3. Set restrictions only gate data accesses here; fetches are
/// handled by the entry-point check.
pub fn restriction_gate(r: Restriction, ctx: &AccessContext) -> Result<(), Fault> {
    match r {
        Restriction::SubsystemIdBound { device, subsystem } => {
            if (device, subsystem) != (ctx.device, ctx.subsystem) {
                return Err(Fault::RestrictionViolation);
            }
        }
        Restriction::SubsystemIdSet { subsystem, .. } => {
            if !ctx.is_fetch && subsystem != ctx.subsystem {
                return Err(Fault::RestrictionViolation);
            }
        }
        Restriction::None | Restriction::DeviceInterpreted(_) => {}
    }
    Ok(())
}

/// Step 5 applied to a chain suffix.
pub fn lock_gate(links: &[ChainLink]) -> Result<(), Fault> {
    let direct = &links.last().expect("chains are never empty").entry;
    let mut through_holder = false;
    for l in links {
        if l.entry.kind == EntryKind::LockHolder {
            if Some(l.entry.id) != direct.locked_by {
                return Err(Fault::InvalidParent);
            }
            through_holder = true;
        }
    }
    if direct.locked_by.is_some() && !through_holder {
        return Err(Fault::Locked);
    }
    Ok(())
}

fn intersect(a: (u64, u64), b: (u64, u64)) -> (u64, u64) {
    let lo = a.0.max(b.0);
    let hi = (a.0 + a.1).min(b.0 + b.1);
    (lo, hi.saturating_sub(lo))
}

/// Step 4: follows parent tokens to the direct entry.
pub fn walk(cmt: &Cmt, entered: CmtEntry) -> Result<Chain, WalkError> {
    let mut fetched = vec![entered];
    let mut cur = entered;
    while let Some(parent) = cur.parent {
        if fetched.len() >= MAX_CHAIN_DEPTH {
            return Err(WalkError { fault: Fault::InvalidParent, fetched });
        }
        let next = parent.decode().ok().and_then(|d| cmt.lookup(d.id).filter(|e| e.nonce == d.nonce));
        match next {
            Some(e) => {
                fetched.push(e);
                cur = e;
            }
            None => return Err(WalkError { fault: Fault::InvalidParent, fetched }),
        }
    }
    if cur.kind != EntryKind::Direct {
        return Err(WalkError { fault: Fault::InvalidParent, fetched });
    }
    Ok(annotate(fetched))
}

/// Builds chain links with suffix windows and lock verdicts from entries
/// ordered entered-first, direct-last.
pub fn annotate(entries: Vec<CmtEntry>) -> Chain {
    let n = entries.len();
    let mut links: Vec<ChainLink> =
        entries.into_iter().map(|entry| ChainLink { entry, window_base: 0, window_len: 0, lock_ok: false }).collect();
    for i in (0..n).rev() {
        let e = links[i].entry;
        let w = if i == n - 1 {
            (e.base, e.length)
        } else {
            let parent = (links[i + 1].window_base, links[i + 1].window_len);
            match e.kind {
                EntryKind::LockHolder => parent,
                _ => intersect(parent, (e.base, e.length)),
            }
        };
        links[i].window_base = w.0;
        links[i].window_len = w.1;
    }
    for i in 0..n {
        links[i].lock_ok = lock_gate(&links[i..]).is_ok();
    }
    Chain { links }
}

/// Steps 1 to 5: what "the caller can resolve" means for operations.
pub fn resolve_chain(cmt: &Cmt, t: CapToken, ctx: &AccessContext) -> Result<(DecodedToken, Chain), Fault> {
    let (d, entered) = lookup_entered(cmt, t)?;
    restriction_gate(entered.restriction, ctx)?;
    let chain = walk(cmt, entered).map_err(|e| e.fault)?;
    lock_gate(&chain.links)?;
    Ok((d, chain))
}

/// Steps 6 and 7 plus the non-empty window requirement.
pub fn access_checks(perms: Permissions, window_len: u64, ctx: &AccessContext) -> Result<(), Fault> {
    if ctx.regime.is_interrupt() && ctx.cpu && !perms.contains(Permissions::I) {
        return Err(Fault::IrqInaccessible);
    }
    if !perms.contains(ctx.access.required()) {
        return Err(Fault::PermissionDenied);
    }
    if window_len == 0 {
        return Err(Fault::OutOfBounds);
    }
    Ok(())
}

pub fn result_for(entered: &CmtEntry, window: (u64, u64), chain_depth: usize) -> ResolutionResult {
    ResolutionResult {
        phys_base: window.0,
        window_len: window.1,
        perms: entered.perms,
        restriction: entered.restriction,
        device_payload: match entered.restriction {
            Restriction::DeviceInterpreted(v) => Some(v),
            _ => None,
        },
        chain_depth,
    }
}

pub fn resolve(cmt: &Cmt, t: CapToken, ctx: &AccessContext) -> Result<ResolutionResult, Fault> {
    let (_, chain) = resolve_chain(cmt, t, ctx)?;
    let entered = chain.entered().entry;
    access_checks(entered.perms, chain.window().1, ctx)?;
    Ok(result_for(&entered, chain.window(), chain.links.len()))
}

/// Physical start of `[offset, offset + len)` inside a resolved window.
pub fn bounds(res: &ResolutionResult, offset: u64, len: u64, reserved: &Range<u64>) -> Result<u64, Fault> {
    let end = offset.checked_add(len).ok_or(Fault::OutOfBounds)?;
    if len == 0 || end > res.window_len {
        return Err(Fault::OutOfBounds);
    }
    let p = res.phys_base + offset;
    if p < reserved.end && reserved.start < p + len {
        return Err(Fault::CmtOverlap);
    }
    Ok(p)
}

pub fn translate(
    cmt: &Cmt,
    t: CapToken,
    ctx: &AccessContext,
    len: u64,
    reserved: &Range<u64>,
) -> Result<Range<u64>, Fault> {
    let res = resolve(cmt, t, ctx)?;
    let p = bounds(&res, t.offset(), len, reserved)?;
    Ok(p..p + len)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FetchKind {
    SubsystemCall(SubsystemId),
    PlainFetch,
}

/// Entry-point rule applied to an already resolved fetch.
pub fn entry_point(res: &ResolutionResult, offset: u64, ctx: &AccessContext) -> Result<FetchKind, Fault> {
    match res.restriction {
        Restriction::SubsystemIdSet { subsystem, .. } if subsystem != ctx.subsystem => {
            if offset != 0 {
                Err(Fault::NotEntryPoint)
            } else {
                Ok(FetchKind::SubsystemCall(subsystem))
            }
        }
        _ => Ok(FetchKind::PlainFetch),
    }
}

pub fn check_entry_point(cmt: &Cmt, t: CapToken, ctx: &AccessContext) -> Result<FetchKind, Fault> {
    let res = resolve(cmt, t, ctx)?;
    entry_point(&res, t.offset(), ctx)
}
