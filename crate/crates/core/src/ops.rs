//! Capability operations and the dual-bank operations port.

use std::fmt;

use thiserror::Error;

use crate::cmt::{Cmt, CmtEntry, CmtError, DeviceId, EntryKind, Permissions, Restriction, SubsystemId};
use crate::memory::Memory;
use crate::ntlb::Invalidation;
use crate::resolver::{self, AccessContext, AccessKind, Chain, Fault, Regime};
use crate::token::{CapId, CapToken, DecodedToken, OffsetType};

/// Who issues an operation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Principal {
    pub device: DeviceId,
    pub subsystem: SubsystemId,
    pub regime: Regime,
    pub cpu: bool,
}

impl Principal {
    pub fn cpu(device: DeviceId, subsystem: SubsystemId) -> Principal {
        Principal { device, subsystem, regime: Regime::Normal, cpu: true }
    }

    /// Code running as subsystem 0 on a CPU may mint any set-subsystem
    /// restriction.
    pub fn privileged(&self) -> bool {
        self.cpu && self.subsystem == 0
    }

    /// Context used for the caller-resolvability checks of operation inputs.
    pub fn context(&self) -> AccessContext {
        AccessContext {
            device: self.device,
            subsystem: self.subsystem,
            regime: self.regime,
            access: AccessKind::Read,
            is_fetch: false,
            cpu: self.cpu,
        }
    }
}

impl fmt::Display for Principal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "d{}.{}.s{}", self.device, self.regime, self.subsystem)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Opcode {
    Create = 1,
    Merge = 2,
    Derive = 3,
    Clone = 4,
    Lock = 5,
    Drop = 6,
    Revoke = 7,
    Inspect = 8,
    Restrict = 9,
}

impl Opcode {
    pub const ALL: [Opcode; 9] = [
        Opcode::Create,
        Opcode::Merge,
        Opcode::Derive,
        Opcode::Clone,
        Opcode::Lock,
        Opcode::Drop,
        Opcode::Revoke,
        Opcode::Inspect,
        Opcode::Restrict,
    ];

    pub fn from_code(code: u64) -> Option<Opcode> {
        Opcode::ALL.into_iter().find(|o| *o as u64 == code)
    }

    pub fn name(self) -> &'static str {
        match self {
            Opcode::Create => "create",
            Opcode::Merge => "merge",
            Opcode::Derive => "derive",
            Opcode::Clone => "clone",
            Opcode::Lock => "lock",
            Opcode::Drop => "drop",
            Opcode::Revoke => "revoke",
            Opcode::Inspect => "inspect",
            Opcode::Restrict => "restrict",
        }
    }

    pub fn from_name(name: &str) -> Option<Opcode> {
        Opcode::ALL.into_iter().find(|o| o.name() == name)
    }
}

impl fmt::Display for Opcode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OpRequest {
    pub opcode: Opcode,
    pub a: CapToken,
    pub b: CapToken,
    pub len: u64,
    pub offset: u64,
    pub restriction: Restriction,
    pub perms: Permissions,
    pub offset_add: u64,
    pub len_sub: u64,
}

impl OpRequest {
    pub fn new(opcode: Opcode, a: CapToken) -> OpRequest {
        OpRequest {
            opcode,
            a,
            b: CapToken::ROOT,
            len: 0,
            offset: 0,
            restriction: Restriction::None,
            perms: Permissions::NONE,
            offset_add: 0,
            len_sub: 0,
        }
    }

    pub fn create(a: CapToken, len: u64, r: Restriction, p: Permissions) -> OpRequest {
        OpRequest { len, restriction: r, perms: p, ..OpRequest::new(Opcode::Create, a) }
    }

    pub fn merge(a: CapToken, b: CapToken, r: Restriction, p: Permissions) -> OpRequest {
        OpRequest { b, restriction: r, perms: p, ..OpRequest::new(Opcode::Merge, a) }
    }

    pub fn derive(a: CapToken, len: u64, offset: u64, r: Restriction, p: Permissions) -> OpRequest {
        OpRequest { len, offset, restriction: r, perms: p, ..OpRequest::new(Opcode::Derive, a) }
    }

    pub fn clone_cap(a: CapToken, r: Restriction, p: Permissions) -> OpRequest {
        OpRequest { restriction: r, perms: p, ..OpRequest::new(Opcode::Clone, a) }
    }

    pub fn lock(a: CapToken, r: Restriction, p: Permissions) -> OpRequest {
        OpRequest { restriction: r, perms: p, ..OpRequest::new(Opcode::Lock, a) }
    }

    pub fn drop_cap(a: CapToken) -> OpRequest {
        OpRequest::new(Opcode::Drop, a)
    }

    pub fn revoke(a: CapToken, r: Restriction, p: Permissions) -> OpRequest {
        OpRequest { restriction: r, perms: p, ..OpRequest::new(Opcode::Revoke, a) }
    }

    pub fn inspect(a: CapToken) -> OpRequest {
        OpRequest::new(Opcode::Inspect, a)
    }

    pub fn restrict(a: CapToken, r: Restriction, p: Permissions, offset_add: u64, len_sub: u64) -> OpRequest {
        OpRequest { restriction: r, perms: p, offset_add, len_sub, ..OpRequest::new(Opcode::Restrict, a) }
    }
}

/// Metadata returned by `inspect`. Bounds and kind are hidden for
/// entry-point capabilities.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Inspection {
    pub kind: Option<EntryKind>,
    pub base: Option<u64>,
    pub length: Option<u64>,
    pub restriction: Restriction,
    pub perms: Permissions,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpOutput {
    /// `create`: the rebased input (absent when fully consumed) and the new slice.
    Split {
        remainder: Option<CapToken>,
        slice: CapToken,
    },
    Token(CapToken),
    Dropped(bool),
    Restricted(bool),
    Inspected(Inspection),
}

impl OpOutput {
    /// The newly minted token, if the operation produced one.
    pub fn token(&self) -> Option<CapToken> {
        match *self {
            OpOutput::Split { slice, .. } => Some(slice),
            OpOutput::Token(t) => Some(t),
            _ => None,
        }
    }
}

impl fmt::Display for OpOutput {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OpOutput::Split { remainder: Some(r), slice } => write!(f, "split {r} {slice}"),
            OpOutput::Split { remainder: None, slice } => write!(f, "split - {slice}"),
            OpOutput::Token(t) => write!(f, "token {t}"),
            OpOutput::Dropped(b) => write!(f, "dropped {b}"),
            OpOutput::Restricted(b) => write!(f, "restricted {b}"),
            OpOutput::Inspected(i) => {
                write!(f, "inspect")?;
                if let Some(k) = i.kind {
                    write!(f, " {k}")?;
                }
                if let (Some(b), Some(l)) = (i.base, i.length) {
                    write!(f, " {b:#x}+{l:#x}")?;
                }
                write!(f, " {} {}", i.perms, i.restriction)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Error)]
pub enum OpError {
    #[error("{0}")]
    Fault(Fault),
    #[error("input is locked")]
    LockedInput,
    #[error("input is not a direct capability")]
    NotDirect,
    #[error("input has children")]
    HasChildren,
    #[error("bad length")]
    BadLength,
    #[error("permission escalation")]
    PermissionEscalation,
    #[error("restriction forgery")]
    RestrictionForgery,
    #[error("capability table is full")]
    TableFull,
    #[error("inputs are not adjacent")]
    NotAdjacent,
    #[error("bad bounds")]
    BadBounds,
    #[error("not lockable")]
    NotLockable,
    #[error("already locked")]
    AlreadyLocked,
    #[error("direct capabilities cannot be dropped")]
    NotDroppable,
}

impl From<Fault> for OpError {
    fn from(f: Fault) -> OpError {
        OpError::Fault(f)
    }
}

impl From<CmtError> for OpError {
    fn from(e: CmtError) -> OpError {
        match e {
            CmtError::TableFull => OpError::TableFull,
            // operations only touch entries they just validated
            CmtError::NotLive(_) | CmtError::BadGeometry(_) => OpError::Fault(Fault::InvalidToken),
        }
    }
}

impl OpError {
    pub fn name(self) -> &'static str {
        match self {
            OpError::Fault(f) => f.name(),
            OpError::LockedInput => "LockedInput",
            OpError::NotDirect => "NotDirect",
            OpError::HasChildren => "HasChildren",
            OpError::BadLength => "BadLength",
            OpError::PermissionEscalation => "PermissionEscalation",
            OpError::RestrictionForgery => "RestrictionForgery",
            OpError::TableFull => "TableFull",
            OpError::NotAdjacent => "NotAdjacent",
            OpError::BadBounds => "BadBounds",
            OpError::NotLockable => "NotLockable",
            OpError::AlreadyLocked => "AlreadyLocked",
            OpError::NotDroppable => "NotDroppable",
        }
    }

    /// Value reported in the port's STATUS register.
    pub fn status_code(self) -> u64 {
        match self {
            OpError::LockedInput => 0x10,
            OpError::NotDirect => 0x11,
            OpError::HasChildren => 0x12,
            OpError::BadLength => 0x13,
            OpError::PermissionEscalation => 0x14,
            OpError::RestrictionForgery => 0x15,
            OpError::TableFull => 0x16,
            OpError::NotAdjacent => 0x17,
            OpError::BadBounds => 0x18,
            OpError::NotLockable => 0x19,
            OpError::AlreadyLocked => 0x1a,
            OpError::NotDroppable => 0x1b,
            OpError::Fault(f) => 0x20 + f as u64,
        }
    }
}

/// Outcome of one committed (or refused) operation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OpCommit {
    pub output: Result<OpOutput, OpError>,
    /// Ids whose table slots were written or cleared.
    pub touched: Vec<CapId>,
    pub scope: Invalidation,
    /// Table slot reads plus writes performed by the operation.
    pub cmt_accesses: u64,
}

fn mint_input(e: &CmtEntry) -> Result<(), OpError> {
    if e.perms.intersects(Permissions::R | Permissions::W | Permissions::X) {
        Ok(())
    } else {
        Err(Fault::PermissionDenied.into())
    }
}

fn check_set(who: &Principal, r: Restriction) -> Result<(), OpError> {
    match r {
        Restriction::SubsystemIdSet { subsystem, .. } if !who.privileged() && subsystem != who.subsystem => {
            Err(OpError::RestrictionForgery)
        }
        _ => Ok(()),
    }
}

/// New restriction must be at least as strict as the source's.
fn check_rank(who: &Principal, source: Restriction, r: Restriction) -> Result<(), OpError> {
    check_set(who, r)?;
    if !who.privileged() && r.rank() < source.rank() {
        return Err(OpError::RestrictionForgery);
    }
    Ok(())
}

fn offset_type_for(len: u64) -> OffsetType {
    OffsetType::covering(len).unwrap_or(OffsetType::Off32)
}

fn allocate(cmt: &mut Cmt, len: u64, entry: CmtEntry) -> Result<CapToken, OpError> {
    let (id, nonce) = cmt.allocate(offset_type_for(len), entry)?;
    Ok(CapToken::encode(OffsetType::of_id(id).unwrap(), nonce, id, 0).unwrap())
}

fn metadata(cmt: &Cmt, who: &Principal, t: CapToken) -> Result<(DecodedToken, CmtEntry), OpError> {
    let (d, e) = resolver::lookup_entered(cmt, t)?;
    resolver::restriction_gate(e.restriction, &who.context())?;
    Ok((d, e))
}

fn resolvable(cmt: &Cmt, who: &Principal, t: CapToken) -> Result<Chain, OpError> {
    Ok(resolver::resolve_chain(cmt, t, &who.context())?.1)
}

fn bump_refcount(cmt: &mut Cmt, id: CapId, delta: i64) -> Result<(), OpError> {
    let mut e = cmt.lookup(id).ok_or(Fault::InvalidParent)?;
    e.refcount = e.refcount.saturating_add_signed(delta);
    cmt.update(id, e)?;
    Ok(())
}

/// Direct input that `create`, `merge` and `revoke`-style splitting accept.
fn unencumbered_direct(cmt: &Cmt, who: &Principal, t: CapToken) -> Result<CmtEntry, OpError> {
    let (_, e) = metadata(cmt, who, t)?;
    if e.kind != EntryKind::Direct {
        return Err(OpError::NotDirect);
    }
    if e.locked_by.is_some() {
        return Err(OpError::LockedInput);
    }
    if e.refcount > 0 {
        return Err(OpError::HasChildren);
    }
    mint_input(&e)?;
    Ok(e)
}

fn create(cmt: &mut Cmt, who: &Principal, req: &OpRequest) -> Result<(OpOutput, Invalidation), OpError> {
    let e = unencumbered_direct(cmt, who, req.a)?;
    if req.len == 0 || req.len > e.length {
        return Err(OpError::BadLength);
    }
    if !req.perms.is_subset_of(e.perms) {
        return Err(OpError::PermissionEscalation);
    }
    check_rank(who, e.restriction, req.restriction)?;
    let slice = CmtEntry::direct(e.base, req.len, req.perms, req.restriction);
    if req.len == e.length {
        cmt.remove(e.id)?;
        let slice = allocate(cmt, req.len, slice)?;
        return Ok((OpOutput::Split { remainder: None, slice }, Invalidation::Local));
    }
    let slice = allocate(cmt, req.len, slice)?;
    let rest = CmtEntry { base: e.base + req.len, length: e.length - req.len, ..e };
    cmt.update(e.id, rest)?;
    Ok((OpOutput::Split { remainder: Some(e.token()), slice }, Invalidation::Local))
}

fn merge(cmt: &mut Cmt, who: &Principal, req: &OpRequest) -> Result<(OpOutput, Invalidation), OpError> {
    let a = unencumbered_direct(cmt, who, req.a)?;
    let b = unencumbered_direct(cmt, who, req.b)?;
    if a.id == b.id || (a.end() != b.base && b.end() != a.base) {
        return Err(OpError::NotAdjacent);
    }
    check_set(who, req.restriction)?;
    let base = a.base.min(b.base);
    let len = a.length + b.length;
    cmt.remove(a.id)?;
    cmt.remove(b.id)?;
    let m = allocate(cmt, len, CmtEntry::direct(base, len, req.perms, req.restriction))?;
    Ok((OpOutput::Token(m), Invalidation::Local))
}

fn derive(cmt: &mut Cmt, who: &Principal, req: &OpRequest, whole: bool) -> Result<(OpOutput, Invalidation), OpError> {
    let chain = resolvable(cmt, who, req.a)?;
    let e = chain.entered().entry;
    mint_input(&e)?;
    let (wbase, wlen) = chain.window();
    let (len, offset) = if whole { (wlen, 0) } else { (req.len, req.offset) };
    if len == 0 || offset.checked_add(len).is_none_or(|end| end > wlen) {
        return Err(OpError::BadBounds);
    }
    if !req.perms.is_subset_of(e.perms) {
        return Err(OpError::PermissionEscalation);
    }
    check_set(who, req.restriction)?;
    let child = CmtEntry::indirect(e.token(), wbase + offset, len, req.perms, req.restriction);
    let t = allocate(cmt, len, child)?;
    bump_refcount(cmt, e.id, 1)?;
    Ok((OpOutput::Token(t), Invalidation::Local))
}

fn lock(cmt: &mut Cmt, who: &Principal, req: &OpRequest) -> Result<(OpOutput, Invalidation), OpError> {
    let (_, e) = metadata(cmt, who, req.a)?;
    let chain = resolver::walk(cmt, e).map_err(|w| w.fault)?;
    let direct = *chain.direct();
    if direct.locked_by.is_some() {
        return Err(OpError::AlreadyLocked);
    }
    resolver::lock_gate(&chain.links)?;
    if !direct.perms.contains(Permissions::L) {
        return Err(OpError::NotLockable);
    }
    mint_input(&e)?;
    if !req.perms.is_subset_of(e.perms) {
        return Err(OpError::PermissionEscalation);
    }
    check_rank(who, e.restriction, req.restriction)?;
    let holder = allocate(cmt, chain.window().1, CmtEntry::lock_holder(e.token(), req.perms, req.restriction))?;
    let holder_id = holder.decode().unwrap().id;
    bump_refcount(cmt, e.id, 1)?;
    let mut d = cmt.lookup(direct.id).ok_or(Fault::InvalidParent)?;
    d.locked_by = Some(holder_id);
    cmt.update(direct.id, d)?;
    Ok((OpOutput::Token(holder), Invalidation::Global))
}

fn live_parent(cmt: &Cmt, e: &CmtEntry) -> Option<CmtEntry> {
    let d = e.parent?.decode().ok()?;
    cmt.lookup(d.id).filter(|p| p.nonce == d.nonce)
}

fn drop_cap(cmt: &mut Cmt, who: &Principal, req: &OpRequest) -> Result<(OpOutput, Invalidation), OpError> {
    let (_, e) = metadata(cmt, who, req.a)?;
    if e.kind == EntryKind::Direct {
        return Err(OpError::NotDroppable);
    }
    if e.refcount > 0 {
        return Ok((OpOutput::Dropped(false), Invalidation::Local));
    }
    cmt.remove(e.id)?;
    if let Some(p) = live_parent(cmt, &e) {
        bump_refcount(cmt, p.id, -1)?;
    }
    if e.kind != EntryKind::LockHolder {
        return Ok((OpOutput::Dropped(true), Invalidation::Local));
    }
    let mut cur = e;
    for _ in 0..resolver::MAX_CHAIN_DEPTH {
        match live_parent(cmt, &cur) {
            Some(p) if p.kind == EntryKind::Direct => {
                if p.locked_by == Some(e.id) {
                    cmt.update(p.id, CmtEntry { locked_by: None, ..p })?;
                }
                break;
            }
            Some(p) => cur = p,
            None => break,
        }
    }
    Ok((OpOutput::Dropped(true), Invalidation::Global))
}

fn revoke(
    cmt: &mut Cmt,
    mem: &mut Memory,
    who: &Principal,
    req: &OpRequest,
) -> Result<(OpOutput, Invalidation), OpError> {
    let (_, e) = metadata(cmt, who, req.a)?;
    if e.kind != EntryKind::Direct {
        return Err(OpError::NotDirect);
    }
    mint_input(&e)?;
    check_set(who, req.restriction)?;
    let fresh = CmtEntry::direct(e.base, e.length, req.perms, req.restriction);
    let t = match allocate(cmt, e.length, fresh) {
        Ok(t) => {
            cmt.remove(e.id)?;
            t
        }
        Err(OpError::TableFull) => {
            cmt.remove(e.id)?;
            allocate(cmt, e.length, fresh)?
        }
        Err(err) => return Err(err),
    };
    mem.zero(e.base, e.length);
    Ok((OpOutput::Token(t), Invalidation::Global))
}

fn inspect(cmt: &Cmt, who: &Principal, req: &OpRequest) -> Result<(OpOutput, Invalidation), OpError> {
    let (_, e) = resolver::lookup_entered(cmt, req.a)?;
    let partial = Inspection {
        kind: None,
        base: None,
        length: None,
        restriction: e.restriction,
        perms: e.perms.intersect(Permissions::VISIBLE),
    };
    let full = match e.restriction {
        Restriction::SubsystemIdSet { .. } => return Ok((OpOutput::Inspected(partial), Invalidation::Local)),
        Restriction::SubsystemIdBound { device, subsystem } if (device, subsystem) != (who.device, who.subsystem) => {
            return Err(Fault::RestrictionViolation.into())
        }
        _ => {
            let (base, length) = if e.kind == EntryKind::LockHolder {
                resolver::walk(cmt, e).map_err(|w| w.fault)?.window()
            } else {
                (e.base, e.length)
            };
            Inspection {
                kind: Some(e.kind),
                base: Some(base),
                length: Some(length),
                restriction: e.restriction,
                perms: e.perms,
            }
        }
    };
    Ok((OpOutput::Inspected(full), Invalidation::Local))
}

fn restrict(cmt: &mut Cmt, who: &Principal, req: &OpRequest) -> Result<(OpOutput, Invalidation), OpError> {
    let (_, e) = metadata(cmt, who, req.a)?;
    let mut n = e;
    n.perms = e.perms.intersect(req.perms);
    if e.kind != EntryKind::Direct {
        n.perms = n.perms.union(e.perms.intersect(Permissions::L));
    }
    let mut shrunk = false;
    if e.kind == EntryKind::Indirect && (req.offset_add, req.len_sub) != (0, 0) {
        let len = e
            .length
            .checked_sub(req.offset_add)
            .and_then(|l| l.checked_sub(req.len_sub))
            .filter(|&l| l >= 1)
            .ok_or(OpError::BadBounds)?;
        n.base = e.base + req.offset_add;
        n.length = len;
        shrunk = true;
    }
    if e.restriction == Restriction::None && req.restriction != Restriction::None {
        check_set(who, req.restriction)?;
        n.restriction = req.restriction;
    }
    if n == e {
        return Ok((OpOutput::Restricted(false), Invalidation::Local));
    }
    cmt.update(e.id, n)?;
    // children's effective windows shrink with their parent
    let scope = if shrunk && e.refcount > 0 { Invalidation::Global } else { Invalidation::Local };
    Ok((OpOutput::Restricted(true), scope))
}

/// Runs one operation against the table. Refused operations leave the
/// table and memory unchanged.
pub fn execute(cmt: &mut Cmt, mem: &mut Memory, who: &Principal, req: &OpRequest) -> OpCommit {
    cmt.take_journal();
    let before = cmt.slot_reads() + cmt.slot_writes();
    let result = match req.opcode {
        Opcode::Create => create(cmt, who, req),
        Opcode::Merge => merge(cmt, who, req),
        Opcode::Derive => derive(cmt, who, req, false),
        Opcode::Clone => derive(cmt, who, req, true),
        Opcode::Lock => lock(cmt, who, req),
        Opcode::Drop => drop_cap(cmt, who, req),
        Opcode::Revoke => revoke(cmt, mem, who, req),
        Opcode::Inspect => inspect(cmt, who, req),
        Opcode::Restrict => restrict(cmt, who, req),
    };
    let cmt_accesses = cmt.slot_reads() + cmt.slot_writes() - before;
    let touched = cmt.take_journal();
    match result {
        Ok((out, scope)) => OpCommit { output: Ok(out), touched, scope, cmt_accesses },
        Err(e) => {
            debug_assert!(touched.is_empty(), "{} failed after writing the table", req.opcode);
            OpCommit { output: Err(e), touched, scope: Invalidation::Local, cmt_accesses }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Bank {
    Normal,
    Irq,
}

impl Bank {
    pub fn for_regime(r: Regime) -> Bank {
        if r.is_interrupt() {
            Bank::Irq
        } else {
            Bank::Normal
        }
    }
}

/// Port registers. Inputs are written by the bank owner; writing `OPCODE`
/// submits the operation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PortReg {
    InA,
    InB,
    Len,
    Offset,
    RestrKind,
    RestrPayload,
    Perms,
    OffsetAdd,
    LenSub,
    Opcode,
    OutA,
    OutB,
    OutBase,
    OutLen,
    OutRestrKind,
    OutRestrPayload,
    OutPerms,
    OutKind,
    Status,
    Random,
}

impl PortReg {
    pub const ALL: [PortReg; 20] = [
        PortReg::InA,
        PortReg::InB,
        PortReg::Len,
        PortReg::Offset,
        PortReg::RestrKind,
        PortReg::RestrPayload,
        PortReg::Perms,
        PortReg::OffsetAdd,
        PortReg::LenSub,
        PortReg::Opcode,
        PortReg::OutA,
        PortReg::OutB,
        PortReg::OutBase,
        PortReg::OutLen,
        PortReg::OutRestrKind,
        PortReg::OutRestrPayload,
        PortReg::OutPerms,
        PortReg::OutKind,
        PortReg::Status,
        PortReg::Random,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PortReg::InA => "IN_A",
            PortReg::InB => "IN_B",
            PortReg::Len => "LEN",
            PortReg::Offset => "OFFSET",
            PortReg::RestrKind => "RESTR_KIND",
            PortReg::RestrPayload => "RESTR_PAYLOAD",
            PortReg::Perms => "PERMS",
            PortReg::OffsetAdd => "OFFSET_ADD",
            PortReg::LenSub => "LEN_SUB",
            PortReg::Opcode => "OPCODE",
            PortReg::OutA => "OUT_A",
            PortReg::OutB => "OUT_B",
            PortReg::OutBase => "OUT_BASE",
            PortReg::OutLen => "OUT_LEN",
            PortReg::OutRestrKind => "OUT_RESTR_KIND",
            PortReg::OutRestrPayload => "OUT_RESTR_PAYLOAD",
            PortReg::OutPerms => "OUT_PERMS",
            PortReg::OutKind => "OUT_KIND",
            PortReg::Status => "STATUS",
            PortReg::Random => "RANDOM",
        }
    }

    pub fn from_name(name: &str) -> Option<PortReg> {
        PortReg::ALL.into_iter().find(|r| r.name() == name)
    }

    pub fn is_input(self) -> bool {
        (self as usize) <= PortReg::Opcode as usize
    }
}

pub const STATUS_IDLE: u64 = 0;
pub const STATUS_DONE: u64 = 1;
pub const STATUS_PENDING: u64 = 2;
pub const STATUS_BAD_OPCODE: u64 = 0x0f;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Error)]
pub enum PortError {
    #[error("operations port bank is locked by another principal")]
    PortLocked,
    #[error("no transaction open on this bank")]
    NoTransaction,
    #[error("register {0} is read-only")]
    ReadOnly(&'static str),
}

/// Result of reading a port register.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PortResponse {
    Value(u64),
    /// A non-owner read; the hardware answers with zero.
    Zero,
}

impl PortResponse {
    pub fn value(self) -> u64 {
        match self {
            PortResponse::Value(v) => v,
            PortResponse::Zero => 0,
        }
    }
}

#[derive(Debug, Clone, Default)]
struct BankState {
    owner: Option<(DeviceId, SubsystemId)>,
    inputs: [u64; 9],
    status: u64,
    result: Option<OpCommit>,
    deferred: Option<(Principal, OpRequest)>,
}

impl BankState {
    fn request(&self, opcode: Opcode) -> OpRequest {
        let i = &self.inputs;
        OpRequest {
            opcode,
            a: CapToken(i[0]),
            b: CapToken(i[1]),
            len: i[2],
            offset: i[3],
            restriction: Restriction::from_parts(i[4], i[5]).unwrap_or(Restriction::None),
            perms: Permissions::from_bits(i[6] as u8),
            offset_add: i[7],
            len_sub: i[8],
        }
    }

    fn output(&self, reg: PortReg) -> u64 {
        let Some(commit) = &self.result else { return 0 };
        let Ok(out) = commit.output else { return 0 };
        let inspection = match out {
            OpOutput::Inspected(i) => Some(i),
            _ => None,
        };
        match (reg, out) {
            (PortReg::OutA, OpOutput::Split { remainder, .. }) => remainder.map_or(0, |t| t.raw()),
            (PortReg::OutB, OpOutput::Split { slice, .. }) => slice.raw(),
            (PortReg::OutA, OpOutput::Token(t)) => t.raw(),
            (PortReg::OutA, OpOutput::Dropped(b) | OpOutput::Restricted(b)) => b as u64,
            (PortReg::OutBase, _) => inspection.and_then(|i| i.base).unwrap_or(0),
            (PortReg::OutLen, _) => inspection.and_then(|i| i.length).unwrap_or(0),
            (PortReg::OutRestrKind, _) => inspection.map_or(0, |i| i.restriction.kind_code()),
            (PortReg::OutRestrPayload, _) => inspection.map_or(0, |i| i.restriction.payload()),
            (PortReg::OutPerms, _) => inspection.map_or(0, |i| i.perms.bits() as u64),
            (PortReg::OutKind, _) => match inspection.and_then(|i| i.kind) {
                None => 0,
                Some(EntryKind::Direct) => 1,
                Some(EntryKind::Indirect) => 2,
                Some(EntryKind::LockHolder) => 3,
            },
            _ => 0,
        }
    }
}

/// What the machine must do after a port interaction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PortAction {
    None,
    Execute(Principal, OpRequest),
}

/// The two register banks of the operations unit and their lock protocol.
#[derive(Debug, Clone, Default)]
pub struct OpsPort {
    banks: [BankState; 2],
}

impl OpsPort {
    pub fn new() -> OpsPort {
        OpsPort::default()
    }

    fn bank(&self, b: Bank) -> &BankState {
        &self.banks[b as usize]
    }

    fn bank_mut(&mut self, b: Bank) -> &mut BankState {
        &mut self.banks[b as usize]
    }

    pub fn owner(&self, b: Bank) -> Option<(DeviceId, SubsystemId)> {
        self.bank(b).owner
    }

    pub fn begin(&mut self, b: Bank, who: &Principal) -> Result<(), PortError> {
        let bank = self.bank_mut(b);
        match bank.owner {
            Some(o) if o != (who.device, who.subsystem) => Err(PortError::PortLocked),
            _ => {
                bank.owner = Some((who.device, who.subsystem));
                Ok(())
            }
        }
    }

    fn check_owner(&self, b: Bank, who: &Principal) -> Result<(), PortError> {
        match self.bank(b).owner {
            Some(o) if o == (who.device, who.subsystem) => Ok(()),
            Some(_) => Err(PortError::PortLocked),
            None => Err(PortError::NoTransaction),
        }
    }

    /// Writes an input register. Writing `OPCODE` submits; the returned
    /// action tells the caller whether to execute now.
    pub fn write(&mut self, b: Bank, who: &Principal, reg: PortReg, value: u64) -> Result<PortAction, PortError> {
        self.check_owner(b, who)?;
        if !reg.is_input() {
            return Err(PortError::ReadOnly(reg.name()));
        }
        if reg != PortReg::Opcode {
            self.bank_mut(b).inputs[reg as usize] = value;
            return Ok(PortAction::None);
        }
        let Some(opcode) = Opcode::from_code(value) else {
            let bank = self.bank_mut(b);
            bank.result = None;
            bank.status = STATUS_BAD_OPCODE;
            return Ok(PortAction::None);
        };
        let req = self.bank(b).request(opcode);
        Ok(self.submit(b, who, req))
    }

    /// Submits a whole request at once, bypassing the input registers.
    pub fn submit(&mut self, b: Bank, who: &Principal, req: OpRequest) -> PortAction {
        let normal_busy = self.bank(Bank::Normal).owner.is_some();
        let bank = self.bank_mut(b);
        bank.result = None;
        if b == Bank::Irq && req.opcode != Opcode::Inspect && normal_busy {
            bank.status = STATUS_PENDING;
            bank.deferred = Some((*who, req));
            return PortAction::None;
        }
        bank.status = STATUS_PENDING;
        PortAction::Execute(*who, req)
    }

    /// Stores the result of an executed request in the bank that issued it.
    pub fn complete(&mut self, b: Bank, commit: OpCommit) {
        let bank = self.bank_mut(b);
        bank.status = match commit.output {
            Ok(_) => STATUS_DONE,
            Err(e) => e.status_code(),
        };
        bank.result = Some(commit);
    }

    pub fn read(&self, b: Bank, who: &Principal, reg: PortReg) -> PortResponse {
        if self.check_owner(b, who).is_err() {
            return PortResponse::Zero;
        }
        let bank = self.bank(b);
        let v = match reg {
            PortReg::Status => bank.status,
            r if r.is_input() => {
                if r == PortReg::Opcode {
                    0
                } else {
                    bank.inputs[r as usize]
                }
            }
            r => bank.output(r),
        };
        PortResponse::Value(v)
    }

    pub fn result(&self, b: Bank, who: &Principal) -> Option<&OpCommit> {
        self.check_owner(b, who).ok()?;
        self.bank(b).result.as_ref()
    }

    /// Clears the bank's outputs and releases its lock. Releasing the normal
    /// bank lets a deferred interrupt-bank request run.
    pub fn release(&mut self, b: Bank, who: &Principal) -> Result<PortAction, PortError> {
        self.check_owner(b, who)?;
        *self.bank_mut(b) = BankState::default();
        if b == Bank::Irq {
            return Ok(PortAction::None);
        }
        Ok(self.run_deferred())
    }

    /// Deferred interrupt-bank request, if the normal bank is idle.
    pub fn run_deferred(&mut self) -> PortAction {
        if self.bank(Bank::Normal).owner.is_some() {
            return PortAction::None;
        }
        match self.bank_mut(Bank::Irq).deferred.take() {
            Some((who, req)) => PortAction::Execute(who, req),
            None => PortAction::None,
        }
    }

    pub fn is_idle(&self) -> bool {
        self.banks.iter().all(|b| b.owner.is_none())
    }
}
