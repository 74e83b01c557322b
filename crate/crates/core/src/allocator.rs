//! Untrusted allocators built purely from capability operations.
//!
//! [`Heap`] is the remote slab allocator: it owns Direct capabilities over
//! free chunks, splits them with `create`, hands out exact-size indirect
//! views and coalesces with `merge` on free. [`LocalArena`] is the small
//! per-subsystem bitmap allocator over one contiguous capability.

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::cmt::{EntryKind, Permissions, Restriction};
use crate::machine::{Machine, MachineError};
use crate::ops::{OpError, OpOutput, OpRequest, Principal};
use crate::token::CapToken;

pub const HEADER_BYTES: u64 = 64;
pub const MIN_CHUNK: u64 = 64;
pub const WORD: u64 = 8;
const ZERO_STRIDE: u64 = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum AllocError {
    #[error("out of memory")]
    OutOfMemory,
    #[error("capability table full")]
    TableFull,
    #[error("allocation size must be at least one byte")]
    BadSize,
    #[error("token is not a live allocation")]
    UnknownToken,
    #[error("allocation still has derived capabilities")]
    FreeWhileShared,
    #[error("heap capability is not direct")]
    NotDirect,
    #[error("request exceeds the arena chunk size")]
    TooLarge,
    #[error("arena full")]
    ArenaFull,
    #[error(transparent)]
    Machine(MachineError),
}

impl From<MachineError> for AllocError {
    fn from(e: MachineError) -> Self {
        match e {
            MachineError::Op(OpError::TableFull) => AllocError::TableFull,
            e => AllocError::Machine(e),
        }
    }
}

impl AllocError {
    pub fn name(&self) -> String {
        match self {
            AllocError::OutOfMemory => "OutOfMemory".into(),
            AllocError::TableFull => "TableFull".into(),
            AllocError::BadSize => "BadSize".into(),
            AllocError::UnknownToken => "UnknownToken".into(),
            AllocError::FreeWhileShared => "FreeWhileShared".into(),
            AllocError::NotDirect => "NotDirect".into(),
            AllocError::TooLarge => "TooLarge".into(),
            AllocError::ArenaFull => "ArenaFull".into(),
            AllocError::Machine(e) => e.kind(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MallocOptions {
    pub lockable: bool,
    pub zeroed: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FreeChunk {
    pub token: CapToken,
    pub base: u64,
    pub len: u64,
}

impl FreeChunk {
    pub fn end(&self) -> u64 {
        self.base + self.len
    }
}

/// Bookkeeping for one live allocation. The header segment precedes the
/// payload physically.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Allocation {
    pub header: CapToken,
    pub payload: CapToken,
    pub handout: CapToken,
    pub base: u64,
    pub payload_len: u64,
    pub size: u64,
}

impl Allocation {
    pub fn payload_base(&self) -> u64 {
        self.base + HEADER_BYTES
    }

    pub fn end(&self) -> u64 {
        self.payload_base() + self.payload_len
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct HeapStats {
    pub free_bytes: u64,
    pub free_chunks: u64,
    pub largest_free: u64,
    pub allocations: u64,
    pub allocated_bytes: u64,
}

#[derive(Debug, Clone)]
pub struct Heap {
    who: Principal,
    perms: Permissions,
    restriction: Restriction,
    total: u64,
    free_by_size: BTreeSet<(u64, u64)>,
    free_by_base: BTreeMap<u64, FreeChunk>,
    allocated: BTreeMap<CapToken, Allocation>,
    by_payload: BTreeMap<CapToken, CapToken>,
}

fn round_up(x: u64, to: u64) -> u64 {
    x.div_ceil(to) * to
}

/// Size of the payload segment backing a request of `size` bytes.
pub fn payload_len_for(size: u64) -> u64 {
    round_up(size, WORD).max(MIN_CHUNK)
}

fn split(out: OpOutput) -> (Option<CapToken>, CapToken) {
    match out {
        OpOutput::Split { remainder, slice } => (remainder, slice),
        other => unreachable!("create returned {other}"),
    }
}

impl Heap {
    /// Takes over `direct` as a single free chunk. All later operations run
    /// as `who`.
    pub fn init(m: &mut Machine, who: Principal, direct: CapToken) -> Result<Heap, AllocError> {
        let info = match m.op_as(&who, OpRequest::inspect(direct))? {
            OpOutput::Inspected(i) => i,
            other => unreachable!("inspect returned {other}"),
        };
        if info.kind != Some(EntryKind::Direct) {
            return Err(AllocError::NotDirect);
        }
        let (base, len) = (info.base.unwrap(), info.length.unwrap());
        let mut h = Heap {
            who,
            perms: info.perms,
            restriction: info.restriction,
            total: len,
            free_by_size: BTreeSet::new(),
            free_by_base: BTreeMap::new(),
            allocated: BTreeMap::new(),
            by_payload: BTreeMap::new(),
        };
        h.insert_free(FreeChunk { token: direct, base, len });
        Ok(h)
    }

    pub fn principal(&self) -> Principal {
        self.who
    }

    pub fn total_bytes(&self) -> u64 {
        self.total
    }

    fn insert_free(&mut self, c: FreeChunk) {
        self.free_by_size.insert((c.len, c.base));
        self.free_by_base.insert(c.base, c);
    }

    fn take_free(&mut self, base: u64) -> FreeChunk {
        let c = self.free_by_base.remove(&base).expect("free chunk indexed by base");
        self.free_by_size.remove(&(c.len, c.base));
        c
    }

    pub fn free_chunks(&self) -> impl Iterator<Item = &FreeChunk> + '_ {
        self.free_by_base.values()
    }

    pub fn allocations(&self) -> impl Iterator<Item = &Allocation> + '_ {
        self.allocated.values()
    }

    pub fn allocation(&self, handout: CapToken) -> Option<&Allocation> {
        self.allocated.get(&handout)
    }

    pub fn stats(&self) -> HeapStats {
        HeapStats {
            free_bytes: self.free_by_base.values().map(|c| c.len).sum(),
            free_chunks: self.free_by_base.len() as u64,
            largest_free: self.free_by_size.last().map_or(0, |&(l, _)| l),
            allocations: self.allocated.len() as u64,
            allocated_bytes: self.allocated.values().map(|a| HEADER_BYTES + a.payload_len).sum(),
        }
    }

    fn create(
        &self,
        m: &mut Machine,
        t: CapToken,
        len: u64,
        p: Permissions,
    ) -> Result<(Option<CapToken>, CapToken), AllocError> {
        let out = m.op_as(&self.who, OpRequest::create(t, len, self.restriction, p))?;
        Ok(split(out))
    }

    fn merge(&self, m: &mut Machine, a: CapToken, b: CapToken) -> Result<CapToken, AllocError> {
        let out = m.op_as(&self.who, OpRequest::merge(a, b, self.restriction, self.perms))?;
        Ok(out.token().unwrap())
    }

    fn zero(&self, m: &mut Machine, t: CapToken, len: u64) -> Result<(), AllocError> {
        let zeros = vec![0u8; ZERO_STRIDE.min(len) as usize];
        let mut off = 0;
        while off < len {
            let n = ZERO_STRIDE.min(len - off);
            m.write_as(&self.who, t.with_offset(off).unwrap(), &zeros[..n as usize])?;
            off += n;
        }
        Ok(())
    }

    /// Best fit over the free chunks, lowest base on ties.
    pub fn malloc(&mut self, m: &mut Machine, size: u64, opts: MallocOptions) -> Result<CapToken, AllocError> {
        if size == 0 {
            return Err(AllocError::BadSize);
        }
        let payload_len = payload_len_for(size);
        let need = HEADER_BYTES + payload_len;
        let Some(&(len, base)) = self.free_by_size.range((need, 0)..).next() else {
            return Err(AllocError::OutOfMemory);
        };
        let chunk = self.take_free(base);
        // a tail too small to hold another allocation stays with this one
        let take = if len - need < HEADER_BYTES + MIN_CHUNK { len } else { need };
        let payload_len = take - HEADER_BYTES;

        let mut payload_perms = Permissions::RW.union(self.perms.intersect(Permissions::CT));
        if opts.lockable {
            payload_perms = payload_perms | Permissions::L;
        }
        let (rest, slice) = match self.create(m, chunk.token, take, payload_perms) {
            Ok(v) => v,
            Err(e) => {
                self.insert_free(chunk);
                return Err(e);
            }
        };
        let carved = self.carve(m, slice, size, payload_perms);
        let (header, payload, handout) = match carved {
            Ok(v) => v,
            Err((e, whole)) => {
                let token = match rest {
                    Some(r) => self.merge(m, whole, r)?,
                    None => whole,
                };
                self.insert_free(FreeChunk { token, ..chunk });
                return Err(e);
            }
        };
        if let Some(r) = rest {
            self.insert_free(FreeChunk { token: r, base: base + take, len: len - take });
        }
        let record = [payload.raw(), handout.raw(), size, payload_len];
        let bytes: Vec<u8> = record.iter().flat_map(|w| w.to_le_bytes()).collect();
        m.write_as(&self.who, header, &bytes)?;
        if opts.zeroed {
            self.zero(m, payload, payload_len)?;
        }
        let a = Allocation { header, payload, handout, base, payload_len, size };
        self.allocated.insert(handout, a);
        self.by_payload.insert(payload, handout);
        Ok(handout)
    }

    /// Splits a fresh slice into header and payload and derives the
    /// handout. On failure returns the error and a token over the whole slice.
    fn carve(
        &self,
        m: &mut Machine,
        slice: CapToken,
        size: u64,
        perms: Permissions,
    ) -> Result<(CapToken, CapToken, CapToken), (AllocError, CapToken)> {
        let (payload, header) = match self.create(m, slice, HEADER_BYTES, Permissions::RW) {
            Ok((Some(p), h)) => (p, h),
            Ok((None, _)) => unreachable!("header is smaller than the slice"),
            Err(e) => return Err((e, slice)),
        };
        match m.op_as(&self.who, OpRequest::derive(payload, size, 0, Restriction::None, perms)) {
            Ok(out) => Ok((header, payload, out.token().unwrap())),
            Err(e) => match self.merge(m, header, payload) {
                Ok(whole) => Err((e.into(), whole)),
                Err(e2) => panic!("allocator rollback failed: {e2}"),
            },
        }
    }

    /// Releases an allocation: drops the handed-out view, zeroes header and
    /// payload, merges them and coalesces with free neighbours.
    pub fn free(&mut self, m: &mut Machine, handout: CapToken) -> Result<(), AllocError> {
        let a = *self.allocated.get(&handout).ok_or(AllocError::UnknownToken)?;
        match m.op_as(&self.who, OpRequest::drop_cap(handout))? {
            OpOutput::Dropped(true) => {}
            _ => return Err(AllocError::FreeWhileShared),
        }
        self.allocated.remove(&handout);
        self.by_payload.remove(&a.payload);
        self.zero(m, a.payload, a.payload_len)?;
        self.zero(m, a.header, HEADER_BYTES)?;
        let chunk = self.merge(m, a.header, a.payload)?;
        self.coalesce(m, FreeChunk { token: chunk, base: a.base, len: HEADER_BYTES + a.payload_len })
    }

    /// Takes an allocation back by its payload Direct regardless of what the
    /// client still holds. Revocation zeroes the payload and orphans every
    /// client capability.
    pub fn reclaim(&mut self, m: &mut Machine, payload: CapToken) -> Result<(), AllocError> {
        let handout = *self.by_payload.get(&payload).ok_or(AllocError::UnknownToken)?;
        let a = self.allocated[&handout];
        let perms = m.cmt().peek(payload.decode().map_err(|_| AllocError::UnknownToken)?.id).map(|e| e.perms);
        let fresh = m
            .op_as(&self.who, OpRequest::revoke(payload, self.restriction, perms.unwrap_or(self.perms)))?
            .token()
            .unwrap();
        self.allocated.remove(&handout);
        self.by_payload.remove(&payload);
        // the handed-out view is now an orphan; reclaim its slot if nothing hangs off it
        let _ = m.op_as(&self.who, OpRequest::drop_cap(handout));
        self.zero(m, a.header, HEADER_BYTES)?;
        let chunk = self.merge(m, a.header, fresh)?;
        self.coalesce(m, FreeChunk { token: chunk, base: a.base, len: HEADER_BYTES + a.payload_len })
    }

    /// Adds a further Direct capability to the heap.
    pub fn donate(&mut self, m: &mut Machine, direct: CapToken) -> Result<(), AllocError> {
        let info = match m.op_as(&self.who, OpRequest::inspect(direct))? {
            OpOutput::Inspected(i) => i,
            other => unreachable!("inspect returned {other}"),
        };
        if info.kind != Some(EntryKind::Direct) {
            return Err(AllocError::NotDirect);
        }
        let len = info.length.unwrap();
        self.total += len;
        self.coalesce(m, FreeChunk { token: direct, base: info.base.unwrap(), len })
    }

    fn coalesce(&mut self, m: &mut Machine, mut c: FreeChunk) -> Result<(), AllocError> {
        if let Some((_, prev)) = self.free_by_base.range(..c.base).next_back() {
            if prev.end() == c.base {
                let prev = self.take_free(prev.base);
                let token = self.merge(m, prev.token, c.token)?;
                c = FreeChunk { token, base: prev.base, len: prev.len + c.len };
            }
        }
        if let Some(next) = self.free_by_base.get(&c.end()).copied() {
            self.take_free(next.base);
            let token = self.merge(m, c.token, next.token)?;
            c = FreeChunk { token, base: c.base, len: c.len + next.len };
        }
        self.insert_free(c);
        Ok(())
    }

    /// Cross-checks both free indexes, byte conservation, disjointness and
    /// the in-segment headers against the table.
    pub fn audit(&self, m: &Machine) -> Result<(), String> {
        if self.free_by_size.len() != self.free_by_base.len()
            || self.free_by_base.values().any(|c| !self.free_by_size.contains(&(c.len, c.base)))
        {
            return Err("free indexes disagree".into());
        }
        let mut spans: Vec<(u64, u64)> = self.free_by_base.values().map(|c| (c.base, c.end())).collect();
        spans.extend(self.allocated.values().map(|a| (a.base, a.end())));
        spans.sort();
        if spans.windows(2).any(|w| w[0].1 > w[1].0) {
            return Err("heap spans overlap".into());
        }
        let s = self.stats();
        if s.free_bytes + s.allocated_bytes != self.total {
            return Err(format!("{} free + {} allocated != {} total", s.free_bytes, s.allocated_bytes, self.total));
        }
        let entry = |t: CapToken| t.decode().ok().and_then(|d| m.cmt().peek(d.id).filter(|e| e.nonce == d.nonce));
        for c in self.free_by_base.values() {
            match entry(c.token) {
                Some(e) if e.kind == EntryKind::Direct && (e.base, e.length) == (c.base, c.len) => {}
                _ => return Err(format!("free chunk at {:#x} does not match its capability", c.base)),
            }
        }
        for a in self.allocated.values() {
            let words: Vec<u64> =
                m.phys_read(a.base, 32).chunks(8).map(|w| u64::from_le_bytes(w.try_into().unwrap())).collect();
            if words != [a.payload.raw(), a.handout.raw(), a.size, a.payload_len] {
                return Err(format!("header at {:#x} disagrees with the private index", a.base));
            }
            match entry(a.payload) {
                Some(e) if (e.base, e.length) == (a.payload_base(), a.payload_len) => {}
                _ => return Err(format!("payload at {:#x} does not match its capability", a.payload_base())),
            }
        }
        Ok(())
    }
}

/// Bitmap allocator over fixed-size chunks of one capability.
#[derive(Debug, Clone)]
pub struct LocalArena {
    who: Principal,
    arena: CapToken,
    base: u64,
    chunk_size: u64,
    chunks: usize,
    bitmap: Vec<u64>,
    perms: Permissions,
}

impl LocalArena {
    pub fn new(m: &mut Machine, who: Principal, arena: CapToken, chunk_size: u64) -> Result<LocalArena, AllocError> {
        if chunk_size == 0 {
            return Err(AllocError::BadSize);
        }
        let info = match m.op_as(&who, OpRequest::inspect(arena))? {
            OpOutput::Inspected(i) => i,
            other => unreachable!("inspect returned {other}"),
        };
        let (base, len) = (info.base.unwrap_or(0), info.length.unwrap_or(0));
        let chunks = (len / chunk_size) as usize;
        Ok(LocalArena {
            who,
            arena,
            base,
            chunk_size,
            chunks,
            bitmap: vec![0; chunks.div_ceil(64)],
            perms: info.perms.without(Permissions::L),
        })
    }

    pub fn chunk_size(&self) -> u64 {
        self.chunk_size
    }

    pub fn chunk_count(&self) -> usize {
        self.chunks
    }

    pub fn used(&self) -> usize {
        self.bitmap.iter().map(|w| w.count_ones() as usize).sum()
    }

    fn first_free(&self) -> Option<usize> {
        self.bitmap
            .iter()
            .enumerate()
            .find(|(_, w)| **w != u64::MAX)
            .map(|(i, w)| i * 64 + w.trailing_ones() as usize)
            .filter(|&i| i < self.chunks)
    }

    pub fn alloc(&mut self, m: &mut Machine, size: u64) -> Result<CapToken, AllocError> {
        if size == 0 {
            return Err(AllocError::BadSize);
        }
        if size > self.chunk_size {
            return Err(AllocError::TooLarge);
        }
        let i = self.first_free().ok_or(AllocError::ArenaFull)?;
        let req = OpRequest::derive(self.arena, size, i as u64 * self.chunk_size, Restriction::None, self.perms);
        let t = m.op_as(&self.who, req)?.token().unwrap();
        self.bitmap[i / 64] |= 1 << (i % 64);
        Ok(t)
    }

    /// Maps `t` back to its chunk through the base `inspect` reports.
    pub fn free(&mut self, m: &mut Machine, t: CapToken) -> Result<(), AllocError> {
        let (base, len) = match m.op_as(&self.who, OpRequest::inspect(t)) {
            Ok(OpOutput::Inspected(i)) => (i.base.ok_or(AllocError::UnknownToken)?, i.length.unwrap_or(0)),
            _ => return Err(AllocError::UnknownToken),
        };
        if len > self.chunk_size {
            return Err(AllocError::UnknownToken);
        }
        let off = base.checked_sub(self.base).ok_or(AllocError::UnknownToken)?;
        let i = (off / self.chunk_size) as usize;
        if off % self.chunk_size != 0 || i >= self.chunks || self.bitmap[i / 64] >> (i % 64) & 1 == 0 {
            return Err(AllocError::UnknownToken);
        }
        match m.op_as(&self.who, OpRequest::drop_cap(t))? {
            OpOutput::Dropped(true) => {}
            _ => return Err(AllocError::FreeWhileShared),
        }
        self.bitmap[i / 64] &= !(1 << (i % 64));
        Ok(())
    }
}
