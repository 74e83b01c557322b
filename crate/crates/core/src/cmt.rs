//! Capability metadata table.
//!
//! A direct-access table of `slot_count` slots. Slots are shared by all four
//! offset types: the global id of a slot is `id_base(type) + slot`, and a
//! lookup only hits when the stored id matches the requested one, so every
//! lookup reads exactly one slot.

use std::cell::Cell;
use std::fmt;

use thiserror::Error;

use crate::token::{CapId, CapToken, OffsetType};

/// Bytes one CMT slot occupies in the reserved physical region.
pub const SLOT_BYTES: u64 = 32;
pub const DEFAULT_SLOT_COUNT: usize = 1 << 13;
pub const DEFAULT_ROW_WIDTH: usize = 64;

#[derive(Clone, Copy, PartialEq, Eq, Hash, Default, PartialOrd, Ord)]
pub struct Permissions(u8);

impl Permissions {
    pub const R: Permissions = Permissions(1 << 0);
    pub const W: Permissions = Permissions(1 << 1);
    pub const X: Permissions = Permissions(1 << 2);
    pub const L: Permissions = Permissions(1 << 3);
    pub const I: Permissions = Permissions(1 << 4);
    pub const CD: Permissions = Permissions(1 << 5);
    pub const CT: Permissions = Permissions(1 << 6);
    pub const NONE: Permissions = Permissions(0);
    pub const ALL: Permissions = Permissions(0x7f);
    pub const RW: Permissions = Permissions(0b11);
    /// The subset `inspect` reveals for entry-point capabilities.
    pub const VISIBLE: Permissions = Permissions(0b1_0111);

    const LETTERS: [(Permissions, &'static str); 7] = [
        (Self::R, "R"),
        (Self::W, "W"),
        (Self::X, "X"),
        (Self::L, "L"),
        (Self::I, "I"),
        (Self::CD, "CD"),
        (Self::CT, "CT"),
    ];

    pub const fn from_bits(bits: u8) -> Permissions {
        Permissions(bits & 0x7f)
    }

    pub const fn bits(self) -> u8 {
        self.0
    }

    pub const fn contains(self, other: Permissions) -> bool {
        self.0 & other.0 == other.0
    }

    pub const fn is_subset_of(self, other: Permissions) -> bool {
        other.contains(self)
    }

    pub const fn intersects(self, other: Permissions) -> bool {
        self.0 & other.0 != 0
    }

    pub const fn union(self, other: Permissions) -> Permissions {
        Permissions(self.0 | other.0)
    }

    pub const fn intersect(self, other: Permissions) -> Permissions {
        Permissions(self.0 & other.0)
    }

    pub const fn without(self, other: Permissions) -> Permissions {
        Permissions(self.0 & !other.0)
    }

    pub const fn is_empty(self) -> bool {
        self.0 == 0
    }

    /// Parses letters such as `"RWX"`, `"R W CT"` or `"-"` for the empty set.
    pub fn parse(s: &str) -> Option<Permissions> {
        let mut rest = s.trim();
        let mut p = Permissions::NONE;
        if rest == "-" {
            return Some(p);
        }
        while !rest.is_empty() {
            rest = rest.trim_start_matches([' ', ',', '|']);
            if rest.is_empty() {
                break;
            }
            // two-letter flags first so "CD" is not read as "C" + "D"
            let (flag, len) = if rest.starts_with("CD") {
                (Self::CD, 2)
            } else if rest.starts_with("CT") {
                (Self::CT, 2)
            } else {
                let f = match rest.as_bytes()[0] {
                    b'R' => Self::R,
                    b'W' => Self::W,
                    b'X' => Self::X,
                    b'L' => Self::L,
                    b'I' => Self::I,
                    _ => return None,
                };
                (f, 1)
            };
            p = p.union(flag);
            rest = &rest[len..];
        }
        Some(p)
    }
}

impl std::ops::BitOr for Permissions {
    type Output = Permissions;
    fn bitor(self, rhs: Permissions) -> Permissions {
        self.union(rhs)
    }
}

impl std::ops::BitAnd for Permissions {
    type Output = Permissions;
    fn bitand(self, rhs: Permissions) -> Permissions {
        self.intersect(rhs)
    }
}

impl fmt::Display for Permissions {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_empty() {
            return f.write_str("-");
        }
        for (flag, name) in Self::LETTERS {
            if self.contains(flag) {
                f.write_str(name)?;
            }
        }
        Ok(())
    }
}

impl fmt::Debug for Permissions {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Permissions({self})")
    }
}

/// Device port number on the interconnect.
pub type DeviceId = u16;
pub type SubsystemId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Restriction {
    #[default]
    None,
    SubsystemIdBound {
        device: DeviceId,
        subsystem: SubsystemId,
    },
    SubsystemIdSet {
        device: DeviceId,
        subsystem: SubsystemId,
    },
    DeviceInterpreted(u64),
}

impl Restriction {
    pub fn kind_code(self) -> u64 {
        match self {
            Restriction::None => 0,
            Restriction::SubsystemIdBound { .. } => 1,
            Restriction::SubsystemIdSet { .. } => 2,
            Restriction::DeviceInterpreted(_) => 3,
        }
    }

    /// 64-bit payload: device in bits 63..48, subsystem in 47..16 for the
    /// subsystem kinds; opaque otherwise.
    pub fn payload(self) -> u64 {
        match self {
            Restriction::None => 0,
            Restriction::SubsystemIdBound { device, subsystem } | Restriction::SubsystemIdSet { device, subsystem } => {
                ((device as u64) << 48) | ((subsystem as u64) << 16)
            }
            Restriction::DeviceInterpreted(v) => v,
        }
    }

    pub fn from_parts(kind: u64, payload: u64) -> Option<Restriction> {
        let device = (payload >> 48) as DeviceId;
        let subsystem = (payload >> 16) as SubsystemId;
        match kind {
            0 => Some(Restriction::None),
            1 => Some(Restriction::SubsystemIdBound { device, subsystem }),
            2 => Some(Restriction::SubsystemIdSet { device, subsystem }),
            3 => Some(Restriction::DeviceInterpreted(payload)),
            _ => None,
        }
    }

    /// Strictness order used when a new capability may only be as strict or
    /// stricter than its source.
    pub fn rank(self) -> u8 {
        match self {
            Restriction::None => 0,
            Restriction::DeviceInterpreted(_) => 1,
            Restriction::SubsystemIdBound { .. } => 2,
            Restriction::SubsystemIdSet { .. } => 3,
        }
    }

    pub fn subsystem(self) -> Option<SubsystemId> {
        match self {
            Restriction::SubsystemIdBound { subsystem, .. } | Restriction::SubsystemIdSet { subsystem, .. } => {
                Some(subsystem)
            }
            _ => None,
        }
    }
}

impl fmt::Display for Restriction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Restriction::None => f.write_str("none"),
            Restriction::SubsystemIdBound { device, subsystem } => write!(f, "bound(d{device},s{subsystem})"),
            Restriction::SubsystemIdSet { device, subsystem } => write!(f, "set(d{device},s{subsystem})"),
            Restriction::DeviceInterpreted(v) => write!(f, "dev({v:#x})"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EntryKind {
    Direct,
    Indirect,
    LockHolder,
}

impl fmt::Display for EntryKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EntryKind::Direct => "direct",
            EntryKind::Indirect => "indirect",
            EntryKind::LockHolder => "lockholder",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CmtEntry {
    pub kind: EntryKind,
    pub nonce: u16,
    pub id: CapId,
    pub base: u64,
    pub length: u64,
    pub perms: Permissions,
    pub restriction: Restriction,
    pub parent: Option<CapToken>,
    pub refcount: u64,
    pub locked_by: Option<CapId>,
}

impl CmtEntry {
    pub fn direct(base: u64, length: u64, perms: Permissions, restriction: Restriction) -> CmtEntry {
        CmtEntry {
            kind: EntryKind::Direct,
            nonce: 0,
            id: 0,
            base,
            length,
            perms,
            restriction,
            parent: None,
            refcount: 0,
            locked_by: None,
        }
    }

    pub fn indirect(
        parent: CapToken,
        base: u64,
        length: u64,
        perms: Permissions,
        restriction: Restriction,
    ) -> CmtEntry {
        CmtEntry {
            kind: EntryKind::Indirect,
            parent: Some(parent),
            ..CmtEntry::direct(base, length, perms, restriction)
        }
    }

    pub fn lock_holder(parent: CapToken, perms: Permissions, restriction: Restriction) -> CmtEntry {
        CmtEntry { kind: EntryKind::LockHolder, parent: Some(parent), ..CmtEntry::direct(0, 0, perms, restriction) }
    }

    pub fn end(&self) -> u64 {
        self.base + self.length
    }

    /// Token naming this entry at offset zero.
    pub fn token(&self) -> CapToken {
        let ot = OffsetType::of_id(self.id).expect("entry id outside every partition");
        CapToken::encode(ot, self.nonce, self.id, 0).expect("entry id and nonce always encode")
    }
}

/// splitmix64 step, used to expand a seed into round keys.
fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

const ROUNDS: usize = 6;

/// A seeded 64-bit block permutation over a monotonic counter.
///
/// Each round is key xor, odd multiply, xorshift and rotate, all of which
/// are bijections on u64, so distinct counters never collide.
#[derive(Debug, Clone)]
pub struct NonceGenerator {
    keys: [u64; ROUNDS],
    counter: u64,
}

impl NonceGenerator {
    pub fn new(seed: u64) -> NonceGenerator {
        let mut state = seed;
        let mut keys = [0u64; ROUNDS];
        for k in &mut keys {
            *k = splitmix64(&mut state);
        }
        NonceGenerator { keys, counter: 0 }
    }

    /// Independent generator whose round keys are derived under `domain`.
    pub fn with_domain(seed: u64, domain: u64) -> NonceGenerator {
        let mut state = domain;
        NonceGenerator::new(seed ^ splitmix64(&mut state))
    }

    pub fn permute(&self, x: u64) -> u64 {
        let mut v = x;
        for (i, k) in self.keys.iter().enumerate() {
            v ^= k;
            v = v.wrapping_mul(0xd6e8_feb8_6659_fd93 | 1);
            v ^= v >> 32;
            v = v.rotate_left(17 + i as u32);
        }
        v
    }

    pub fn counter(&self) -> u64 {
        self.counter
    }

    pub fn next_u64(&mut self) -> u64 {
        let v = self.permute(self.counter);
        self.counter += 1;
        v
    }

    pub fn next_nonce(&mut self) -> u16 {
        self.next_u64() as u16
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum CmtError {
    #[error("capability table is full")]
    TableFull,
    #[error("capability id {0} is not live")]
    NotLive(CapId),
    #[error("invalid table geometry: {0}")]
    BadGeometry(&'static str),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TypeStats {
    pub live: u64,
    pub high_water: u64,
}

/// Snapshot of table counters.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CmtStats {
    pub occupancy: u64,
    pub high_water: u64,
    pub per_type: [TypeStats; 4],
    pub slot_reads: u64,
    pub slot_writes: u64,
    pub row_reads: u64,
}

#[derive(Debug, Clone)]
pub struct Cmt {
    slots: Vec<Option<CmtEntry>>,
    bitmap: Vec<u64>,
    row_width: usize,
    cursors: [usize; 4],
    nonces: NonceGenerator,
    reads: Cell<u64>,
    writes: u64,
    row_reads: u64,
    occupancy: u64,
    high_water: u64,
    per_type: [TypeStats; 4],
    journal: Vec<CapId>,
}

fn type_index(ot: OffsetType) -> usize {
    ot.code() as usize
}

impl Cmt {
    pub fn new(slot_count: usize, row_width: usize, seed: u64) -> Result<Cmt, CmtError> {
        if slot_count == 0 || slot_count > 1 << 14 {
            return Err(CmtError::BadGeometry("slot count must be in 1..=16384"));
        }
        if row_width == 0 || row_width > 64 {
            return Err(CmtError::BadGeometry("row width must be in 1..=64"));
        }
        let rows = slot_count.div_ceil(row_width);
        let mut cursors = [0; 4];
        for ot in OffsetType::ALL {
            cursors[type_index(ot)] = (ot.id_base() as usize % slot_count) / row_width;
        }
        Ok(Cmt {
            slots: vec![None; slot_count],
            bitmap: vec![0; rows],
            row_width,
            cursors,
            nonces: NonceGenerator::new(seed),
            reads: Cell::new(0),
            writes: 0,
            row_reads: 0,
            occupancy: 0,
            high_water: 0,
            per_type: Default::default(),
            journal: Vec::new(),
        })
    }

    /// Clears the table and installs the root capability over
    /// `[0, address_space)` with every permission.
    pub fn reset(&mut self, address_space: u64) {
        let rebuilt = Cmt::new(self.slots.len(), self.row_width, 0).expect("geometry was validated");
        let nonces = self.nonces.clone();
        *self = Cmt { nonces, ..rebuilt };
        let root = CmtEntry::direct(0, address_space, Permissions::ALL, Restriction::None);
        self.place(0, 0, CmtEntry { id: 0, nonce: 0, ..root });
        self.journal.clear();
        self.writes = 0;
    }

    pub fn slot_count(&self) -> usize {
        self.slots.len()
    }

    pub fn row_width(&self) -> usize {
        self.row_width
    }

    pub fn row_count(&self) -> usize {
        self.bitmap.len()
    }

    pub fn region_bytes(&self) -> u64 {
        self.slots.len() as u64 * SLOT_BYTES
    }

    pub fn next_nonce(&mut self) -> u16 {
        self.nonces.next_nonce()
    }

    fn row_mask(&self, row: usize) -> u64 {
        let first = row * self.row_width;
        let width = (self.slots.len() - first).min(self.row_width);
        if width == 64 {
            u64::MAX
        } else {
            (1u64 << width) - 1
        }
    }

    fn slot_of(&self, id: CapId) -> Option<usize> {
        let ot = OffsetType::of_id(id)?;
        let slot = id - ot.id_base();
        (slot < self.slots.len() as u64).then_some(slot as usize)
    }

    fn place(&mut self, slot: usize, id: CapId, entry: CmtEntry) {
        self.slots[slot] = Some(entry);
        self.bitmap[slot / self.row_width] |= 1 << (slot % self.row_width);
        self.writes += 1;
        self.occupancy += 1;
        self.high_water = self.high_water.max(self.occupancy);
        let ts = &mut self.per_type[type_index(OffsetType::of_id(id).unwrap())];
        ts.live += 1;
        ts.high_water = ts.high_water.max(ts.live);
        self.journal.push(id);
    }

    /// Scans bitmap rows from the type's cursor and stores `entry` under a
    /// fresh id and nonce.
    pub fn allocate(&mut self, ot: OffsetType, entry: CmtEntry) -> Result<(CapId, u16), CmtError> {
        let rows = self.row_count();
        let start = self.cursors[type_index(ot)];
        for step in 0..rows {
            let row = (start + step) % rows;
            self.row_reads += 1;
            let free = !self.bitmap[row] & self.row_mask(row);
            if free == 0 {
                continue;
            }
            let slot = row * self.row_width + free.trailing_zeros() as usize;
            let id = ot.id_base() + slot as u64;
            if !ot.contains_id(id) {
                continue;
            }
            self.cursors[type_index(ot)] = row;
            let nonce = self.next_nonce();
            self.place(slot, id, CmtEntry { id, nonce, ..entry });
            return Ok((id, nonce));
        }
        Err(CmtError::TableFull)
    }

    /// One slot read; `None` when the slot is empty or holds another id.
    pub fn lookup(&self, id: CapId) -> Option<CmtEntry> {
        self.reads.set(self.reads.get() + 1);
        self.peek(id)
    }

    /// Uninstrumented read for audits and statistics.
    pub fn peek(&self, id: CapId) -> Option<CmtEntry> {
        let slot = self.slot_of(id)?;
        self.slots[slot].filter(|e| e.id == id)
    }

    pub fn update(&mut self, id: CapId, entry: CmtEntry) -> Result<(), CmtError> {
        let slot = self.slot_of(id).filter(|&s| self.slots[s].is_some_and(|e| e.id == id));
        let slot = slot.ok_or(CmtError::NotLive(id))?;
        self.slots[slot] = Some(CmtEntry { id, ..entry });
        self.writes += 1;
        self.journal.push(id);
        Ok(())
    }

    pub fn remove(&mut self, id: CapId) -> Result<CmtEntry, CmtError> {
        let slot = self.slot_of(id).filter(|&s| self.slots[s].is_some_and(|e| e.id == id));
        let slot = slot.ok_or(CmtError::NotLive(id))?;
        let old = self.slots[slot].take().unwrap();
        let row = slot / self.row_width;
        self.bitmap[row] &= !(1 << (slot % self.row_width));
        for c in &mut self.cursors {
            *c = (*c).min(row);
        }
        self.writes += 1;
        self.occupancy -= 1;
        self.per_type[type_index(OffsetType::of_id(id).unwrap())].live -= 1;
        self.journal.push(id);
        Ok(old)
    }

    pub fn is_live(&self, id: CapId) -> bool {
        self.peek(id).is_some()
    }

    /// Ids written or removed since the last call, in order, deduplicated.
    pub fn take_journal(&mut self) -> Vec<CapId> {
        let mut ids = std::mem::take(&mut self.journal);
        let mut seen = std::collections::BTreeSet::new();
        ids.retain(|id| seen.insert(*id));
        ids
    }

    pub fn slot_reads(&self) -> u64 {
        self.reads.get()
    }

    pub fn slot_writes(&self) -> u64 {
        self.writes
    }

    pub fn row_reads(&self) -> u64 {
        self.row_reads
    }

    pub fn occupancy(&self) -> u64 {
        self.occupancy
    }

    pub fn bitmap_popcount(&self) -> u64 {
        self.bitmap.iter().map(|r| r.count_ones() as u64).sum()
    }

    pub fn stats(&self) -> CmtStats {
        CmtStats {
            occupancy: self.occupancy,
            high_water: self.high_water,
            per_type: self.per_type,
            slot_reads: self.reads.get(),
            slot_writes: self.writes,
            row_reads: self.row_reads,
        }
    }

    /// Live entries in slot order.
    pub fn entries(&self) -> impl Iterator<Item = &CmtEntry> + '_ {
        self.slots.iter().flatten()
    }

    /// Checks structural invariants: bitmap agrees with slots, refcounts
    /// match live children, and live direct ranges are pairwise disjoint.
    pub fn audit(&self) -> Result<(), String> {
        for (slot, e) in self.slots.iter().enumerate() {
            let bit = self.bitmap[slot / self.row_width] >> (slot % self.row_width) & 1 == 1;
            if bit != e.is_some() {
                return Err(format!("bitmap disagrees with slot {slot}"));
            }
        }
        if self.bitmap_popcount() != self.occupancy {
            return Err("occupancy differs from bitmap popcount".into());
        }
        let mut children: std::collections::BTreeMap<CapId, u64> = Default::default();
        for e in self.entries() {
            match (e.kind, e.parent) {
                (EntryKind::Direct, Some(_)) => return Err(format!("direct {} has a parent", e.id)),
                (EntryKind::Indirect | EntryKind::LockHolder, None) => {
                    return Err(format!("{} {} has no parent", e.kind, e.id))
                }
                _ => {}
            }
            if let Some(p) = e.parent {
                if let Ok(d) = p.decode() {
                    if self.peek(d.id).is_some_and(|pe| pe.nonce == d.nonce) {
                        *children.entry(d.id).or_default() += 1;
                    }
                }
            }
        }
        for e in self.entries() {
            let expected = children.get(&e.id).copied().unwrap_or(0);
            if e.refcount != expected {
                return Err(format!("entry {} refcount {} but {} live children", e.id, e.refcount, expected));
            }
        }
        let mut ranges: Vec<(u64, u64)> =
            self.entries().filter(|e| e.kind == EntryKind::Direct).map(|e| (e.base, e.end())).collect();
        ranges.sort_unstable();
        for w in ranges.windows(2) {
            if w[0].1 > w[1].0 {
                return Err(format!("direct ranges {:#x?} and {:#x?} overlap", w[0], w[1]));
            }
        }
        Ok(())
    }
}
