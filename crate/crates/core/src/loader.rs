//! The boot-time loader: relocates subsystem images into restricted
//! capabilities, wires imports to exports, builds per-subsystem pools and
//! finally destroys itself through the trapdoor.
//!
//! The loader runs on the boot CPU as subsystem 0, the only principal that
//! may mint set-subsystem capabilities for other subsystems.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::Deserialize;
use thiserror::Error;

use crate::allocator::{AllocError, Heap};
use crate::cmt::{DeviceId, Permissions, Restriction, SubsystemId};
use crate::machine::{FetchOutcome, Machine, MachineError, INTERRUPT_CAUSES};
use crate::ops::{OpError, OpOutput, OpRequest, Principal};
use crate::resolver::{AccessContext, AccessKind, Regime};
use crate::token::CapToken;

/// Import name of the write-only token for the timer vector slot.
pub const TIMER_SLOT_IMPORT: &str = "__timer_slot";
pub const MAX_POOL: usize = 64;

fn default_ram() -> u64 {
    64 << 20
}

fn default_loader_region() -> u64 {
    64 << 10
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    /// Bytes of general-purpose RAM starting at physical address 0. MMIO
    /// imports must lie above it.
    #[serde(default = "default_ram")]
    pub ram_size: u64,
    #[serde(default = "default_loader_region")]
    pub loader_region: u64,
    /// Heap size; defaults to whatever RAM the images leave.
    #[serde(default)]
    pub heap_size: Option<u64>,
    /// Image whose subsystem owns the heap.
    #[serde(default)]
    pub allocator: Option<String>,
    /// Interrupt cause → exported call symbol.
    #[serde(default)]
    pub vectors: BTreeMap<u32, String>,
    #[serde(default)]
    pub nmi: Vec<u32>,
    #[serde(default)]
    pub irq_enable: bool,
    /// Exported call the trapdoor jumps into.
    #[serde(default)]
    pub start: Option<String>,
    pub images: Vec<ImageSpec>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageSpec {
    pub name: String,
    pub segments: Vec<SegmentSpec>,
    #[serde(default)]
    pub exports: Vec<ExportSpec>,
    #[serde(default)]
    pub imports: Vec<String>,
    #[serde(default)]
    pub fixups: Vec<FixupSpec>,
    #[serde(default)]
    pub init: Option<InitSpec>,
    #[serde(default)]
    pub init_priority: Option<u32>,
    #[serde(default)]
    pub pool: PoolSpec,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SegmentKind {
    Text,
    Data,
    Rodata,
    Bss,
}

impl SegmentKind {
    fn default_perms(self) -> Permissions {
        match self {
            SegmentKind::Text => Permissions::R | Permissions::X,
            SegmentKind::Rodata => Permissions::R,
            SegmentKind::Data | SegmentKind::Bss => Permissions::RW,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentSpec {
    pub name: String,
    pub kind: SegmentKind,
    pub size: u64,
    #[serde(default)]
    pub perms: Option<String>,
    /// Initial contents as hex.
    #[serde(default)]
    pub data: Option<String>,
    /// Initial contents from a raw blob, relative to the manifest.
    #[serde(default)]
    pub file: Option<PathBuf>,
    #[serde(skip)]
    pub bytes: Vec<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExportKind {
    Call,
    Data,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExportSpec {
    pub symbol: String,
    pub segment: String,
    #[serde(default)]
    pub offset: u64,
    pub kind: ExportKind,
    /// Window length; calls default to the rest of the segment.
    #[serde(default)]
    pub len: Option<u64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FixupSpec {
    pub segment: String,
    pub offset: u64,
    pub symbol: String,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitSpec {
    pub segment: String,
    #[serde(default)]
    pub offset: u64,
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoolSpec {
    #[serde(default = "PoolSpec::default_count")]
    pub count: usize,
    #[serde(default = "PoolSpec::default_stack")]
    pub stack_size: u64,
    #[serde(default = "PoolSpec::default_regset")]
    pub regset_size: u64,
}

impl PoolSpec {
    fn default_count() -> usize {
        4
    }
    fn default_stack() -> u64 {
        1024
    }
    fn default_regset() -> u64 {
        256
    }
}

impl Default for PoolSpec {
    fn default() -> Self {
        PoolSpec {
            count: Self::default_count(),
            stack_size: Self::default_stack(),
            regset_size: Self::default_regset(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LoaderError {
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("{image}: import `{symbol}` is not exported by any image")]
    ImportUnresolved { image: String, symbol: String },
    #[error("import cycle among {0:?}")]
    ImportCycle(Vec<String>),
    #[error("{symbol}: MMIO range is not above RAM or outside memory")]
    MmioOutOfRange { symbol: String },
    #[error("out of memory")]
    OutOfMemory,
    #[error("capability table full")]
    TableFull,
    #[error("boot device {0} is not a CPU")]
    NoBootCpu(DeviceId),
    #[error(transparent)]
    Machine(MachineError),
    #[error("heap: {0}")]
    Heap(#[from] AllocError),
}

impl From<MachineError> for LoaderError {
    fn from(e: MachineError) -> Self {
        match e {
            MachineError::Op(OpError::TableFull) => LoaderError::TableFull,
            MachineError::Op(OpError::BadLength) => LoaderError::OutOfMemory,
            e => LoaderError::Machine(e),
        }
    }
}

fn bad(msg: impl Into<String>) -> LoaderError {
    LoaderError::Manifest(msg.into())
}

/// Base and length encoded in an MMIO import name, `...mmio_<base>_<len>`
/// with an optional index before the base.
pub fn parse_mmio(name: &str) -> Option<(u64, u64)> {
    let at = name.rfind("mmio_")?;
    let nums: Vec<&str> = name[at + 5..].split('_').collect();
    if !(2..=3).contains(&nums.len()) {
        return None;
    }
    let base = nums[nums.len() - 2].parse().ok()?;
    let len: u64 = nums[nums.len() - 1].parse().ok()?;
    (len > 0).then_some((base, len))
}

fn parse_hex(s: &str) -> Option<Vec<u8>> {
    let s: String = s.chars().filter(|c| !c.is_whitespace()).collect();
    if !s.len().is_multiple_of(2) {
        return None;
    }
    (0..s.len()).step_by(2).map(|i| u8::from_str_radix(&s[i..i + 2], 16).ok()).collect()
}

impl Manifest {
    /// Parses manifest JSON. Segment blobs named by `file` are read relative
    /// to `dir`.
    pub fn parse(text: &str, dir: Option<&Path>) -> Result<Manifest, LoaderError> {
        let mut m: Manifest = serde_json::from_str(text).map_err(|e| bad(e.to_string()))?;
        m.load_blobs(dir)?;
        m.validate()?;
        Ok(m)
    }

    pub fn from_value(v: serde_json::Value, dir: Option<&Path>) -> Result<Manifest, LoaderError> {
        let mut m: Manifest = serde_json::from_value(v).map_err(|e| bad(e.to_string()))?;
        m.load_blobs(dir)?;
        m.validate()?;
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Manifest, LoaderError> {
        let text = std::fs::read_to_string(path).map_err(|e| bad(format!("{}: {e}", path.display())))?;
        Manifest::parse(&text, path.parent())
    }

    fn load_blobs(&mut self, dir: Option<&Path>) -> Result<(), LoaderError> {
        for img in &mut self.images {
            for seg in &mut img.segments {
                seg.bytes = match (&seg.data, &seg.file) {
                    (Some(_), Some(_)) => return Err(bad(format!("{}.{}: both data and file", img.name, seg.name))),
                    (Some(h), None) => {
                        parse_hex(h).ok_or_else(|| bad(format!("{}.{}: bad hex", img.name, seg.name)))?
                    }
                    (None, Some(f)) => {
                        let p = dir.map_or_else(|| f.clone(), |d| d.join(f));
                        std::fs::read(&p).map_err(|e| bad(format!("{}: {e}", p.display())))?
                    }
                    (None, None) => Vec::new(),
                };
            }
        }
        Ok(())
    }

    fn exports(&self) -> BTreeMap<&str, (usize, &ExportSpec)> {
        let mut out = BTreeMap::new();
        for (i, img) in self.images.iter().enumerate() {
            for e in &img.exports {
                out.insert(e.symbol.as_str(), (i, e));
            }
        }
        out
    }

    pub fn validate(&self) -> Result<(), LoaderError> {
        let mut names = BTreeSet::new();
        let mut symbols = BTreeSet::new();
        for img in &self.images {
            if !names.insert(&img.name) {
                return Err(bad(format!("duplicate image `{}`", img.name)));
            }
            let mut segs = BTreeMap::new();
            for s in &img.segments {
                if s.size == 0 || segs.insert(s.name.as_str(), s).is_some() {
                    return Err(bad(format!("{}.{}: empty or duplicate segment", img.name, s.name)));
                }
                if s.bytes.len() as u64 > s.size {
                    return Err(bad(format!("{}.{}: contents exceed size", img.name, s.name)));
                }
                if s.kind == SegmentKind::Bss && !s.bytes.is_empty() {
                    return Err(bad(format!("{}.{}: bss with contents", img.name, s.name)));
                }
                if let Some(p) = &s.perms {
                    Permissions::parse(p).ok_or_else(|| bad(format!("{}.{}: bad perms `{p}`", img.name, s.name)))?;
                }
            }
            let seg =
                |name: &str| segs.get(name).copied().ok_or_else(|| bad(format!("{}: no segment `{name}`", img.name)));
            for e in &img.exports {
                if !symbols.insert(&e.symbol) {
                    return Err(bad(format!("duplicate export `{}`", e.symbol)));
                }
                let s = seg(&e.segment)?;
                let len = match (e.kind, e.len) {
                    (ExportKind::Data, None) => return Err(bad(format!("data export `{}` needs len", e.symbol))),
                    (_, Some(l)) => l,
                    (ExportKind::Call, None) => s.size.saturating_sub(e.offset),
                };
                if len == 0 || e.offset.checked_add(len).is_none_or(|end| end > s.size) {
                    return Err(bad(format!("export `{}` out of bounds", e.symbol)));
                }
            }
            let mut fixed = BTreeMap::new();
            for f in &img.fixups {
                let s = seg(&f.segment)?;
                if f.offset % 8 != 0 || f.offset + 8 > s.size {
                    return Err(bad(format!("{}: fixup for `{}` misaligned or out of bounds", img.name, f.symbol)));
                }
                *fixed.entry(f.symbol.as_str()).or_insert(0) += 1;
            }
            let imports: BTreeSet<&str> = img.imports.iter().map(String::as_str).collect();
            if imports.len() != img.imports.len() {
                return Err(bad(format!("{}: duplicate import", img.name)));
            }
            for i in &imports {
                if fixed.get(i) != Some(&1) {
                    return Err(bad(format!("{}: import `{i}` needs exactly one fixup", img.name)));
                }
            }
            if let Some(s) = fixed.keys().find(|s| !imports.contains(*s)) {
                return Err(bad(format!("{}: fixup for `{s}` which is not imported", img.name)));
            }
            if let Some(init) = &img.init {
                if init.offset >= seg(&init.segment)?.size {
                    return Err(bad(format!("{}: init offset out of bounds", img.name)));
                }
            }
            if img.pool.count == 0 || img.pool.count > MAX_POOL || img.pool.stack_size == 0 || img.pool.regset_size == 0
            {
                return Err(bad(format!("{}: pool needs 1..={MAX_POOL} non-empty frames", img.name)));
            }
        }
        let exports = self.exports();
        let is_call = |s: &str| exports.get(s).is_some_and(|(_, e)| e.kind == ExportKind::Call);
        for (cause, sym) in &self.vectors {
            if *cause >= INTERRUPT_CAUSES || !is_call(sym) {
                return Err(bad(format!("vector {cause}: `{sym}` is not an exported call")));
            }
        }
        if let Some(&c) = self.nmi.iter().find(|&&c| c >= INTERRUPT_CAUSES) {
            return Err(bad(format!("nmi cause {c} out of range")));
        }
        if let Some(s) = &self.start {
            if !is_call(s) {
                return Err(bad(format!("start `{s}` is not an exported call")));
            }
        }
        if let Some(a) = &self.allocator {
            if !names.contains(a) {
                return Err(bad(format!("allocator `{a}` is not an image")));
            }
        }
        Ok(())
    }

    /// Images ordered so every exporter precedes its importers; ties keep
    /// manifest order.
    pub fn load_order(&self) -> Result<Vec<usize>, LoaderError> {
        let exports = self.exports();
        let n = self.images.len();
        let mut deps: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); n];
        for (i, img) in self.images.iter().enumerate() {
            for sym in &img.imports {
                match exports.get(sym.as_str()) {
                    Some(&(j, _)) if j != i => {
                        deps[i].insert(j);
                    }
                    Some(_) => {}
                    None if sym == TIMER_SLOT_IMPORT || parse_mmio(sym).is_some() => {}
                    None => return Err(LoaderError::ImportUnresolved { image: img.name.clone(), symbol: sym.clone() }),
                }
            }
        }
        let mut order = Vec::with_capacity(n);
        let mut placed = vec![false; n];
        while order.len() < n {
            let next = (0..n).find(|&i| !placed[i] && deps[i].iter().all(|&d| placed[d]));
            match next {
                Some(i) => {
                    placed[i] = true;
                    order.push(i);
                }
                None => {
                    let stuck = (0..n).filter(|&i| !placed[i]).map(|i| self.images[i].name.clone()).collect();
                    return Err(LoaderError::ImportCycle(stuck));
                }
            }
        }
        Ok(order)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum PoolError {
    #[error("pool exhausted")]
    PoolExhausted,
    #[error("pool still exhausted after {0} spins")]
    SpinLimit(u32),
    #[error("index {0} released twice or out of range")]
    DoubleRelease(usize),
}

/// Per-subsystem stack frames and register-set buffers with an occupancy
/// bitmap. Claims take the lowest free index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StackPool {
    pub frames: Vec<CapToken>,
    pub regsets: Vec<CapToken>,
    bitmap: u64,
    spin_limit: Option<u32>,
}

impl StackPool {
    pub fn new(frames: Vec<CapToken>, regsets: Vec<CapToken>) -> StackPool {
        assert!(frames.len() == regsets.len() && frames.len() <= MAX_POOL);
        StackPool { frames, regsets, bitmap: 0, spin_limit: None }
    }

    pub fn with_spin_limit(mut self, limit: Option<u32>) -> StackPool {
        self.spin_limit = limit;
        self
    }

    pub fn set_spin_limit(&mut self, limit: Option<u32>) {
        self.spin_limit = limit;
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn in_use(&self) -> u32 {
        self.bitmap.count_ones()
    }

    pub fn claim(&mut self) -> Result<usize, PoolError> {
        let i = self.bitmap.trailing_ones() as usize;
        if i >= self.frames.len() {
            // nobody else runs while we spin, so the pool never drains
            return Err(match self.spin_limit {
                Some(n) => PoolError::SpinLimit(n),
                None => PoolError::PoolExhausted,
            });
        }
        self.bitmap |= 1 << i;
        Ok(i)
    }

    pub fn release(&mut self, i: usize) -> Result<(), PoolError> {
        if i >= self.frames.len() || self.bitmap >> i & 1 == 0 {
            return Err(PoolError::DoubleRelease(i));
        }
        self.bitmap &= !(1 << i);
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LoadedSubsystem {
    pub name: String,
    pub id: SubsystemId,
    pub device: DeviceId,
    /// Segment capabilities, bound to this subsystem.
    pub segments: BTreeMap<String, CapToken>,
    /// Tokens written into this image's fixup slots, by import symbol.
    pub imports: BTreeMap<String, CapToken>,
    pub init: Option<CapToken>,
    pub pool: StackPool,
}

impl LoadedSubsystem {
    pub fn principal(&self) -> Principal {
        Principal::cpu(self.device, self.id)
    }
}

#[derive(Debug, Clone)]
pub struct System {
    pub boot_cpu: DeviceId,
    pub subsystems: Vec<LoadedSubsystem>,
    pub symbols: BTreeMap<String, CapToken>,
    /// Tokens that were usable by subsystem 0 during boot.
    pub loader_tokens: Vec<CapToken>,
    /// Every capability delegated to a subsystem as private, with its owner.
    pub private: Vec<(SubsystemId, CapToken)>,
    pub heap: Option<CapToken>,
    pub heap_owner: Option<SubsystemId>,
    pub root: CapToken,
    loader_region: CapToken,
    ram_rest: Option<CapToken>,
    views: Vec<CapToken>,
    start: Option<CapToken>,
    trapped: bool,
    /// Directs over the loader's memory after the trapdoor revoked it.
    pub freed: Vec<CapToken>,
}

struct Boot<'m> {
    m: &'m mut Machine,
    cpu: DeviceId,
    ram: Option<CapToken>,
    sys: System,
}

const CT: Permissions = Permissions::CT;

impl Boot<'_> {
    fn op(&mut self, req: OpRequest) -> Result<OpOutput, LoaderError> {
        Ok(self.m.op(self.cpu, req)?)
    }

    fn mint(&mut self, req: OpRequest) -> Result<CapToken, LoaderError> {
        Ok(self.op(req)?.token().expect("minting operation"))
    }

    /// Carves `len` bytes off the low end of RAM.
    fn carve(&mut self, len: u64, r: Restriction, p: Permissions) -> Result<CapToken, LoaderError> {
        let ram = self.ram.ok_or(LoaderError::OutOfMemory)?;
        match self.op(OpRequest::create(ram, len, r, p))? {
            OpOutput::Split { remainder, slice } => {
                self.ram = remainder;
                Ok(slice)
            }
            other => unreachable!("create returned {other}"),
        }
    }

    fn bound(&self, sub: SubsystemId) -> Restriction {
        Restriction::SubsystemIdBound { device: self.cpu, subsystem: sub }
    }

    fn set(&self, sub: SubsystemId) -> Restriction {
        Restriction::SubsystemIdSet { device: self.cpu, subsystem: sub }
    }

    fn write(&mut self, t: CapToken, off: u64, data: &[u8]) -> Result<(), LoaderError> {
        if !data.is_empty() {
            self.m.mem_write(self.cpu, t.with_offset(off).expect("offset within segment"), data)?;
        }
        Ok(())
    }

    fn delegate(&mut self, owner: SubsystemId, name: String, t: CapToken) {
        self.sys.private.push((owner, t));
        self.sys.symbols.insert(name, t);
    }
}

/// Entry-token permissions: what a caller needs to run the code.
fn entry_perms(seg: Permissions) -> Permissions {
    seg.intersect(Permissions::R | Permissions::X | Permissions::I) | CT
}

/// Boots `manifest` on `boot_cpu`, which must be a CPU still running as
/// subsystem 0 with the root capability untouched.
pub fn boot(m: &mut Machine, boot_cpu: DeviceId, manifest: &Manifest) -> Result<System, LoaderError> {
    boot_with(m, boot_cpu, manifest, None)
}

pub fn boot_with(
    m: &mut Machine,
    boot_cpu: DeviceId,
    manifest: &Manifest,
    spin_limit: Option<u32>,
) -> Result<System, LoaderError> {
    manifest.validate()?;
    let order = manifest.load_order()?;
    match m.device(boot_cpu) {
        Ok(d) if d.principal().cpu && d.subsystem() == 0 => {}
        _ => return Err(LoaderError::NoBootCpu(boot_cpu)),
    }
    let root = CapToken::ROOT;
    let mut b = Boot {
        m,
        cpu: boot_cpu,
        ram: None,
        sys: System {
            boot_cpu,
            subsystems: Vec::new(),
            symbols: BTreeMap::new(),
            loader_tokens: vec![root],
            private: Vec::new(),
            heap: None,
            heap_owner: None,
            root,
            loader_region: root,
            ram_rest: None,
            views: Vec::new(),
            start: None,
            trapped: false,
            freed: Vec::new(),
        },
    };
    b.sys.symbols.insert("root".into(), root);

    // keep the root usable only by the loader
    let r0 = b.bound(0);
    b.op(OpRequest::restrict(root, r0, Permissions::ALL, 0, 0))?;
    if manifest.ram_size == 0 || manifest.ram_size >= b.m.vector_region().start {
        return Err(bad("ram_size must leave the vector table and capability table above it"));
    }
    let ram = match b.op(OpRequest::create(root, manifest.ram_size, Restriction::None, Permissions::ALL))? {
        OpOutput::Split { slice, .. } => slice,
        other => unreachable!("create returned {other}"),
    };
    b.ram = Some(ram);
    b.sys.loader_tokens.push(ram);

    let loader_region = b.carve(manifest.loader_region, Restriction::None, Permissions::ALL)?;
    b.sys.loader_region = loader_region;
    b.sys.loader_tokens.push(loader_region);
    let set0 = b.set(0);
    let loader_entry = b.mint(OpRequest::derive(
        loader_region,
        manifest.loader_region,
        0,
        set0,
        Permissions::R | Permissions::X | CT,
    ))?;
    b.sys.loader_tokens.push(loader_entry);
    b.sys.symbols.insert("loader.region".into(), loader_region);
    b.sys.symbols.insert("loader.entry".into(), loader_entry);
    b.m.fetch(boot_cpu, loader_entry, false)?;

    let heap_owner = manifest
        .allocator
        .as_ref()
        .map(|a| order.iter().position(|&i| &manifest.images[i].name == a).unwrap() as SubsystemId + 1);
    b.sys.heap_owner = heap_owner;
    let heap_r = heap_owner.map_or(Restriction::None, |s| b.bound(s));
    let heap_p = Permissions::RW | Permissions::L | CT;
    if let Some(size) = manifest.heap_size {
        let h = b.carve(size, heap_r, heap_p)?;
        b.sys.heap = Some(h);
    }

    let exports = manifest.exports();
    // loader-side unrestricted view of each loaded segment, for deriving exports
    let mut views: BTreeMap<(usize, &str), (CapToken, Permissions)> = BTreeMap::new();
    let mut entries: BTreeMap<&str, CapToken> = BTreeMap::new();

    for (pos, &idx) in order.iter().enumerate() {
        let img = &manifest.images[idx];
        let id = pos as SubsystemId + 1;
        let bound = b.bound(id);

        let mut segs = BTreeMap::new();
        for s in &img.segments {
            let declared = s.perms.as_deref().map_or(s.kind.default_perms(), |p| Permissions::parse(p).unwrap());
            let seg = b.carve(s.size, Restriction::None, declared | Permissions::RW | CT)?;
            let view = b.mint(OpRequest::clone_cap(seg, Restriction::None, declared | Permissions::RW | CT))?;
            b.sys.views.push(view);
            b.sys.loader_tokens.push(view);
            b.write(view, 0, &s.bytes)?;
            segs.insert(s.name.as_str(), (seg, declared));
            views.insert((idx, s.name.as_str()), (view, declared));
        }

        for e in img.exports.iter().filter(|e| e.kind == ExportKind::Call) {
            let (view, declared) = views[&(idx, e.segment.as_str())];
            let size = img.segments.iter().find(|s| s.name == e.segment).unwrap().size;
            let len = e.len.unwrap_or(size - e.offset);
            let set = b.set(id);
            let t = b.mint(OpRequest::derive(view, len, e.offset, set, entry_perms(declared)))?;
            entries.insert(e.symbol.as_str(), t);
            b.sys.symbols.insert(e.symbol.clone(), t);
        }

        let mut imports = BTreeMap::new();
        for f in &img.fixups {
            let t = if let Some(&t) = entries.get(f.symbol.as_str()) {
                t
            } else if let Some(&(j, e)) = exports.get(f.symbol.as_str()) {
                let (view, declared) = views[&(j, e.segment.as_str())];
                let p = declared.intersect(Permissions::RW) | CT;
                let t = b.mint(OpRequest::derive(view, e.len.unwrap(), e.offset, bound, p))?;
                b.sys.private.push((id, t));
                t
            } else if f.symbol == TIMER_SLOT_IMPORT {
                let slot = b.m.vector_region().start + 8 * b.m.config().timer_cause as u64;
                let t = b.mint(OpRequest::derive(root, 8, slot - manifest.ram_size, bound, Permissions::W))?;
                b.sys.private.push((id, t));
                t
            } else {
                let (base, len) = parse_mmio(&f.symbol).unwrap();
                let end = base.checked_add(len).filter(|&e| e <= b.m.vector_region().start);
                if base < manifest.ram_size || end.is_none() {
                    return Err(LoaderError::MmioOutOfRange { symbol: f.symbol.clone() });
                }
                let t = b.mint(OpRequest::derive(root, len, base - manifest.ram_size, bound, Permissions::RW))?;
                b.sys.private.push((id, t));
                t
            };
            let (view, _) = views[&(idx, f.segment.as_str())];
            b.write(view, f.offset, &t.raw().to_le_bytes())?;
            imports.insert(f.symbol.clone(), t);
            b.sys.symbols.insert(format!("{}.import.{}", img.name, f.symbol), t);
        }

        let init = match &img.init {
            Some(i) => {
                let (view, declared) = views[&(idx, i.segment.as_str())];
                let size = img.segments.iter().find(|s| s.name == i.segment).unwrap().size;
                let set = b.set(id);
                let t = b.mint(OpRequest::derive(view, size - i.offset, i.offset, set, entry_perms(declared)))?;
                b.sys.symbols.insert(format!("{}.init", img.name), t);
                Some(t)
            }
            None => None,
        };

        let n = img.pool.count as u64;
        let mut pool_caps = [Vec::new(), Vec::new()];
        for (k, each) in [img.pool.stack_size, img.pool.regset_size].into_iter().enumerate() {
            let whole = b.carve(n * each, Restriction::None, Permissions::RW | CT)?;
            for i in 0..n {
                let t = b.mint(OpRequest::derive(whole, each, i * each, bound, Permissions::RW | CT))?;
                let kind = if k == 0 { "stack" } else { "regs" };
                b.delegate(id, format!("{}.{kind}{i}", img.name), t);
                pool_caps[k].push(t);
            }
            b.op(OpRequest::restrict(whole, bound, Permissions::RW | CT, 0, 0))?;
            b.sys.private.push((id, whole));
        }
        let [frames, regsets] = pool_caps;

        for (name, &(seg, declared)) in &segs {
            b.op(OpRequest::restrict(seg, bound, declared | CT, 0, 0))?;
            b.delegate(id, format!("{}.{name}", img.name), seg);
        }

        b.sys.subsystems.push(LoadedSubsystem {
            name: img.name.clone(),
            id,
            device: boot_cpu,
            segments: segs.iter().map(|(k, v)| (k.to_string(), v.0)).collect(),
            imports,
            init,
            pool: StackPool::new(frames, regsets).with_spin_limit(spin_limit),
        });
    }

    if b.sys.heap.is_none() {
        if let Some(ram) = b.ram {
            let len = b.m.cmt().peek(ram.decode().unwrap().id).map_or(0, |e| e.length);
            let h = b.carve(len, heap_r, heap_p)?;
            b.sys.heap = Some(h);
        }
    }
    if let Some(h) = b.sys.heap {
        b.sys.symbols.insert("heap".into(), h);
    }
    b.sys.ram_rest = b.ram;

    // interrupt wiring; vector slots are written through the root
    let vbase = b.m.vector_region().start;
    for (&cause, sym) in &manifest.vectors {
        let t = entries[sym.as_str()];
        b.write(root, vbase + 8 * cause as u64 - manifest.ram_size, &t.raw().to_le_bytes())?;
    }
    b.m.set_vector_base(boot_cpu, vbase)?;
    for &c in &manifest.nmi {
        b.m.set_nmi(boot_cpu, c)?;
    }

    // initialisation calls, lowest priority value first
    let mut inits: Vec<(u32, usize)> = order
        .iter()
        .enumerate()
        .filter(|(_, &i)| manifest.images[i].init.is_some())
        .map(|(pos, &i)| (manifest.images[i].init_priority.unwrap_or(u32::MAX), pos))
        .collect();
    inits.sort();
    for (_, pos) in inits {
        let entry = b.sys.subsystems[pos].init.unwrap();
        b.m.fetch(boot_cpu, entry, true)?;
        b.m.fetch(boot_cpu, loader_entry, true)?;
    }

    if manifest.irq_enable {
        b.m.set_irq_enable(boot_cpu, true)?;
    }
    b.sys.start = manifest.start.as_ref().map(|s| entries[s.as_str()]);
    Ok(b.sys)
}

impl System {
    pub fn subsystem(&self, name: &str) -> Option<&LoadedSubsystem> {
        self.subsystems.iter().find(|s| s.name == name)
    }

    pub fn subsystem_mut(&mut self, name: &str) -> Option<&mut LoadedSubsystem> {
        self.subsystems.iter_mut().find(|s| s.name == name)
    }

    pub fn is_trapped(&self) -> bool {
        self.trapped
    }

    /// `name token` lines, sorted by name.
    pub fn symbol_map(&self) -> String {
        self.symbols.iter().map(|(k, v)| format!("{k} {v}\n")).collect()
    }

    /// Destroys the loader: its region is revoked (zeroed) and handed to
    /// the heap, every loader-side view loses all permissions and so does
    /// the root. Calling it again does nothing.
    pub fn trapdoor(&mut self, m: &mut Machine, heap: Option<&mut Heap>) -> Result<(), LoaderError> {
        if self.trapped {
            return Ok(());
        }
        let cpu = self.boot_cpu;
        let heap_r =
            self.heap_owner.map_or(Restriction::None, |s| Restriction::SubsystemIdBound { device: cpu, subsystem: s });
        let heap_p = Permissions::RW | Permissions::L | CT;
        let mut freed = Vec::new();
        for t in [Some(self.loader_region), self.ram_rest].into_iter().flatten() {
            let fresh = m.op(cpu, OpRequest::revoke(t, heap_r, heap_p))?.token().unwrap();
            freed.push(fresh);
        }
        for &v in &self.views {
            m.op(cpu, OpRequest::restrict(v, Restriction::None, Permissions::NONE, 0, 0))?;
        }
        m.op(cpu, OpRequest::restrict(self.root, Restriction::None, Permissions::NONE, 0, 0))?;
        if let Some(h) = heap {
            for &t in &freed {
                h.donate(m, t)?;
            }
        }
        self.freed = freed;
        self.trapped = true;
        if let Some(start) = self.start {
            m.fetch(cpu, start, true)?;
        }
        Ok(())
    }

    /// Replays every recorded loader token for read, write, fetch and derive
    /// under subsystem 0 and every loaded subsystem; returns the successes.
    pub fn replay_loader_tokens(&self, m: &mut Machine) -> Vec<(CapToken, String)> {
        let mut hits = Vec::new();
        let mut subs: Vec<SubsystemId> = vec![0];
        subs.extend(self.subsystems.iter().map(|s| s.id));
        for &t in &self.loader_tokens {
            for &s in &subs {
                for access in [AccessKind::Read, AccessKind::Write, AccessKind::Execute] {
                    let ctx = AccessContext {
                        device: self.boot_cpu,
                        subsystem: s,
                        regime: Regime::Normal,
                        access,
                        is_fetch: access == AccessKind::Execute,
                        cpu: true,
                    };
                    if m.resolve_uncached(t, &ctx).is_ok() {
                        hits.push((t, format!("{access:?} as s{s}")));
                    }
                }
                let who = Principal::cpu(self.boot_cpu, s);
                let probe = OpRequest::clone_cap(t, Restriction::None, Permissions::R);
                if let Ok(out) = m.op_as(&who, probe) {
                    hits.push((t, format!("clone as s{s}")));
                    if let Some(c) = out.token() {
                        let _ = m.op_as(&who, OpRequest::drop_cap(c));
                    }
                }
            }
        }
        hits
    }

    /// Tries every private capability from every other subsystem; returns
    /// the (owner, intruder, token) triples that resolved.
    pub fn cross_access(&self, m: &Machine) -> Vec<(SubsystemId, SubsystemId, CapToken)> {
        let mut hits = Vec::new();
        let mut subs: Vec<SubsystemId> = vec![0];
        subs.extend(self.subsystems.iter().map(|s| s.id));
        for &(owner, t) in &self.private {
            for &s in subs.iter().filter(|&&s| s != owner) {
                for access in [AccessKind::Read, AccessKind::Write, AccessKind::Execute] {
                    let ctx = AccessContext {
                        device: self.boot_cpu,
                        subsystem: s,
                        regime: Regime::Normal,
                        access,
                        is_fetch: access == AccessKind::Execute,
                        cpu: true,
                    };
                    if m.resolve_uncached(t, &ctx).is_ok() {
                        hits.push((owner, s, t));
                    }
                }
            }
        }
        hits
    }
}

/// Calls `entry` from `cpu` as a subsystem call and reports the new id.
pub fn call(m: &mut Machine, cpu: DeviceId, entry: CapToken) -> Result<SubsystemId, LoaderError> {
    match m.fetch(cpu, entry, true)? {
        FetchOutcome::SubsystemCall(s) => Ok(s),
        FetchOutcome::PlainFetch => unreachable!("expect_call refuses plain fetches"),
    }
}
