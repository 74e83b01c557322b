//! The whole system: physical memory, capability table, caches, the
//! operations port, devices and the interrupt-regime state.
//!
//! Every bus transaction goes through the capability checks; faults never
//! move a byte. Events are appended to a line-oriented trace.

use std::collections::BTreeMap;
use std::fmt;
use std::ops::Range;

use thiserror::Error;

use crate::cmt::NonceGenerator;
use crate::cmt::{Cmt, CmtError, DeviceId, SubsystemId, DEFAULT_ROW_WIDTH, DEFAULT_SLOT_COUNT};
use crate::memory::Memory;
use crate::ntlb::{self, CacheStats, ConfigError as NtlbConfigError, InjectedBug, Ntlb, NtlbConfig};
use crate::ops::{
    self, Bank, OpCommit, OpError, OpOutput, OpRequest, Opcode, OpsPort, PortAction, PortError, PortReg, Principal,
};
use crate::resolver::{self, AccessContext, AccessKind, Fault, FetchKind, Regime, ResolutionResult};
use crate::token::CapToken;

pub const INSTRUCTION_BYTES: u64 = 4;
pub const INTERRUPT_CAUSES: u32 = 64;
pub const VECTOR_TABLE_BYTES: u64 = INTERRUPT_CAUSES as u64 * 8;
pub const DEFAULT_TIMER_CAUSE: u32 = 7;
pub const REGISTER_COUNT: usize = 32;
/// Subsystem id an interrupt regime carries before its first vector fetch.
pub const NO_SUBSYSTEM: SubsystemId = u32::MAX;

const TRNG_DOMAIN: u64 = 0x7472_6e67;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MachineConfig {
    pub memory_size: u64,
    pub cmt_slots: usize,
    pub cmt_row_width: usize,
    pub seed: u64,
    pub ntlb: NtlbConfig,
    /// With caching off every access takes the uncached resolver path.
    pub caching: bool,
    pub timer_cause: u32,
    pub trace: bool,
}

impl Default for MachineConfig {
    fn default() -> Self {
        MachineConfig {
            memory_size: 1 << 32,
            cmt_slots: DEFAULT_SLOT_COUNT,
            cmt_row_width: DEFAULT_ROW_WIDTH,
            seed: 0,
            ntlb: NtlbConfig::default(),
            caching: true,
            timer_cause: DEFAULT_TIMER_CAUSE,
            trace: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConfigError {
    #[error(transparent)]
    Cmt(#[from] CmtError),
    #[error(transparent)]
    Ntlb(#[from] NtlbConfigError),
    #[error("memory size {0:#x} must be at most 2^32 and leave room below the capability table")]
    MemorySize(u64),
    #[error("timer cause {0} is not below {INTERRUPT_CAUSES}")]
    TimerCause(u32),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DeviceKind {
    Cpu,
    Dma,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RegisterFile {
    regs: [u64; REGISTER_COUNT],
    uninit_mask: u64,
}

impl RegisterFile {
    pub fn read(&self, idx: usize) -> u64 {
        if self.uninit_mask >> idx & 1 == 1 {
            0
        } else {
            self.regs[idx]
        }
    }

    pub fn write(&mut self, idx: usize, v: u64) {
        self.regs[idx] = v;
        self.uninit_mask &= !(1 << idx);
    }

    pub fn uninit_mask(&self) -> u64 {
        self.uninit_mask
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
struct RegimeState {
    regs: RegisterFile,
    subsystem: SubsystemId,
    pc: Option<CapToken>,
    irq_enable: bool,
    /// Where `mret` returns to when this regime was entered by an interrupt.
    saved_epc: Option<CapToken>,
    saved_from: Option<Regime>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Device {
    pub id: DeviceId,
    pub kind: DeviceKind,
    regime: Regime,
    regimes: [RegimeState; 3],
    nmi_mask: u64,
    vector_base: Option<u64>,
}

impl Device {
    fn new(id: DeviceId, kind: DeviceKind, subsystem: SubsystemId) -> Device {
        let mut regimes: [RegimeState; 3] = Default::default();
        regimes[0].subsystem = subsystem;
        regimes[1].subsystem = NO_SUBSYSTEM;
        regimes[2].subsystem = NO_SUBSYSTEM;
        Device { id, kind, regime: Regime::Normal, regimes, nmi_mask: 0, vector_base: None }
    }

    fn cur(&self) -> &RegimeState {
        &self.regimes[self.regime.index()]
    }

    fn cur_mut(&mut self) -> &mut RegimeState {
        &mut self.regimes[self.regime.index()]
    }

    pub fn regime(&self) -> Regime {
        self.regime
    }

    pub fn subsystem(&self) -> SubsystemId {
        self.cur().subsystem
    }

    pub fn subsystem_in(&self, r: Regime) -> SubsystemId {
        self.regimes[r.index()].subsystem
    }

    pub fn pc(&self) -> Option<CapToken> {
        self.cur().pc
    }

    pub fn registers(&self, r: Regime) -> &RegisterFile {
        &self.regimes[r.index()].regs
    }

    pub fn irq_enabled(&self) -> bool {
        self.regimes[Regime::Normal.index()].irq_enable
    }

    pub fn nmi_mask(&self) -> u64 {
        self.nmi_mask
    }

    pub fn vector_base(&self) -> Option<u64> {
        self.vector_base
    }

    pub fn principal(&self) -> Principal {
        Principal {
            device: self.id,
            subsystem: self.subsystem(),
            regime: self.regime,
            cpu: self.kind == DeviceKind::Cpu,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum MachineError {
    #[error("bus error: {0}")]
    Bus(Fault),
    #[error("operation failed: {0}")]
    Op(OpError),
    #[error(transparent)]
    Port(PortError),
    #[error("interrupt-bank operation deferred until the normal bank is idle")]
    Deferred,
    #[error("unknown device {0}")]
    UnknownDevice(DeviceId),
    #[error("device {0} is not a CPU")]
    NotCpu(DeviceId),
    #[error("machine halted after a vector fault")]
    Halted,
    #[error("vector fetch failed: {0}")]
    VectorFault(Fault),
    #[error("no vector table configured")]
    NoVectorTable,
    #[error("vector base is write-once")]
    VectorBaseLocked,
    #[error("interrupt cause {0} out of range")]
    BadCause(u32),
    #[error("not in an interrupt regime")]
    NotInIrq,
    #[error("saved return address is read-only in an interrupt regime")]
    EpcReadOnly,
    #[error("register x{0} does not exist")]
    BadRegister(usize),
}

impl MachineError {
    /// Short stable name used in traces and assertions.
    pub fn kind(&self) -> String {
        match self {
            MachineError::Bus(f) => f.name().to_string(),
            MachineError::Op(e) => e.name().to_string(),
            MachineError::Port(PortError::PortLocked) => "PortLocked".into(),
            MachineError::Port(PortError::NoTransaction) => "NoTransaction".into(),
            MachineError::Port(PortError::ReadOnly(_)) => "ReadOnly".into(),
            MachineError::Deferred => "Deferred".into(),
            MachineError::UnknownDevice(_) => "UnknownDevice".into(),
            MachineError::NotCpu(_) => "NotCpu".into(),
            MachineError::Halted => "Halted".into(),
            MachineError::VectorFault(_) => "VectorFault".into(),
            MachineError::NoVectorTable => "NoVectorTable".into(),
            MachineError::VectorBaseLocked => "VectorBaseLocked".into(),
            MachineError::BadCause(_) => "BadCause".into(),
            MachineError::NotInIrq => "NotInIrq".into(),
            MachineError::EpcReadOnly => "EpcReadOnly".into(),
            MachineError::BadRegister(_) => "BadRegister".into(),
        }
    }
}

impl From<PortError> for MachineError {
    fn from(e: PortError) -> Self {
        MachineError::Port(e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FetchOutcome {
    SubsystemCall(SubsystemId),
    PlainFetch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InterruptOutcome {
    Taken,
    Masked,
}

/// One trace line: `seq kind principal tokens outcome`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceEvent {
    pub seq: u64,
    pub kind: &'static str,
    pub principal: String,
    pub tokens: Vec<CapToken>,
    pub outcome: String,
}

impl fmt::Display for TraceEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} {} ", self.seq, self.kind, self.principal)?;
        if self.tokens.is_empty() {
            f.write_str("-")?;
        }
        for (i, t) in self.tokens.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{t}")?;
        }
        write!(f, " {}", self.outcome)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MachineStats {
    pub ops: BTreeMap<Opcode, u64>,
    pub op_failures: u64,
    pub reads: u64,
    pub writes: u64,
    pub fetches: u64,
    pub subsystem_calls: u64,
    pub bus_errors: u64,
    pub interrupts_taken: u64,
    pub interrupts_masked: u64,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn data_outcome(bytes: &[u8]) -> String {
    if bytes.len() <= 32 {
        format!("ok:{}", hex(bytes))
    } else {
        format!("ok:{}B", bytes.len())
    }
}

#[derive(Debug, Clone)]
pub struct Machine {
    config: MachineConfig,
    mem: Memory,
    cmt: Cmt,
    ntlb: Ntlb,
    port: OpsPort,
    trng: NonceGenerator,
    devices: Vec<Device>,
    trace: Vec<TraceEvent>,
    seq: u64,
    stats: MachineStats,
    halted: bool,
}

impl Machine {
    pub fn new(config: MachineConfig) -> Result<Machine, ConfigError> {
        let mut cmt = Cmt::new(config.cmt_slots, config.cmt_row_width, config.seed)?;
        let reserved = cmt.region_bytes() + VECTOR_TABLE_BYTES;
        if config.memory_size > 1 << 32 || config.memory_size <= reserved {
            return Err(ConfigError::MemorySize(config.memory_size));
        }
        if config.timer_cause >= INTERRUPT_CAUSES {
            return Err(ConfigError::TimerCause(config.timer_cause));
        }
        cmt.reset(config.memory_size);
        Ok(Machine {
            config,
            mem: Memory::new(config.memory_size),
            cmt,
            ntlb: Ntlb::new(config.ntlb)?,
            port: OpsPort::new(),
            trng: NonceGenerator::with_domain(config.seed, TRNG_DOMAIN),
            devices: Vec::new(),
            trace: Vec::new(),
            seq: 0,
            stats: MachineStats::default(),
            halted: false,
        })
    }

    pub fn config(&self) -> &MachineConfig {
        &self.config
    }

    pub fn cmt(&self) -> &Cmt {
        &self.cmt
    }

    pub fn ntlb(&self) -> &Ntlb {
        &self.ntlb
    }

    pub fn memory(&self) -> &Memory {
        &self.mem
    }

    pub fn stats(&self) -> &MachineStats {
        &self.stats
    }

    pub fn cache_stats(&self) -> CacheStats {
        self.ntlb.stats()
    }

    pub fn set_caching(&mut self, on: bool) {
        self.config.caching = on;
    }

    pub fn inject_cache_bug(&mut self, bug: Option<InjectedBug>) {
        self.ntlb.inject_bug(bug);
    }

    pub fn is_halted(&self) -> bool {
        self.halted
    }

    /// Physical range holding the capability table; bus accesses to it fault.
    pub fn cmt_region(&self) -> Range<u64> {
        self.config.memory_size - self.cmt.region_bytes()..self.config.memory_size
    }

    /// Reserved region for the interrupt vector table, just below the table.
    pub fn vector_region(&self) -> Range<u64> {
        let end = self.cmt_region().start;
        end - VECTOR_TABLE_BYTES..end
    }

    pub fn add_cpu(&mut self) -> DeviceId {
        self.add_device(DeviceKind::Cpu, 0)
    }

    /// CPUs start with the given normal-regime subsystem id.
    pub fn add_device(&mut self, kind: DeviceKind, subsystem: SubsystemId) -> DeviceId {
        let id = self.devices.len() as DeviceId;
        self.devices.push(Device::new(id, kind, subsystem));
        if kind == DeviceKind::Cpu {
            self.ntlb.attach_cpu(id);
        }
        id
    }

    pub fn add_dma(&mut self, subsystem: SubsystemId) -> DeviceId {
        self.add_device(DeviceKind::Dma, subsystem)
    }

    pub fn devices(&self) -> &[Device] {
        &self.devices
    }

    pub fn device(&self, dev: DeviceId) -> Result<&Device, MachineError> {
        self.devices.get(dev as usize).ok_or(MachineError::UnknownDevice(dev))
    }

    fn device_mut(&mut self, dev: DeviceId) -> Result<&mut Device, MachineError> {
        self.devices.get_mut(dev as usize).ok_or(MachineError::UnknownDevice(dev))
    }

    fn cpu_mut(&mut self, dev: DeviceId) -> Result<&mut Device, MachineError> {
        if self.halted {
            return Err(MachineError::Halted);
        }
        let d = self.device_mut(dev)?;
        if d.kind != DeviceKind::Cpu {
            return Err(MachineError::NotCpu(dev));
        }
        Ok(d)
    }

    pub fn trace(&self) -> &[TraceEvent] {
        &self.trace
    }

    pub fn take_trace(&mut self) -> Vec<TraceEvent> {
        std::mem::take(&mut self.trace)
    }

    pub fn trace_text(&self) -> String {
        self.trace.iter().map(|e| format!("{e}\n")).collect()
    }

    fn emit(&mut self, kind: &'static str, principal: String, tokens: Vec<CapToken>, outcome: String) {
        self.seq += 1;
        if self.config.trace {
            self.trace.push(TraceEvent { seq: self.seq, kind, principal, tokens, outcome });
        }
    }

    /// Adds a free-form marker line to the trace.
    pub fn note(&mut self, text: &str) {
        self.emit("note", "-".into(), vec![], text.replace(char::is_whitespace, "_"));
    }

    fn context(&self, who: &Principal, access: AccessKind) -> AccessContext {
        AccessContext {
            device: who.device,
            subsystem: who.subsystem,
            regime: who.regime,
            access,
            is_fetch: access == AccessKind::Execute,
            cpu: who.cpu,
        }
    }

    fn resolve_ctx(&mut self, t: CapToken, ctx: &AccessContext) -> Result<ResolutionResult, Fault> {
        if self.config.caching {
            self.ntlb.resolve(&self.cmt, t, ctx)
        } else {
            resolver::resolve(&self.cmt, t, ctx)
        }
    }

    fn translate_ctx(&mut self, t: CapToken, ctx: &AccessContext, len: u64) -> Result<Range<u64>, Fault> {
        let reserved = self.cmt_region();
        if self.config.caching {
            ntlb::translate(&mut self.ntlb, &self.cmt, t, ctx, len, &reserved)
        } else {
            resolver::translate(&self.cmt, t, ctx, len, &reserved)
        }
    }

    /// Uncached, side-effect-free resolution for inspection by harnesses.
    pub fn resolve_uncached(&self, t: CapToken, ctx: &AccessContext) -> Result<ResolutionResult, Fault> {
        resolver::resolve(&self.cmt, t, ctx)
    }

    pub fn read_as(&mut self, who: &Principal, t: CapToken, len: u64) -> Result<Vec<u8>, MachineError> {
        if self.halted {
            return Err(MachineError::Halted);
        }
        let ctx = self.context(who, AccessKind::Read);
        let res = self.translate_ctx(t, &ctx, len);
        self.stats.reads += 1;
        match res {
            Ok(r) => {
                let data = self.mem.read_vec(r.start, len);
                self.emit("read", who.to_string(), vec![t], data_outcome(&data));
                Ok(data)
            }
            Err(f) => {
                self.stats.bus_errors += 1;
                self.emit("read", who.to_string(), vec![t], format!("fault:{}", f.name()));
                Err(MachineError::Bus(f))
            }
        }
    }

    pub fn write_as(&mut self, who: &Principal, t: CapToken, data: &[u8]) -> Result<(), MachineError> {
        if self.halted {
            return Err(MachineError::Halted);
        }
        let ctx = self.context(who, AccessKind::Write);
        let res = self.translate_ctx(t, &ctx, data.len() as u64);
        self.stats.writes += 1;
        match res {
            Ok(r) => {
                self.mem.write(r.start, data);
                self.emit("write", who.to_string(), vec![t], data_outcome(data));
                Ok(())
            }
            Err(f) => {
                self.stats.bus_errors += 1;
                self.emit("write", who.to_string(), vec![t], format!("fault:{}", f.name()));
                Err(MachineError::Bus(f))
            }
        }
    }

    pub fn read_u64_as(&mut self, who: &Principal, t: CapToken) -> Result<u64, MachineError> {
        let b = self.read_as(who, t, 8)?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }

    pub fn write_u64_as(&mut self, who: &Principal, t: CapToken, v: u64) -> Result<(), MachineError> {
        self.write_as(who, t, &v.to_le_bytes())
    }

    pub fn mem_read(&mut self, dev: DeviceId, t: CapToken, len: u64) -> Result<Vec<u8>, MachineError> {
        let who = self.device(dev)?.principal();
        self.read_as(&who, t, len)
    }

    pub fn mem_write(&mut self, dev: DeviceId, t: CapToken, data: &[u8]) -> Result<(), MachineError> {
        let who = self.device(dev)?.principal();
        self.write_as(&who, t, data)
    }

    fn fetch_check(&mut self, who: &Principal, t: CapToken, expect_call: bool) -> Result<FetchKind, Fault> {
        let ctx = self.context(who, AccessKind::Execute);
        let res = self.resolve_ctx(t, &ctx)?;
        let kind = resolver::entry_point(&res, t.offset(), &ctx)?;
        if expect_call && kind == FetchKind::PlainFetch {
            return Err(Fault::NotEntryPoint);
        }
        resolver::bounds(&res, t.offset(), INSTRUCTION_BYTES, &self.cmt_region())?;
        Ok(kind)
    }

    /// Instruction fetch at `t`. Fetching the first byte of a foreign
    /// set-subsystem capability switches the active subsystem.
    pub fn fetch(&mut self, dev: DeviceId, t: CapToken, expect_call: bool) -> Result<FetchOutcome, MachineError> {
        let who = self.cpu_mut(dev)?.principal();
        self.stats.fetches += 1;
        let kind = if expect_call { "call" } else { "fetch" };
        match self.fetch_check(&who, t, expect_call) {
            Ok(k) => {
                let d = self.device_mut(dev)?;
                d.cur_mut().pc = Some(t);
                let outcome = match k {
                    FetchKind::SubsystemCall(s) => {
                        d.cur_mut().subsystem = s;
                        self.stats.subsystem_calls += 1;
                        FetchOutcome::SubsystemCall(s)
                    }
                    FetchKind::PlainFetch => FetchOutcome::PlainFetch,
                };
                let text = match outcome {
                    FetchOutcome::SubsystemCall(s) => format!("call:s{s}"),
                    FetchOutcome::PlainFetch => "ok".into(),
                };
                self.emit(kind, who.to_string(), vec![t], text);
                Ok(outcome)
            }
            Err(f) => {
                self.stats.bus_errors += 1;
                self.emit(kind, who.to_string(), vec![t], format!("fault:{}", f.name()));
                Err(MachineError::Bus(f))
            }
        }
    }

    pub fn set_irq_enable(&mut self, dev: DeviceId, on: bool) -> Result<(), MachineError> {
        let d = self.cpu_mut(dev)?;
        d.cur_mut().irq_enable = on;
        let who = d.principal();
        self.emit("irq_enable", who.to_string(), vec![], on.to_string());
        Ok(())
    }

    /// Marks `cause` non-maskable; the bit can never be cleared.
    pub fn set_nmi(&mut self, dev: DeviceId, cause: u32) -> Result<(), MachineError> {
        if cause >= INTERRUPT_CAUSES {
            return Err(MachineError::BadCause(cause));
        }
        let d = self.cpu_mut(dev)?;
        d.nmi_mask |= 1 << cause;
        let who = d.principal();
        self.emit("set_nmi", who.to_string(), vec![], format!("cause{cause}"));
        Ok(())
    }

    pub fn set_vector_base(&mut self, dev: DeviceId, base: u64) -> Result<(), MachineError> {
        let d = self.cpu_mut(dev)?;
        if d.vector_base.is_some() {
            return Err(MachineError::VectorBaseLocked);
        }
        d.vector_base = Some(base);
        let who = d.principal();
        self.emit("set_vector_base", who.to_string(), vec![], format!("{base:#x}"));
        Ok(())
    }

    pub fn raise_interrupt(&mut self, dev: DeviceId, cause: u32) -> Result<InterruptOutcome, MachineError> {
        if cause >= INTERRUPT_CAUSES {
            return Err(MachineError::BadCause(cause));
        }
        let timer = self.config.timer_cause;
        let d = self.cpu_mut(dev)?;
        let before = d.principal();
        let nmi = d.nmi_mask >> cause & 1 == 1;
        let target = if d.regime == Regime::Nmi {
            None
        } else if nmi {
            Some(Regime::Nmi)
        } else if d.regime == Regime::Irq || !d.irq_enabled() {
            None
        } else if cause == timer {
            Some(Regime::Normal)
        } else {
            Some(Regime::Irq)
        };
        let Some(target) = target else {
            self.stats.interrupts_masked += 1;
            self.emit("irq", before.to_string(), vec![], format!("cause{cause}:masked"));
            return Ok(InterruptOutcome::Masked);
        };
        let base = d.vector_base.ok_or(MachineError::NoVectorTable)?;
        let vector = CapToken(self.mem.read_u64(base + 8 * cause as u64));

        let d = self.device_mut(dev)?;
        let from = d.regime;
        if target != Regime::Normal {
            let epc = d.cur().pc;
            let t = &mut d.regimes[target.index()];
            t.saved_epc = epc;
            t.saved_from = Some(from);
            d.regime = target;
        }
        let who = d.principal();
        self.stats.interrupts_taken += 1;
        match self.fetch_check(&who, vector, false) {
            Ok(k) => {
                let d = self.device_mut(dev)?;
                d.cur_mut().pc = Some(vector);
                let text = match k {
                    FetchKind::SubsystemCall(s) => {
                        d.cur_mut().subsystem = s;
                        format!("cause{cause}:taken:call:s{s}")
                    }
                    FetchKind::PlainFetch => format!("cause{cause}:taken"),
                };
                self.emit("irq", before.to_string(), vec![vector], text);
                Ok(InterruptOutcome::Taken)
            }
            Err(f) => {
                self.halted = true;
                self.emit("irq", before.to_string(), vec![vector], format!("cause{cause}:vector_fault:{}", f.name()));
                Err(MachineError::VectorFault(f))
            }
        }
    }

    /// Returns from an interrupt regime to the regime it interrupted.
    pub fn mret(&mut self, dev: DeviceId) -> Result<(), MachineError> {
        let d = self.cpu_mut(dev)?;
        let who = d.principal();
        if d.regime == Regime::Normal {
            self.emit("mret", who.to_string(), vec![], "fault:NotInIrq".into());
            return Err(MachineError::NotInIrq);
        }
        let cur = d.cur().clone();
        let back = cur.saved_from.unwrap_or(Regime::Normal);
        d.regime = back;
        d.cur_mut().pc = cur.saved_epc;
        let after = d.principal();
        self.emit("mret", who.to_string(), cur.saved_epc.into_iter().collect(), format!("to:{after}"));
        Ok(())
    }

    /// Writes the saved return address of the interrupt regime. Only code in
    /// the normal regime may do this.
    pub fn set_epc(&mut self, dev: DeviceId, t: CapToken) -> Result<(), MachineError> {
        let d = self.cpu_mut(dev)?;
        if d.regime.is_interrupt() {
            let who = d.principal();
            self.emit("set_epc", who.to_string(), vec![t], "fault:EpcReadOnly".into());
            return Err(MachineError::EpcReadOnly);
        }
        d.regimes[Regime::Irq.index()].saved_epc = Some(t);
        Ok(())
    }

    pub fn saved_epc(&self, dev: DeviceId, r: Regime) -> Result<Option<CapToken>, MachineError> {
        Ok(self.device(dev)?.regimes[r.index()].saved_epc)
    }

    pub fn zero_registers(&mut self, dev: DeviceId, mask: u64) -> Result<(), MachineError> {
        let d = self.cpu_mut(dev)?;
        d.cur_mut().regs.uninit_mask |= mask & ((1u64 << REGISTER_COUNT) - 1);
        let who = d.principal();
        self.emit("zero_regs", who.to_string(), vec![], format!("{mask:#x}"));
        Ok(())
    }

    pub fn reg_write(&mut self, dev: DeviceId, idx: usize, v: u64) -> Result<(), MachineError> {
        if idx >= REGISTER_COUNT {
            return Err(MachineError::BadRegister(idx));
        }
        self.cpu_mut(dev)?.cur_mut().regs.write(idx, v);
        Ok(())
    }

    pub fn reg_read(&mut self, dev: DeviceId, idx: usize) -> Result<u64, MachineError> {
        if idx >= REGISTER_COUNT {
            return Err(MachineError::BadRegister(idx));
        }
        Ok(self.cpu_mut(dev)?.cur().regs.read(idx))
    }

    fn run_action(&mut self, bank: Bank, action: PortAction) {
        if let PortAction::Execute(who, req) = action {
            let commit = self.execute_op(&who, &req);
            self.port.complete(bank, commit);
        }
    }

    fn execute_op(&mut self, who: &Principal, req: &OpRequest) -> OpCommit {
        let commit = ops::execute(&mut self.cmt, &mut self.mem, who, req);
        if self.config.caching {
            self.ntlb.notify_op_commit(commit.scope, &commit.touched);
        }
        *self.stats.ops.entry(req.opcode).or_default() += 1;
        let mut tokens = vec![req.a];
        if req.opcode == Opcode::Merge {
            tokens.push(req.b);
        }
        let outcome = match &commit.output {
            Ok(out) => out.to_string().replace(' ', ":"),
            Err(e) => {
                self.stats.op_failures += 1;
                format!("fault:{}", e.name())
            }
        };
        self.emit(req.opcode.name(), who.to_string(), tokens, outcome);
        commit
    }

    /// Runs one operation through the port bank of `who`'s regime: acquire,
    /// submit, collect, release.
    pub fn op_as(&mut self, who: &Principal, req: OpRequest) -> Result<OpOutput, MachineError> {
        if self.halted {
            return Err(MachineError::Halted);
        }
        let bank = Bank::for_regime(who.regime);
        if let Err(e) = self.port.begin(bank, who) {
            self.emit(req.opcode.name(), who.to_string(), vec![req.a], "fault:PortLocked".into());
            return Err(e.into());
        }
        let action = self.port.submit(bank, who, req);
        if action == PortAction::None {
            self.emit(req.opcode.name(), who.to_string(), vec![req.a], "deferred".into());
            return Err(MachineError::Deferred);
        }
        self.run_action(bank, action);
        self.collect(bank, who)
    }

    fn collect(&mut self, bank: Bank, who: &Principal) -> Result<OpOutput, MachineError> {
        let out = self.port.result(bank, who).map(|c| c.output);
        let next = self.port.release(bank, who)?;
        self.run_action(Bank::Irq, next);
        match out {
            Some(Ok(o)) => Ok(o),
            Some(Err(e)) => Err(MachineError::Op(e)),
            None => Err(MachineError::Deferred),
        }
    }

    /// Issues an operation from a CPU. DMA engines have no operation port.
    pub fn op(&mut self, dev: DeviceId, req: OpRequest) -> Result<OpOutput, MachineError> {
        let who = self.cpu_mut(dev)?.principal();
        self.op_as(&who, req)
    }

    /// Full commit record of the last operation on the device's bank, if
    /// its transaction is still open.
    pub fn port_commit(&self, dev: DeviceId) -> Option<OpCommit> {
        let who = self.device(dev).ok()?.principal();
        self.port.result(Bank::for_regime(who.regime), &who).cloned()
    }

    pub fn port_begin(&mut self, dev: DeviceId) -> Result<(), MachineError> {
        let who = self.device(dev)?.principal();
        Ok(self.port.begin(Bank::for_regime(who.regime), &who)?)
    }

    pub fn port_write(&mut self, dev: DeviceId, reg: PortReg, value: u64) -> Result<(), MachineError> {
        let who = self.device(dev)?.principal();
        let bank = Bank::for_regime(who.regime);
        let action = self.port.write(bank, &who, reg, value)?;
        self.run_action(bank, action);
        Ok(())
    }

    pub fn port_read(&mut self, dev: DeviceId, reg: PortReg) -> Result<u64, MachineError> {
        let who = self.device(dev)?.principal();
        if reg == PortReg::Random {
            return Ok(self.read_random());
        }
        Ok(self.port.read(Bank::for_regime(who.regime), &who, reg).value())
    }

    /// Releases the device's bank; a deferred interrupt-bank request may run.
    pub fn port_release(&mut self, dev: DeviceId) -> Result<(), MachineError> {
        let who = self.device(dev)?.principal();
        let next = self.port.release(Bank::for_regime(who.regime), &who)?;
        self.run_action(Bank::Irq, next);
        Ok(())
    }

    /// Collects a previously deferred result on the interrupt bank.
    pub fn port_collect(&mut self, dev: DeviceId) -> Result<OpOutput, MachineError> {
        let who = self.device(dev)?.principal();
        self.collect(Bank::for_regime(who.regime), &who)
    }

    pub fn read_random(&mut self) -> u64 {
        self.trng.next_u64()
    }

    /// Harness access to physical memory, bypassing every check.
    pub fn phys_read(&self, addr: u64, len: u64) -> Vec<u8> {
        self.mem.read_vec(addr, len)
    }

    pub fn phys_write(&mut self, addr: u64, data: &[u8]) {
        self.mem.write(addr, data)
    }

    /// Structural checks over table and cache.
    pub fn audit(&self) -> Result<(), String> {
        self.cmt.audit()?;
        if self.config.caching {
            self.ntlb.audit(&self.cmt)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cmt::{Permissions, Restriction};

    const NONE: Restriction = Restriction::None;

    fn machine() -> (Machine, DeviceId) {
        let mut m = Machine::new(MachineConfig::default()).unwrap();
        let cpu = m.add_cpu();
        (m, cpu)
    }

    fn carve(m: &mut Machine, dev: DeviceId, len: u64, p: Permissions) -> CapToken {
        m.op(dev, OpRequest::create(CapToken::ROOT, len, NONE, p)).unwrap().token().unwrap()
    }

    #[test]
    fn machine_is_send() {
        fn send<T: Send>() {}
        send::<Machine>();
    }

    #[test]
    fn dma_confinement() {
        let (mut m, cpu) = machine();
        let buf = carve(&mut m, cpu, 0x1000, Permissions::RW | Permissions::CT);
        let win = m.op(cpu, OpRequest::derive(buf, 64, 0x100, NONE, Permissions::RW)).unwrap().token().unwrap();
        let dma = m.add_dma(5);
        assert!(m.mem_write(dma, win, &[0x5a; 64]).is_ok());
        assert_eq!(m.mem_write(dma, win, &[0x11; 65]), Err(MachineError::Bus(Fault::OutOfBounds)));
        assert_eq!(m.phys_read(0x100, 64), vec![0x5a; 64]);
        assert_eq!(m.phys_read(0x140, 1), vec![0]);
        assert_eq!(m.mem_read(dma, win, 64).unwrap(), vec![0x5a; 64]);
    }

    #[test]
    fn cmt_region_is_unreachable() {
        let (mut m, cpu) = machine();
        let base = m.cmt_region().start;
        assert_eq!(m.mem_read(cpu, CapToken(base), 1), Err(MachineError::Bus(Fault::CmtOverlap)));
        assert!(m.mem_read(cpu, CapToken(base - 1), 1).is_ok());
    }

    #[test]
    fn repeated_reads_hit_l1() {
        let (mut m, cpu) = machine();
        for _ in 0..5 {
            m.mem_read(cpu, CapToken(0x40), 8).unwrap();
        }
        let s = m.cache_stats();
        assert_eq!((s.l1_misses, s.l1_hits), (1, 4));
    }

    #[test]
    fn subsystem_call_switches_id() {
        let (mut m, cpu) = machine();
        let seg = carve(&mut m, cpu, 0x100, Permissions::from_bits(0b111));
        let set = Restriction::SubsystemIdSet { device: 0, subsystem: 3 };
        let entry =
            m.op(cpu, OpRequest::derive(seg, 0x100, 0, set, Permissions::from_bits(0b111))).unwrap().token().unwrap();
        assert_eq!(m.fetch(cpu, entry.with_offset(8).unwrap(), false), Err(MachineError::Bus(Fault::NotEntryPoint)));
        assert_eq!(m.fetch(cpu, entry, false), Ok(FetchOutcome::SubsystemCall(3)));
        assert_eq!(m.device(cpu).unwrap().subsystem(), 3);
        assert!(m.mem_read(cpu, entry.with_offset(8).unwrap(), 8).is_ok());
        assert_eq!(m.fetch(cpu, entry.with_offset(8).unwrap(), false), Ok(FetchOutcome::PlainFetch));
    }

    #[test]
    fn expect_call_rejects_plain_code() {
        let (mut m, cpu) = machine();
        let code = carve(&mut m, cpu, 0x100, Permissions::R | Permissions::X);
        assert_eq!(m.fetch(cpu, code, true), Err(MachineError::Bus(Fault::NotEntryPoint)));
        assert_eq!(m.fetch(cpu, code, false), Ok(FetchOutcome::PlainFetch));
    }

    #[test]
    fn port_exclusion_and_foreign_reads() {
        let mut m = Machine::new(MachineConfig::default()).unwrap();
        let a = m.add_cpu();
        let b = m.add_device(DeviceKind::Cpu, 2);
        m.port_begin(a).unwrap();
        assert_eq!(m.port_begin(b), Err(MachineError::Port(PortError::PortLocked)));
        m.port_write(a, PortReg::InA, 0).unwrap();
        m.port_write(a, PortReg::Len, 0x1000).unwrap();
        m.port_write(a, PortReg::Perms, Permissions::RW.bits() as u64).unwrap();
        m.port_write(a, PortReg::Opcode, Opcode::Create as u64).unwrap();
        let slice = m.port_read(a, PortReg::OutB).unwrap();
        assert_ne!(slice, 0);
        assert_eq!(m.port_read(b, PortReg::OutB).unwrap(), 0);
        assert_eq!(m.port_read(a, PortReg::Status).unwrap(), ops::STATUS_DONE);
        m.port_release(a).unwrap();
        m.port_begin(b).unwrap();
    }

    #[test]
    fn random_register_never_repeats() {
        let (mut m, cpu) = machine();
        let xs: Vec<u64> = (0..1000).map(|_| m.port_read(cpu, PortReg::Random).unwrap()).collect();
        let mut sorted = xs.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), xs.len());
        let (mut m2, cpu2) = machine();
        assert_eq!(m2.port_read(cpu2, PortReg::Random).unwrap(), xs[0]);
    }

    fn with_vectors(m: &mut Machine, cpu: DeviceId, causes: &[u32], handler: CapToken) {
        let base = m.vector_region().start;
        for &c in causes {
            m.phys_write(base + 8 * c as u64, &handler.raw().to_le_bytes());
        }
        m.set_vector_base(cpu, base).unwrap();
    }

    fn isr_token(m: &mut Machine, cpu: DeviceId, sub: SubsystemId) -> CapToken {
        let p = Permissions::R | Permissions::X | Permissions::I;
        let seg = carve(m, cpu, 0x100, p);
        let set = Restriction::SubsystemIdSet { device: 0, subsystem: sub };
        m.op(cpu, OpRequest::derive(seg, 0x100, 0, set, p)).unwrap().token().unwrap()
    }

    #[test]
    fn register_stacking_and_mret() {
        let (mut m, cpu) = machine();
        let isr = isr_token(&mut m, cpu, 9);
        with_vectors(&mut m, cpu, &[3], isr);
        m.set_irq_enable(cpu, true).unwrap();
        m.reg_write(cpu, 5, 111).unwrap();
        assert_eq!(m.raise_interrupt(cpu, 3), Ok(InterruptOutcome::Taken));
        let d = m.device(cpu).unwrap();
        assert_eq!((d.regime(), d.subsystem()), (Regime::Irq, 9));
        assert_eq!(m.reg_read(cpu, 5).unwrap(), 0);
        m.reg_write(cpu, 5, 222).unwrap();
        assert_eq!(m.set_epc(cpu, CapToken(0x10)), Err(MachineError::EpcReadOnly));
        // nested maskable interrupt is refused inside the irq regime
        assert_eq!(m.raise_interrupt(cpu, 3), Ok(InterruptOutcome::Masked));
        m.mret(cpu).unwrap();
        let d = m.device(cpu).unwrap();
        assert_eq!((d.regime(), d.subsystem()), (Regime::Normal, 0));
        assert_eq!(m.reg_read(cpu, 5).unwrap(), 111);
        assert_eq!(m.mret(cpu), Err(MachineError::NotInIrq));
    }

    #[test]
    fn nmi_rules() {
        let (mut m, cpu) = machine();
        let isr = isr_token(&mut m, cpu, 9);
        with_vectors(&mut m, cpu, &[2, 3], isr);
        m.set_nmi(cpu, 2).unwrap();
        // interrupts disabled: maskable refused, NMI taken
        assert_eq!(m.raise_interrupt(cpu, 3), Ok(InterruptOutcome::Masked));
        assert_eq!(m.raise_interrupt(cpu, 2), Ok(InterruptOutcome::Taken));
        assert_eq!(m.device(cpu).unwrap().regime(), Regime::Nmi);
        assert_eq!(m.raise_interrupt(cpu, 2), Ok(InterruptOutcome::Masked));
        m.mret(cpu).unwrap();
        assert_eq!(m.device(cpu).unwrap().regime(), Regime::Normal);
    }

    #[test]
    fn timer_stays_in_normal_regime() {
        let (mut m, cpu) = machine();
        let stub = isr_token(&mut m, cpu, 4);
        with_vectors(&mut m, cpu, &[DEFAULT_TIMER_CAUSE], stub);
        m.set_irq_enable(cpu, true).unwrap();
        m.reg_write(cpu, 1, 7).unwrap();
        assert_eq!(m.raise_interrupt(cpu, DEFAULT_TIMER_CAUSE), Ok(InterruptOutcome::Taken));
        let d = m.device(cpu).unwrap();
        assert_eq!((d.regime(), d.subsystem()), (Regime::Normal, 4));
        assert_eq!(m.reg_read(cpu, 1).unwrap(), 7);
    }

    #[test]
    fn vector_fault_halts() {
        let (mut m, cpu) = machine();
        with_vectors(&mut m, cpu, &[3], CapToken(0x1234_5678_0000_0000));
        m.set_irq_enable(cpu, true).unwrap();
        assert!(matches!(m.raise_interrupt(cpu, 3), Err(MachineError::VectorFault(_))));
        assert!(m.is_halted());
        assert_eq!(m.mem_read(cpu, CapToken(0), 1), Err(MachineError::Halted));
    }

    #[test]
    fn vector_base_is_write_once() {
        let (mut m, cpu) = machine();
        m.set_vector_base(cpu, 0x100).unwrap();
        assert_eq!(m.set_vector_base(cpu, 0x200), Err(MachineError::VectorBaseLocked));
    }

    #[test]
    fn zero_registers_per_regime() {
        let (mut m, cpu) = machine();
        m.reg_write(cpu, 10, 5).unwrap();
        m.zero_registers(cpu, u64::MAX).unwrap();
        assert_eq!(m.reg_read(cpu, 10).unwrap(), 0);
        m.reg_write(cpu, 10, 6).unwrap();
        assert_eq!(m.reg_read(cpu, 10).unwrap(), 6);
        let d = m.device(cpu).unwrap();
        assert_eq!(d.registers(Regime::Irq).uninit_mask(), 0);
    }

    #[test]
    fn trace_lines() {
        let (mut m, cpu) = machine();
        m.mem_read(cpu, CapToken(0x10), 2).unwrap();
        m.mem_read(cpu, CapToken(0xdead_0000_0000_0000), 2).unwrap_err();
        let text = m.trace_text();
        assert_eq!(
            text,
            "1 read d0.n.s0 0x0000000000000010 ok:0000\n2 read d0.n.s0 0xdead000000000000 fault:InvalidToken\n"
        );
    }

    #[test]
    fn uncached_and_cached_agree_on_simple_lock() {
        for caching in [true, false] {
            let mut m = Machine::new(MachineConfig { caching, ..Default::default() }).unwrap();
            let cpu = m.add_cpu();
            let p = Permissions::RW | Permissions::L | Permissions::CT;
            let d = carve(&mut m, cpu, 0x100, p);
            let a = m.op(cpu, OpRequest::derive(d, 0x80, 0, NONE, p)).unwrap().token().unwrap();
            let b = m.op(cpu, OpRequest::derive(d, 0x80, 0x80, NONE, p)).unwrap().token().unwrap();
            let other = carve(&mut m, cpu, 0x100, p);
            let o = m.op(cpu, OpRequest::derive(other, 0x80, 0, NONE, p)).unwrap().token().unwrap();
            m.mem_read(cpu, o, 8).unwrap();
            m.mem_read(cpu, a, 8).unwrap();
            m.mem_read(cpu, b, 8).unwrap();
            let h = m.op(cpu, OpRequest::lock(a, NONE, p)).unwrap().token().unwrap();
            assert_eq!(m.mem_read(cpu, b, 8), Err(MachineError::Bus(Fault::Locked)));
            assert!(m.mem_read(cpu, h, 8).is_ok());
            assert!(m.mem_read(cpu, o, 8).is_ok());
            m.op(cpu, OpRequest::drop_cap(h)).unwrap();
            assert!(m.mem_read(cpu, b, 8).is_ok());
            if caching {
                assert!(m.cache_stats().stale_revalidations > 0);
            }
            m.audit().unwrap();
        }
    }
}
