//! JSON scenario scripts: parsing and execution against one machine.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use northcape::allocator::{Heap, MallocOptions};
use northcape::loader::{self, Manifest, System};
use northcape::machine::{DeviceKind, Machine, MachineConfig, MachineError};
use northcape::ntlb::NtlbConfig;
use northcape::ops::{OpRequest, Opcode, Principal};
use northcape::{CapToken, Permissions, Restriction};
use serde_json::{Map, Value};

use crate::stats;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParseError(pub String);

impl std::fmt::Display for ParseError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ParseError {}

fn err<T>(msg: impl Into<String>) -> Result<T, ParseError> {
    Err(ParseError(msg.into()))
}

/// Command-line overrides applied on top of the scenario's own config.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub no_cache: bool,
    pub seed: Option<u64>,
    pub l1_size: Option<usize>,
    pub l2_size: Option<usize>,
    pub l2_assoc: Option<usize>,
    pub spin_limit: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TokenBase {
    Name(String),
    Raw(CapToken),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenRef {
    pub base: TokenBase,
    pub add: u64,
}

impl TokenRef {
    pub fn parse(s: &str) -> Result<TokenRef, ParseError> {
        let s = s.trim();
        let (head, add) = match s.split_once('+') {
            Some((h, a)) => (h.trim(), parse_num(a.trim()).ok_or_else(|| ParseError(format!("bad offset in `{s}`")))?),
            None => (s, 0),
        };
        let base = if head.starts_with("0x") || head.chars().all(|c| c.is_ascii_digit()) {
            TokenBase::Raw(CapToken(parse_num(head).ok_or_else(|| ParseError(format!("bad token `{s}`")))?))
        } else if head.is_empty() {
            return err("empty token reference");
        } else {
            TokenBase::Name(head.to_string())
        };
        Ok(TokenRef { base, add })
    }
}

fn parse_num(s: &str) -> Option<u64> {
    let s = s.replace('_', "");
    match s.strip_prefix("0x").or_else(|| s.strip_prefix("0X")) {
        Some(h) => u64::from_str_radix(h, 16).ok(),
        None => s.parse().ok(),
    }
}

fn parse_hex(s: &str) -> Option<Vec<u8>> {
    let s: String = s.chars().filter(|c| !c.is_whitespace()).collect();
    let s = s.strip_prefix("0x").unwrap_or(&s);
    if !s.len().is_multiple_of(2) {
        return None;
    }
    (0..s.len()).step_by(2).map(|i| u8::from_str_radix(&s[i..i + 2], 16).ok()).collect()
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OpSpec {
    pub opcode: Opcode,
    pub a: TokenRef,
    pub b: Option<TokenRef>,
    pub len: u64,
    pub offset: u64,
    pub restriction: Restriction,
    pub perms: Permissions,
    pub offset_add: u64,
    pub len_sub: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Assertion {
    /// Outcome kind of the previous step: `ok` or an error name.
    Last(String),
    /// Full outcome text of the previous step.
    Text(String),
    /// Bytes produced by the previous step.
    Data(Vec<u8>),
    /// Previous step's bytes read as a little-endian integer.
    Value(u64),
    Mem {
        addr: u64,
        data: Vec<u8>,
    },
    Stat {
        key: String,
        eq: u64,
    },
    Subsystem {
        dev: u16,
        eq: u32,
    },
    Regime {
        dev: u16,
        eq: String,
    },
    Same {
        a: TokenRef,
        b: TokenRef,
    },
    /// Previous step's bytes hold this token.
    Token(TokenRef),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Action {
    Read {
        dev: u16,
        token: TokenRef,
        len: u64,
    },
    Write {
        dev: u16,
        token: TokenRef,
        data: Vec<u8>,
    },
    Fetch {
        dev: u16,
        token: TokenRef,
        call: bool,
    },
    Op {
        dev: u16,
        op: OpSpec,
        save: Option<String>,
        save_rest: Option<String>,
    },
    Interrupt {
        dev: u16,
        cause: u32,
    },
    Mret {
        dev: u16,
    },
    ZeroRegs {
        dev: u16,
        mask: u64,
    },
    RegWrite {
        dev: u16,
        reg: usize,
        value: u64,
    },
    RegRead {
        dev: u16,
        reg: usize,
    },
    SetVectorBase {
        dev: u16,
        base: Option<u64>,
    },
    SetNmi {
        dev: u16,
        cause: u32,
    },
    IrqEnable {
        dev: u16,
        on: bool,
    },
    SetEpc {
        dev: u16,
        token: TokenRef,
    },
    /// Harness write straight into physical memory.
    PhysWrite {
        addr: u64,
        data: Vec<u8>,
    },
    /// Harness write of a vector-table slot.
    Vector {
        cause: u32,
        token: TokenRef,
    },
    Random {
        dev: u16,
    },
    Boot {
        dev: u16,
    },
    Trapdoor,
    HeapInit {
        dev: u16,
        subsystem: u32,
        token: TokenRef,
    },
    Malloc {
        size: u64,
        opts: MallocOptions,
        save: Option<String>,
    },
    Free {
        token: TokenRef,
    },
    Reclaim {
        token: TokenRef,
    },
    PoolClaim {
        image: String,
    },
    PoolRelease {
        image: String,
        index: usize,
    },
    Note {
        text: String,
    },
    Assert(Assertion),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Step {
    pub action: Action,
    /// Shorthand for a following `last` assertion.
    pub expect: Option<String>,
}

#[derive(Debug, Clone)]
pub struct Scenario {
    pub config: MachineConfig,
    pub devices: Vec<(DeviceKind, u32)>,
    pub manifest: Option<Manifest>,
    pub steps: Vec<Step>,
}

/// Field access over one JSON object that rejects leftovers.
struct Fields<'a> {
    what: String,
    obj: &'a Map<String, Value>,
    used: BTreeSet<&'a str>,
}

impl<'a> Fields<'a> {
    fn new(what: String, v: &'a Value) -> Result<Fields<'a>, ParseError> {
        match v.as_object() {
            Some(obj) => Ok(Fields { what, obj, used: BTreeSet::new() }),
            None => err(format!("{what}: expected an object")),
        }
    }

    fn get(&mut self, key: &'a str) -> Option<&'a Value> {
        let v = self.obj.get(key)?;
        self.used.insert(key);
        Some(v)
    }

    fn fail<T>(&self, msg: impl std::fmt::Display) -> Result<T, ParseError> {
        err(format!("{}: {msg}", self.what))
    }

    fn num_opt(&mut self, key: &'a str) -> Result<Option<u64>, ParseError> {
        match self.get(key) {
            None => Ok(None),
            Some(Value::Number(n)) => match n.as_u64() {
                Some(x) => Ok(Some(x)),
                None => self.fail(format!("`{key}` must be a non-negative integer")),
            },
            Some(Value::String(s)) => match parse_num(s) {
                Some(x) => Ok(Some(x)),
                None => self.fail(format!("`{key}`: bad number `{s}`")),
            },
            Some(_) => self.fail(format!("`{key}` must be a number")),
        }
    }

    fn num(&mut self, key: &'a str) -> Result<u64, ParseError> {
        match self.num_opt(key)? {
            Some(x) => Ok(x),
            None => self.fail(format!("missing `{key}`")),
        }
    }

    fn num_or(&mut self, key: &'a str, default: u64) -> Result<u64, ParseError> {
        Ok(self.num_opt(key)?.unwrap_or(default))
    }

    fn str_opt(&mut self, key: &'a str) -> Result<Option<&'a str>, ParseError> {
        match self.get(key) {
            None => Ok(None),
            Some(Value::String(s)) => Ok(Some(s)),
            Some(_) => self.fail(format!("`{key}` must be a string")),
        }
    }

    fn str(&mut self, key: &'a str) -> Result<&'a str, ParseError> {
        match self.str_opt(key)? {
            Some(s) => Ok(s),
            None => self.fail(format!("missing `{key}`")),
        }
    }

    fn bool_or(&mut self, key: &'a str, default: bool) -> Result<bool, ParseError> {
        match self.get(key) {
            None => Ok(default),
            Some(Value::Bool(b)) => Ok(*b),
            Some(_) => self.fail(format!("`{key}` must be a boolean")),
        }
    }

    fn token(&mut self, key: &'a str) -> Result<TokenRef, ParseError> {
        match self.get(key) {
            Some(Value::String(s)) => TokenRef::parse(s).map_err(|e| ParseError(format!("{}: {e}", self.what))),
            Some(Value::Number(n)) => Ok(TokenRef { base: TokenBase::Raw(CapToken(n.as_u64().unwrap_or(0))), add: 0 }),
            _ => self.fail(format!("missing token `{key}`")),
        }
    }

    fn dev(&mut self) -> Result<u16, ParseError> {
        let d = self.num_or("dev", 0)?;
        u16::try_from(d).or_else(|_| self.fail("`dev` out of range"))
    }

    /// Bytes from `hex`, or `fill` repeated `len` times.
    fn bytes(&mut self) -> Result<Vec<u8>, ParseError> {
        if let Some(h) = self.str_opt("hex")? {
            return parse_hex(h).map_or_else(|| self.fail("bad `hex`"), Ok);
        }
        let fill = self.num_or("fill", 0)?;
        let len = self.num("len")?;
        Ok(vec![fill as u8; len as usize])
    }

    fn perms(&mut self, key: &'a str) -> Result<Permissions, ParseError> {
        match self.str_opt(key)? {
            None => Ok(Permissions::NONE),
            Some(s) => Permissions::parse(s).map_or_else(|| self.fail(format!("bad permissions `{s}`")), Ok),
        }
    }

    fn restriction(&mut self, key: &'a str) -> Result<Restriction, ParseError> {
        let Some(v) = self.get(key) else {
            return Ok(Restriction::None);
        };
        if v.as_str() == Some("none") {
            return Ok(Restriction::None);
        }
        let mut f = Fields::new(format!("{} `{key}`", self.what), v)?;
        let kind = f.str("kind")?;
        let r = match kind {
            "none" => Restriction::None,
            "bound" | "set" => {
                let device = f.num_or("device", 0)? as u16;
                let subsystem = f.num("subsystem")? as u32;
                if kind == "bound" {
                    Restriction::SubsystemIdBound { device, subsystem }
                } else {
                    Restriction::SubsystemIdSet { device, subsystem }
                }
            }
            "device" => Restriction::DeviceInterpreted(f.num("payload")?),
            other => return f.fail(format!("unknown restriction kind `{other}`")),
        };
        f.finish()?;
        Ok(r)
    }

    fn finish(&self) -> Result<(), ParseError> {
        match self.obj.keys().find(|k| !self.used.contains(k.as_str())) {
            Some(k) => self.fail(format!("unknown field `{k}`")),
            None => Ok(()),
        }
    }
}

fn parse_step(i: usize, v: &Value) -> Result<Step, ParseError> {
    let mut f = Fields::new(format!("step {i}"), v)?;
    let kind = f.str("step")?;
    let expect = f.str_opt("expect")?.map(str::to_string);
    let action = match kind {
        "read" => Action::Read { dev: f.dev()?, token: f.token("token")?, len: f.num("len")? },
        "write" => Action::Write { dev: f.dev()?, token: f.token("token")?, data: f.bytes()? },
        "fetch" | "call" => {
            Action::Fetch { dev: f.dev()?, token: f.token("token")?, call: kind == "call" || f.bool_or("call", false)? }
        }
        "op" => {
            let dev = f.dev()?;
            let name = f.str("op")?;
            let Some(opcode) = Opcode::from_name(name) else {
                return f.fail(format!("unknown op `{name}`"));
            };
            let b = match f.get("b") {
                Some(_) => Some(f.token("b")?),
                None => None,
            };
            let op = OpSpec {
                opcode,
                a: f.token("a")?,
                b,
                len: f.num_or("len", 0)?,
                offset: f.num_or("offset", 0)?,
                restriction: f.restriction("r")?,
                perms: f.perms("perms")?,
                offset_add: f.num_or("offset_add", 0)?,
                len_sub: f.num_or("len_sub", 0)?,
            };
            if opcode == Opcode::Merge && op.b.is_none() {
                return f.fail("merge needs `b`");
            }
            let save = f.str_opt("save")?.map(str::to_string);
            let save_rest = f.str_opt("save_rest")?.map(str::to_string);
            Action::Op { dev, op, save, save_rest }
        }
        "interrupt" => Action::Interrupt { dev: f.dev()?, cause: f.num("cause")? as u32 },
        "mret" => Action::Mret { dev: f.dev()? },
        "zero_regs" => Action::ZeroRegs { dev: f.dev()?, mask: f.num_or("mask", u64::MAX)? },
        "reg_write" => Action::RegWrite { dev: f.dev()?, reg: f.num("reg")? as usize, value: f.num("value")? },
        "reg_read" => Action::RegRead { dev: f.dev()?, reg: f.num("reg")? as usize },
        "set_vector_base" => Action::SetVectorBase { dev: f.dev()?, base: f.num_opt("base")? },
        "set_nmi" => Action::SetNmi { dev: f.dev()?, cause: f.num("cause")? as u32 },
        "irq_enable" => Action::IrqEnable { dev: f.dev()?, on: f.bool_or("on", true)? },
        "set_epc" => Action::SetEpc { dev: f.dev()?, token: f.token("token")? },
        "phys_write" => Action::PhysWrite { addr: f.num("addr")?, data: f.bytes()? },
        "vector" => Action::Vector { cause: f.num("cause")? as u32, token: f.token("token")? },
        "random" => Action::Random { dev: f.dev()? },
        "boot" => Action::Boot { dev: f.dev()? },
        "trapdoor" => Action::Trapdoor,
        "heap_init" => {
            Action::HeapInit { dev: f.dev()?, subsystem: f.num("subsystem")? as u32, token: f.token("token")? }
        }
        "malloc" => Action::Malloc {
            size: f.num("size")?,
            opts: MallocOptions { lockable: f.bool_or("lockable", false)?, zeroed: f.bool_or("zeroed", false)? },
            save: f.str_opt("save")?.map(str::to_string),
        },
        "free" => Action::Free { token: f.token("token")? },
        "reclaim" => Action::Reclaim { token: f.token("token")? },
        "pool_claim" => Action::PoolClaim { image: f.str("image")?.to_string() },
        "pool_release" => Action::PoolRelease { image: f.str("image")?.to_string(), index: f.num("index")? as usize },
        "note" => Action::Note { text: f.str("text")?.to_string() },
        "assert" => Action::Assert(parse_assert(&mut f)?),
        other => return f.fail(format!("unknown step `{other}`")),
    };
    f.finish()?;
    Ok(Step { action, expect })
}

fn parse_assert(f: &mut Fields<'_>) -> Result<Assertion, ParseError> {
    if let Some(s) = f.str_opt("last")? {
        return Ok(Assertion::Last(s.to_string()));
    }
    if let Some(s) = f.str_opt("text")? {
        return Ok(Assertion::Text(s.to_string()));
    }
    if let Some(h) = f.str_opt("data")? {
        return parse_hex(h).map_or_else(|| f.fail("bad `data`"), |d| Ok(Assertion::Data(d)));
    }
    if let Some(v) = f.num_opt("value")? {
        return Ok(Assertion::Value(v));
    }
    if let Some(addr) = f.num_opt("addr")? {
        return Ok(Assertion::Mem { addr, data: f.bytes()? });
    }
    if let Some(key) = f.str_opt("stat")? {
        return Ok(Assertion::Stat { key: key.to_string(), eq: f.num("eq")? });
    }
    if let Some(sub) = f.num_opt("subsystem")? {
        return Ok(Assertion::Subsystem { dev: f.dev()?, eq: sub as u32 });
    }
    if let Some(r) = f.str_opt("regime")? {
        return Ok(Assertion::Regime { dev: f.dev()?, eq: r.to_string() });
    }
    if f.obj.contains_key("token") {
        return Ok(Assertion::Token(f.token("token")?));
    }
    if f.get("same").is_some() {
        return Ok(Assertion::Same { a: f.token("same")?, b: f.token("as")? });
    }
    f.fail("assert needs one of last, text, data, value, addr, stat, subsystem, regime, same")
}

impl Scenario {
    pub fn parse(text: &str, dir: Option<&Path>) -> Result<Scenario, ParseError> {
        let v: Value = serde_json::from_str(text).map_err(|e| ParseError(format!("scenario: {e}")))?;
        let mut top = Fields::new("scenario".into(), &v)?;

        let mut config = MachineConfig::default();
        if let Some(c) = top.get("config") {
            let mut f = Fields::new("config".into(), c)?;
            config.memory_size = f.num_or("memory_size", config.memory_size)?;
            config.cmt_slots = f.num_or("cmt_slots", config.cmt_slots as u64)? as usize;
            config.cmt_row_width = f.num_or("row_width", config.cmt_row_width as u64)? as usize;
            config.seed = f.num_or("seed", config.seed)?;
            config.timer_cause = f.num_or("timer_cause", config.timer_cause as u64)? as u32;
            config.caching = f.bool_or("caching", true)?;
            let l1 = f.num_opt("l1_size")?;
            let n = &mut config.ntlb;
            n.l1_instruction = l1.map_or(n.l1_instruction, |x| x as usize);
            n.l1_data = l1.map_or(n.l1_data, |x| x as usize);
            n.l2_entries = f.num_or("l2_size", n.l2_entries as u64)? as usize;
            n.l2_assoc = f.num_or("l2_assoc", n.l2_assoc as u64)? as usize;
            f.finish()?;
        }

        let mut devices = Vec::new();
        match top.get("devices") {
            None => devices.push((DeviceKind::Cpu, 0)),
            Some(Value::Array(list)) => {
                for (i, d) in list.iter().enumerate() {
                    let mut f = Fields::new(format!("device {i}"), d)?;
                    let kind = match f.str("kind")? {
                        "cpu" => DeviceKind::Cpu,
                        "dma" => DeviceKind::Dma,
                        other => return f.fail(format!("unknown device kind `{other}`")),
                    };
                    devices.push((kind, f.num_or("subsystem", 0)? as u32));
                    f.finish()?;
                }
            }
            Some(_) => return top.fail("`devices` must be a list"),
        }

        let manifest = match top.get("images") {
            None => None,
            Some(Value::String(path)) => {
                let p = dir.map_or_else(|| Path::new(path).to_path_buf(), |d| d.join(path));
                Some(Manifest::load(&p).map_err(|e| ParseError(e.to_string()))?)
            }
            Some(v) => Some(Manifest::from_value(v.clone(), dir).map_err(|e| ParseError(e.to_string()))?),
        };

        let mut steps = Vec::new();
        match top.get("steps") {
            None => {}
            Some(Value::Array(list)) => {
                for (i, s) in list.iter().enumerate() {
                    steps.push(parse_step(i, s)?);
                }
            }
            Some(_) => return top.fail("`steps` must be a list"),
        }
        top.finish()?;
        Ok(Scenario { config, devices, manifest, steps })
    }

    pub fn load(path: &Path) -> Result<Scenario, ParseError> {
        let text = std::fs::read_to_string(path).map_err(|e| ParseError(format!("{}: {e}", path.display())))?;
        Scenario::parse(&text, path.parent())
    }
}

/// What a step produced: `ok` or an error name, the full text, and bytes.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Outcome {
    pub kind: String,
    pub text: String,
    pub data: Vec<u8>,
}

impl Outcome {
    fn ok(text: impl Into<String>) -> Outcome {
        Outcome { kind: "ok".into(), text: text.into(), data: Vec::new() }
    }

    fn fail(kind: impl Into<String>) -> Outcome {
        let kind = kind.into();
        Outcome { text: kind.clone(), kind, data: Vec::new() }
    }
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub trace: String,
    pub failures: Vec<String>,
    pub stats: String,
    /// Outcome of each step in order.
    pub outcomes: Vec<Outcome>,
}

impl RunReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Executes scenario steps against a machine, keeping names for tokens.
pub struct Runner {
    pub machine: Machine,
    pub names: BTreeMap<String, CapToken>,
    pub system: Option<System>,
    pub heap: Option<Heap>,
    manifest: Option<Manifest>,
    spin_limit: Option<u32>,
    last: Outcome,
}

impl Runner {
    pub fn new(s: &Scenario, opts: &RunOptions) -> Result<Runner, ParseError> {
        let mut config = s.config;
        if opts.no_cache {
            config.caching = false;
        }
        if let Some(seed) = opts.seed {
            config.seed = seed;
        }
        let NtlbConfig { l1_instruction, l1_data, l2_entries, l2_assoc } = config.ntlb;
        config.ntlb = NtlbConfig {
            l1_instruction: opts.l1_size.unwrap_or(l1_instruction),
            l1_data: opts.l1_size.unwrap_or(l1_data),
            l2_entries: opts.l2_size.unwrap_or(l2_entries),
            l2_assoc: opts.l2_assoc.unwrap_or(l2_assoc),
        };
        let mut machine = Machine::new(config).map_err(|e| ParseError(format!("config: {e}")))?;
        for &(kind, sub) in &s.devices {
            machine.add_device(kind, sub);
        }
        let mut names = BTreeMap::new();
        names.insert("root".to_string(), CapToken::ROOT);
        Ok(Runner {
            machine,
            names,
            system: None,
            heap: None,
            manifest: s.manifest.clone(),
            spin_limit: opts.spin_limit,
            last: Outcome::default(),
        })
    }

    fn resolve(&self, t: &TokenRef) -> Result<CapToken, String> {
        let base = match &t.base {
            TokenBase::Raw(t) => *t,
            TokenBase::Name(n) => *self.names.get(n).ok_or_else(|| format!("unknown token name `{n}`"))?,
        };
        if t.add == 0 {
            return Ok(base);
        }
        base.add(t.add).map_err(|e| format!("token offset: {e}"))
    }

    fn outcome_of<T>(&self, r: Result<T, MachineError>, ok: impl FnOnce(T) -> Outcome) -> Outcome {
        match r {
            Ok(v) => ok(v),
            Err(e) => Outcome::fail(e.kind()),
        }
    }

    /// Runs one step. `Err` means the step itself is broken (unknown name,
    /// failed assertion), as opposed to an operation that faulted.
    pub fn step(&mut self, step: &Step) -> Result<Outcome, String> {
        let out = self.act(&step.action)?;
        if !matches!(step.action, Action::Assert(_)) {
            self.last = out.clone();
        }
        if let Some(want) = &step.expect {
            if &out.kind != want {
                return Err(format!("expected {want}, got {}", out.text));
            }
        }
        Ok(out)
    }

    fn act(&mut self, a: &Action) -> Result<Outcome, String> {
        let m = &mut self.machine;
        Ok(match a {
            Action::Read { dev, token, len } => {
                let t = self.resolve(token)?;
                let r = self.machine.mem_read(*dev, t, *len);
                self.outcome_of(r, |d| Outcome { kind: "ok".into(), text: format!("ok:{}", hex(&d)), data: d })
            }
            Action::Write { dev, token, data } => {
                let t = self.resolve(token)?;
                let r = self.machine.mem_write(*dev, t, data);
                self.outcome_of(r, |_| Outcome::ok("ok"))
            }
            Action::Fetch { dev, token, call } => {
                let t = self.resolve(token)?;
                let r = self.machine.fetch(*dev, t, *call);
                self.outcome_of(r, |o| Outcome::ok(format!("{o:?}")))
            }
            Action::Op { dev, op, save, save_rest } => {
                let req = OpRequest {
                    opcode: op.opcode,
                    a: self.resolve(&op.a)?,
                    b: match &op.b {
                        Some(b) => self.resolve(b)?,
                        None => CapToken(0),
                    },
                    len: op.len,
                    offset: op.offset,
                    restriction: op.restriction,
                    perms: op.perms,
                    offset_add: op.offset_add,
                    len_sub: op.len_sub,
                };
                match self.machine.op(*dev, req) {
                    Ok(out) => {
                        if let (Some(n), Some(t)) = (save, out.token()) {
                            self.names.insert(n.clone(), t);
                        }
                        if let (Some(n), northcape::ops::OpOutput::Split { remainder: Some(r), .. }) = (save_rest, out)
                        {
                            self.names.insert(n.clone(), r);
                        }
                        let data = out.token().map_or_else(Vec::new, |t| t.raw().to_le_bytes().to_vec());
                        Outcome { kind: "ok".into(), text: out.to_string(), data }
                    }
                    Err(e) => Outcome::fail(e.kind()),
                }
            }
            Action::Interrupt { dev, cause } => {
                let r = m.raise_interrupt(*dev, *cause);
                self.outcome_of(r, |o| Outcome::ok(format!("{o:?}")))
            }
            Action::Mret { dev } => {
                let r = m.mret(*dev);
                self.outcome_of(r, |_| Outcome::ok("ok"))
            }
            Action::ZeroRegs { dev, mask } => {
                let r = m.zero_registers(*dev, *mask);
                self.outcome_of(r, |_| Outcome::ok("ok"))
            }
            Action::RegWrite { dev, reg, value } => {
                let r = m.reg_write(*dev, *reg, *value);
                self.outcome_of(r, |_| Outcome::ok("ok"))
            }
            Action::RegRead { dev, reg } => {
                let r = m.reg_read(*dev, *reg);
                self.outcome_of(r, |v| Outcome {
                    kind: "ok".into(),
                    text: format!("{v:#x}"),
                    data: v.to_le_bytes().to_vec(),
                })
            }
            Action::SetVectorBase { dev, base } => {
                let base = base.unwrap_or(m.vector_region().start);
                let r = m.set_vector_base(*dev, base);
                self.outcome_of(r, |_| Outcome::ok("ok"))
            }
            Action::SetNmi { dev, cause } => {
                let r = m.set_nmi(*dev, *cause);
                self.outcome_of(r, |_| Outcome::ok("ok"))
            }
            Action::IrqEnable { dev, on } => {
                let r = m.set_irq_enable(*dev, *on);
                self.outcome_of(r, |_| Outcome::ok("ok"))
            }
            Action::SetEpc { dev, token } => {
                let t = self.resolve(token)?;
                let r = self.machine.set_epc(*dev, t);
                self.outcome_of(r, |_| Outcome::ok("ok"))
            }
            Action::PhysWrite { addr, data } => {
                m.phys_write(*addr, data);
                Outcome::ok("ok")
            }
            Action::Vector { cause, token } => {
                let t = self.resolve(token)?;
                let addr = self.machine.vector_region().start + 8 * *cause as u64;
                self.machine.phys_write(addr, &t.raw().to_le_bytes());
                Outcome::ok("ok")
            }
            Action::Random { dev } => {
                let r = m.port_read(*dev, northcape::ops::PortReg::Random);
                self.outcome_of(r, |v| Outcome {
                    kind: "ok".into(),
                    text: format!("{v:#x}"),
                    data: v.to_le_bytes().to_vec(),
                })
            }
            Action::Boot { dev } => {
                let man = self.manifest.as_ref().ok_or("boot step without `images`")?;
                match loader::boot_with(&mut self.machine, *dev, man, self.spin_limit) {
                    Ok(sys) => {
                        for (k, v) in &sys.symbols {
                            self.names.insert(k.clone(), *v);
                        }
                        self.system = Some(sys);
                        Outcome::ok("ok")
                    }
                    Err(e) => Outcome::fail(e.to_string()),
                }
            }
            Action::Trapdoor => {
                let sys = self.system.as_mut().ok_or("trapdoor before boot")?;
                match sys.trapdoor(&mut self.machine, self.heap.as_mut()) {
                    Ok(()) => Outcome::ok("ok"),
                    Err(e) => Outcome::fail(e.to_string()),
                }
            }
            Action::HeapInit { dev, subsystem, token } => {
                let t = self.resolve(token)?;
                let who = Principal::cpu(*dev, *subsystem);
                match Heap::init(&mut self.machine, who, t) {
                    Ok(h) => {
                        self.heap = Some(h);
                        Outcome::ok("ok")
                    }
                    Err(e) => Outcome::fail(e.name()),
                }
            }
            Action::Malloc { size, opts, save } => {
                let heap = self.heap.as_mut().ok_or("malloc before heap_init")?;
                match heap.malloc(&mut self.machine, *size, *opts) {
                    Ok(t) => {
                        if let Some(n) = save {
                            self.names.insert(n.clone(), t);
                            let a = heap.allocation(t).unwrap();
                            self.names.insert(format!("{n}.payload"), a.payload);
                        }
                        Outcome { kind: "ok".into(), text: t.to_string(), data: t.raw().to_le_bytes().to_vec() }
                    }
                    Err(e) => Outcome::fail(e.name()),
                }
            }
            Action::Free { token } => {
                let t = self.resolve(token)?;
                let heap = self.heap.as_mut().ok_or("free before heap_init")?;
                match heap.free(&mut self.machine, t) {
                    Ok(()) => Outcome::ok("ok"),
                    Err(e) => Outcome::fail(e.name()),
                }
            }
            Action::Reclaim { token } => {
                let t = self.resolve(token)?;
                let heap = self.heap.as_mut().ok_or("reclaim before heap_init")?;
                match heap.reclaim(&mut self.machine, t) {
                    Ok(()) => Outcome::ok("ok"),
                    Err(e) => Outcome::fail(e.name()),
                }
            }
            Action::PoolClaim { image } => {
                let sys = self.system.as_mut().ok_or("pool step before boot")?;
                let sub = sys.subsystem_mut(image).ok_or_else(|| format!("no image `{image}`"))?;
                match sub.pool.claim() {
                    Ok(i) => {
                        Outcome { kind: "ok".into(), text: i.to_string(), data: (i as u64).to_le_bytes().to_vec() }
                    }
                    Err(e) => Outcome::fail(format!("{e:?}").split('(').next().unwrap().to_string()),
                }
            }
            Action::PoolRelease { image, index } => {
                let sys = self.system.as_mut().ok_or("pool step before boot")?;
                let sub = sys.subsystem_mut(image).ok_or_else(|| format!("no image `{image}`"))?;
                match sub.pool.release(*index) {
                    Ok(()) => Outcome::ok("ok"),
                    Err(e) => Outcome::fail(format!("{e:?}").split('(').next().unwrap().to_string()),
                }
            }
            Action::Note { text } => {
                m.note(text);
                Outcome::ok("ok")
            }
            Action::Assert(x) => {
                self.check(x)?;
                Outcome::ok("ok")
            }
        })
    }

    fn check(&self, x: &Assertion) -> Result<(), String> {
        let last = &self.last;
        let fail = |what: String| Err(format!("assertion failed: {what}"));
        match x {
            Assertion::Last(k) if &last.kind != k => fail(format!("last outcome {} != {k}", last.text)),
            Assertion::Text(t) if &last.text != t => fail(format!("last text `{}` != `{t}`", last.text)),
            Assertion::Data(d) if &last.data != d => fail(format!("data {} != {}", hex(&last.data), hex(d))),
            Assertion::Value(v) if last_value(last) != *v => fail(format!("value {:#x} != {v:#x}", last_value(last))),
            Assertion::Token(t) => {
                let want = self.resolve(t)?;
                if last_value(last) != want.raw() {
                    return fail(format!("value {:#x} != {want}", last_value(last)));
                }
                Ok(())
            }
            Assertion::Mem { addr, data } => {
                let got = self.machine.phys_read(*addr, data.len() as u64);
                if &got != data {
                    return fail(format!("memory at {addr:#x} is {}", hex(&got)));
                }
                Ok(())
            }
            Assertion::Stat { key, eq } => {
                let lines = stats::collect(&self.machine, self.heap.as_ref());
                match lines.iter().find(|(k, _)| k == key) {
                    Some((_, v)) if v == eq => Ok(()),
                    Some((_, v)) => fail(format!("{key}={v}, expected {eq}")),
                    None => fail(format!("no stat `{key}`")),
                }
            }
            Assertion::Subsystem { dev, eq } => {
                let s = self.machine.device(*dev).map_err(|e| e.to_string())?.subsystem();
                if s != *eq {
                    return fail(format!("device {dev} runs subsystem {s}, expected {eq}"));
                }
                Ok(())
            }
            Assertion::Regime { dev, eq } => {
                let r = self.machine.device(*dev).map_err(|e| e.to_string())?.regime();
                if &r.to_string() != eq && &format!("{r:?}").to_lowercase() != eq {
                    return fail(format!("device {dev} in regime {r:?}, expected {eq}"));
                }
                Ok(())
            }
            Assertion::Same { a, b } => {
                let (x, y) = (self.resolve(a)?, self.resolve(b)?);
                if x != y {
                    return fail(format!("{x} != {y}"));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }
}

fn last_value(o: &Outcome) -> u64 {
    let mut b = [0u8; 8];
    let n = o.data.len().min(8);
    b[..n].copy_from_slice(&o.data[..n]);
    u64::from_le_bytes(b)
}

/// Runs a whole scenario. Assertion failures are collected, not fatal.
pub fn run(s: &Scenario, opts: &RunOptions) -> Result<RunReport, ParseError> {
    let mut r = Runner::new(s, opts)?;
    let mut failures = Vec::new();
    let mut outcomes = Vec::new();
    for (i, step) in s.steps.iter().enumerate() {
        match r.step(step) {
            Ok(o) => outcomes.push(o),
            Err(e) => {
                failures.push(format!("step {i}: {e}"));
                outcomes.push(Outcome::fail("AssertFailed"));
            }
        }
    }
    let stats = stats::render(&r.machine, r.heap.as_ref());
    Ok(RunReport { trace: r.machine.trace_text(), failures, stats, outcomes })
}
