//! Exception-handling metadata: unwind codes for the global unwind and the
//! LSData state machine that drives the local unwind.

mod codec;

pub use codec::{decode_metadata, encode_metadata};

use crate::cfg::FunctionRange;
use crate::isa::{reg_name, Reg, RBX, RDI, RSI, R12, R13, R14, R15};
use crate::machine::{Fault, MachineState, Memory};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use thiserror::Error;

/// Registers an unwind code may restore.
pub const NONVOL: [Reg; 7] = [RBX, RSI, RDI, R12, R13, R14, R15];

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EhError {
    #[error("{0}")]
    Fault(#[from] Fault),
    #[error("malformed LSData: {0}")]
    MalformedLsData(String),
    #[error("unknown exception type {0}")]
    UnknownType(u64),
    #[error("malformed metadata: {0}")]
    MalformedMetadata(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum UnwindCode {
    AllocSmall(u32),
    AllocLarge(u32),
    PushNonvol(Reg),
    /// Register restored from `[frame base + offset]`.
    SaveNonvol(Reg, u32),
    NopPad,
}

impl UnwindCode {
    /// Stack pointer adjustment when applied.
    pub fn stack_delta(&self) -> u64 {
        match self {
            UnwindCode::AllocSmall(n) | UnwindCode::AllocLarge(n) => *n as u64,
            UnwindCode::PushNonvol(_) => 8,
            _ => 0,
        }
    }

    /// Register overwritten when applied.
    pub fn restored_reg(&self) -> Option<Reg> {
        match self {
            UnwindCode::PushNonvol(r) | UnwindCode::SaveNonvol(r, _) => Some(*r),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        let ok = match *self {
            UnwindCode::AllocSmall(n) => n > 0 && n % 8 == 0 && n <= 128,
            UnwindCode::AllocLarge(n) => n % 8 == 0 && (136..=4096).contains(&n),
            UnwindCode::PushNonvol(r) => NONVOL.contains(&r),
            UnwindCode::SaveNonvol(r, off) => NONVOL.contains(&r) && off % 8 == 0 && off / 8 <= 0xFFFF,
            UnwindCode::NopPad => true,
        };
        if ok {
            Ok(())
        } else {
            Err(format!("invalid unwind code {}", self))
        }
    }

    /// Four-byte form: kind, then a three-byte payload.
    pub fn to_bytes(&self) -> [u8; 4] {
        match *self {
            UnwindCode::AllocSmall(n) => [1, (n / 8) as u8, 0, 0],
            UnwindCode::AllocLarge(n) => {
                let q = ((n / 8) as u16).to_le_bytes();
                [2, q[0], q[1], 0]
            }
            UnwindCode::PushNonvol(r) => [3, r, 0, 0],
            UnwindCode::SaveNonvol(r, off) => {
                let q = ((off / 8) as u16).to_le_bytes();
                [4, r, q[0], q[1]]
            }
            UnwindCode::NopPad => [5, 0, 0, 0],
        }
    }

    pub fn from_bytes(b: [u8; 4]) -> Result<UnwindCode, String> {
        let q = u16::from_le_bytes([b[1], b[2]]) as u32 * 8;
        let c = match b {
            [1, n, 0, 0] => UnwindCode::AllocSmall(n as u32 * 8),
            [2, _, _, 0] => UnwindCode::AllocLarge(q),
            [3, r, 0, 0] => UnwindCode::PushNonvol(r),
            [4, r, lo, hi] => UnwindCode::SaveNonvol(r, u16::from_le_bytes([lo, hi]) as u32 * 8),
            [5, 0, 0, 0] => UnwindCode::NopPad,
            _ => return Err(format!("bad unwind code bytes {}", hex::encode(b))),
        };
        c.validate()?;
        Ok(c)
    }
}

impl fmt::Display for UnwindCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            UnwindCode::AllocSmall(n) => write!(f, "ALLOC_SMALL({:#x})", n),
            UnwindCode::AllocLarge(n) => write!(f, "ALLOC_LARGE({:#x})", n),
            UnwindCode::PushNonvol(r) => write!(f, "PUSH_NONVOL({})", reg_name(*r)),
            UnwindCode::SaveNonvol(r, off) => write!(f, "SAVE_NONVOL({}, {:#x})", reg_name(*r), off),
            UnwindCode::NopPad => f.write_str("NOP_PAD"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IpState {
    pub start: u64,
    /// Exclusive.
    pub end: u64,
    pub state: i32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnwindEntry {
    pub parent: i32,
    /// Function id of the destructor thunk.
    pub dtor: Option<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CatchClause {
    pub type_id: u64,
    pub target: u64,
    pub state: i32,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TryBlock {
    pub low: i32,
    pub high: i32,
    pub catches: Vec<CatchClause>,
}

impl TryBlock {
    pub fn covers(&self, state: i32) -> bool {
        self.low <= state && state <= self.high
    }
}

/// Local-unwind state machine of one function.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LsData {
    pub ip_map: Vec<IpState>,
    /// Indexed by state.
    pub unwind_map: Vec<UnwindEntry>,
    pub try_blocks: Vec<TryBlock>,
}

impl LsData {
    pub fn state_count(&self) -> usize {
        self.unwind_map.len()
    }

    pub fn validate(&self, range: &FunctionRange) -> Result<(), EhError> {
        let n = self.unwind_map.len() as i32;
        let bad = |m: String| Err(EhError::MalformedLsData(m));
        let state_ok = |s: i32| (-1..n).contains(&s);
        for (s, e) in self.unwind_map.iter().enumerate() {
            if !state_ok(e.parent) {
                return bad(format!("state {} has parent {} out of range", s, e.parent));
            }
            let mut cur = e.parent;
            for _ in 0..=n {
                if cur < 0 {
                    break;
                }
                cur = self.unwind_map[cur as usize].parent;
            }
            if cur >= 0 {
                return bad(format!("parent chain of state {} is cyclic", s));
            }
        }
        let mut ranges: Vec<_> = self.ip_map.iter().collect();
        ranges.sort_by_key(|r| r.start);
        for r in &ranges {
            if r.start >= r.end || r.start < range.start || r.end > range.end {
                return bad(format!("ip range {:#x}..{:#x} outside function", r.start, r.end));
            }
            if !state_ok(r.state) {
                return bad(format!("ip range {:#x} maps to unknown state {}", r.start, r.state));
            }
        }
        if ranges.windows(2).any(|w| w[0].end > w[1].start) {
            return bad("overlapping ip ranges".into());
        }
        for t in &self.try_blocks {
            if t.low > t.high || !state_ok(t.low) || !state_ok(t.high) {
                return bad(format!("try block [{}, {}] out of range", t.low, t.high));
            }
            for c in &t.catches {
                if !state_ok(c.state) || !range.contains(c.target) {
                    return bad(format!("catch target {:#x} or state {} out of range", c.target, c.state));
                }
            }
        }
        Ok(())
    }
}

/// Exception type hierarchy: type id → parent id (0 for roots).
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TypeTable {
    pub parents: BTreeMap<u64, u64>,
}

impl TypeTable {
    pub fn new(pairs: &[(u64, u64)]) -> Self {
        TypeTable { parents: pairs.iter().copied().collect() }
    }
}

/// True iff `catch` is `thrown` or one of its ancestors.
pub fn match_type(thrown: u64, catch: u64, types: &TypeTable) -> Result<bool, EhError> {
    for t in [thrown, catch] {
        if !types.parents.contains_key(&t) {
            return Err(EhError::UnknownType(t));
        }
    }
    let mut t = thrown;
    for _ in 0..=types.parents.len() {
        if t == catch {
            return Ok(true);
        }
        match types.parents.get(&t) {
            Some(0) | None => return Ok(false),
            Some(p) => t = *p,
        }
    }
    Err(EhError::MalformedMetadata("cyclic type table".into()))
}

/// Unwind metadata of one function.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnwindInfo {
    pub range: FunctionRange,
    /// In application order: the reverse of the prologue.
    pub codes: Vec<UnwindCode>,
    /// LSHandler address, 0 for none.
    pub handler: u64,
    pub lsd: Option<LsData>,
}

impl UnwindInfo {
    pub fn validate(&self) -> Result<(), EhError> {
        for c in &self.codes {
            c.validate().map_err(EhError::MalformedMetadata)?;
        }
        if self.codes.len() > 255 {
            return Err(EhError::MalformedMetadata("too many unwind codes".into()));
        }
        if (self.handler != 0) != self.lsd.is_some() {
            return Err(EhError::MalformedMetadata("LSData present without handler or vice versa".into()));
        }
        if let Some(l) = &self.lsd {
            l.validate(&self.range)?;
        }
        Ok(())
    }
}

/// State being rewritten by the unwinder, separate from the live state.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextRecord {
    pub state: MachineState,
    pub frame_base: u64,
}

impl ContextRecord {
    pub fn new(state: MachineState) -> Self {
        ContextRecord { frame_base: state.rsp(), state }
    }
}

pub fn apply_unwind_code(rec: &ContextRecord, code: &UnwindCode, mem: &Memory) -> Result<ContextRecord, Fault> {
    let mut r = *rec;
    let rsp = r.state.rsp();
    match *code {
        UnwindCode::AllocSmall(n) | UnwindCode::AllocLarge(n) => r.state.set_rsp(rsp.wrapping_add(n as u64)),
        UnwindCode::PushNonvol(reg) => {
            r.state.gpr[reg as usize] = mem.read_u64(rsp)?;
            r.state.set_rsp(rsp.wrapping_add(8));
        }
        UnwindCode::SaveNonvol(reg, off) => {
            r.state.gpr[reg as usize] = mem.read_u64(r.frame_base.wrapping_add(off as u64))?;
        }
        UnwindCode::NopPad => {}
    }
    Ok(r)
}

/// Apply every code, then pop the return address.
pub fn unwind_frame(rec: &ContextRecord, codes: &[UnwindCode], mem: &Memory) -> Result<ContextRecord, Fault> {
    let mut r = *rec;
    r.frame_base = r.state.rsp();
    for c in codes {
        r = apply_unwind_code(&r, c, mem)?;
    }
    let rsp = r.state.rsp();
    r.state.rip = mem.read_u64(rsp)?;
    r.state.set_rsp(rsp.wrapping_add(8));
    r.frame_base = r.state.rsp();
    Ok(r)
}

/// State covering `pc`, or -1.
pub fn state_for_pc(lsd: &LsData, pc: u64) -> i32 {
    lsd.ip_map.iter().find(|r| r.start <= pc && pc < r.end).map(|r| r.state).unwrap_or(-1)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum UnwindPlan {
    CatchFound { target: u64, state: i32, type_id: u64, dtors: Vec<u64> },
    NoCatch { dtors: Vec<u64> },
}

impl UnwindPlan {
    pub fn dtors(&self) -> &[u64] {
        match self {
            UnwindPlan::CatchFound { dtors, .. } | UnwindPlan::NoCatch { dtors } => dtors,
        }
    }
}

/// Walk the parent chain from `from`, collecting destructors until a try
/// block covering the current state has a matching catch.
pub fn plan_actions(lsd: &LsData, from: i32, exc_type: u64, types: &TypeTable) -> Result<UnwindPlan, EhError> {
    let mut dtors = vec![];
    let mut seen = BTreeSet::new();
    let mut cur = from;
    while cur >= 0 {
        if !seen.insert(cur) {
            return Err(EhError::MalformedLsData(format!("cycle through state {}", cur)));
        }
        for t in lsd.try_blocks.iter().filter(|t| t.covers(cur)) {
            for c in &t.catches {
                if match_type(exc_type, c.type_id, types)? {
                    return Ok(UnwindPlan::CatchFound { target: c.target, state: c.state, type_id: c.type_id, dtors });
                }
            }
        }
        let e = lsd
            .unwind_map
            .get(cur as usize)
            .ok_or_else(|| EhError::MalformedLsData(format!("state {} out of range", cur)))?;
        if let Some(d) = e.dtor {
            dtors.push(d);
        }
        cur = e.parent;
    }
    Ok(UnwindPlan::NoCatch { dtors })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::isa::RSP;

    fn mem_with(addr: u64, vals: &[u64]) -> Memory {
        let mut m = Memory::new();
        m.map(addr, 0x1000);
        for (i, v) in vals.iter().enumerate() {
            m.write_u64(addr + 8 * i as u64, *v).unwrap();
        }
        m
    }

    fn rec(rsp: u64) -> ContextRecord {
        ContextRecord::new(MachineState::new(0, rsp))
    }

    #[test]
    fn alloc_adds_back() {
        let r = apply_unwind_code(&rec(0x1000), &UnwindCode::AllocSmall(0x78), &Memory::new()).unwrap();
        assert_eq!(r.state.rsp(), 0x1078);
    }

    #[test]
    fn nop_and_push() {
        let m = mem_with(0x1000, &[0x55]);
        let r0 = rec(0x1000);
        assert_eq!(apply_unwind_code(&r0, &UnwindCode::NopPad, &m).unwrap(), r0);
        let r = apply_unwind_code(&r0, &UnwindCode::PushNonvol(RBX), &m).unwrap();
        assert_eq!((r.state.gpr[RBX as usize], r.state.rsp()), (0x55, 0x1008));
    }

    #[test]
    fn unmapped_stack_faults() {
        let e = apply_unwind_code(&rec(0x9000), &UnwindCode::PushNonvol(RBX), &Memory::new());
        assert_eq!(e, Err(Fault { addr: 0x9000, write: false }));
    }

    #[test]
    fn frame_unwind() {
        let mut vals = vec![0u64; 4];
        vals.push(0x1500);
        let m = mem_with(0x2000, &vals);
        let r = unwind_frame(&rec(0x2000), &[UnwindCode::AllocSmall(0x20)], &m).unwrap();
        assert_eq!((r.state.rip, r.state.gpr[RSP as usize]), (0x1500, 0x2028));
        let r = unwind_frame(&rec(0x2020), &[], &m).unwrap();
        assert_eq!((r.state.rip, r.state.rsp()), (0x1500, 0x2028));
    }

    #[test]
    fn save_nonvol_reads_frame_base() {
        let m = mem_with(0x2000, &[0, 0, 0x77, 0, 0x1234]);
        let r = unwind_frame(&rec(0x2000), &[UnwindCode::SaveNonvol(R12, 0x10), UnwindCode::AllocSmall(0x20)], &m)
            .unwrap();
        assert_eq!((r.state.gpr[R12 as usize], r.state.rip), (0x77, 0x1234));
    }

    #[test]
    fn code_bytes_round_trip() {
        for c in [
            UnwindCode::AllocSmall(8),
            UnwindCode::AllocSmall(128),
            UnwindCode::AllocLarge(136),
            UnwindCode::AllocLarge(4096),
            UnwindCode::PushNonvol(R15),
            UnwindCode::SaveNonvol(RBX, 0x1F8),
            UnwindCode::NopPad,
        ] {
            assert_eq!(UnwindCode::from_bytes(c.to_bytes()), Ok(c));
        }
        assert!(UnwindCode::from_bytes([3, 5, 0, 0]).is_err()); // RBP
        assert!(UnwindCode::from_bytes([1, 0, 0, 0]).is_err());
    }

    fn chain() -> LsData {
        LsData {
            ip_map: vec![
                IpState { start: 0x10, end: 0x20, state: 0 },
                IpState { start: 0x20, end: 0x30, state: 2 },
            ],
            unwind_map: vec![
                UnwindEntry { parent: -1, dtor: None },
                UnwindEntry { parent: 0, dtor: Some(0xB) },
                UnwindEntry { parent: 1, dtor: Some(0xA) },
            ],
            try_blocks: vec![],
        }
    }

    #[test]
    fn state_lookup() {
        let l = chain();
        assert_eq!(state_for_pc(&l, 0x25), 2);
        assert_eq!(state_for_pc(&l, 0x5), -1);
        assert_eq!(state_for_pc(&l, 0x20), 2);
        assert_eq!(state_for_pc(&l, 0x30), -1);
    }

    #[test]
    fn plan_without_catch() {
        let types = TypeTable::new(&[(1, 0)]);
        let p = plan_actions(&chain(), 2, 1, &types).unwrap();
        assert_eq!(p, UnwindPlan::NoCatch { dtors: vec![0xA, 0xB] });
    }

    #[test]
    fn plan_with_catch() {
        let types = TypeTable::new(&[(1, 0), (2, 0)]);
        let mut l = chain();
        l.try_blocks.push(TryBlock {
            low: 0,
            high: 2,
            catches: vec![CatchClause { type_id: 1, target: 0x28, state: 0 }],
        });
        let p = plan_actions(&l, 2, 1, &types).unwrap();
        assert_eq!(p, UnwindPlan::CatchFound { target: 0x28, state: 0, type_id: 1, dtors: vec![] });
        // unrelated type falls through to the full chain
        assert_eq!(plan_actions(&l, 2, 2, &types).unwrap(), UnwindPlan::NoCatch { dtors: vec![0xA, 0xB] });
    }

    #[test]
    fn cyclic_chain_is_rejected() {
        let mut l = chain();
        l.unwind_map[0].parent = 2;
        let types = TypeTable::new(&[(1, 0)]);
        assert!(matches!(plan_actions(&l, 2, 1, &types), Err(EhError::MalformedLsData(_))));
        assert!(l.validate(&FunctionRange::new(1, 0, 0x100)).is_err());
    }

    #[test]
    fn type_matching() {
        let t = TypeTable::new(&[(3, 0), (5, 3), (6, 3)]);
        assert_eq!(match_type(5, 5, &t), Ok(true));
        assert_eq!(match_type(5, 3, &t), Ok(true));
        assert_eq!(match_type(5, 6, &t), Ok(false));
        assert_eq!(match_type(3, 5, &t), Ok(false));
        assert_eq!(match_type(9, 5, &t), Err(EhError::UnknownType(9)));
    }
}
