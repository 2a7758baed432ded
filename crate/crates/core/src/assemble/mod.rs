//! Handler selection, lowering of VMIR into threaded bytecode cells, and the
//! protected container.

mod container;
mod crypt;

pub use container::{
    assemble_module, describe_layout, parse_module, section_table, FunctionEntry, ModuleError, ModuleInputs, PlainMetadata, ProtectedModule,
    FLAG_EH_PROTECTED, MAGIC, VERSION,
};
pub use crypt::{crypt_stream, crypt_window};

use crate::isa::{MemOperand, Width};
use crate::vmir::{ArgKind, Label, VArg, VOp, VmirFunction, VmirInst};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use thiserror::Error;

pub const CELL_SIZE: usize = 30;
/// Next-link of cells without a sequential successor.
pub const SENTINEL: u32 = 0xFFFF_FFFF;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LowerError {
    #[error("no handler for {op}.{width}")]
    MissingHandler { op: VOp, width: Width },
    #[error("operand does not fit its slot: {0}")]
    BadOperand(String),
}

/// Slot-kind code used in layout descriptors.
pub fn kind_code(k: ArgKind) -> u8 {
    match k {
        ArgKind::V => 1,
        ArgKind::G => 2,
        ArgKind::I => 3,
        ArgKind::L => 4,
        ArgKind::E => 5,
        ArgKind::T => 6,
        ArgKind::B => 7,
    }
}

pub fn layout_of(op: VOp) -> [u8; 3] {
    let mut l = [0u8; 3];
    for (i, k) in op.signature().iter().enumerate() {
        l[i] = kind_code(*k);
    }
    l
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HandlerDesc {
    pub id: u16,
    pub op: VOp,
    pub width: Width,
    pub layout: [u8; 3],
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct HandlerTable {
    pub entries: Vec<HandlerDesc>,
}

impl HandlerTable {
    pub fn from_keys(keys: &BTreeSet<(VOp, Width)>) -> Self {
        let entries = keys
            .iter()
            .enumerate()
            .map(|(i, (op, w))| HandlerDesc { id: i as u16, op: *op, width: *w, layout: layout_of(*op) })
            .collect();
        HandlerTable { entries }
    }

    pub fn id_of(&self, op: VOp, width: Width) -> Option<u16> {
        self.entries.iter().find(|d| d.op == op && d.width == width).map(|d| d.id)
    }

    pub fn get(&self, id: u16) -> Option<&HandlerDesc> {
        self.entries.get(id as usize).filter(|d| d.id == id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn keys(&self) -> BTreeSet<(VOp, Width)> {
        self.entries.iter().map(|d| (d.op, d.width)).collect()
    }

    pub fn check(&self) -> Result<(), String> {
        let mut seen = BTreeSet::new();
        for (i, d) in self.entries.iter().enumerate() {
            if d.id as usize != i {
                return Err(format!("handler ids not dense at {}", i));
            }
            if !seen.insert((d.op, d.width)) {
                return Err(format!("duplicate handler {}.{}", d.op, d.width));
            }
            if d.layout != layout_of(d.op) {
                return Err(format!("layout of {} does not match its operands", d.op));
            }
        }
        Ok(())
    }
}

/// The pair every table carries: native fallback and VM exit.
pub fn mandatory_handlers() -> [(VOp, Width); 2] {
    [(VOp::VNATIVE, Width::W64), (VOp::VEXIT, Width::W64)]
}

/// Exactly the (op, width) pairs used, plus the mandatory pair.
pub fn select_handlers(functions: &[VmirFunction]) -> HandlerTable {
    let mut keys: BTreeSet<(VOp, Width)> = functions.iter().flat_map(|f| f.handler_keys()).collect();
    keys.extend(mandatory_handlers());
    HandlerTable::from_keys(&keys)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cell {
    pub handler: u16,
    pub words: [u64; 3],
    pub next: u32,
}

impl Cell {
    pub fn to_bytes(&self) -> [u8; CELL_SIZE] {
        let mut b = [0u8; CELL_SIZE];
        b[..2].copy_from_slice(&self.handler.to_le_bytes());
        for (i, w) in self.words.iter().enumerate() {
            b[2 + 8 * i..10 + 8 * i].copy_from_slice(&w.to_le_bytes());
        }
        b[26..].copy_from_slice(&self.next.to_le_bytes());
        b
    }

    pub fn from_bytes(b: &[u8]) -> Cell {
        let w = |i: usize| u64::from_le_bytes(b[2 + 8 * i..10 + 8 * i].try_into().unwrap());
        Cell {
            handler: u16::from_le_bytes([b[0], b[1]]),
            words: [w(0), w(1), w(2)],
            next: u32::from_le_bytes(b[26..30].try_into().unwrap()),
        }
    }
}

const NO_REG: u64 = 0xFF;

pub fn pack_ea(m: &MemOperand) -> u64 {
    let base = m.base.map_or(NO_REG, |r| r as u64);
    let (idx, scale) = m.index.map_or((NO_REG, 0), |(r, s)| (r as u64, s as u64));
    (m.disp as u32 as u64) | base << 32 | idx << 40 | scale << 48
}

pub fn unpack_ea(w: u64) -> Option<MemOperand> {
    if w >> 56 != 0 {
        return None;
    }
    let reg = |v: u64| if v == NO_REG { Ok(None) } else if v < 16 { Ok(Some(v as u8)) } else { Err(()) };
    let base = reg((w >> 32) & 0xFF).ok()?;
    let idx = reg((w >> 40) & 0xFF).ok()?;
    let scale = ((w >> 48) & 0xFF) as u8;
    let index = match idx {
        Some(r) => Some((r, scale)),
        None if scale == 0 => None,
        None => return None,
    };
    let m = MemOperand { base, index, disp: w as u32 as i32 };
    m.is_valid().then_some(m)
}

fn pack_args(inst: &VmirInst, labels: &BTreeMap<Label, u32>) -> Result<[u64; 3], LowerError> {
    let mut words = [0u64; 3];
    let mut w = 0;
    for a in &inst.args {
        match a {
            VArg::V(v) => words[w] = *v as u64,
            VArg::G(r) => words[w] = *r as u64,
            VArg::Imm(i) => words[w] = *i as u64,
            VArg::Label(l) => {
                words[w] = *labels.get(l).ok_or_else(|| LowerError::BadOperand(format!("label {}", l)))? as u64
            }
            VArg::Ea(m) => words[w] = pack_ea(m),
            VArg::Bytes(b) => {
                let mut buf = [0u8; 16];
                buf[..b.len()].copy_from_slice(b);
                buf[15] = b.len() as u8;
                words[w] = u64::from_le_bytes(buf[..8].try_into().unwrap());
                words[w + 1] = u64::from_le_bytes(buf[8..].try_into().unwrap());
                w += 1;
            }
        }
        // exit targets carry a mode word
        if matches!(inst.op, VOp::VCALL | VOp::VEXIT) && w == 0 {
            let (mode, v) = match a {
                VArg::V(v) => (1, *v as u64),
                VArg::Imm(i) => (0, *i as u64),
                _ => unreachable!("checked by signature"),
            };
            words[0] = mode;
            words[1] = v;
            w += 1;
        }
        w += 1;
    }
    Ok(words)
}

/// Inverse of the operand packing, with labels rendered as cell indices.
pub fn unpack_args(op: VOp, words: &[u64; 3]) -> Option<Vec<VArg>> {
    let mut out = vec![];
    let mut w = 0;
    for k in op.signature() {
        let x = *words.get(w)?;
        out.push(match k {
            ArgKind::V => VArg::V(u8::try_from(x).ok().filter(|v| *v < crate::vmir::VREGS)?),
            ArgKind::G => VArg::G(u8::try_from(x).ok().filter(|r| *r < 16)?),
            ArgKind::I => VArg::Imm(x as i64),
            ArgKind::L => VArg::Label(u32::try_from(x).ok()? as Label),
            ArgKind::E => VArg::Ea(unpack_ea(x)?),
            ArgKind::T => {
                w += 1;
                let v = *words.get(w)?;
                match x {
                    0 => VArg::Imm(v as i64),
                    1 => VArg::V(u8::try_from(v).ok().filter(|v| *v < crate::vmir::VREGS)?),
                    _ => return None,
                }
            }
            ArgKind::B => {
                w += 1;
                let mut buf = [0u8; 16];
                buf[..8].copy_from_slice(&x.to_le_bytes());
                buf[8..].copy_from_slice(&words.get(w)?.to_le_bytes());
                let n = buf[15] as usize;
                if n == 0 || n > 15 || buf[n..15].iter().any(|b| *b != 0) {
                    return None;
                }
                VArg::Bytes(buf[..n].to_vec())
            }
        });
        w += 1;
    }
    if words[w.min(3)..].iter().any(|x| *x != 0) {
        return None;
    }
    Some(out)
}

/// Bytecode of one function with function-local cell indices.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoweredFunction {
    pub cells: Vec<Cell>,
    pub entry: u32,
    /// Native pcs at which execution may re-enter the VM: call
    /// continuations and landing pads.
    pub reentry: Vec<(u64, u32)>,
}

pub fn lower_to_bytecode(f: &VmirFunction, table: &HandlerTable, seed: u64) -> Result<LoweredFunction, LowerError> {
    let flat: Vec<(usize, usize)> =
        f.blocks.iter().enumerate().flat_map(|(b, blk)| (0..blk.insts.len()).map(move |i| (b, i))).collect();
    let n = flat.len();
    let mut perm: Vec<u32> = (0..n as u32).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let mut first = BTreeMap::new();
    let mut k = 0;
    for b in &f.blocks {
        first.insert(b.label, perm[k]);
        k += b.insts.len();
    }

    let mut cells = vec![Cell { handler: 0, words: [0; 3], next: SENTINEL }; n];
    let mut reentry = vec![];
    for (i, (b, j)) in flat.iter().enumerate() {
        let blk = &f.blocks[*b];
        let inst = &blk.insts[*j];
        let handler =
            table.id_of(inst.op, inst.width).ok_or(LowerError::MissingHandler { op: inst.op, width: inst.width })?;
        let last = j + 1 == blk.insts.len();
        let next = if last { SENTINEL } else { perm[i + 1] };
        if inst.op == VOp::VCALL && !last {
            if let VArg::Imm(ret) = inst.args[1] {
                reentry.push((ret as u64, next));
            }
        }
        cells[perm[i] as usize] = Cell { handler, words: pack_args(inst, &first)?, next };
    }
    let pcs = f.pc_labels();
    for r in &f.roots {
        if let Some(l) = pcs.get(r) {
            reentry.push((*r, first[l]));
        }
    }
    reentry.sort_unstable();
    reentry.dedup();
    Ok(LoweredFunction { cells, entry: first[&f.entry], reentry })
}

/// Shift cell indices by `base`.
pub(crate) fn relocate(cells: &mut [Cell], base: u32, table: &HandlerTable) {
    for c in cells {
        if c.next != SENTINEL {
            c.next += base;
        }
        let op = table.get(c.handler).expect("lowered against this table").op;
        let mut w = 0;
        for k in op.signature() {
            if *k == ArgKind::L {
                c.words[w] += base as u64;
            }
            w += if matches!(k, ArgKind::T | ArgKind::B) { 2 } else { 1 };
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cfg::FunctionRange;
    use crate::isa::RAX;
    use crate::vmir::{ExitKind, VmirBlock};

    fn inst(op: VOp, args: Vec<VArg>) -> VmirInst {
        VmirInst::new(op, Width::W64, args)
    }

    fn straight() -> VmirFunction {
        VmirFunction {
            range: FunctionRange::new(1, 0x1000, 0x1010),
            entry: 0x1000,
            blocks: vec![VmirBlock {
                label: 0x1000,
                pc: Some(0x1000),
                insts: vec![
                    inst(VOp::VLIMM, vec![VArg::V(0), VArg::Imm(5)]),
                    inst(VOp::VSTORER, vec![VArg::G(RAX), VArg::V(0)]),
                    inst(VOp::VRET, vec![VArg::Imm(0)]),
                ],
                exit: ExitKind::Return,
            }],
            roots: vec![],
        }
    }

    #[test]
    fn minimal_tables() {
        let t = select_handlers(&[straight()]);
        let ops: Vec<VOp> = t.entries.iter().map(|d| d.op).collect();
        assert_eq!(ops, vec![VOp::VLIMM, VOp::VSTORER, VOp::VRET, VOp::VNATIVE, VOp::VEXIT]);
        assert!(t.check().is_ok());
        let empty = select_handlers(&[]);
        assert_eq!(empty.keys(), mandatory_handlers().into_iter().collect());
        assert_eq!(select_handlers(&[straight(), straight()]), t);
    }

    #[test]
    fn straight_line_chain() {
        let f = straight();
        let t = select_handlers(&[f.clone()]);
        let l = lower_to_bytecode(&f, &t, 3).unwrap();
        assert_eq!(l.cells.len(), 3);
        let mut at = l.entry;
        let mut seen = vec![];
        while at != SENTINEL {
            seen.push(t.get(l.cells[at as usize].handler).unwrap().op);
            at = l.cells[at as usize].next;
        }
        assert_eq!(seen, vec![VOp::VLIMM, VOp::VSTORER, VOp::VRET]);
    }

    #[test]
    fn branch_operands_are_cells() {
        let mut f = straight();
        f.blocks[0].insts.pop();
        f.blocks[0].insts.push(inst(VOp::VJCC, vec![VArg::Imm(4), VArg::Label(0x1008), VArg::Label(0x1000)]));
        f.blocks.push(VmirBlock {
            label: 0x1008,
            pc: Some(0x1008),
            insts: vec![inst(VOp::VRET, vec![VArg::Imm(0)])],
            exit: ExitKind::Return,
        });
        let t = select_handlers(&[f.clone()]);
        let l = lower_to_bytecode(&f, &t, 11).unwrap();
        let jcc = l.cells.iter().find(|c| t.get(c.handler).unwrap().op == VOp::VJCC).unwrap();
        let ret = l.cells.iter().position(|c| t.get(c.handler).unwrap().op == VOp::VRET).unwrap();
        assert_eq!(jcc.words, [4, ret as u64, l.entry as u64]);
        assert_eq!(jcc.next, SENTINEL);
    }

    #[test]
    fn missing_handler() {
        let t = HandlerTable::from_keys(&mandatory_handlers().into_iter().collect());
        assert!(matches!(lower_to_bytecode(&straight(), &t, 0), Err(LowerError::MissingHandler { .. })));
    }

    #[test]
    fn operand_packing_round_trips() {
        let m = MemOperand { base: Some(3), index: Some((1, 8)), disp: -0x1000 };
        assert_eq!(unpack_ea(pack_ea(&m)), Some(m));
        let cases = vec![
            inst(VOp::VEA, vec![VArg::V(2), VArg::Ea(m)]),
            inst(VOp::VCALL, vec![VArg::V(1), VArg::Imm(0x1234)]),
            inst(VOp::VEXIT, vec![VArg::Imm(-16)]),
            inst(VOp::VNATIVE, vec![VArg::Bytes(vec![0x48, 0x0F, 0xC8]), VArg::Imm(0x1000 | 3 << 56)]),
        ];
        for c in cases {
            let w = pack_args(&c, &BTreeMap::new()).unwrap();
            assert_eq!(unpack_args(c.op, &w), Some(c.args.clone()), "{}", c);
        }
    }
}
