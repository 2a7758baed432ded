//! The x86-64 subset: instruction model, byte-level decoder and encoder,
//! flag tables and the single-step reference interpreter.
//!
//! The subset covers 42 opcode kinds at operand widths 8, 32 and 64. Every
//! other encoding is rejected by the decoder as [`DecodeError::UnknownEncoding`].

mod alu;
mod decode;
mod encode;
mod oracle;

pub use alu::{cond_holds, Flags};
pub use decode::{decode, DecodeError};
pub use encode::{encode, EncodeError};
pub use oracle::{execute, oracle_step, ExecError};
pub(crate) use oracle::effective_address;

pub(crate) use alu::Alu;

use serde::{Deserialize, Serialize};
use std::fmt;

/// General purpose register id, RAX..R15 order.
pub type Reg = u8;

pub const RAX: Reg = 0;
pub const RCX: Reg = 1;
pub const RDX: Reg = 2;
pub const RBX: Reg = 3;
pub const RSP: Reg = 4;
pub const RBP: Reg = 5;
pub const RSI: Reg = 6;
pub const RDI: Reg = 7;
pub const R8: Reg = 8;
pub const R9: Reg = 9;
pub const R10: Reg = 10;
pub const R11: Reg = 11;
pub const R12: Reg = 12;
pub const R13: Reg = 13;
pub const R14: Reg = 14;
pub const R15: Reg = 15;

pub const REG_NAMES: [&str; 16] = [
    "RAX", "RCX", "RDX", "RBX", "RSP", "RBP", "RSI", "RDI", "R8", "R9", "R10", "R11", "R12",
    "R13", "R14", "R15",
];

pub fn reg_name(r: Reg) -> &'static str {
    REG_NAMES.get(r as usize).copied().unwrap_or("R?")
}

pub fn reg_from_name(name: &str) -> Option<Reg> {
    let upper = name.to_ascii_uppercase();
    REG_NAMES.iter().position(|n| *n == upper).map(|i| i as Reg)
}

/// Operand width.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Width {
    W8,
    W32,
    W64,
}

impl Width {
    pub const ALL: [Width; 3] = [Width::W8, Width::W32, Width::W64];

    pub fn bits(self) -> u32 {
        match self {
            Width::W8 => 8,
            Width::W32 => 32,
            Width::W64 => 64,
        }
    }

    pub fn bytes(self) -> usize {
        (self.bits() / 8) as usize
    }

    pub fn mask(self) -> u64 {
        match self {
            Width::W8 => 0xFF,
            Width::W32 => 0xFFFF_FFFF,
            Width::W64 => u64::MAX,
        }
    }

    pub fn sign_bit(self) -> u64 {
        1u64 << (self.bits() - 1)
    }

    /// Sign-extend the low `self` bits of `v` to 64 bits.
    pub fn sext(self, v: u64) -> u64 {
        match self {
            Width::W8 => v as u8 as i8 as i64 as u64,
            Width::W32 => v as u32 as i32 as i64 as u64,
            Width::W64 => v,
        }
    }

    pub fn from_bits(bits: u32) -> Option<Width> {
        match bits {
            8 => Some(Width::W8),
            32 => Some(Width::W32),
            64 => Some(Width::W64),
            _ => None,
        }
    }
}

impl fmt::Display for Width {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.bits())
    }
}

macro_rules! opcodes {
    ($($name:ident),* $(,)?) => {
        /// The 42 opcode kinds of the subset.
        #[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        pub enum Opcode { $($name),* }

        impl Opcode {
            pub const ALL: &'static [Opcode] = &[$(Opcode::$name),*];

            pub fn name(self) -> &'static str {
                match self { $(Opcode::$name => stringify!($name)),* }
            }

            pub fn from_name(s: &str) -> Option<Opcode> {
                match s { $(stringify!($name) => Some(Opcode::$name),)* _ => None }
            }
        }
    };
}

opcodes!(
    MOV, MOVZX, MOVSX, LEA, XCHG, ADD, ADC, SUB, SBB, CMP, TEST, AND, OR, XOR, NOT, NEG, INC, DEC,
    SHL, SHR, SAR, ROL, ROR, IMUL, MUL, DIV, IDIV, CDQ, CQO, PUSH, POP, CALL, RET, JMP, JCC, SETCC,
    CMOVCC, NOP, INT3, LEAVE, BSWAP, BT,
);

impl fmt::Display for Opcode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Condition code, in hardware encoding order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Cond(pub u8);

const COND_NAMES: [&str; 16] = [
    "O", "NO", "B", "AE", "E", "NE", "BE", "A", "S", "NS", "P", "NP", "L", "GE", "LE", "G",
];

impl Cond {
    pub fn name(self) -> &'static str {
        COND_NAMES[(self.0 & 15) as usize]
    }
}

/// Memory addressing form: `[base + index*scale + disp]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MemOperand {
    pub base: Option<Reg>,
    /// Index register and scale (1, 2, 4 or 8).
    pub index: Option<(Reg, u8)>,
    pub disp: i32,
}

impl MemOperand {
    pub fn base_disp(base: Reg, disp: i32) -> Self {
        MemOperand { base: Some(base), index: None, disp }
    }

    pub fn absolute(addr: i32) -> Self {
        MemOperand { base: None, index: None, disp: addr }
    }

    pub fn is_valid(&self) -> bool {
        match self.index {
            Some((idx, scale)) => idx != RSP && matches!(scale, 1 | 2 | 4 | 8) && idx < 16,
            None => true,
        }
    }
}

impl fmt::Display for MemOperand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[")?;
        let mut first = true;
        if let Some(b) = self.base {
            write!(f, "{}", reg_name(b))?;
            first = false;
        }
        if let Some((i, s)) = self.index {
            if !first {
                write!(f, "+")?;
            }
            write!(f, "{}*{}", reg_name(i), s)?;
            first = false;
        }
        if first {
            write!(f, "{:#x}", self.disp)?;
        } else if self.disp < 0 {
            write!(f, "-{:#x}", (self.disp as i64).unsigned_abs())?;
        } else if self.disp > 0 {
            write!(f, "+{:#x}", self.disp)?;
        }
        write!(f, "]")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Operand {
    Reg(Reg),
    /// Immediate, already extended to 64 bits the way the instruction consumes it.
    /// Relative branch displacements are also carried here.
    Imm(i64),
    Mem(MemOperand),
}

impl Operand {
    pub fn shape_char(&self) -> char {
        match self {
            Operand::Reg(_) => 'r',
            Operand::Imm(_) => 'i',
            Operand::Mem(_) => 'm',
        }
    }

    pub fn reg(&self) -> Option<Reg> {
        match self {
            Operand::Reg(r) => Some(*r),
            _ => None,
        }
    }

    pub fn imm(&self) -> Option<i64> {
        match self {
            Operand::Imm(v) => Some(*v),
            _ => None,
        }
    }

    pub fn mem(&self) -> Option<&MemOperand> {
        match self {
            Operand::Mem(m) => Some(m),
            _ => None,
        }
    }
}

impl fmt::Display for Operand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Operand::Reg(r) => f.write_str(reg_name(*r)),
            Operand::Imm(v) => write!(f, "{:#x}", v),
            Operand::Mem(m) => write!(f, "{}", m),
        }
    }
}

/// A decoded instruction of the subset.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Instruction {
    pub opcode: Opcode,
    pub width: Width,
    pub operands: Vec<Operand>,
    /// Encoded length in bytes, `1..=15`. Zero for instructions built by hand
    /// and not yet encoded.
    pub len: u8,
    pub cond: Option<Cond>,
    /// Source width of widening moves (MOVZX/MOVSX).
    pub src_width: Option<Width>,
}

impl Instruction {
    pub fn new(opcode: Opcode, width: Width, operands: Vec<Operand>) -> Self {
        Instruction { opcode, width, operands, len: 0, cond: None, src_width: None }
    }

    pub fn with_cond(mut self, cc: u8) -> Self {
        self.cond = Some(Cond(cc & 15));
        self
    }

    pub fn with_src_width(mut self, w: Width) -> Self {
        self.src_width = Some(w);
        self
    }

    /// Operand-shape signature such as `rr`, `mi` or `none`.
    pub fn shape(&self) -> Shape {
        Shape::of(&self.operands)
    }

    pub fn form(&self) -> Form {
        Form { opcode: self.opcode, shape: self.shape(), width: self.width }
    }

    pub fn mem_operand(&self) -> Option<&MemOperand> {
        self.operands.iter().find_map(|o| o.mem())
    }

    /// Field-wise equality ignoring the encoded length.
    pub fn same_semantics(&self, other: &Instruction) -> bool {
        self.opcode == other.opcode
            && self.width == other.width
            && self.operands == other.operands
            && self.cond == other.cond
            && self.src_width == other.src_width
    }

    /// Checks operand arity, widths and addressing-form invariants.
    pub fn validate(&self) -> Result<(), String> {
        let form = self.form();
        if !legal_forms().contains(&form) {
            return Err(format!("illegal form {}", form));
        }
        for op in &self.operands {
            match op {
                Operand::Reg(r) if *r > 15 => return Err(format!("bad register {}", r)),
                Operand::Mem(m) if !m.is_valid() => return Err(format!("bad memory operand {}", m)),
                _ => {}
            }
        }
        let needs_cond = matches!(self.opcode, Opcode::JCC | Opcode::SETCC | Opcode::CMOVCC);
        if needs_cond != self.cond.is_some() {
            return Err("condition code mismatch".into());
        }
        let widening = matches!(self.opcode, Opcode::MOVZX | Opcode::MOVSX);
        if widening != self.src_width.is_some() {
            return Err("source width mismatch".into());
        }
        if let Some(sw) = self.src_width {
            let ok = match self.opcode {
                Opcode::MOVZX => sw == Width::W8,
                _ => sw == Width::W8 || (sw == Width::W32 && self.width == Width::W64),
            };
            if !ok {
                return Err("bad widening source".into());
            }
        }
        if self.opcode == Opcode::SHL
            || self.opcode == Opcode::SHR
            || self.opcode == Opcode::SAR
            || self.opcode == Opcode::ROL
            || self.opcode == Opcode::ROR
        {
            if let Some(Operand::Reg(r)) = self.operands.get(1) {
                if *r != RCX {
                    return Err("shift count register must be CL".into());
                }
            }
        }
        if self.len > 15 {
            return Err("instruction longer than 15 bytes".into());
        }
        Ok(())
    }
}

impl fmt::Display for Instruction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (self.opcode, self.cond) {
            (Opcode::JCC, Some(c)) => write!(f, "J{}", c.name())?,
            (Opcode::SETCC, Some(c)) => write!(f, "SET{}", c.name())?,
            (Opcode::CMOVCC, Some(c)) => write!(f, "CMOV{}", c.name())?,
            _ => write!(f, "{}", self.opcode)?,
        }
        write!(f, ".{}", self.width)?;
        for (i, op) in self.operands.iter().enumerate() {
            write!(f, "{}{}", if i == 0 { " " } else { ", " }, op)?;
        }
        Ok(())
    }
}

/// Operand-shape signature.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Shape([u8; 3], u8);

impl Shape {
    pub fn of(ops: &[Operand]) -> Shape {
        let mut s = [0u8; 3];
        for (i, o) in ops.iter().take(3).enumerate() {
            s[i] = o.shape_char() as u8;
        }
        Shape(s, ops.len().min(3) as u8)
    }

    pub fn parse(s: &str) -> Option<Shape> {
        if s == "none" {
            return Some(Shape([0; 3], 0));
        }
        if s.is_empty() || s.len() > 3 || !s.bytes().all(|b| matches!(b, b'r' | b'm' | b'i')) {
            return None;
        }
        let mut a = [0u8; 3];
        a[..s.len()].copy_from_slice(s.as_bytes());
        Some(Shape(a, s.len() as u8))
    }

    pub fn as_str(&self) -> String {
        if self.1 == 0 {
            "none".to_string()
        } else {
            self.0[..self.1 as usize].iter().map(|b| *b as char).collect()
        }
    }

    pub fn arity(&self) -> usize {
        self.1 as usize
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.as_str())
    }
}

/// (opcode, operand shape, width) triple: the key of a translation rule.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Form {
    pub opcode: Opcode,
    pub shape: Shape,
    pub width: Width,
}

impl fmt::Display for Form {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}.{}", self.opcode, self.shape, self.width)
    }
}

/// Every (opcode, shape, width) the decoder can produce.
pub fn legal_forms() -> &'static std::collections::BTreeSet<Form> {
    use std::sync::OnceLock;
    static FORMS: OnceLock<std::collections::BTreeSet<Form>> = OnceLock::new();
    FORMS.get_or_init(|| {
        use Opcode::*;
        const ALL: &[Width] = &[Width::W8, Width::W32, Width::W64];
        const WIDE: &[Width] = &[Width::W32, Width::W64];
        const Q: &[Width] = &[Width::W64];
        const D: &[Width] = &[Width::W32];
        const B: &[Width] = &[Width::W8];
        let table: &[(Opcode, &[&str], &[Width])] = &[
            (MOV, &["rr", "rm", "mr", "ri", "mi"], ALL),
            (MOVZX, &["rr", "rm"], WIDE),
            (MOVSX, &["rr", "rm"], WIDE),
            (LEA, &["rm"], WIDE),
            (XCHG, &["rr", "mr"], ALL),
            (ADD, &["rr", "rm", "mr", "ri", "mi"], ALL),
            (ADC, &["rr", "rm", "mr", "ri", "mi"], ALL),
            (SUB, &["rr", "rm", "mr", "ri", "mi"], ALL),
            (SBB, &["rr", "rm", "mr", "ri", "mi"], ALL),
            (CMP, &["rr", "rm", "mr", "ri", "mi"], ALL),
            (AND, &["rr", "rm", "mr", "ri", "mi"], ALL),
            (OR, &["rr", "rm", "mr", "ri", "mi"], ALL),
            (XOR, &["rr", "rm", "mr", "ri", "mi"], ALL),
            (TEST, &["rr", "mr", "ri", "mi"], ALL),
            (NOT, &["r", "m"], ALL),
            (NEG, &["r", "m"], ALL),
            (INC, &["r", "m"], ALL),
            (DEC, &["r", "m"], ALL),
            (SHL, &["ri", "mi", "rr", "mr"], ALL),
            (SHR, &["ri", "mi", "rr", "mr"], ALL),
            (SAR, &["ri", "mi", "rr", "mr"], ALL),
            (ROL, &["ri", "mi", "rr", "mr"], ALL),
            (ROR, &["ri", "mi", "rr", "mr"], ALL),
            (IMUL, &["r", "m"], ALL),
            (IMUL, &["rr", "rm", "rri", "rmi"], WIDE),
            (MUL, &["r", "m"], ALL),
            (DIV, &["r", "m"], ALL),
            (IDIV, &["r", "m"], ALL),
            (CDQ, &["none"], D),
            (CQO, &["none"], Q),
            (PUSH, &["r", "m", "i"], Q),
            (POP, &["r", "m"], Q),
            (CALL, &["i", "r", "m"], Q),
            (RET, &["none", "i"], Q),
            (JMP, &["i", "r", "m"], Q),
            (JCC, &["i"], Q),
            (SETCC, &["r", "m"], B),
            (CMOVCC, &["rr", "rm"], WIDE),
            (NOP, &["none"], D),
            (INT3, &["none"], Q),
            (LEAVE, &["none"], Q),
            (BSWAP, &["r"], WIDE),
            (BT, &["rr", "ri", "mi"], WIDE),
        ];
        let mut set = std::collections::BTreeSet::new();
        for (op, shapes, widths) in table {
            for s in *shapes {
                for w in *widths {
                    set.insert(Form { opcode: *op, shape: Shape::parse(s).unwrap(), width: *w });
                }
            }
        }
        set
    })
}

/// Control-flow classification of an instruction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BranchInfo {
    Fallthrough,
    DirectJump(u64),
    ConditionalBranch { taken: u64, fallthrough: u64 },
    IndirectJump,
    Call(Option<u64>),
    Return,
    Barrier,
}

impl BranchInfo {
    /// True when control never continues at the next instruction.
    pub fn ends_block(&self) -> bool {
        !matches!(self, BranchInfo::Fallthrough | BranchInfo::Call(_))
    }
}

/// Classify `instr` located at `pc`. Relative targets are `pc + len + disp`.
pub fn branch_info(instr: &Instruction, pc: u64) -> BranchInfo {
    let next = pc.wrapping_add(instr.len as u64);
    let rel = |i: &Instruction| i.operands.first().and_then(|o| o.imm()).unwrap_or(0);
    match instr.opcode {
        Opcode::JMP => match instr.operands.first() {
            Some(Operand::Imm(d)) => BranchInfo::DirectJump(next.wrapping_add(*d as u64)),
            _ => BranchInfo::IndirectJump,
        },
        Opcode::JCC => BranchInfo::ConditionalBranch {
            taken: next.wrapping_add(rel(instr) as u64),
            fallthrough: next,
        },
        Opcode::CALL => match instr.operands.first() {
            Some(Operand::Imm(d)) => BranchInfo::Call(Some(next.wrapping_add(*d as u64))),
            _ => BranchInfo::Call(None),
        },
        Opcode::RET => BranchInfo::Return,
        Opcode::INT3 => BranchInfo::Barrier,
        _ => BranchInfo::Fallthrough,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn opcode_count_is_42() {
        assert_eq!(Opcode::ALL.len(), 42);
        let covered: std::collections::BTreeSet<_> = legal_forms().iter().map(|f| f.opcode).collect();
        assert_eq!(covered.len(), 42);
    }

    #[test]
    fn branch_info_examples() {
        let mut jmp = Instruction::new(Opcode::JMP, Width::W64, vec![Operand::Imm(0x10)]);
        jmp.len = 5;
        assert_eq!(branch_info(&jmp, 0x1000), BranchInfo::DirectJump(0x1015));

        let mut jz = Instruction::new(Opcode::JCC, Width::W64, vec![Operand::Imm(2)]).with_cond(4);
        jz.len = 2;
        assert_eq!(
            branch_info(&jz, 0x2000),
            BranchInfo::ConditionalBranch { taken: 0x2004, fallthrough: 0x2002 }
        );

        let mut int3 = Instruction::new(Opcode::INT3, Width::W64, vec![]);
        int3.len = 1;
        assert_eq!(branch_info(&int3, 0x3000), BranchInfo::Barrier);
    }

    #[test]
    fn shape_parse_roundtrip() {
        for s in ["none", "r", "rm", "rmi", "mi"] {
            assert_eq!(Shape::parse(s).unwrap().as_str(), s);
        }
        assert!(Shape::parse("rx").is_none());
    }

    #[test]
    fn validate_rejects_bad_shapes() {
        let bad = Instruction::new(
            Opcode::ADD,
            Width::W64,
            vec![Operand::Mem(MemOperand::absolute(0x1000)), Operand::Mem(MemOperand::absolute(0x1008))],
        );
        assert!(bad.validate().is_err());
        let rsp_index = MemOperand { base: Some(RAX), index: Some((RSP, 2)), disp: 0 };
        assert!(!rsp_index.is_valid());
    }
}
