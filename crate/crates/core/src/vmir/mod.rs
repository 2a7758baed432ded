//! VMIR: the RISC-like intermediate language native instructions are
//! translated into before bytecode lowering.

mod passes;
mod rules;
mod translate;

pub use passes::{run_passes, IdentityPass, Pass, PassError, RenumberLabels};
pub use rules::{translate_instruction, RuleError, RuleTable, TInst, Template, TranslateError, DEFAULT_RULES};
pub use translate::{translate_function, TranslateOptions};

use crate::cfg::FunctionRange;
use crate::isa::{MemOperand, Reg, Width};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

/// Number of virtual registers.
pub const VREGS: u8 = 8;

macro_rules! vops {
    ($($name:ident : [$($k:ident),*]),* $(,)?) => {
        #[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        pub enum VOp { $($name),* }

        impl VOp {
            pub const ALL: &'static [VOp] = &[$(VOp::$name),*];

            pub fn name(self) -> &'static str {
                match self { $(VOp::$name => stringify!($name)),* }
            }

            pub fn from_name(s: &str) -> Option<VOp> {
                match s { $(stringify!($name) => Some(VOp::$name),)* _ => None }
            }

            /// Operand kinds, in order.
            pub fn signature(self) -> &'static [ArgKind] {
                match self { $(VOp::$name => &[$(ArgKind::$k),*]),* }
            }
        }
    };
}

/// Kind of a VMIR operand slot.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ArgKind {
    /// Virtual register.
    V,
    /// Guest register.
    G,
    /// Immediate.
    I,
    /// Block label.
    L,
    /// Effective-address form.
    E,
    /// Exit target: immediate address or virtual register.
    T,
    /// Raw native instruction bytes.
    B,
}

vops! {
    VLIMM: [V, I],
    VLOADR: [V, G],
    VSTORER: [G, V],
    VLOADM: [V, V],
    VSTOREM: [V, V],
    VEA: [V, E],
    VADD: [V, V, V],
    VADC: [V, V, V],
    VSUB: [V, V, V],
    VSBB: [V, V, V],
    VAND: [V, V, V],
    VOR: [V, V, V],
    VXOR: [V, V, V],
    VNOT: [V, V],
    VNEG: [V, V],
    VINC: [V, V],
    VDEC: [V, V],
    VSHL: [V, V, V],
    VSHR: [V, V, V],
    VSAR: [V, V, V],
    VROL: [V, V, V],
    VROR: [V, V, V],
    VMULU: [V, V, V],
    VMULS: [V, V, V],
    VIMUL: [V, V, V],
    VDIVU: [V, V, V],
    VDIVS: [V, V, V],
    VMOVX: [V, V, I],
    VSIGN: [V, V],
    VSELECT: [V, V, I],
    VPUSH: [V],
    VPOP: [V],
    VJMP: [L],
    VJCC: [I, L, L],
    VJEQ: [V, I, L],
    VCALL: [T, I],
    VRET: [I],
    VBT: [V, V],
    VBSWAP: [V, V],
    VTHROW: [I, I],
    VNATIVE: [B, I],
    VEXIT: [T],
    VNOP: [],
}

impl VOp {
    /// Ends a block: control never reaches the next instruction in sequence.
    pub fn is_terminator(self) -> bool {
        matches!(self, VOp::VJMP | VOp::VJCC | VOp::VRET | VOp::VEXIT | VOp::VTHROW)
    }

    /// Leaves the VM (possibly to come back at a return site).
    pub fn leaves_vm(self) -> bool {
        matches!(self, VOp::VCALL | VOp::VRET | VOp::VEXIT | VOp::VTHROW)
    }

    pub fn writes_flags(self) -> bool {
        use VOp::*;
        matches!(
            self,
            VADD | VADC | VSUB | VSBB | VAND | VOR | VXOR | VNEG | VINC | VDEC | VSHL | VSHR | VSAR | VROL
                | VROR | VMULU | VMULS | VIMUL | VBT
        )
    }
}

impl fmt::Display for VOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

pub type Label = u64;

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum VArg {
    V(u8),
    G(Reg),
    Imm(i64),
    Label(Label),
    Ea(MemOperand),
    Bytes(Vec<u8>),
}

impl fmt::Display for VArg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            VArg::V(v) => write!(f, "v{}", v),
            VArg::G(r) => f.write_str(crate::isa::reg_name(*r)),
            VArg::Imm(i) => write!(f, "{:#x}", i),
            VArg::Label(l) => write!(f, "@{}", l),
            VArg::Ea(m) => write!(f, "{}", m),
            VArg::Bytes(b) => write!(f, "<{}>", hex::encode(b)),
        }
    }
}

fn arg_matches(kind: ArgKind, a: &VArg) -> bool {
    matches!(
        (kind, a),
        (ArgKind::V, VArg::V(_))
            | (ArgKind::G, VArg::G(_))
            | (ArgKind::I, VArg::Imm(_))
            | (ArgKind::L, VArg::Label(_))
            | (ArgKind::E, VArg::Ea(_))
            | (ArgKind::T, VArg::Imm(_) | VArg::V(_))
            | (ArgKind::B, VArg::Bytes(_))
    )
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct VmirInst {
    pub op: VOp,
    pub width: Width,
    pub args: Vec<VArg>,
}

impl VmirInst {
    pub fn new(op: VOp, width: Width, args: Vec<VArg>) -> Self {
        VmirInst { op, width, args }
    }

    pub fn check(&self) -> Result<(), String> {
        let sig = self.op.signature();
        if sig.len() != self.args.len() {
            return Err(format!("{}: expected {} operands, got {}", self, sig.len(), self.args.len()));
        }
        for (k, a) in sig.iter().zip(&self.args) {
            if !arg_matches(*k, a) {
                return Err(format!("{}: operand {} is not of kind {:?}", self, a, k));
            }
            match a {
                VArg::V(v) if *v >= VREGS => return Err(format!("{}: no virtual register v{}", self, v)),
                VArg::G(r) if *r > 15 => return Err(format!("{}: bad guest register", self)),
                VArg::Bytes(b) if b.is_empty() || b.len() > 15 => {
                    return Err(format!("{}: native bytes must be 1..=15 long", self))
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn labels(&self) -> impl Iterator<Item = Label> + '_ {
        self.args.iter().filter_map(|a| match a {
            VArg::Label(l) => Some(*l),
            _ => None,
        })
    }
}

impl fmt::Display for VmirInst {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.op, self.width)?;
        for (i, a) in self.args.iter().enumerate() {
            write!(f, "{}{}", if i == 0 { " " } else { ", " }, a)?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ExitKind {
    /// Continues at labelled blocks.
    Branch,
    Return,
    TailCall(u64),
    /// Leaves through a computed address.
    Indirect,
    Throw,
    /// Ends with a call that never returns or a native barrier.
    NoReturn,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VmirBlock {
    pub label: Label,
    /// Source pc of the block; `None` for synthesized exit stubs.
    pub pc: Option<u64>,
    pub insts: Vec<VmirInst>,
    pub exit: ExitKind,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VmirFunction {
    pub range: FunctionRange,
    pub entry: Label,
    pub blocks: Vec<VmirBlock>,
    /// Source pcs (landing pads) where execution may enter besides the entry.
    pub roots: Vec<u64>,
}

impl VmirFunction {
    pub fn fid(&self) -> u64 {
        self.range.fid
    }

    /// Label → block index.
    pub fn label_table(&self) -> BTreeMap<Label, usize> {
        self.blocks.iter().enumerate().map(|(i, b)| (b.label, i)).collect()
    }

    /// Source pc → label.
    pub fn pc_labels(&self) -> BTreeMap<u64, Label> {
        self.blocks.iter().filter_map(|b| b.pc.map(|pc| (pc, b.label))).collect()
    }

    pub fn inst_count(&self) -> usize {
        self.blocks.iter().map(|b| b.insts.len()).sum()
    }

    /// Distinct (op, width) pairs used.
    pub fn handler_keys(&self) -> BTreeSet<(VOp, Width)> {
        self.blocks.iter().flat_map(|b| b.insts.iter().map(|i| (i.op, i.width))).collect()
    }

    /// Checks the structural invariants: unique labels, resolvable label
    /// references, well-formed instructions, terminators only at block ends.
    pub fn validate(&self) -> Result<(), String> {
        let table = self.label_table();
        if table.len() != self.blocks.len() {
            return Err("duplicate block label".into());
        }
        if !table.contains_key(&self.entry) {
            return Err(format!("entry label {} missing", self.entry));
        }
        for b in &self.blocks {
            if b.insts.is_empty() {
                return Err(format!("block {} is empty", b.label));
            }
            for (k, i) in b.insts.iter().enumerate() {
                i.check()?;
                if i.op.is_terminator() && k + 1 != b.insts.len() {
                    return Err(format!("terminator {} inside block {}", i, b.label));
                }
                for l in i.labels() {
                    if !table.contains_key(&l) {
                        return Err(format!("unresolved label {} in {}", l, i));
                    }
                }
            }
        }
        Ok(())
    }
}

impl fmt::Display for VmirFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "function {} entry @{}", self.range.fid, self.entry)?;
        for b in &self.blocks {
            match b.pc {
                Some(pc) => writeln!(f, "@{} ({:#x}):", b.label, pc)?,
                None => writeln!(f, "@{}:", b.label)?,
            }
            for i in &b.insts {
                writeln!(f, "    {}", i)?;
            }
        }
        Ok(())
    }
}
