//! A small assembler over the instruction subset with symbolic labels.

use crate::isa::{encode, EncodeError, Instruction, MemOperand, Opcode, Operand, Reg, Width};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AsmError {
    #[error(transparent)]
    Encode(#[from] EncodeError),
    #[error("undefined label {0:?}")]
    Undefined(String),
    #[error("label {0:?} defined twice")]
    Redefined(String),
    #[error("layout did not converge")]
    NoFixpoint,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Target {
    Label(String),
    Abs(u64),
}

impl From<&str> for Target {
    fn from(s: &str) -> Self {
        Target::Label(s.to_string())
    }
}

impl From<String> for Target {
    fn from(s: String) -> Self {
        Target::Label(s)
    }
}

impl From<u64> for Target {
    fn from(a: u64) -> Self {
        Target::Abs(a)
    }
}

#[derive(Clone, Debug)]
enum Item {
    Ins(Instruction),
    /// JMP/JCC/CALL with a rel32 displacement to `target`.
    Branch(Instruction, Target),
    /// Immediate operand `slot` replaced by the label's address.
    LabelImm(Instruction, usize, String),
    Label(String),
}

#[derive(Clone, Debug, Default)]
pub struct Asm {
    base: u64,
    items: Vec<Item>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Assembled {
    pub base: u64,
    pub bytes: Vec<u8>,
    pub labels: BTreeMap<String, u64>,
}

impl Assembled {
    pub fn label(&self, name: &str) -> u64 {
        self.labels[name]
    }

    pub fn end(&self) -> u64 {
        self.base + self.bytes.len() as u64
    }
}

impl Asm {
    pub fn new(base: u64) -> Self {
        Asm { base, items: vec![] }
    }

    pub fn base(&self) -> u64 {
        self.base
    }

    pub fn label(&mut self, name: impl Into<String>) -> &mut Self {
        self.items.push(Item::Label(name.into()));
        self
    }

    pub fn ins(&mut self, i: Instruction) -> &mut Self {
        self.items.push(Item::Ins(i));
        self
    }

    pub fn op(&mut self, op: Opcode, w: Width, ops: Vec<Operand>) -> &mut Self {
        self.ins(Instruction::new(op, w, ops))
    }

    pub fn jmp(&mut self, t: impl Into<Target>) -> &mut Self {
        self.items.push(Item::Branch(Instruction::new(Opcode::JMP, Width::W64, vec![Operand::Imm(0)]), t.into()));
        self
    }

    pub fn jcc(&mut self, cc: u8, t: impl Into<Target>) -> &mut Self {
        let i = Instruction::new(Opcode::JCC, Width::W64, vec![Operand::Imm(0)]).with_cond(cc);
        self.items.push(Item::Branch(i, t.into()));
        self
    }

    pub fn call(&mut self, t: impl Into<Target>) -> &mut Self {
        self.items.push(Item::Branch(Instruction::new(Opcode::CALL, Width::W64, vec![Operand::Imm(0)]), t.into()));
        self
    }

    pub fn ret(&mut self) -> &mut Self {
        self.op(Opcode::RET, Width::W64, vec![])
    }

    /// `i` with operand `slot` set to the address of `label`.
    pub fn with_label(&mut self, i: Instruction, slot: usize, label: impl Into<String>) -> &mut Self {
        self.items.push(Item::LabelImm(i, slot, label.into()));
        self
    }

    fn resolve(&self, t: &Target, labels: &BTreeMap<String, u64>, strict: bool) -> Result<u64, AsmError> {
        match t {
            Target::Abs(a) => Ok(*a),
            Target::Label(l) => match labels.get(l) {
                Some(a) => Ok(*a),
                None if strict => Err(AsmError::Undefined(l.clone())),
                None => Ok(self.base),
            },
        }
    }

    fn emit(&self, labels: &BTreeMap<String, u64>, strict: bool) -> Result<(Vec<u8>, BTreeMap<String, u64>), AsmError> {
        let mut out = vec![];
        let mut defined = BTreeMap::new();
        for it in &self.items {
            let pc = self.base + out.len() as u64;
            match it {
                Item::Label(l) => {
                    if defined.insert(l.clone(), pc).is_some() {
                        return Err(AsmError::Redefined(l.clone()));
                    }
                }
                Item::Ins(i) => out.extend(encode(i)?),
                Item::Branch(i, t) => {
                    let target = self.resolve(t, labels, strict)?;
                    // rel32 forms have a fixed length
                    let len = encode(i)?.len() as u64;
                    let mut j = i.clone();
                    j.operands[0] = Operand::Imm(target.wrapping_sub(pc + len) as i64);
                    out.extend(encode(&j)?);
                }
                Item::LabelImm(i, slot, l) => {
                    let a = self.resolve(&Target::Label(l.clone()), labels, strict)?;
                    let mut j = i.clone();
                    j.operands[*slot] = Operand::Imm(a as i64);
                    out.extend(encode(&j)?);
                }
            }
        }
        Ok((out, defined))
    }

    pub fn finish(&self) -> Result<Assembled, AsmError> {
        let mut labels = BTreeMap::new();
        for _ in 0..8 {
            let (_, next) = self.emit(&labels, false)?;
            if next == labels {
                let (bytes, labels) = self.emit(&next, true)?;
                return Ok(Assembled { base: self.base, bytes, labels });
            }
            labels = next;
        }
        Err(AsmError::NoFixpoint)
    }
}

pub fn r(reg: Reg) -> Operand {
    Operand::Reg(reg)
}

pub fn imm(v: i64) -> Operand {
    Operand::Imm(v)
}

/// `[base + disp]`
pub fn m(base: Reg, disp: i32) -> Operand {
    Operand::Mem(MemOperand::base_disp(base, disp))
}

/// `[addr]`
pub fn abs(addr: u64) -> Operand {
    Operand::Mem(MemOperand::absolute(addr as i32))
}

/// `[base + index*scale + disp]`
pub fn sib(base: Option<Reg>, index: Reg, scale: u8, disp: i32) -> Operand {
    Operand::Mem(MemOperand { base, index: Some((index, scale)), disp })
}

pub fn ins(op: Opcode, w: Width, ops: Vec<Operand>) -> Instruction {
    Instruction::new(op, w, ops)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::isa::{decode, RAX};

    #[test]
    fn forward_and_backward_labels() {
        let mut a = Asm::new(0x1000);
        a.label("top").jmp("end").op(Opcode::NOP, Width::W32, vec![]).label("end").jcc(5, "top").ret();
        let out = a.finish().unwrap();
        assert_eq!(out.label("top"), 0x1000);
        assert_eq!(out.label("end"), 0x1006);
        let (j, _) = decode(&out.bytes, 0).unwrap();
        assert_eq!(j.operands[0], Operand::Imm(1));
        let (jz, _) = decode(&out.bytes[6..], 0).unwrap();
        assert_eq!(jz.operands[0], Operand::Imm(-12));
    }

    #[test]
    fn label_immediates_and_errors() {
        let mut a = Asm::new(0x40_0000);
        a.with_label(ins(Opcode::MOV, Width::W64, vec![r(RAX), imm(0)]), 1, "x").label("x").ret();
        let out = a.finish().unwrap();
        let (mv, _) = decode(&out.bytes, 0).unwrap();
        assert_eq!(mv.operands[1], Operand::Imm(out.label("x") as i64));

        let mut b = Asm::new(0);
        b.jmp("nowhere");
        assert_eq!(b.finish(), Err(AsmError::Undefined("nowhere".into())));
        let mut c = Asm::new(0);
        c.label("a").label("a");
        assert_eq!(c.finish(), Err(AsmError::Redefined("a".into())));
    }
}
