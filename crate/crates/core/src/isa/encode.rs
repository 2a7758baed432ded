use super::{Instruction, MemOperand, Opcode, Operand, Reg, Width, RBP, RSP};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EncodeError {
    #[error("unencodable instruction {instr}: {reason}")]
    Unencodable { instr: String, reason: String },
}

fn fail(i: &Instruction, reason: impl Into<String>) -> EncodeError {
    EncodeError::Unencodable { instr: i.to_string(), reason: reason.into() }
}

fn fits_i8(v: i64) -> bool {
    v == v as i8 as i64
}

fn fits_i32(v: i64) -> bool {
    v == v as i32 as i64
}

/// Output builder for one instruction.
struct Emit {
    rex_w: bool,
    rex_r: bool,
    rex_x: bool,
    rex_b: bool,
    force_rex: bool,
    opcode: Vec<u8>,
    modrm: Option<u8>,
    sib: Option<u8>,
    disp: Vec<u8>,
    imm: Vec<u8>,
}

impl Emit {
    fn new(w: bool, opcode: &[u8]) -> Self {
        Emit {
            rex_w: w,
            rex_r: false,
            rex_x: false,
            rex_b: false,
            force_rex: false,
            opcode: opcode.to_vec(),
            modrm: None,
            sib: None,
            disp: vec![],
            imm: vec![],
        }
    }

    fn byte_reg(&mut self, w: Width, r: Reg) {
        if w == Width::W8 && (4..8).contains(&r) {
            self.force_rex = true;
        }
    }

    /// ModRM with a register `reg` field (or /digit) and an r/m operand.
    fn modrm(&mut self, reg: u8, rm: &Operand, rm_width: Width) {
        self.rex_r = reg & 8 != 0;
        let reg = (reg & 7) << 3;
        match rm {
            Operand::Reg(r) => {
                self.byte_reg(rm_width, *r);
                self.rex_b = r & 8 != 0;
                self.modrm = Some(0xC0 | reg | (r & 7));
            }
            Operand::Mem(m) => self.mem(reg, m),
            Operand::Imm(_) => unreachable!("immediate in r/m position"),
        }
    }

    fn mem(&mut self, reg: u8, m: &MemOperand) {
        let disp = m.disp;
        match (m.base, m.index) {
            (None, idx) => {
                // no base: SIB with base=101, mod=00, disp32
                let (i, ss) = match idx {
                    Some((i, s)) => (i, s.trailing_zeros() as u8),
                    None => (RSP, 0),
                };
                self.rex_x = i & 8 != 0;
                self.modrm = Some(reg | 0x04);
                self.sib = Some((ss << 6) | ((i & 7) << 3) | 5);
                self.disp = disp.to_le_bytes().to_vec();
            }
            (Some(b), idx) => {
                self.rex_b = b & 8 != 0;
                let md = if disp == 0 && (b & 7) != RBP {
                    0u8
                } else if fits_i8(disp as i64) {
                    1
                } else {
                    2
                };
                match md {
                    1 => self.disp = vec![disp as u8],
                    2 => self.disp = disp.to_le_bytes().to_vec(),
                    _ => {}
                }
                if idx.is_some() || (b & 7) == RSP {
                    let (i, ss) = match idx {
                        Some((i, s)) => (i, s.trailing_zeros() as u8),
                        None => (RSP, 0),
                    };
                    self.rex_x = i & 8 != 0;
                    self.modrm = Some((md << 6) | reg | 0x04);
                    self.sib = Some((ss << 6) | ((i & 7) << 3) | (b & 7));
                } else {
                    self.modrm = Some((md << 6) | reg | (b & 7));
                }
            }
        }
    }

    fn imm8(mut self, v: i64) -> Self {
        self.imm = vec![v as u8];
        self
    }

    fn imm32(mut self, v: i64) -> Self {
        self.imm = (v as i32).to_le_bytes().to_vec();
        self
    }

    fn finish(self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16);
        let rex = 0x40
            | (self.rex_w as u8) << 3
            | (self.rex_r as u8) << 2
            | (self.rex_x as u8) << 1
            | self.rex_b as u8;
        if rex != 0x40 || self.force_rex {
            out.push(rex);
        }
        out.extend_from_slice(&self.opcode);
        out.extend(self.modrm);
        out.extend(self.sib);
        out.extend_from_slice(&self.disp);
        out.extend_from_slice(&self.imm);
        out
    }
}

fn alu_digit(op: Opcode) -> Option<u8> {
    Some(match op {
        Opcode::ADD => 0,
        Opcode::OR => 1,
        Opcode::ADC => 2,
        Opcode::SBB => 3,
        Opcode::AND => 4,
        Opcode::SUB => 5,
        Opcode::XOR => 6,
        Opcode::CMP => 7,
        _ => return None,
    })
}

fn shift_digit(op: Opcode) -> Option<u8> {
    Some(match op {
        Opcode::ROL => 0,
        Opcode::ROR => 1,
        Opcode::SHL => 4,
        Opcode::SHR => 5,
        Opcode::SAR => 7,
        _ => return None,
    })
}

/// Canonical encoding of `instr`.
///
/// Where several encodings exist the ModRM form is preferred, immediates use
/// the shortest sign-extended field, and relative branches always use rel32.
pub fn encode(instr: &Instruction) -> Result<Vec<u8>, EncodeError> {
    let mut probe = instr.clone();
    probe.len = 0;
    probe.validate().map_err(|e| fail(instr, e))?;
    let bytes = encode_inner(instr)?;
    if bytes.len() > 15 {
        return Err(fail(instr, "longer than 15 bytes"));
    }
    Ok(bytes)
}

fn encode_inner(i: &Instruction) -> Result<Vec<u8>, EncodeError> {
    use Opcode::*;
    let w = i.width;
    let rex_w = w == Width::W64;
    let byte = w == Width::W8;
    let ops = &i.operands;
    let shape = i.shape().as_str();
    let op0 = ops.first();
    let op1 = ops.get(1);
    let reg_of = |o: Option<&Operand>| o.and_then(|o| o.reg()).unwrap_or(0);
    let imm_of = |o: Option<&Operand>| o.and_then(|o| o.imm()).unwrap_or(0);
    let cc = i.cond.map(|c| c.0).unwrap_or(0);
    let need = |ok: bool, why: &str| if ok { Ok(()) } else { Err(fail(i, why)) };

    // rm <- reg style ("MR"): opcode /r with rm = op0, reg = op1
    let mr = |opc: &[u8]| {
        let mut e = Emit::new(rex_w, opc);
        let r = reg_of(op1);
        e.byte_reg(w, r);
        e.modrm(r, op0.unwrap(), w);
        e
    };
    // reg <- rm style ("RM"): opcode /r with reg = op0, rm = op1
    let rm = |opc: &[u8], rm_width: Width| {
        let mut e = Emit::new(rex_w, opc);
        let r = reg_of(op0);
        e.byte_reg(w, r);
        e.modrm(r, op1.unwrap(), rm_width);
        e
    };
    // opcode /digit with rm = op0
    let digit = |opc: &[u8], d: u8| {
        let mut e = Emit::new(rex_w, opc);
        e.modrm(d, op0.unwrap(), w);
        e
    };

    let e = match i.opcode {
        MOV => match shape.as_str() {
            "rr" | "mr" => mr(if byte { &[0x88] } else { &[0x89] }),
            "rm" => rm(if byte { &[0x8A] } else { &[0x8B] }, w),
            _ => {
                let v = imm_of(op1);
                if byte {
                    need(fits_i8(v), "imm8 out of range")?;
                    digit(&[0xC6], 0).imm8(v)
                } else if fits_i32(v) {
                    digit(&[0xC7], 0).imm32(v)
                } else {
                    need(shape == "ri" && rex_w, "imm64 needs a 64-bit register destination")?;
                    let r = reg_of(op0);
                    let mut e = Emit::new(true, &[0xB8 + (r & 7)]);
                    e.rex_b = r & 8 != 0;
                    e.imm = (v as u64).to_le_bytes().to_vec();
                    e
                }
            }
        },
        MOVZX => rm(&[0x0F, 0xB6], Width::W8),
        MOVSX => match i.src_width {
            Some(Width::W32) => rm(&[0x63], Width::W32),
            _ => rm(&[0x0F, 0xBE], Width::W8),
        },
        LEA => rm(&[0x8D], w),
        XCHG => mr(if byte { &[0x86] } else { &[0x87] }),
        ADD | OR | ADC | SBB | AND | SUB | XOR | CMP => {
            let g = alu_digit(i.opcode).unwrap() << 3;
            let low = if byte { 0 } else { 1 };
            match shape.as_str() {
                "rr" | "mr" => mr(&[g | low]),
                "rm" => rm(&[g | 2 | low], w),
                _ => {
                    let v = imm_of(op1);
                    let d = alu_digit(i.opcode).unwrap();
                    if byte {
                        need(fits_i8(v), "imm8 out of range")?;
                        digit(&[0x80], d).imm8(v)
                    } else if fits_i8(v) {
                        digit(&[0x83], d).imm8(v)
                    } else {
                        need(fits_i32(v), "imm32 out of range")?;
                        digit(&[0x81], d).imm32(v)
                    }
                }
            }
        }
        TEST => match shape.as_str() {
            "rr" | "mr" => mr(if byte { &[0x84] } else { &[0x85] }),
            _ => {
                let v = imm_of(op1);
                if byte {
                    need(fits_i8(v), "imm8 out of range")?;
                    digit(&[0xF6], 0).imm8(v)
                } else {
                    need(fits_i32(v), "imm32 out of range")?;
                    digit(&[0xF7], 0).imm32(v)
                }
            }
        },
        NOT | NEG | MUL | DIV | IDIV => {
            let d = match i.opcode {
                NOT => 2,
                NEG => 3,
                MUL => 4,
                DIV => 6,
                _ => 7,
            };
            digit(if byte { &[0xF6] } else { &[0xF7] }, d)
        }
        IMUL => match shape.as_str() {
            "r" | "m" => digit(if byte { &[0xF6] } else { &[0xF7] }, 5),
            "rr" | "rm" => rm(&[0x0F, 0xAF], w),
            _ => {
                let v = imm_of(ops.get(2));
                let mut e = if fits_i8(v) { rm(&[0x6B], w) } else { rm(&[0x69], w) };
                if fits_i8(v) {
                    e.imm = vec![v as u8];
                } else {
                    need(fits_i32(v), "imm32 out of range")?;
                    e.imm = (v as i32).to_le_bytes().to_vec();
                }
                e
            }
        },
        INC => digit(if byte { &[0xFE] } else { &[0xFF] }, 0),
        DEC => digit(if byte { &[0xFE] } else { &[0xFF] }, 1),
        SHL | SHR | SAR | ROL | ROR => {
            let d = shift_digit(i.opcode).unwrap();
            match op1 {
                Some(Operand::Imm(v)) => {
                    need((0..=255).contains(v), "shift count out of range")?;
                    digit(if byte { &[0xC0] } else { &[0xC1] }, d).imm8(*v)
                }
                _ => digit(if byte { &[0xD2] } else { &[0xD3] }, d),
            }
        }
        CDQ => Emit::new(false, &[0x99]),
        CQO => Emit::new(true, &[0x99]),
        PUSH | POP => match op0 {
            Some(Operand::Reg(r)) => {
                let base = if i.opcode == PUSH { 0x50 } else { 0x58 };
                let mut e = Emit::new(false, &[base + (r & 7)]);
                e.rex_b = r & 8 != 0;
                e
            }
            Some(Operand::Mem(m)) => {
                let (opc, d) = if i.opcode == PUSH { (0xFF, 6) } else { (0x8F, 0) };
                let mut e = Emit::new(false, &[opc]);
                e.mem(d << 3, m);
                e
            }
            _ => {
                let v = imm_of(op0);
                if fits_i8(v) {
                    Emit::new(false, &[0x6A]).imm8(v)
                } else {
                    need(fits_i32(v), "imm32 out of range")?;
                    Emit::new(false, &[0x68]).imm32(v)
                }
            }
        },
        CALL | JMP => match op0 {
            Some(Operand::Imm(v)) => {
                need(fits_i32(*v), "displacement out of rel32 range")?;
                Emit::new(false, &[if i.opcode == CALL { 0xE8 } else { 0xE9 }]).imm32(*v)
            }
            Some(o) => {
                let mut e = Emit::new(false, &[0xFF]);
                e.modrm(if i.opcode == CALL { 2 } else { 4 }, o, Width::W64);
                e
            }
            None => return Err(fail(i, "missing target")),
        },
        RET => match op0 {
            Some(Operand::Imm(v)) => {
                need((0..=0xFFFF).contains(v), "return pop count out of range")?;
                let mut e = Emit::new(false, &[0xC2]);
                e.imm = (*v as u16).to_le_bytes().to_vec();
                e
            }
            _ => Emit::new(false, &[0xC3]),
        },
        JCC => {
            let v = imm_of(op0);
            need(fits_i32(v), "displacement out of rel32 range")?;
            Emit::new(false, &[0x0F, 0x80 | cc]).imm32(v)
        }
        SETCC => {
            let mut e = Emit::new(false, &[0x0F, 0x90 | cc]);
            e.modrm(0, op0.unwrap(), Width::W8);
            e
        }
        CMOVCC => rm(&[0x0F, 0x40 | cc], w),
        NOP => Emit::new(false, &[0x90]),
        INT3 => Emit::new(false, &[0xCC]),
        LEAVE => Emit::new(false, &[0xC9]),
        BSWAP => {
            let r = reg_of(op0);
            let mut e = Emit::new(rex_w, &[0x0F, 0xC8 + (r & 7)]);
            e.rex_b = r & 8 != 0;
            e
        }
        BT => match op1 {
            Some(Operand::Imm(v)) => {
                need((0..=255).contains(v), "bit index out of range")?;
                digit(&[0x0F, 0xBA], 4).imm8(*v)
            }
            _ => mr(&[0x0F, 0xA3]),
        },
    };
    Ok(e.finish())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::isa::{decode, RAX, RBX, R12, R13};

    fn reg2(op: Opcode, w: Width, a: Reg, b: Reg) -> Instruction {
        Instruction::new(op, w, vec![Operand::Reg(a), Operand::Reg(b)])
    }

    #[test]
    fn examples() {
        assert_eq!(encode(&reg2(Opcode::ADD, Width::W64, RAX, RBX)).unwrap(), vec![0x48, 0x01, 0xD8]);
        assert_eq!(encode(&Instruction::new(Opcode::NOP, Width::W32, vec![])).unwrap(), vec![0x90]);
    }

    #[test]
    fn rejects_mem_mem() {
        let m = Operand::Mem(MemOperand::absolute(0x1000));
        let i = Instruction::new(Opcode::ADD, Width::W64, vec![m, m]);
        assert!(matches!(encode(&i), Err(EncodeError::Unencodable { .. })));
    }

    #[test]
    fn awkward_bases_roundtrip() {
        for base in [RSP, RBP, R12, R13] {
            let i = Instruction::new(
                Opcode::MOV,
                Width::W64,
                vec![Operand::Reg(RAX), Operand::Mem(MemOperand::base_disp(base, 0))],
            );
            let bytes = encode(&i).unwrap();
            let (d, n) = decode(&bytes, 0).unwrap();
            assert_eq!(n, bytes.len());
            assert!(d.same_semantics(&i), "{} vs {}", d, i);
        }
    }

    #[test]
    fn spl_needs_rex() {
        let i = Instruction::new(Opcode::MOV, Width::W8, vec![Operand::Reg(RSP), Operand::Reg(RAX)]);
        assert_eq!(encode(&i).unwrap(), vec![0x40, 0x88, 0xC4]);
    }

    #[test]
    fn mov_imm64_only_when_needed() {
        let small = Instruction::new(Opcode::MOV, Width::W64, vec![Operand::Reg(RAX), Operand::Imm(-1)]);
        assert_eq!(encode(&small).unwrap()[1], 0xC7);
        let big = Instruction::new(Opcode::MOV, Width::W64, vec![Operand::Reg(RAX), Operand::Imm(1 << 40)]);
        assert_eq!(encode(&big).unwrap().len(), 10);
    }
}
