use super::{Instruction, MemOperand, Opcode, Operand, Reg, Width, RAX, RCX};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum DecodeError {
    /// Byte pattern outside the subset. Recovery can skip `len` bytes.
    #[error("unknown encoding at offset {offset:#x}")]
    UnknownEncoding { offset: usize, len: usize },
    #[error("instruction truncated at offset {offset:#x}")]
    TruncatedInstruction { offset: usize },
}

const MAX_LEN: usize = 15;

const ALU_GROUP: [Opcode; 8] =
    [Opcode::ADD, Opcode::OR, Opcode::ADC, Opcode::SBB, Opcode::AND, Opcode::SUB, Opcode::XOR, Opcode::CMP];

struct Cursor<'a> {
    bytes: &'a [u8],
    start: usize,
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn u8(&mut self) -> Result<u8, DecodeError> {
        if self.pos - self.start >= MAX_LEN {
            return Err(self.unknown());
        }
        let b = *self
            .bytes
            .get(self.pos)
            .ok_or(DecodeError::TruncatedInstruction { offset: self.start })?;
        self.pos += 1;
        Ok(b)
    }

    fn le(&mut self, n: usize) -> Result<u64, DecodeError> {
        let mut v = 0u64;
        for i in 0..n {
            v |= (self.u8()? as u64) << (8 * i);
        }
        Ok(v)
    }

    fn i8(&mut self) -> Result<i64, DecodeError> {
        Ok(self.u8()? as i8 as i64)
    }

    fn i32(&mut self) -> Result<i64, DecodeError> {
        Ok(self.le(4)? as u32 as i32 as i64)
    }

    fn unknown(&self) -> DecodeError {
        DecodeError::UnknownEncoding { offset: self.start, len: 1 }
    }
}

#[derive(Clone, Copy)]
struct Rex {
    present: bool,
    w: bool,
    r: u8,
    x: u8,
    b: u8,
}

struct ModRm {
    reg: u8,
    rm: Operand,
}

struct Decoder<'a> {
    c: Cursor<'a>,
    rex: Rex,
}

impl<'a> Decoder<'a> {
    fn opsize(&self) -> Width {
        if self.rex.w {
            Width::W64
        } else {
            Width::W32
        }
    }

    fn check_byte_reg(&self, r: Reg, w: Width) -> Result<(), DecodeError> {
        // AH..BH are outside the subset
        if w == Width::W8 && !self.rex.present && (4..8).contains(&r) {
            return Err(self.c.unknown());
        }
        Ok(())
    }

    fn reg_op(&self, r: Reg, w: Width) -> Result<Operand, DecodeError> {
        self.check_byte_reg(r, w)?;
        Ok(Operand::Reg(r))
    }

    fn modrm(&mut self, rm_width: Width) -> Result<ModRm, DecodeError> {
        let m = self.c.u8()?;
        let md = m >> 6;
        let reg = ((m >> 3) & 7) | (self.rex.r << 3);
        let rm = m & 7;
        if md == 3 {
            let r = rm | (self.rex.b << 3);
            self.check_byte_reg(r, rm_width)?;
            return Ok(ModRm { reg, rm: Operand::Reg(r) });
        }
        let mut mem = MemOperand { base: None, index: None, disp: 0 };
        let mut no_base_disp32 = false;
        if rm == 4 {
            let sib = self.c.u8()?;
            let scale = 1u8 << (sib >> 6);
            let idx = ((sib >> 3) & 7) | (self.rex.x << 3);
            let base = sib & 7;
            if idx != 4 {
                mem.index = Some((idx, scale));
            }
            if base == 5 && md == 0 {
                no_base_disp32 = true;
            } else {
                mem.base = Some(base | (self.rex.b << 3));
            }
        } else if rm == 5 && md == 0 {
            // RIP-relative addressing is outside the subset
            return Err(self.c.unknown());
        } else {
            mem.base = Some(rm | (self.rex.b << 3));
        }
        mem.disp = match md {
            0 if no_base_disp32 => self.c.i32()? as i32,
            0 => 0,
            1 => self.c.i8()? as i32,
            _ => self.c.i32()? as i32,
        };
        Ok(ModRm { reg, rm: Operand::Mem(mem) })
    }

    fn imm_for(&mut self, w: Width) -> Result<i64, DecodeError> {
        match w {
            Width::W8 => self.c.i8(),
            _ => self.c.i32(),
        }
    }
}

fn inst(op: Opcode, w: Width, ops: Vec<Operand>) -> Instruction {
    Instruction::new(op, w, ops)
}

/// Decode the instruction starting at `offset` of `image`.
///
/// Returns the instruction and the number of bytes consumed (equal to its
/// `len`). Never reads more than 15 bytes past `offset`.
pub fn decode(image: &[u8], offset: usize) -> Result<(Instruction, usize), DecodeError> {
    if offset >= image.len() {
        return Err(DecodeError::TruncatedInstruction { offset });
    }
    let mut d = Decoder {
        c: Cursor { bytes: image, start: offset, pos: offset },
        rex: Rex { present: false, w: false, r: 0, x: 0, b: 0 },
    };
    let mut b = d.c.u8()?;
    if (0x40..=0x4F).contains(&b) {
        d.rex = Rex { present: true, w: b & 8 != 0, r: (b >> 2) & 1, x: (b >> 1) & 1, b: b & 1 };
        b = d.c.u8()?;
    }
    let mut i = decode_body(&mut d, b)?;
    let len = d.c.pos - offset;
    i.len = len as u8;
    Ok((i, len))
}

fn decode_body(d: &mut Decoder<'_>, b: u8) -> Result<Instruction, DecodeError> {
    use Opcode::*;
    let v = d.opsize();
    let q = Width::W64;
    let b8 = Width::W8;
    Ok(match b {
        0x00..=0x3F if b & 7 <= 5 => {
            let op = ALU_GROUP[(b >> 3) as usize];
            match b & 7 {
                0 | 1 => {
                    let w = if b & 1 == 0 { b8 } else { v };
                    let m = d.modrm(w)?;
                    let r = d.reg_op(m.reg, w)?;
                    inst(op, w, vec![m.rm, r])
                }
                2 | 3 => {
                    let w = if b & 1 == 0 { b8 } else { v };
                    let m = d.modrm(w)?;
                    let r = d.reg_op(m.reg, w)?;
                    inst(op, w, vec![r, m.rm])
                }
                4 => inst(op, b8, vec![Operand::Reg(RAX), Operand::Imm(d.c.i8()?)]),
                _ => inst(op, v, vec![Operand::Reg(RAX), Operand::Imm(d.c.i32()?)]),
            }
        }
        0x50..=0x57 => inst(PUSH, q, vec![Operand::Reg((b & 7) | (d.rex.b << 3))]),
        0x58..=0x5F => inst(POP, q, vec![Operand::Reg((b & 7) | (d.rex.b << 3))]),
        0x63 if d.rex.w => {
            let m = d.modrm(Width::W32)?;
            inst(MOVSX, q, vec![Operand::Reg(m.reg), m.rm]).with_src_width(Width::W32)
        }
        0x68 => inst(PUSH, q, vec![Operand::Imm(d.c.i32()?)]),
        0x6A => inst(PUSH, q, vec![Operand::Imm(d.c.i8()?)]),
        0x69 | 0x6B => {
            let m = d.modrm(v)?;
            let imm = if b == 0x6B { d.c.i8()? } else { d.c.i32()? };
            inst(IMUL, v, vec![Operand::Reg(m.reg), m.rm, Operand::Imm(imm)])
        }
        0x70..=0x7F => inst(JCC, q, vec![Operand::Imm(d.c.i8()?)]).with_cond(b & 15),
        0x80 | 0x81 | 0x83 => {
            let w = if b == 0x80 { b8 } else { v };
            let m = d.modrm(w)?;
            let imm = if b == 0x81 { d.c.i32()? } else { d.c.i8()? };
            inst(ALU_GROUP[(m.reg & 7) as usize], w, vec![m.rm, Operand::Imm(imm)])
        }
        0x84 | 0x85 | 0x86 | 0x87 | 0x88 | 0x89 => {
            let w = if b & 1 == 0 { b8 } else { v };
            let m = d.modrm(w)?;
            let r = d.reg_op(m.reg, w)?;
            let op = match b {
                0x84 | 0x85 => TEST,
                0x86 | 0x87 => XCHG,
                _ => MOV,
            };
            inst(op, w, vec![m.rm, r])
        }
        0x8A | 0x8B => {
            let w = if b == 0x8A { b8 } else { v };
            let m = d.modrm(w)?;
            let r = d.reg_op(m.reg, w)?;
            inst(MOV, w, vec![r, m.rm])
        }
        0x8D => {
            let m = d.modrm(v)?;
            if !matches!(m.rm, Operand::Mem(_)) {
                return Err(d.c.unknown());
            }
            inst(LEA, v, vec![Operand::Reg(m.reg), m.rm])
        }
        0x8F => {
            let m = d.modrm(q)?;
            if m.reg & 7 != 0 {
                return Err(d.c.unknown());
            }
            inst(POP, q, vec![m.rm])
        }
        0x90 if d.rex.b == 0 => inst(NOP, Width::W32, vec![]),
        0x90..=0x97 => {
            inst(XCHG, v, vec![Operand::Reg((b & 7) | (d.rex.b << 3)), Operand::Reg(RAX)])
        }
        0x99 => {
            if d.rex.w {
                inst(CQO, q, vec![])
            } else {
                inst(CDQ, Width::W32, vec![])
            }
        }
        0xA8 => inst(TEST, b8, vec![Operand::Reg(RAX), Operand::Imm(d.c.i8()?)]),
        0xA9 => inst(TEST, v, vec![Operand::Reg(RAX), Operand::Imm(d.c.i32()?)]),
        0xB0..=0xB7 => {
            let r = (b & 7) | (d.rex.b << 3);
            let r = d.reg_op(r, b8)?;
            inst(MOV, b8, vec![r, Operand::Imm(d.c.i8()?)])
        }
        0xB8..=0xBF => {
            let r = (b & 7) | (d.rex.b << 3);
            let imm = if d.rex.w { d.c.le(8)? as i64 } else { d.c.i32()? };
            inst(MOV, v, vec![Operand::Reg(r), Operand::Imm(imm)])
        }
        0xC0 | 0xC1 | 0xD0 | 0xD1 | 0xD2 | 0xD3 => {
            let w = if b & 1 == 0 { b8 } else { v };
            let m = d.modrm(w)?;
            let op = match m.reg & 7 {
                0 => ROL,
                1 => ROR,
                4 => SHL,
                5 => SHR,
                7 => SAR,
                _ => return Err(d.c.unknown()),
            };
            let count = match b {
                0xC0 | 0xC1 => Operand::Imm(d.c.u8()? as i64),
                0xD0 | 0xD1 => Operand::Imm(1),
                _ => Operand::Reg(RCX),
            };
            inst(op, w, vec![m.rm, count])
        }
        0xC2 => inst(RET, q, vec![Operand::Imm(d.c.le(2)? as i64)]),
        0xC3 => inst(RET, q, vec![]),
        0xC6 | 0xC7 => {
            let w = if b == 0xC6 { b8 } else { v };
            let m = d.modrm(w)?;
            if m.reg & 7 != 0 {
                return Err(d.c.unknown());
            }
            let imm = d.imm_for(w)?;
            inst(MOV, w, vec![m.rm, Operand::Imm(imm)])
        }
        0xC9 => inst(LEAVE, q, vec![]),
        0xCC => inst(INT3, q, vec![]),
        0xE8 => inst(CALL, q, vec![Operand::Imm(d.c.i32()?)]),
        0xE9 => inst(JMP, q, vec![Operand::Imm(d.c.i32()?)]),
        0xEB => inst(JMP, q, vec![Operand::Imm(d.c.i8()?)]),
        0xF6 | 0xF7 => {
            let w = if b == 0xF6 { b8 } else { v };
            let m = d.modrm(w)?;
            match m.reg & 7 {
                0 => {
                    let imm = d.imm_for(w)?;
                    inst(TEST, w, vec![m.rm, Operand::Imm(imm)])
                }
                1 => return Err(d.c.unknown()),
                n => {
                    let op = [NOT, NEG, MUL, IMUL, DIV, IDIV][(n - 2) as usize];
                    inst(op, w, vec![m.rm])
                }
            }
        }
        0xFE => {
            let m = d.modrm(b8)?;
            match m.reg & 7 {
                0 => inst(INC, b8, vec![m.rm]),
                1 => inst(DEC, b8, vec![m.rm]),
                _ => return Err(d.c.unknown()),
            }
        }
        0xFF => {
            let n = {
                let save = d.c.pos;
                let m = d.c.u8()?;
                d.c.pos = save;
                (m >> 3) & 7
            };
            let w = if matches!(n, 2 | 4 | 6) { q } else { v };
            let m = d.modrm(w)?;
            match n {
                0 => inst(INC, v, vec![m.rm]),
                1 => inst(DEC, v, vec![m.rm]),
                2 => inst(CALL, q, vec![m.rm]),
                4 => inst(JMP, q, vec![m.rm]),
                6 => inst(PUSH, q, vec![m.rm]),
                _ => return Err(d.c.unknown()),
            }
        }
        0x0F => decode_0f(d)?,
        _ => return Err(d.c.unknown()),
    })
}

fn decode_0f(d: &mut Decoder<'_>) -> Result<Instruction, DecodeError> {
    use Opcode::*;
    let v = d.opsize();
    let b = d.c.u8()?;
    Ok(match b {
        0x1F => {
            let m = d.modrm(v)?;
            if m.reg & 7 != 0 {
                return Err(d.c.unknown());
            }
            inst(NOP, Width::W32, vec![])
        }
        0x40..=0x4F => {
            let m = d.modrm(v)?;
            inst(CMOVCC, v, vec![Operand::Reg(m.reg), m.rm]).with_cond(b & 15)
        }
        0x80..=0x8F => inst(JCC, Width::W64, vec![Operand::Imm(d.c.i32()?)]).with_cond(b & 15),
        0x90..=0x9F => {
            let m = d.modrm(Width::W8)?;
            inst(SETCC, Width::W8, vec![m.rm]).with_cond(b & 15)
        }
        0xA3 => {
            let m = d.modrm(v)?;
            if !matches!(m.rm, Operand::Reg(_)) {
                // bit-string addressing of memory is outside the subset
                return Err(d.c.unknown());
            }
            inst(BT, v, vec![m.rm, Operand::Reg(m.reg)])
        }
        0xAF => {
            let m = d.modrm(v)?;
            inst(IMUL, v, vec![Operand::Reg(m.reg), m.rm])
        }
        0xB6 | 0xBE => {
            let m = d.modrm(Width::W8)?;
            let op = if b == 0xB6 { MOVZX } else { MOVSX };
            inst(op, v, vec![Operand::Reg(m.reg), m.rm]).with_src_width(Width::W8)
        }
        0xBA => {
            let m = d.modrm(v)?;
            if m.reg & 7 != 4 {
                return Err(d.c.unknown());
            }
            inst(BT, v, vec![m.rm, Operand::Imm(d.c.u8()? as i64)])
        }
        0xC8..=0xCF => inst(BSWAP, v, vec![Operand::Reg((b & 7) | (d.rex.b << 3))]),
        _ => return Err(d.c.unknown()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::isa::{RBX, RSP};

    #[test]
    fn add_rax_rbx() {
        let (i, n) = decode(&[0x48, 0x01, 0xD8], 0).unwrap();
        assert_eq!(n, 3);
        assert_eq!(i.opcode, Opcode::ADD);
        assert_eq!(i.width, Width::W64);
        assert_eq!(i.operands, vec![Operand::Reg(RAX), Operand::Reg(RBX)]);
    }

    #[test]
    fn ret_and_empty() {
        let (i, n) = decode(&[0xC3], 0).unwrap();
        assert_eq!((i.opcode, n), (Opcode::RET, 1));
        assert_eq!(decode(&[], 0), Err(DecodeError::TruncatedInstruction { offset: 0 }));
    }

    #[test]
    fn truncated_mid_encoding() {
        assert!(matches!(decode(&[0x48, 0x81, 0xC0, 0x01], 0), Err(DecodeError::TruncatedInstruction { .. })));
    }

    #[test]
    fn unknown_reports_one_byte() {
        assert_eq!(decode(&[0x0F, 0x0B], 0), Err(DecodeError::UnknownEncoding { offset: 0, len: 1 }));
        // high-byte registers need the legacy encoding
        assert!(matches!(decode(&[0x88, 0xE0], 0), Err(DecodeError::UnknownEncoding { .. })));
        // RIP-relative
        assert!(matches!(decode(&[0x48, 0x8B, 0x05, 0, 0, 0, 0], 0), Err(DecodeError::UnknownEncoding { .. })));
    }

    #[test]
    fn sib_with_index_scale_disp() {
        // mov rax, [rbx+rcx*8+0x1000]
        let (i, _) = decode(&[0x48, 0x8B, 0x84, 0xCB, 0x00, 0x10, 0x00, 0x00], 0).unwrap();
        assert_eq!(
            i.operands[1],
            Operand::Mem(MemOperand { base: Some(RBX), index: Some((RCX, 8)), disp: 0x1000 })
        );
        // jmp [0x3000 + rcx*8]
        let (j, _) = decode(&[0xFF, 0x24, 0xCD, 0x00, 0x30, 0x00, 0x00], 0).unwrap();
        assert_eq!(j.opcode, Opcode::JMP);
        assert_eq!(j.operands[0], Operand::Mem(MemOperand { base: None, index: Some((RCX, 8)), disp: 0x3000 }));
        // mov rax, [rsp+8]
        let (k, _) = decode(&[0x48, 0x8B, 0x44, 0x24, 0x08], 0).unwrap();
        assert_eq!(k.operands[1], Operand::Mem(MemOperand::base_disp(RSP, 8)));
    }

    #[test]
    fn short_forms() {
        let (i, _) = decode(&[0x04, 0x7F], 0).unwrap();
        assert_eq!((i.opcode, i.width), (Opcode::ADD, Width::W8));
        let (j, _) = decode(&[0x74, 0x02], 0).unwrap();
        assert_eq!((j.opcode, j.cond.unwrap().0, j.len), (Opcode::JCC, 4, 2));
        let (k, _) = decode(&[0x49, 0xBF, 1, 2, 3, 4, 5, 6, 7, 8], 0).unwrap();
        assert_eq!(k.operands, vec![Operand::Reg(15), Operand::Imm(0x0807060504030201)]);
    }

    #[test]
    fn never_reads_past_fifteen_bytes() {
        let junk = [0x48u8; 40];
        // a run of REX bytes is a single REX plus an unknown opcode
        assert!(matches!(decode(&junk, 0), Err(DecodeError::UnknownEncoding { .. })));
    }
}
