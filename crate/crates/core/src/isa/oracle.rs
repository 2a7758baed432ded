//! Reference single-step interpreter. Ground truth for every differential test.

use super::{cond_holds, decode, Alu, DecodeError, Instruction, MemOperand, Opcode, Operand, Width};
use super::{RAX, RBP, RDX};
use crate::machine::{Fault, MachineEnv, MachineState};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Error, Serialize, Deserialize)]
pub enum ExecError {
    #[error("{0}")]
    Fault(Fault),
    #[error("divide error at {rip:#x}")]
    DivideError { rip: u64 },
    #[error("unknown encoding at {rip:#x}")]
    UnknownEncoding { rip: u64 },
    #[error("breakpoint at {rip:#x}")]
    Breakpoint { rip: u64 },
}

impl From<Fault> for ExecError {
    fn from(f: Fault) -> Self {
        ExecError::Fault(f)
    }
}

/// Fetch and decode the instruction at `rip`.
pub(crate) fn fetch(env: &MachineEnv, rip: u64) -> Result<Instruction, ExecError> {
    let bytes = env.memory.fetch(rip, 15);
    match decode(&bytes, 0) {
        Ok((i, _)) => Ok(i),
        Err(DecodeError::TruncatedInstruction { .. }) if bytes.len() < 15 => {
            Err(ExecError::Fault(Fault { addr: rip.wrapping_add(bytes.len() as u64), write: false }))
        }
        Err(_) => Err(ExecError::UnknownEncoding { rip }),
    }
}

/// Execute the instruction at `state.rip`.
///
/// Atomic: on error neither the returned state nor `env` reflect any part of
/// the instruction.
pub fn oracle_step(state: &MachineState, env: &mut MachineEnv) -> Result<MachineState, ExecError> {
    let instr = fetch(env, state.rip)?;
    execute(&instr, state, env)
}

/// Execute an already decoded instruction located at `state.rip`.
pub fn execute(instr: &Instruction, state: &MachineState, env: &mut MachineEnv) -> Result<MachineState, ExecError> {
    let mut x = Exec { s: *state, env, writes: Vec::new() };
    x.s.rip = state.rip.wrapping_add(instr.len as u64);
    x.run(instr, state.rip)?;
    for (addr, w, _) in &x.writes {
        x.env.memory.check_write(*addr, w.bytes())?;
    }
    let Exec { s, env, writes } = x;
    for (addr, w, v) in writes {
        env.memory.write_uint(addr, w, v).expect("checked");
    }
    Ok(s)
}

pub(crate) fn effective_address(s: &MachineState, m: &MemOperand) -> u64 {
    let mut a = m.disp as i64 as u64;
    if let Some(b) = m.base {
        a = a.wrapping_add(s.gpr[b as usize]);
    }
    if let Some((i, sc)) = m.index {
        a = a.wrapping_add(s.gpr[i as usize].wrapping_mul(sc as u64));
    }
    a
}

struct Exec<'a> {
    s: MachineState,
    env: &'a mut MachineEnv,
    writes: Vec<(u64, Width, u64)>,
}

impl Exec<'_> {
    fn read(&self, op: &Operand, w: Width) -> Result<u64, ExecError> {
        Ok(match op {
            Operand::Reg(r) => self.s.read_reg(*r, w),
            Operand::Imm(v) => (*v as u64) & w.mask(),
            Operand::Mem(m) => self.env.memory.read_uint(effective_address(&self.s, m), w)?,
        })
    }

    fn write(&mut self, op: &Operand, w: Width, v: u64) {
        match op {
            Operand::Reg(r) => self.s.write_reg(*r, w, v),
            Operand::Mem(m) => {
                let a = effective_address(&self.s, m);
                self.writes.push((a, w, v & w.mask()));
            }
            Operand::Imm(_) => unreachable!("write to immediate"),
        }
    }

    fn push(&mut self, v: u64) {
        let rsp = self.s.rsp().wrapping_sub(8);
        self.s.set_rsp(rsp);
        self.writes.push((rsp, Width::W64, v));
    }

    fn pop(&mut self) -> Result<u64, ExecError> {
        let rsp = self.s.rsp();
        let v = self.env.memory.read_u64(rsp)?;
        self.s.set_rsp(rsp.wrapping_add(8));
        Ok(v)
    }

    fn run(&mut self, i: &Instruction, pc: u64) -> Result<(), ExecError> {
        use Opcode::*;
        let w = i.width;
        let ops = &i.operands;
        let f = self.s.flags;
        let cc = i.cond.map(|c| c.0).unwrap_or(0);
        match i.opcode {
            MOV => {
                let v = self.read(&ops[1], w)?;
                self.write(&ops[0], w, v);
            }
            MOVZX | MOVSX => {
                let sw = i.src_width.unwrap_or(Width::W8);
                let v = self.read(&ops[1], sw)?;
                let v = if i.opcode == MOVSX { sw.sext(v) } else { v };
                self.write(&ops[0], w, v & w.mask());
            }
            LEA => {
                let a = effective_address(&self.s, ops[1].mem().unwrap());
                self.write(&ops[0], w, a);
            }
            XCHG => {
                let a = self.read(&ops[0], w)?;
                let b = self.read(&ops[1], w)?;
                self.write(&ops[0], w, b);
                self.write(&ops[1], w, a);
            }
            ADD | ADC | SUB | SBB | CMP => {
                let a = self.read(&ops[0], w)?;
                let b = self.read(&ops[1], w)?;
                let (r, nf) = match i.opcode {
                    ADD => Alu::add(w, a, b, false, &f),
                    ADC => Alu::add(w, a, b, f.cf, &f),
                    SBB => Alu::sub(w, a, b, f.cf, &f),
                    _ => Alu::sub(w, a, b, false, &f),
                };
                self.s.flags = nf;
                if i.opcode != CMP {
                    self.write(&ops[0], w, r);
                }
            }
            AND | OR | XOR | TEST => {
                let a = self.read(&ops[0], w)?;
                let b = self.read(&ops[1], w)?;
                let r = match i.opcode {
                    OR => a | b,
                    XOR => a ^ b,
                    _ => a & b,
                };
                let (r, nf) = Alu::logic(w, r, &f);
                self.s.flags = nf;
                if i.opcode != TEST {
                    self.write(&ops[0], w, r);
                }
            }
            NOT => {
                let a = self.read(&ops[0], w)?;
                self.write(&ops[0], w, !a);
            }
            NEG | INC | DEC => {
                let a = self.read(&ops[0], w)?;
                let (r, nf) = match i.opcode {
                    NEG => Alu::neg(w, a, &f),
                    INC => Alu::inc(w, a, &f),
                    _ => Alu::dec(w, a, &f),
                };
                self.s.flags = nf;
                self.write(&ops[0], w, r);
            }
            SHL | SHR | SAR | ROL | ROR => {
                let a = self.read(&ops[0], w)?;
                let n = self.read(&ops[1], Width::W8)?;
                let (r, nf) = match i.opcode {
                    SHL => Alu::shl(w, a, n, &f),
                    SHR => Alu::shr(w, a, n, &f),
                    SAR => Alu::sar(w, a, n, &f),
                    ROL => Alu::rol(w, a, n, &f),
                    _ => Alu::ror(w, a, n, &f),
                };
                self.s.flags = nf;
                self.write(&ops[0], w, r);
            }
            IMUL if ops.len() >= 2 => {
                let (a, b) = if ops.len() == 3 {
                    (self.read(&ops[1], w)?, self.read(&ops[2], w)?)
                } else {
                    (self.read(&ops[0], w)?, self.read(&ops[1], w)?)
                };
                let (r, nf) = Alu::imul_trunc(w, a, b, &f);
                self.s.flags = nf;
                self.write(&ops[0], w, r);
            }
            MUL | IMUL => {
                let a = self.s.read_reg(RAX, w);
                let b = self.read(&ops[0], w)?;
                let (lo, hi, nf) =
                    if i.opcode == MUL { Alu::mul_wide(w, a, b, &f) } else { Alu::imul_wide(w, a, b, &f) };
                self.s.flags = nf;
                self.store_wide(w, lo, hi);
            }
            DIV | IDIV => {
                let d = self.read(&ops[0], w)?;
                let (hi, lo) = self.load_wide(w);
                let res = if i.opcode == DIV { Alu::div(w, hi, lo, d) } else { Alu::idiv(w, hi, lo, d) };
                let (q, r) = res.map_err(|_| ExecError::DivideError { rip: pc })?;
                self.store_wide(w, q, r);
            }
            CDQ => {
                let v = if self.s.gpr[RAX as usize] & 0x8000_0000 != 0 { 0xFFFF_FFFF } else { 0 };
                self.s.write_reg(RDX, Width::W32, v);
            }
            CQO => {
                let v = if self.s.gpr[RAX as usize] >> 63 != 0 { u64::MAX } else { 0 };
                self.s.write_reg(RDX, Width::W64, v);
            }
            PUSH => {
                let v = self.read(&ops[0], Width::W64)?;
                self.push(v);
            }
            POP => {
                let v = self.pop()?;
                self.write(&ops[0], Width::W64, v);
            }
            CALL => {
                let target = self.target(&ops[0])?;
                let ret = self.s.rip;
                self.push(ret);
                self.s.rip = target;
            }
            RET => {
                let t = self.pop()?;
                let extra = ops.first().and_then(|o| o.imm()).unwrap_or(0) as u64;
                let rsp = self.s.rsp().wrapping_add(extra);
                self.s.set_rsp(rsp);
                self.s.rip = t;
            }
            JMP => {
                self.s.rip = self.target(&ops[0])?;
            }
            JCC => {
                if cond_holds(cc, &f) {
                    self.s.rip = self.target(&ops[0])?;
                }
            }
            SETCC => {
                self.write(&ops[0], Width::W8, cond_holds(cc, &f) as u64);
            }
            CMOVCC => {
                let v = self.read(&ops[1], w)?;
                let old = self.read(&ops[0], w)?;
                let v = if cond_holds(cc, &f) { v } else { old };
                self.write(&ops[0], w, v);
            }
            NOP => {}
            INT3 => return Err(ExecError::Breakpoint { rip: pc }),
            LEAVE => {
                self.s.set_rsp(self.s.gpr[RBP as usize]);
                let v = self.pop()?;
                self.s.gpr[RBP as usize] = v;
            }
            BSWAP => {
                let a = self.read(&ops[0], w)?;
                self.write(&ops[0], w, Alu::bswap(w, a));
            }
            BT => {
                let a = self.read(&ops[0], w)?;
                let b = self.read(&ops[1], w)?;
                self.s.flags = Alu::bt(w, a, b, &f);
            }
        }
        Ok(())
    }

    fn target(&self, op: &Operand) -> Result<u64, ExecError> {
        Ok(match op {
            Operand::Imm(d) => self.s.rip.wrapping_add(*d as u64),
            o => self.read(o, Width::W64)?,
        })
    }

    /// Dividend halves (hi, lo): AH:AL, EDX:EAX or RDX:RAX.
    fn load_wide(&self, w: Width) -> (u64, u64) {
        let rax = self.s.gpr[RAX as usize];
        match w {
            Width::W8 => ((rax >> 8) & 0xFF, rax & 0xFF),
            _ => (self.s.read_reg(RDX, w), self.s.read_reg(RAX, w)),
        }
    }

    fn store_wide(&mut self, w: Width, lo: u64, hi: u64) {
        match w {
            Width::W8 => {
                let rax = &mut self.s.gpr[RAX as usize];
                *rax = (*rax & !0xFFFF) | ((hi & 0xFF) << 8) | (lo & 0xFF);
            }
            _ => {
                self.s.write_reg(RAX, w, lo);
                self.s.write_reg(RDX, w, hi);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::isa::{encode, RBX};
    use crate::machine::layout;

    fn run(instr: Instruction, s: MachineState) -> (MachineState, MachineEnv) {
        let mut env = MachineEnv::with_standard_layout();
        let bytes = encode(&instr).unwrap();
        env.memory.load(layout::CODE_BASE, &bytes);
        let mut s = s;
        s.rip = layout::CODE_BASE;
        let out = oracle_step(&s, &mut env).unwrap();
        (out, env)
    }

    fn rr(op: Opcode, a: u8, b: u8) -> Instruction {
        Instruction::new(op, Width::W64, vec![Operand::Reg(a), Operand::Reg(b)])
    }

    #[test]
    fn add_examples() {
        let mut s = MachineState::default();
        s.gpr[RAX as usize] = 1;
        s.gpr[RBX as usize] = 2;
        let (o, _) = run(rr(Opcode::ADD, RAX, RBX), s);
        assert_eq!(o.gpr[0], 3);
        assert!(!o.flags.zf && !o.flags.cf && !o.flags.of);
        assert_eq!(o.rip, layout::CODE_BASE + 3);

        s.gpr[RAX as usize] = u64::MAX;
        s.gpr[RBX as usize] = 1;
        let (o, _) = run(rr(Opcode::ADD, RAX, RBX), s);
        assert_eq!(o.gpr[0], 0);
        assert!(o.flags.cf && o.flags.zf);
    }

    #[test]
    fn shl_example() {
        let mut s = MachineState::default();
        s.gpr[0] = 0x8000_0000_0000_0000;
        let i = Instruction::new(Opcode::SHL, Width::W64, vec![Operand::Reg(RAX), Operand::Imm(1)]);
        let (o, _) = run(i, s);
        assert_eq!(o.gpr[0], 0);
        assert!(o.flags.cf && o.flags.of);
    }

    #[test]
    fn faulting_store_changes_nothing() {
        let mut env = MachineEnv::with_standard_layout();
        let i = Instruction::new(
            Opcode::PUSH,
            Width::W64,
            vec![Operand::Mem(MemOperand::absolute(0x1000))],
        );
        env.memory.load(layout::CODE_BASE, &encode(&i).unwrap());
        let mut s = MachineState::new(layout::CODE_BASE, 0x10);
        s.gpr[RBX as usize] = 7;
        let before = env.clone();
        let e = oracle_step(&s, &mut env).unwrap_err();
        assert_eq!(e, ExecError::Fault(Fault { addr: 0x8, write: true }));
        assert_eq!(env, before);
    }

    #[test]
    fn divide_by_zero() {
        let i = Instruction::new(Opcode::DIV, Width::W32, vec![Operand::Reg(RBX)]);
        let mut env = MachineEnv::with_standard_layout();
        env.memory.load(layout::CODE_BASE, &encode(&i).unwrap());
        let s = MachineState::new(layout::CODE_BASE, layout::INITIAL_RSP);
        assert_eq!(oracle_step(&s, &mut env), Err(ExecError::DivideError { rip: layout::CODE_BASE }));
    }

    #[test]
    fn byte_mul_writes_ax() {
        let mut s = MachineState::default();
        s.gpr[0] = 0xFFFF_FFFF_FFFF_0010;
        s.gpr[RBX as usize] = 0x20;
        let (o, _) = run(Instruction::new(Opcode::MUL, Width::W8, vec![Operand::Reg(RBX)]), s);
        assert_eq!(o.gpr[0], 0xFFFF_FFFF_FFFF_0200);
        assert!(o.flags.cf);
    }
}
