//! The bytecode interpreter: context transfer, per-cell decrypt and dispatch,
//! and native fallback.

use crate::assemble::{Cell, HandlerDesc, ProtectedModule, SENTINEL};
use crate::isa::{cond_holds, decode, effective_address, execute, Alu, ExecError, Flags, Width, RSP};
use crate::machine::{Fault, MachineEnv, MachineState};
use crate::vmir::{VOp, VREGS};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
pub enum VmError {
    #[error("function {0} is not protected by this module")]
    UnknownFunction(u64),
    #[error("cell {cell} names unknown handler {id}")]
    BadHandlerId { cell: u32, id: u16 },
    #[error("cell index {0} out of range")]
    BadCell(u32),
    #[error("malformed operands in cell {0}")]
    BadOperands(u32),
    #[error("control fell off the end of a block at cell {0}")]
    FellOff(u32),
    #[error("context has not exited")]
    NotExited,
    #[error(transparent)]
    Exec(#[from] ExecError),
}

impl From<Fault> for VmError {
    fn from(f: Fault) -> Self {
        VmError::Exec(ExecError::Fault(f))
    }
}

/// Virtualized execution context of one thread.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VmContext {
    /// Guest registers; captured at entry and updated in place.
    pub saved: MachineState,
    pub vregs: [u64; VREGS as usize],
    pub vip: u32,
    pub fid: u64,
    pub flags: Flags,
    pub dispatches: u64,
    pub fallbacks: u64,
    exited: bool,
    pending_next: u32,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum StepStatus {
    Running,
    Exited,
    Threw,
    NeedsFallback { bytes: Vec<u8>, pc: u64, len: u8 },
}

enum Flow {
    Next,
    Goto(u32),
    Exit,
    Throw,
    Native(Vec<u8>, u64, u8),
}

/// Handler routine: one per handler id, selected by its descriptor.
type Routine = fn(&mut VmContext, &HandlerDesc, &Cell, &mut MachineEnv) -> Result<Flow, VmError>;

/// A module bound to its handler routines.
pub struct Vm<'m> {
    pub module: &'m ProtectedModule,
    routines: Vec<Routine>,
}

pub fn vm_enter(state: &MachineState, module: &ProtectedModule, fid: u64) -> Result<VmContext, VmError> {
    let f = module.function(fid).ok_or(VmError::UnknownFunction(fid))?;
    Ok(vm_enter_at(state, fid, f.entry_cell))
}

/// Enter at an arbitrary cell (call continuations, catch pads).
pub fn vm_enter_at(state: &MachineState, fid: u64, cell: u32) -> VmContext {
    VmContext {
        saved: *state,
        vregs: [0; VREGS as usize],
        vip: cell,
        fid,
        flags: state.flags,
        dispatches: 0,
        fallbacks: 0,
        exited: false,
        pending_next: SENTINEL,
    }
}

pub fn vm_exit(ctx: &VmContext) -> Result<MachineState, VmError> {
    if !ctx.exited {
        return Err(VmError::NotExited);
    }
    let mut s = ctx.saved;
    s.flags = ctx.flags;
    Ok(s)
}

impl<'m> Vm<'m> {
    pub fn new(module: &'m ProtectedModule) -> Self {
        let routines = module.handlers.entries.iter().map(|d| routine_for(d.op)).collect();
        Vm { module, routines }
    }

    /// Fetch, decrypt and execute the cell at `ctx.vip`.
    pub fn step(&self, ctx: &mut VmContext, env: &mut MachineEnv) -> Result<StepStatus, VmError> {
        let at = ctx.vip;
        let cell = self.module.fetch_cell(at).ok_or(VmError::BadCell(at))?;
        let desc =
            self.module.handlers.get(cell.handler).ok_or(VmError::BadHandlerId { cell: at, id: cell.handler })?;
        ctx.dispatches += 1;
        match (self.routines[cell.handler as usize])(ctx, desc, &cell, env)? {
            Flow::Next => {
                if cell.next == SENTINEL {
                    return Err(VmError::FellOff(at));
                }
                ctx.vip = cell.next;
                Ok(StepStatus::Running)
            }
            Flow::Goto(c) => {
                ctx.vip = c;
                Ok(StepStatus::Running)
            }
            Flow::Exit => {
                ctx.exited = true;
                Ok(StepStatus::Exited)
            }
            Flow::Throw => {
                ctx.exited = true;
                Ok(StepStatus::Threw)
            }
            Flow::Native(bytes, pc, len) => {
                ctx.pending_next = cell.next;
                Ok(StepStatus::NeedsFallback { bytes, pc, len })
            }
        }
    }
}

pub fn vm_step(ctx: &mut VmContext, module: &ProtectedModule, env: &mut MachineEnv) -> Result<StepStatus, VmError> {
    Vm::new(module).step(ctx, env)
}

/// Leave the VM for one instruction: run it on the reference interpreter
/// against the materialized state and capture the result.
pub fn native_fallback(ctx: &mut VmContext, bytes: &[u8], pc: u64, len: u8, env: &mut MachineEnv) -> Result<(), VmError> {
    let (mut instr, _) = decode(bytes, 0).map_err(|_| ExecError::UnknownEncoding { rip: pc })?;
    instr.len = len;
    let mut s = ctx.saved;
    s.rip = pc;
    s.flags = ctx.flags;
    let out = execute(&instr, &s, env)?;
    ctx.saved.gpr = out.gpr;
    ctx.flags = out.flags;
    ctx.fallbacks += 1;
    if ctx.pending_next == SENTINEL {
        return Err(VmError::FellOff(ctx.vip));
    }
    ctx.vip = ctx.pending_next;
    ctx.pending_next = SENTINEL;
    Ok(())
}

fn routine_for(op: VOp) -> Routine {
    use VOp::*;
    match op {
        VLIMM => r_limm,
        VLOADR => r_loadr,
        VSTORER => r_storer,
        VLOADM => r_loadm,
        VSTOREM => r_storem,
        VEA => r_ea,
        VADD | VADC | VSUB | VSBB | VAND | VOR | VXOR => r_binop,
        VNOT | VNEG | VINC | VDEC => r_unop,
        VSHL | VSHR | VSAR | VROL | VROR => r_shift,
        VMULU | VMULS => r_mul_wide,
        VIMUL => r_imul,
        VDIVU | VDIVS => r_div,
        VMOVX => r_movx,
        VSIGN => r_sign,
        VSELECT => r_select,
        VPUSH => r_push,
        VPOP => r_pop,
        VJMP => r_jmp,
        VJCC => r_jcc,
        VJEQ => r_jeq,
        VCALL => r_call,
        VRET => r_ret,
        VBT => r_bt,
        VBSWAP => r_bswap,
        VTHROW => r_throw,
        VNATIVE => r_native,
        VEXIT => r_exit,
        VNOP => r_nop,
    }
}

fn vr(c: &Cell, i: usize) -> usize {
    (c.words[i] & 7) as usize
}

fn gr(c: &Cell, i: usize) -> u8 {
    (c.words[i] & 15) as u8
}

fn r_limm(x: &mut VmContext, _: &HandlerDesc, c: &Cell, _: &mut MachineEnv) -> Result<Flow, VmError> {
    x.vregs[vr(c, 0)] = c.words[1];
    Ok(Flow::Next)
}

fn r_loadr(x: &mut VmContext, d: &HandlerDesc, c: &Cell, _: &mut MachineEnv) -> Result<Flow, VmError> {
    x.vregs[vr(c, 0)] = x.saved.read_reg(gr(c, 1), d.width);
    Ok(Flow::Next)
}

fn r_storer(x: &mut VmContext, d: &HandlerDesc, c: &Cell, _: &mut MachineEnv) -> Result<Flow, VmError> {
    let v = x.vregs[vr(c, 1)];
    x.saved.write_reg(gr(c, 0), d.width, v);
    Ok(Flow::Next)
}

fn r_loadm(x: &mut VmContext, d: &HandlerDesc, c: &Cell, env: &mut MachineEnv) -> Result<Flow, VmError> {
    x.vregs[vr(c, 0)] = env.memory.read_uint(x.vregs[vr(c, 1)], d.width)?;
    Ok(Flow::Next)
}

fn r_storem(x: &mut VmContext, d: &HandlerDesc, c: &Cell, env: &mut MachineEnv) -> Result<Flow, VmError> {
    env.memory.write_uint(x.vregs[vr(c, 0)], d.width, x.vregs[vr(c, 1)])?;
    Ok(Flow::Next)
}

fn r_ea(x: &mut VmContext, _: &HandlerDesc, c: &Cell, _: &mut MachineEnv) -> Result<Flow, VmError> {
    let m = crate::assemble::unpack_ea(c.words[1]).ok_or(VmError::BadOperands(x.vip))?;
    x.vregs[vr(c, 0)] = effective_address(&x.saved, &m);
    Ok(Flow::Next)
}

fn r_binop(x: &mut VmContext, d: &HandlerDesc, c: &Cell, _: &mut MachineEnv) -> Result<Flow, VmError> {
    let (a, b, w, f) = (x.vregs[vr(c, 1)], x.vregs[vr(c, 2)], d.width, &x.flags);
    let (r, nf) = match d.op {
        VOp::VADD => Alu::add(w, a, b, false, f),
        VOp::VADC => Alu::add(w, a, b, f.cf, f),
        VOp::VSUB => Alu::sub(w, a, b, false, f),
        VOp::VSBB => Alu::sub(w, a, b, f.cf, f),
        VOp::VAND => Alu::logic(w, a & b, f),
        VOp::VOR => Alu::logic(w, a | b, f),
        _ => Alu::logic(w, a ^ b, f),
    };
    x.vregs[vr(c, 0)] = r;
    x.flags = nf;
    Ok(Flow::Next)
}

fn r_unop(x: &mut VmContext, d: &HandlerDesc, c: &Cell, _: &mut MachineEnv) -> Result<Flow, VmError> {
    let (a, w) = (x.vregs[vr(c, 1)], d.width);
    let (r, nf) = match d.op {
        VOp::VNOT => (!a & w.mask(), x.flags),
        VOp::VNEG => Alu::neg(w, a, &x.flags),
        VOp::VINC => Alu::inc(w, a, &x.flags),
        _ => Alu::dec(w, a, &x.flags),
    };
    x.vregs[vr(c, 0)] = r;
    x.flags = nf;
    Ok(Flow::Next)
}

fn r_shift(x: &mut VmContext, d: &HandlerDesc, c: &Cell, _: &mut MachineEnv) -> Result<Flow, VmError> {
    let (a, n, w, f) = (x.vregs[vr(c, 1)], x.vregs[vr(c, 2)], d.width, &x.flags);
    let (r, nf) = match d.op {
        VOp::VSHL => Alu::shl(w, a, n, f),
        VOp::VSHR => Alu::shr(w, a, n, f),
        VOp::VSAR => Alu::sar(w, a, n, f),
        VOp::VROL => Alu::rol(w, a, n, f),
        _ => Alu::ror(w, a, n, f),
    };
    x.vregs[vr(c, 0)] = r;
    x.flags = nf;
    Ok(Flow::Next)
}

fn r_mul_wide(x: &mut VmContext, d: &HandlerDesc, c: &Cell, _: &mut MachineEnv) -> Result<Flow, VmError> {
    let signed = d.op == VOp::VMULS;
    let mul = if signed { Alu::imul_wide } else { Alu::mul_wide };
    let (lo_r, hi_r, src) = (vr(c, 0), vr(c, 1), x.vregs[vr(c, 2)]);
    if d.width == Width::W8 {
        // v0 holds RAX; the product lands in AX
        let ax = x.vregs[lo_r];
        let (lo, hi, nf) = mul(Width::W8, ax & 0xFF, src, &x.flags);
        x.vregs[lo_r] = (ax & !0xFFFF) | lo | hi << 8;
        x.flags = nf;
    } else {
        let (lo, hi, nf) = mul(d.width, x.vregs[lo_r], src, &x.flags);
        x.vregs[lo_r] = lo;
        x.vregs[hi_r] = hi;
        x.flags = nf;
    }
    Ok(Flow::Next)
}

fn r_imul(x: &mut VmContext, d: &HandlerDesc, c: &Cell, _: &mut MachineEnv) -> Result<Flow, VmError> {
    let (r, nf) = Alu::imul_trunc(d.width, x.vregs[vr(c, 1)], x.vregs[vr(c, 2)], &x.flags);
    x.vregs[vr(c, 0)] = r;
    x.flags = nf;
    Ok(Flow::Next)
}

fn r_div(x: &mut VmContext, d: &HandlerDesc, c: &Cell, _: &mut MachineEnv) -> Result<Flow, VmError> {
    let div = if d.op == VOp::VDIVS { Alu::idiv } else { Alu::div };
    let (lo_r, hi_r, dv) = (vr(c, 0), vr(c, 1), x.vregs[vr(c, 2)]);
    let de = || VmError::Exec(ExecError::DivideError { rip: x.saved.rip });
    if d.width == Width::W8 {
        let ax = x.vregs[lo_r];
        let (q, r) = div(Width::W8, (ax >> 8) & 0xFF, ax & 0xFF, dv).map_err(|_| de())?;
        x.vregs[lo_r] = (ax & !0xFFFF) | q | r << 8;
    } else {
        let (q, r) = div(d.width, x.vregs[hi_r], x.vregs[lo_r], dv).map_err(|_| de())?;
        x.vregs[lo_r] = q;
        x.vregs[hi_r] = r;
    }
    Ok(Flow::Next)
}

fn r_movx(x: &mut VmContext, d: &HandlerDesc, c: &Cell, _: &mut MachineEnv) -> Result<Flow, VmError> {
    let v = x.vregs[vr(c, 1)];
    x.vregs[vr(c, 0)] = if c.words[2] == 0 { v & d.width.mask() } else { d.width.sext(v) };
    Ok(Flow::Next)
}

fn r_sign(x: &mut VmContext, d: &HandlerDesc, c: &Cell, _: &mut MachineEnv) -> Result<Flow, VmError> {
    let neg = x.vregs[vr(c, 1)] & d.width.sign_bit() != 0;
    x.vregs[vr(c, 0)] = if neg { d.width.mask() } else { 0 };
    Ok(Flow::Next)
}

fn r_select(x: &mut VmContext, _: &HandlerDesc, c: &Cell, _: &mut MachineEnv) -> Result<Flow, VmError> {
    if cond_holds(c.words[2] as u8, &x.flags) {
        x.vregs[vr(c, 0)] = x.vregs[vr(c, 1)];
    }
    Ok(Flow::Next)
}

fn push(x: &mut VmContext, env: &mut MachineEnv, v: u64) -> Result<(), VmError> {
    let sp = x.saved.gpr[RSP as usize].wrapping_sub(8);
    env.memory.write_u64(sp, v)?;
    x.saved.gpr[RSP as usize] = sp;
    Ok(())
}

fn pop(x: &mut VmContext, env: &mut MachineEnv) -> Result<u64, VmError> {
    let sp = x.saved.gpr[RSP as usize];
    let v = env.memory.read_u64(sp)?;
    x.saved.gpr[RSP as usize] = sp.wrapping_add(8);
    Ok(v)
}

fn r_push(x: &mut VmContext, _: &HandlerDesc, c: &Cell, env: &mut MachineEnv) -> Result<Flow, VmError> {
    push(x, env, x.vregs[vr(c, 0)])?;
    Ok(Flow::Next)
}

fn r_pop(x: &mut VmContext, _: &HandlerDesc, c: &Cell, env: &mut MachineEnv) -> Result<Flow, VmError> {
    x.vregs[vr(c, 0)] = pop(x, env)?;
    Ok(Flow::Next)
}

fn r_jmp(_: &mut VmContext, _: &HandlerDesc, c: &Cell, _: &mut MachineEnv) -> Result<Flow, VmError> {
    Ok(Flow::Goto(c.words[0] as u32))
}

fn r_jcc(x: &mut VmContext, _: &HandlerDesc, c: &Cell, _: &mut MachineEnv) -> Result<Flow, VmError> {
    let taken = cond_holds(c.words[0] as u8, &x.flags);
    Ok(Flow::Goto(if taken { c.words[1] } else { c.words[2] } as u32))
}

fn r_jeq(x: &mut VmContext, _: &HandlerDesc, c: &Cell, _: &mut MachineEnv) -> Result<Flow, VmError> {
    if x.vregs[vr(c, 0)] == c.words[1] {
        Ok(Flow::Goto(c.words[2] as u32))
    } else {
        Ok(Flow::Next)
    }
}

fn target(x: &VmContext, c: &Cell) -> u64 {
    if c.words[0] == 1 {
        x.vregs[vr(c, 1)]
    } else {
        c.words[1]
    }
}

fn r_call(x: &mut VmContext, _: &HandlerDesc, c: &Cell, env: &mut MachineEnv) -> Result<Flow, VmError> {
    let t = target(x, c);
    push(x, env, c.words[2])?;
    x.saved.rip = t;
    Ok(Flow::Exit)
}

fn r_ret(x: &mut VmContext, _: &HandlerDesc, c: &Cell, env: &mut MachineEnv) -> Result<Flow, VmError> {
    let ret = pop(x, env)?;
    x.saved.gpr[RSP as usize] = x.saved.gpr[RSP as usize].wrapping_add(c.words[0] & 0xFFFF);
    x.saved.rip = ret;
    Ok(Flow::Exit)
}

fn r_bt(x: &mut VmContext, d: &HandlerDesc, c: &Cell, _: &mut MachineEnv) -> Result<Flow, VmError> {
    x.flags = Alu::bt(d.width, x.vregs[vr(c, 0)], x.vregs[vr(c, 1)], &x.flags);
    Ok(Flow::Next)
}

fn r_bswap(x: &mut VmContext, d: &HandlerDesc, c: &Cell, _: &mut MachineEnv) -> Result<Flow, VmError> {
    x.vregs[vr(c, 0)] = Alu::bswap(d.width, x.vregs[vr(c, 1)]);
    Ok(Flow::Next)
}

fn r_throw(x: &mut VmContext, _: &HandlerDesc, c: &Cell, env: &mut MachineEnv) -> Result<Flow, VmError> {
    push(x, env, c.words[1])?;
    x.saved.rip = c.words[0];
    Ok(Flow::Throw)
}

fn r_native(x: &mut VmContext, _: &HandlerDesc, c: &Cell, _: &mut MachineEnv) -> Result<Flow, VmError> {
    let mut buf = [0u8; 16];
    buf[..8].copy_from_slice(&c.words[0].to_le_bytes());
    buf[8..].copy_from_slice(&c.words[1].to_le_bytes());
    let n = (buf[15] as usize).min(15);
    if n == 0 {
        return Err(VmError::BadOperands(x.vip));
    }
    let pc = c.words[2] & ((1 << 56) - 1);
    Ok(Flow::Native(buf[..n].to_vec(), pc, (c.words[2] >> 56) as u8))
}

fn r_exit(x: &mut VmContext, _: &HandlerDesc, c: &Cell, _: &mut MachineEnv) -> Result<Flow, VmError> {
    x.saved.rip = target(x, c);
    Ok(Flow::Exit)
}

fn r_nop(_: &mut VmContext, _: &HandlerDesc, _: &Cell, _: &mut MachineEnv) -> Result<Flow, VmError> {
    Ok(Flow::Next)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::asm::{imm, r, Asm};
    use crate::isa::{Opcode, Width, RAX, RBX};
    use crate::machine::layout;
    use crate::pipeline::{call_state, obfuscate, prepare, ManifestFunction, ObfuscateOptions, ProgramManifest};

    fn leaf() -> ProgramManifest {
        let mut a = Asm::new(layout::CODE_BASE);
        a.op(Opcode::MOV, Width::W64, vec![r(RAX), imm(7)]).op(Opcode::ADD, Width::W64, vec![r(RAX), r(RBX)]).ret();
        let code = a.finish().unwrap().bytes;
        ProgramManifest {
            functions: vec![ManifestFunction {
                name: "f".into(),
                fid: 1,
                addr: layout::CODE_BASE,
                code: hex::encode(code),
                noreturn: false,
                meta: None,
            }],
            entry: "f".into(),
            protect: vec!["f".into()],
            ..Default::default()
        }
    }

    #[test]
    fn steps_to_exit_and_returns() {
        let m = leaf();
        let module = obfuscate(&m, &ObfuscateOptions::default()).unwrap();
        let (mut env, _) = prepare(&m, Some(module.clone())).unwrap();
        let mut st = call_state(&mut env, layout::CODE_BASE);
        st.gpr[RBX as usize] = 35;
        let mut ctx = vm_enter(&st, &module, 1).unwrap();
        assert_eq!(vm_exit(&ctx), Err(VmError::NotExited));
        let vm = Vm::new(&module);
        let mut n = 0;
        while vm.step(&mut ctx, &mut env).unwrap() == StepStatus::Running {
            n += 1;
            assert!(n < 1000);
        }
        let out = vm_exit(&ctx).unwrap();
        assert_eq!(out.gpr[RAX as usize], 42);
        assert_eq!(out.rip, layout::HALT);
        assert_eq!(out.gpr[4], st.gpr[4] + 8);
        assert!(ctx.dispatches > 3);
    }

    #[test]
    fn unknown_function_and_bad_cell() {
        let m = leaf();
        let module = obfuscate(&m, &ObfuscateOptions::default()).unwrap();
        let st = MachineState::new(layout::CODE_BASE, layout::INITIAL_RSP);
        assert_eq!(vm_enter(&st, &module, 9), Err(VmError::UnknownFunction(9)));
        let mut env = m.load_env().unwrap();
        let mut ctx = vm_enter_at(&st, 1, u32::MAX - 1);
        assert_eq!(vm_step(&mut ctx, &module, &mut env), Err(VmError::BadCell(u32::MAX - 1)));
    }
}
