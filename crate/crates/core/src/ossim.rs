//! Simulated OS exception dispatch: the frame walk, language-specific
//! handling of genuine metadata and the interceptor for shadowed frames.

use crate::assemble::crypt_stream;
use crate::eh::{decode_metadata, plan_actions, state_for_pc, unwind_frame, ContextRecord, EhError, UnwindInfo, UnwindPlan};
use crate::isa::{RAX, RCX, RDX};
use crate::machine::{layout, MachineEnv, MachineState};
use crate::process::{drive, FrameMeta, RunError, RunState, Runtime, Stop};
use crate::shadow::{payload_nonce, ShadowRecord};
use serde::{Deserialize, Serialize};

/// Gap left between the throw-time stack pointer and a destructor's stack.
const DTOR_STACK_GAP: u64 = 0x400;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExceptionObject {
    pub id: u64,
    pub type_id: u64,
    pub payload: u64,
}

/// Where execution continues after a catch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Resume {
    Native(u64),
    Cell { fid: u64, cell: u32, pc: u64 },
}

impl Resume {
    pub fn pc(&self) -> u64 {
        match *self {
            Resume::Native(pc) | Resume::Cell { pc, .. } => pc,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DispatchOutcome {
    ContinueUnwind,
    HandledAt { resume: Resume, frame_rsp: u64, state: i32 },
    Unhandled,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AuditEvent {
    Throw { id: u64, type_id: u64, pc: u64 },
    Rethrow { id: u64 },
    FrameDispatched { fid: u64, pc: u64, shadowed: bool },
    DestructorRun { fid: u64 },
    ShadowApplied { fid: u64 },
    Rollback { fid: u64 },
    Decrypt { fid: u64, len: usize },
    Sanitize { fid: u64, len: usize },
    CatchCommit { fid: u64, pc: u64, id: u64 },
    Unhandled { id: u64 },
}

/// Plaintext metadata recovered by the interceptor. Must be wiped.
struct PlainBuffer {
    fid: u64,
    bytes: Vec<u8>,
}

impl PlainBuffer {
    fn open(rt: &Runtime, fid: u64, audit: &mut Vec<AuditEvent>) -> Result<Self, RunError> {
        let m = rt.module.as_ref().ok_or_else(|| RunError::Eh("no protected module".into()))?;
        let entry = m.payload_for(fid).ok_or_else(|| RunError::Eh(format!("no payload for function {}", fid)))?;
        let bytes = crypt_stream(&m.key, payload_nonce(m.eh_nonce, fid), &entry.ciphertext);
        audit.push(AuditEvent::Decrypt { fid, len: bytes.len() });
        Ok(PlainBuffer { fid, bytes })
    }

    fn sanitize(mut self, audit: &mut Vec<AuditEvent>) {
        self.bytes.iter_mut().for_each(|b| *b = 0);
        std::hint::black_box(&self.bytes);
        audit.push(AuditEvent::Sanitize { fid: self.fid, len: self.bytes.len() });
    }
}

/// Raise from the throw entry: `state.rip` is the throw entry and the
/// return address of the throwing call is on the stack.
pub fn raise_exception(
    env: &mut MachineEnv,
    rt: &Runtime,
    rs: &mut RunState,
    exc: ExceptionObject,
    state: &MachineState,
) -> Result<(DispatchOutcome, MachineState), RunError> {
    let (s, pc) = pop_return(env, state)?;
    rs.audit.push(AuditEvent::Throw { id: exc.id, type_id: exc.type_id, pc });
    walk(env, rt, rs, exc, s)
}

/// Re-raise the active exception from the rethrow entry.
pub fn rethrow(
    env: &mut MachineEnv,
    rt: &Runtime,
    rs: &mut RunState,
    state: &MachineState,
) -> Result<(DispatchOutcome, MachineState), RunError> {
    let exc = rs.active.clone().ok_or(RunError::NoActiveException)?;
    let (s, _) = pop_return(env, state)?;
    rs.audit.push(AuditEvent::Rethrow { id: exc.id });
    walk(env, rt, rs, exc, s)
}

fn pop_return(env: &MachineEnv, state: &MachineState) -> Result<(MachineState, u64), RunError> {
    let mut s = *state;
    let ret = env.memory.read_u64(s.rsp())?;
    s.rip = ret;
    s.set_rsp(s.rsp().wrapping_add(8));
    Ok((s, ret))
}

fn walk(
    env: &mut MachineEnv,
    rt: &Runtime,
    rs: &mut RunState,
    exc: ExceptionObject,
    state: MachineState,
) -> Result<(DispatchOutcome, MachineState), RunError> {
    rs.active = Some(exc.clone());
    let live_rsp = state.rsp();
    let mut rec = ContextRecord::new(state);
    let mut frames = 0u64;
    loop {
        // the return address points past the call, so look up the byte before it
        let Some(meta) = rt.registry.lookup(rec.state.rip.wrapping_sub(1)) else {
            rs.stats.frames_per_raise.push(frames);
            rs.audit.push(AuditEvent::Unhandled { id: exc.id });
            return Ok((DispatchOutcome::Unhandled, state));
        };
        frames += 1;
        let (out, next) = dispatch_frame(env, rt, rs, &rec, meta, &exc, live_rsp)?;
        match out {
            DispatchOutcome::ContinueUnwind => rec = next,
            DispatchOutcome::HandledAt { resume, .. } => {
                rs.stats.frames_per_raise.push(frames);
                let mut live = next.state;
                live.rip = resume.pc();
                live.gpr[RAX as usize] = exc.id;
                live.gpr[RDX as usize] = exc.payload;
                rs.audit.push(AuditEvent::CatchCommit { fid: meta.fid(), pc: resume.pc(), id: exc.id });
                return Ok((out, live));
            }
            DispatchOutcome::Unhandled => unreachable!(),
        }
    }
}

/// Handle one frame. Returns the outcome and the record to continue with
/// (the caller's context on `ContinueUnwind`, the frame's own on a catch).
pub fn dispatch_frame(
    env: &mut MachineEnv,
    rt: &Runtime,
    rs: &mut RunState,
    rec: &ContextRecord,
    meta: &FrameMeta,
    exc: &ExceptionObject,
    live_rsp: u64,
) -> Result<(DispatchOutcome, ContextRecord), RunError> {
    let pc = rec.state.rip;
    match meta {
        FrameMeta::Plain(info) => {
            rs.audit.push(AuditEvent::FrameDispatched { fid: info.range.fid, pc, shadowed: false });
            genuine_handling(env, rt, rs, rec, info, exc, live_rsp)
        }
        FrameMeta::Shadow(s) => {
            rs.audit.push(AuditEvent::FrameDispatched { fid: s.fid(), pc, shadowed: true });
            let snapshot = *rec;
            let shadowed = s.apply(rec, &env.memory)?;
            rs.audit.push(AuditEvent::ShadowApplied { fid: s.fid() });
            eh_interceptor(env, rt, rs, &shadowed, &snapshot, s, exc, live_rsp)
        }
    }
}

/// Language-specific handling followed, if nothing catches, by the frame unwind.
fn genuine_handling(
    env: &mut MachineEnv,
    rt: &Runtime,
    rs: &mut RunState,
    rec: &ContextRecord,
    info: &UnwindInfo,
    exc: &ExceptionObject,
    live_rsp: u64,
) -> Result<(DispatchOutcome, ContextRecord), RunError> {
    if let Some(lsd) = info.lsd.as_ref().filter(|_| info.handler != 0) {
        let state = state_for_pc(lsd, rec.state.rip.wrapping_sub(1));
        let plan = plan_actions(lsd, state, exc.type_id, &rt.types)?;
        for &d in plan.dtors() {
            run_destructor(env, rt, rs, d, rec, live_rsp)?;
        }
        if let UnwindPlan::CatchFound { target, state, .. } = plan {
            let resume = rt.resume_for(target);
            return Ok((DispatchOutcome::HandledAt { resume, frame_rsp: rec.state.rsp(), state }, *rec));
        }
    }
    Ok((DispatchOutcome::ContinueUnwind, unwind_frame(rec, &info.codes, &env.memory)?))
}

/// Entered as the LSHandler of a shadowed frame: undo the shadow codes,
/// recover the genuine metadata and replay the real handling. The plaintext
/// is wiped on every path.
#[allow(clippy::too_many_arguments)]
pub fn eh_interceptor(
    env: &mut MachineEnv,
    rt: &Runtime,
    rs: &mut RunState,
    shadowed: &ContextRecord,
    snapshot: &ContextRecord,
    record: &ShadowRecord,
    exc: &ExceptionObject,
    live_rsp: u64,
) -> Result<(DispatchOutcome, ContextRecord), RunError> {
    let fid = record.fid();
    rs.stats.interceptor_calls += 1;
    let rec = record.rollback(shadowed, snapshot);
    rs.audit.push(AuditEvent::Rollback { fid });
    if rec != *snapshot {
        return Err(RunError::Eh(format!("rollback of function {} did not restore the context", fid)));
    }
    let buf = PlainBuffer::open(rt, fid, &mut rs.audit)?;
    let result = decode_metadata(&buf.bytes).map_err(RunError::from).and_then(|info| {
        if info.range != record.range {
            return Err(EhError::MalformedMetadata(format!("payload does not describe function {}", fid)).into());
        }
        genuine_handling(env, rt, rs, &rec, &info, exc, live_rsp)
    });
    buf.sanitize(&mut rs.audit);
    result
}

/// Run destructor `fid` with `rcx` = the frame's stack pointer, on a stack
/// carved out below the throw-time stack.
fn run_destructor(
    env: &mut MachineEnv,
    rt: &Runtime,
    rs: &mut RunState,
    fid: u64,
    rec: &ContextRecord,
    live_rsp: u64,
) -> Result<(), RunError> {
    let addr = env
        .code_images
        .get(&fid)
        .map(|c| c.addr)
        .ok_or_else(|| RunError::Destructor { fid, detail: "not loaded".into() })?;
    rs.audit.push(AuditEvent::DestructorRun { fid });
    let sp = (live_rsp.wrapping_sub(DTOR_STACK_GAP) & !0xF).wrapping_sub(8);
    env.memory.write_u64(sp, layout::DTOR_RETURN)?;
    let mut s = rec.state;
    s.gpr[RCX as usize] = rec.state.rsp();
    s.set_rsp(sp);
    s.rip = addr;
    let saved_active = rs.active.clone();
    let r = drive(env, rt, rs, s, rt.vm_cell_for(addr));
    rs.active = saved_active;
    match r {
        Ok((Stop::Returned, _)) => Ok(()),
        Ok((Stop::Redirect(pc), _)) => Err(RunError::Destructor { fid, detail: format!("left through {:#x}", pc) }),
        Ok((Stop::Unhandled(e), _)) => Err(RunError::Destructor { fid, detail: format!("threw {}", e.type_id) }),
        Err((e, _)) => Err(RunError::Destructor { fid, detail: e.to_string() }),
    }
}
