//! Process-level execution: reference interpretation of native code with
//! transfers into the VM at protected entries and re-entry points.

use crate::assemble::ProtectedModule;
use crate::eh::{decode_metadata, EhError, TypeTable, UnwindInfo};
use crate::isa::{oracle_step, ExecError, RCX, RDX};
use crate::machine::{layout, MachineEnv, MachineState};
use crate::ossim::{raise_exception, rethrow, AuditEvent, DispatchOutcome, ExceptionObject, Resume};
use crate::runtime::{native_fallback, vm_enter_at, vm_exit, StepStatus, Vm, VmError};
use crate::shadow::ShadowRecord;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

pub const DEFAULT_STEP_LIMIT: u64 = 10_000_000;

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
pub enum RunError {
    #[error(transparent)]
    Exec(ExecError),
    #[error(transparent)]
    Vm(VmError),
    #[error("{0}")]
    Eh(String),
    #[error("rethrow without an active exception")]
    NoActiveException,
    #[error("step limit exceeded")]
    StepLimitExceeded,
    #[error("destructor {fid} failed: {detail}")]
    Destructor { fid: u64, detail: String },
}

impl From<ExecError> for RunError {
    fn from(e: ExecError) -> Self {
        RunError::Exec(e)
    }
}

impl From<crate::machine::Fault> for RunError {
    fn from(f: crate::machine::Fault) -> Self {
        RunError::Exec(ExecError::Fault(f))
    }
}

impl From<VmError> for RunError {
    fn from(e: VmError) -> Self {
        match e {
            VmError::Exec(x) => RunError::Exec(x),
            other => RunError::Vm(other),
        }
    }
}

impl From<EhError> for RunError {
    fn from(e: EhError) -> Self {
        match e {
            EhError::Fault(f) => f.into(),
            other => RunError::Eh(other.to_string()),
        }
    }
}

/// Unwind metadata as the dispatcher sees it.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FrameMeta {
    Plain(UnwindInfo),
    Shadow(ShadowRecord),
}

impl FrameMeta {
    pub fn fid(&self) -> u64 {
        match self {
            FrameMeta::Plain(i) => i.range.fid,
            FrameMeta::Shadow(s) => s.fid(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MetadataRegistry {
    frames: BTreeMap<u64, (u64, FrameMeta)>,
}

impl MetadataRegistry {
    /// Genuine metadata for unprotected functions, plus whatever the module
    /// carries for the protected ones.
    pub fn build(plain: &[UnwindInfo], module: Option<&ProtectedModule>) -> Result<Self, EhError> {
        let mut r = MetadataRegistry::default();
        let protected = |fid| module.is_some_and(|m| m.function(fid).is_some());
        for info in plain.iter().filter(|i| !protected(i.range.fid)) {
            r.insert(FrameMeta::Plain(info.clone()), info.range.start, info.range.end);
        }
        if let Some(m) = module {
            for s in &m.shadow {
                r.insert(FrameMeta::Shadow(s.clone()), s.range.start, s.range.end);
            }
            for p in &m.plain_eh {
                let info = decode_metadata(&p.bytes)?;
                r.insert(FrameMeta::Plain(info.clone()), info.range.start, info.range.end);
            }
        }
        Ok(r)
    }

    fn insert(&mut self, m: FrameMeta, start: u64, end: u64) {
        self.frames.insert(start, (end, m));
    }

    pub fn lookup(&self, pc: u64) -> Option<&FrameMeta> {
        let (_, (end, m)) = self.frames.range(..=pc).next_back()?;
        (pc < *end).then_some(m)
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// Everything a run needs besides the mutable environment.
pub struct Runtime {
    pub module: Option<ProtectedModule>,
    pub registry: MetadataRegistry,
    pub types: TypeTable,
    vm_index: BTreeMap<u64, (u64, u32)>,
}

impl Runtime {
    pub fn new(module: Option<ProtectedModule>, plain: &[UnwindInfo], types: TypeTable) -> Result<Self, EhError> {
        let registry = MetadataRegistry::build(plain, module.as_ref())?;
        let mut vm_index = BTreeMap::new();
        if let Some(m) = &module {
            for f in &m.functions {
                for (pc, c) in &f.reentry {
                    vm_index.insert(*pc, (f.fid, *c));
                }
                vm_index.insert(f.entry_pc, (f.fid, f.entry_cell));
            }
        }
        Ok(Runtime { module, registry, types, vm_index })
    }

    /// Runtime without protection: pure reference execution.
    pub fn native(plain: &[UnwindInfo], types: TypeTable) -> Result<Self, EhError> {
        Self::new(None, plain, types)
    }

    /// (function, cell) at which the VM takes over when control reaches `pc`.
    pub fn vm_cell_for(&self, pc: u64) -> Option<(u64, u32)> {
        self.vm_index.get(&pc).copied()
    }

    pub fn resume_for(&self, pc: u64) -> Resume {
        match self.vm_cell_for(pc) {
            Some((fid, cell)) => Resume::Cell { fid, cell, pc },
            None => Resume::Native(pc),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunStats {
    pub oracle_steps: u64,
    pub dispatches: u64,
    pub fallbacks: u64,
    pub vm_entries: u64,
    /// Frames processed by each raise, in order.
    pub frames_per_raise: Vec<u64>,
    pub interceptor_calls: u64,
}

/// Mutable per-execution state shared with nested destructor runs.
#[derive(Debug, Default)]
pub struct RunState {
    pub stats: RunStats,
    pub audit: Vec<AuditEvent>,
    pub active: Option<ExceptionObject>,
    pub next_object_id: u64,
    pub steps: u64,
    pub limit: u64,
    pub trace: Option<Vec<String>>,
}

impl RunState {
    pub fn new(limit: u64) -> Self {
        RunState { limit, next_object_id: 1, ..Default::default() }
    }

    pub fn with_trace(mut self) -> Self {
        self.trace = Some(vec![]);
        self
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum OutcomeKind {
    NormalReturn,
    TailRedirect(u64),
    ExceptionRaised(ExceptionObject),
    Fault(RunError),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunOutcome {
    pub kind: OutcomeKind,
    pub state: MachineState,
    pub stats: RunStats,
    pub audit: Vec<AuditEvent>,
    pub trace: Option<Vec<String>>,
}

/// Why a drive loop stopped without error.
pub(crate) enum Stop {
    Returned,
    Redirect(u64),
    Unhandled(ExceptionObject),
}

pub fn run_process(
    env: &mut MachineEnv,
    rt: &Runtime,
    start: u64,
    state: &MachineState,
    step_limit: u64,
) -> RunOutcome {
    run_process_with(env, rt, start, state, RunState::new(step_limit))
}

pub fn run_process_with(
    env: &mut MachineEnv,
    rt: &Runtime,
    start: u64,
    state: &MachineState,
    mut rs: RunState,
) -> RunOutcome {
    let mut st = *state;
    st.rip = start;
    let (kind, state) = match drive(env, rt, &mut rs, st, None) {
        Ok((Stop::Returned, s)) => (OutcomeKind::NormalReturn, s),
        Ok((Stop::Redirect(pc), s)) => (OutcomeKind::TailRedirect(pc), s),
        Ok((Stop::Unhandled(e), s)) => (OutcomeKind::ExceptionRaised(e), s),
        Err((e, s)) => (OutcomeKind::Fault(e), s),
    };
    RunOutcome { kind, state, stats: rs.stats, audit: rs.audit, trace: rs.trace }
}

/// Run until a top-level return, redirect or unhandled exception. Errors
/// carry the last consistent state.
pub(crate) fn drive(
    env: &mut MachineEnv,
    rt: &Runtime,
    rs: &mut RunState,
    mut st: MachineState,
    mut resume: Option<(u64, u32)>,
) -> Result<(Stop, MachineState), (RunError, MachineState)> {
    loop {
        if let Some((fid, cell)) = resume.take() {
            st = run_vm(env, rt, rs, st, fid, cell)?;
            continue;
        }
        if rs.steps >= rs.limit {
            return Err((RunError::StepLimitExceeded, st));
        }
        let pc = st.rip;
        if pc == layout::HALT || pc == layout::DTOR_RETURN {
            return Ok((Stop::Returned, st));
        }
        if pc == env.throw_entry || pc == env.rethrow_entry {
            let raised = if pc == env.throw_entry {
                let exc = ExceptionObject { id: rs.next_object_id, type_id: st.gpr[RCX as usize], payload: st.gpr[RDX as usize] };
                rs.next_object_id += 1;
                raise_exception(env, rt, rs, exc, &st)
            } else {
                rethrow(env, rt, rs, &st)
            };
            match raised {
                Ok((DispatchOutcome::HandledAt { resume: r, .. }, live)) => {
                    st = live;
                    if let Resume::Cell { fid, cell, .. } = r {
                        resume = Some((fid, cell));
                    }
                }
                Ok((DispatchOutcome::Unhandled, _)) => {
                    let exc = rs.active.clone().expect("raise records the exception");
                    return Ok((Stop::Unhandled(exc), st));
                }
                Ok((DispatchOutcome::ContinueUnwind, _)) => unreachable!("raise never stops mid-walk"),
                Err(e) => return Err((e, st)),
            }
            continue;
        }
        if let Some(entry) = rt.vm_cell_for(pc) {
            resume = Some(entry);
            continue;
        }
        if !env.memory.is_mapped(pc) {
            return Ok((Stop::Redirect(pc), st));
        }
        rs.steps += 1;
        rs.stats.oracle_steps += 1;
        st = oracle_step(&st, env).map_err(|e| (e.into(), st))?;
    }
}

fn run_vm(
    env: &mut MachineEnv,
    rt: &Runtime,
    rs: &mut RunState,
    st: MachineState,
    fid: u64,
    cell: u32,
) -> Result<MachineState, (RunError, MachineState)> {
    let module = rt.module.as_ref().expect("VM index implies a module");
    let vm = Vm::new(module);
    let mut ctx = vm_enter_at(&st, fid, cell);
    rs.stats.vm_entries += 1;
    loop {
        if rs.steps >= rs.limit {
            return Err((RunError::StepLimitExceeded, ctx.saved));
        }
        rs.steps += 1;
        rs.stats.dispatches += 1;
        let at = ctx.vip;
        let status = vm.step(&mut ctx, env).map_err(|e| (e.into(), ctx.saved))?;
        if let Some(t) = rs.trace.as_mut() {
            let h = module.fetch_cell(at).and_then(|c| module.handlers.get(c.handler).copied());
            let name = h.map_or("?".to_string(), |d| format!("{}.{}", d.op, d.width));
            t.push(format!("{} {} {}", at, name, ctx.vip));
        }
        match status {
            StepStatus::Running => {}
            StepStatus::Exited | StepStatus::Threw => return vm_exit(&ctx).map_err(|e| (e.into(), ctx.saved)),
            StepStatus::NeedsFallback { bytes, pc, len } => {
                native_fallback(&mut ctx, &bytes, pc, len, env).map_err(|e| (e.into(), ctx.saved))?;
                rs.stats.fallbacks += 1;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cfg::FunctionRange;

    fn info(fid: u64, start: u64, end: u64) -> UnwindInfo {
        UnwindInfo { range: FunctionRange::new(fid, start, end), codes: vec![], handler: 0, lsd: None }
    }

    #[test]
    fn registry_lookup_is_half_open() {
        let r = MetadataRegistry::build(&[info(1, 0x100, 0x180), info(2, 0x200, 0x210)], None).unwrap();
        assert_eq!(r.len(), 2);
        assert_eq!(r.lookup(0x100).map(|m| m.fid()), Some(1));
        assert_eq!(r.lookup(0x17f).map(|m| m.fid()), Some(1));
        assert!(r.lookup(0x180).is_none());
        assert!(r.lookup(0xff).is_none());
        assert_eq!(r.lookup(0x20f).map(|m| m.fid()), Some(2));
        assert!(MetadataRegistry::default().is_empty());
    }
}
