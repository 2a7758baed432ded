//! Differential and scenario testing of the protection pipeline.

pub mod asm;
pub mod build;
pub mod isa_cases;
pub mod programs;
pub mod scenarios;
pub mod suites;

use crate::isa::Opcode;
use crate::machine::{MachineEnv, MachineState};
use crate::process::{OutcomeKind, RunError, RunOutcome};
use crate::isa::ExecError;
use serde::{Deserialize, Serialize};

/// Opcodes whose AF result is architecturally undefined.
pub fn af_undefined(op: Opcode) -> bool {
    use Opcode::*;
    matches!(op, AND | OR | XOR | TEST | SHL | SHR | SAR | MUL | IMUL | DIV | IDIV | BT)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Divergence {
    pub field: String,
    pub expected: String,
    pub actual: String,
    /// VM dispatches performed by the protected run.
    pub dispatch_index: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    Pass,
    Fail(Divergence),
}

impl Verdict {
    pub fn passed(&self) -> bool {
        matches!(self, Verdict::Pass)
    }
}

/// Outcome kinds compared the way the harness treats them: divide errors
/// by kind alone.
fn kind_key(k: &OutcomeKind) -> String {
    match k {
        OutcomeKind::Fault(RunError::Exec(ExecError::DivideError { .. })) => "Fault(DivideError)".into(),
        other => format!("{:?}", other),
    }
}

/// First difference between two runs. Code pages are excluded through
/// `exclude` (address ranges) since protection rewrites them.
pub fn compare_runs(
    expected: (&RunOutcome, &MachineEnv),
    actual: (&RunOutcome, &MachineEnv),
    exclude: &[(u64, u64)],
    mask_af: bool,
) -> Option<Divergence> {
    let dispatch_index = actual.0.stats.dispatches;
    let div = |field: &str, e: String, a: String| Some(Divergence { field: field.into(), expected: e, actual: a, dispatch_index });
    let (ek, ak) = (kind_key(&expected.0.kind), kind_key(&actual.0.kind));
    if ek != ak {
        return div("outcome", ek, ak);
    }
    if matches!(expected.0.kind, OutcomeKind::Fault(_)) {
        // partial state at a fault is not comparable
        return None;
    }
    if let Some(d) = compare_states(&expected.0.state, &actual.0.state, mask_af) {
        return div(&d.0, d.1, d.2);
    }
    let skip = |a: u64| exclude.iter().any(|(s, e)| a + 4096 > *s && a < *e);
    let ep: Vec<_> = expected.1.memory.pages().into_iter().filter(|(a, _)| !skip(*a)).collect();
    let ap: Vec<_> = actual.1.memory.pages().into_iter().filter(|(a, _)| !skip(*a)).collect();
    for k in 0..ep.len().max(ap.len()) {
        match (ep.get(k), ap.get(k)) {
            (Some((ea, eb)), Some((aa, ab))) if ea == aa => {
                if let Some(i) = (0..eb.len()).find(|&i| eb[i] != ab[i]) {
                    return div(&format!("mem[{:#x}]", ea + i as u64), format!("{:#04x}", eb[i]), format!("{:#04x}", ab[i]));
                }
            }
            (e, a) => {
                let f = |p: Option<&(u64, &[u8])>| p.map_or("unmapped".to_string(), |(x, _)| format!("page {:#x}", x));
                return div("memory map", f(e), f(a));
            }
        }
    }
    None
}

/// (field, expected, actual) of the first differing register or flag.
pub fn compare_states(e: &MachineState, a: &MachineState, mask_af: bool) -> Option<(String, String, String)> {
    let hex = |v: u64| format!("{:#x}", v);
    if e.rip != a.rip {
        return Some(("rip".into(), hex(e.rip), hex(a.rip)));
    }
    for r in 0..16 {
        if e.gpr[r] != a.gpr[r] {
            return Some((crate::isa::reg_name(r as u8).to_string(), hex(e.gpr[r]), hex(a.gpr[r])));
        }
    }
    let (ef, af) = (e.flags, a.flags);
    let pairs = [("CF", ef.cf, af.cf), ("PF", ef.pf, af.pf), ("AF", ef.af, af.af), ("ZF", ef.zf, af.zf), ("SF", ef.sf, af.sf), ("OF", ef.of, af.of)];
    for (n, x, y) in pairs {
        if x != y && !(mask_af && n == "AF") {
            return Some((n.into(), x.to_string(), y.to_string()));
        }
    }
    None
}
