//! The exception-handling scenarios and their lifecycle instrumentation.

use super::asm::{abs, imm, m, r, AsmError, Asm};
use super::build::{mov_imm, FnBuilder, Frame};
use crate::isa::{Opcode, Reg, Width, R12, R13, R14, R15, R9, R10, R11, RAX, RBX, RCX, RDI, RDX, RSI};
use crate::machine::layout;
use crate::pipeline::{ManifestFunction, ProgramManifest};
use crate::process::OutcomeKind;
use crate::process::RunOutcome;
use crate::machine::MachineEnv;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

pub const COUNTER: u64 = layout::SCRATCH_BASE + 0x100;
pub const RESOURCES: u64 = layout::SCRATCH_BASE + 0x108;
pub const LOG_PTR: u64 = layout::SCRATCH_BASE + 0x110;
pub const LOG_BASE: u64 = layout::SCRATCH_BASE + 0x400;
const LOG_CAP: u64 = 0x200;

pub const EV_CONSTRUCT: u64 = 1;
pub const EV_DESTRUCT: u64 = 2;
pub const EV_CATCH: u64 = 3;
pub const EV_OBJECT: u64 = 4;
pub const EV_DONE: u64 = 5;

/// Exception types: B derives from A, D from B; C is unrelated.
pub const T_A: u64 = 1;
pub const T_B: u64 = 2;
pub const T_C: u64 = 3;
pub const T_D: u64 = 4;
pub const TYPES: [(u64, u64); 4] = [(T_A, 0), (T_B, T_A), (T_C, 0), (T_D, T_B)];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Obj {
    Plain(u64),
    /// Acquires a tracked resource that its destructor releases.
    Owning(u64),
    /// Constructs its members in order; its destructor destroys them in reverse.
    Composite(u64, Vec<u64>),
}

impl Obj {
    pub fn tag(&self) -> u64 {
        match self {
            Obj::Plain(t) | Obj::Owning(t) | Obj::Composite(t, _) => *t,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Step {
    /// Construct an object living until the end of the enclosing block.
    Obj(Obj),
    Call(String),
    Throw(u64, u64),
    Rethrow,
    Try(Vec<Step>, Vec<(u64, Vec<Step>)>),
    /// Arithmetic on the frame's saved registers.
    Work(u64),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScenarioFn {
    pub name: String,
    pub frame: Frame,
    pub body: Vec<Step>,
    pub protect: bool,
}

impl ScenarioFn {
    pub fn new(name: &str, frame: Frame, body: Vec<Step>) -> Self {
        ScenarioFn { name: name.into(), frame, body, protect: true }
    }

    pub fn unprotected(mut self) -> Self {
        self.protect = false;
        self
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Expected {
    /// (function name, clause index) of every catch, in order.
    pub catches: Vec<(String, usize)>,
    pub constructs: Vec<u64>,
    pub destructs: Vec<u64>,
    /// Every catch observes this object id.
    pub object_id: u64,
    pub completes: bool,
    /// Frames processed by each raise.
    pub frames: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EhScenario {
    pub name: String,
    pub manifest: ProgramManifest,
    pub expected: Expected,
}

/// Lifecycle observables recovered from the event log.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Observables {
    pub catches: Vec<(String, usize)>,
    pub object_ids: Vec<u64>,
    pub constructs: Vec<u64>,
    pub destructs: Vec<u64>,
    pub counter: i64,
    pub resources: i64,
    pub completed: bool,
    /// Lifecycle violations (double or unmatched destruction).
    pub violations: Vec<String>,
}

fn frame(pushes: &[Reg], alloc: u32, saves: &[(Reg, u32)]) -> Frame {
    Frame { pushes: pushes.to_vec(), alloc, saves: saves.to_vec() }
}

fn event(kind: u64, data: u64) -> u64 {
    kind << 56 | data
}

/// Append the event in r10 to the log. Clobbers r11.
fn log_r10(a: &mut Asm) {
    a.op(Opcode::MOV, Width::W64, vec![r(R11), abs(LOG_PTR)]);
    a.op(Opcode::MOV, Width::W64, vec![m(R11, 0), r(R10)]);
    a.op(Opcode::ADD, Width::W64, vec![abs(LOG_PTR), imm(8)]);
}

fn log_event(a: &mut Asm, ev: u64) {
    mov_imm(a, R10, ev);
    log_r10(a);
}

struct Layout {
    addrs: BTreeMap<String, u64>,
    fids: BTreeMap<String, u64>,
    names: BTreeMap<u64, String>,
    next: u64,
}

impl Layout {
    fn new() -> Self {
        Layout { addrs: BTreeMap::new(), fids: BTreeMap::new(), names: BTreeMap::new(), next: 0 }
    }

    fn add(&mut self, name: &str) {
        if self.addrs.contains_key(name) {
            return;
        }
        let fid = self.next + 1;
        self.addrs.insert(name.into(), layout::CODE_BASE + 0x1000 * self.next);
        self.fids.insert(name.into(), fid);
        self.names.insert(fid, name.into());
        self.next += 1;
    }

    fn addr(&self, name: &str) -> u64 {
        self.addrs[name]
    }
}

fn ctor_name(tag: u64) -> String {
    format!("ctor{}", tag)
}

fn dtor_name(tag: u64) -> String {
    format!("dtor{}", tag)
}

fn collect_objs(steps: &[Step], out: &mut Vec<Obj>) {
    for s in steps {
        match s {
            Step::Obj(o) => {
                if let Obj::Composite(_, subs) = o {
                    out.extend(subs.iter().map(|t| Obj::Plain(*t)));
                }
                out.push(o.clone());
            }
            Step::Try(body, catches) => {
                collect_objs(body, out);
                for (_, c) in catches {
                    collect_objs(c, out);
                }
            }
            _ => {}
        }
    }
}

fn build_ctor(lay: &Layout, o: &Obj) -> Result<ManifestFunction, AsmError> {
    let name = ctor_name(o.tag());
    let mut b = FnBuilder::leaf(&name, lay.fids[&name], lay.addr(&name));
    if let Obj::Composite(_, subs) = o {
        for t in subs {
            b.call(lay.addr(&ctor_name(*t)));
        }
    }
    if let Obj::Owning(_) = o {
        b.asm.op(Opcode::INC, Width::W64, vec![abs(RESOURCES)]);
    }
    b.asm.op(Opcode::INC, Width::W64, vec![abs(COUNTER)]);
    log_event(&mut b.asm, event(EV_CONSTRUCT, o.tag()));
    b.asm.ret();
    b.finish()
}

fn build_dtor(lay: &Layout, o: &Obj) -> Result<ManifestFunction, AsmError> {
    let name = dtor_name(o.tag());
    let mut b = FnBuilder::leaf(&name, lay.fids[&name], lay.addr(&name));
    b.asm.op(Opcode::DEC, Width::W64, vec![abs(COUNTER)]);
    log_event(&mut b.asm, event(EV_DESTRUCT, o.tag()));
    if let Obj::Owning(_) = o {
        b.asm.op(Opcode::DEC, Width::W64, vec![abs(RESOURCES)]);
    }
    if let Obj::Composite(_, subs) = o {
        for t in subs.iter().rev() {
            b.call(lay.addr(&dtor_name(*t)));
        }
    }
    b.asm.ret();
    b.finish()
}

fn saved_regs(f: &Frame) -> Vec<Reg> {
    f.pushes.iter().copied().chain(f.saves.iter().map(|(r, _)| *r)).collect()
}

fn compile_block(b: &mut FnBuilder, lay: &Layout, steps: &[Step]) {
    let mut scope = vec![];
    for s in steps {
        match s {
            Step::Obj(o) => {
                b.call(lay.addr(&ctor_name(o.tag())));
                b.push_state(Some(lay.fids[&dtor_name(o.tag())]));
                scope.push(o.tag());
            }
            Step::Call(n) => b.call(lay.addr(n)),
            Step::Throw(t, p) => {
                mov_imm(&mut b.asm, RCX, *t);
                mov_imm(&mut b.asm, RDX, *p);
                b.call(layout::THROW_ENTRY);
            }
            Step::Rethrow => b.call(layout::RETHROW_ENTRY),
            Step::Work(k) => {
                for (i, reg) in saved_regs(&b.frame).into_iter().enumerate() {
                    let v = k.wrapping_mul(0x1_0001).wrapping_add(b.fid << 8 | i as u64);
                    mov_imm(&mut b.asm, reg, v);
                    b.asm.op(Opcode::ROL, Width::W64, vec![r(reg), imm(((k + i as u64) % 63 + 1) as i64)]);
                }
            }
            Step::Try(body, catches) => {
                let outer = b.state();
                let marker = b.try_begin();
                compile_block(b, lay, body);
                b.set_state(outer);
                let after = b.fresh_label("after");
                b.asm.jmp(after.clone());
                let mut labels = vec![];
                for (k, (t, cbody)) in catches.iter().enumerate() {
                    let l = b.fresh_label("catch");
                    b.asm.label(l.clone());
                    b.set_state(outer);
                    log_event(&mut b.asm, event(EV_CATCH, b.fid << 8 | k as u64));
                    b.asm.op(Opcode::MOV, Width::W64, vec![r(R10), r(RAX)]);
                    mov_imm(&mut b.asm, R9, event(EV_OBJECT, 0));
                    b.asm.op(Opcode::OR, Width::W64, vec![r(R10), r(R9)]);
                    log_r10(&mut b.asm);
                    compile_block(b, lay, cbody);
                    b.asm.jmp(after.clone());
                    labels.push((*t, l));
                }
                b.try_catches(marker, &labels);
                b.asm.label(after);
                b.set_state(outer);
            }
        }
    }
    for tag in scope.into_iter().rev() {
        b.pop_state();
        b.call(lay.addr(&dtor_name(tag)));
    }
}

/// Assemble a scenario program: `main` (unprotected) calls the first function.
pub fn build_program(fns: &[ScenarioFn], protect_extra: &[String]) -> Result<ProgramManifest, AsmError> {
    let mut lay = Layout::new();
    lay.add("main");
    for f in fns {
        lay.add(&f.name);
    }
    let mut objs = vec![];
    for f in fns {
        collect_objs(&f.body, &mut objs);
    }
    for o in &objs {
        lay.add(&ctor_name(o.tag()));
        lay.add(&dtor_name(o.tag()));
    }

    let mut out = vec![];
    let mut main = FnBuilder::new("main", lay.fids["main"], lay.addr("main"), frame(&[RBX], 0x20, &[]));
    mov_imm(&mut main.asm, RAX, LOG_BASE);
    main.asm.op(Opcode::MOV, Width::W64, vec![abs(LOG_PTR), r(RAX)]);
    main.call(lay.addr(&fns[0].name));
    log_event(&mut main.asm, event(EV_DONE, 0));
    main.asm.op(Opcode::MOV, Width::W64, vec![r(RAX), abs(COUNTER)]);
    main.epilogue();
    out.push(main.finish()?);

    for f in fns {
        let mut b = FnBuilder::new(&f.name, lay.fids[&f.name], lay.addr(&f.name), f.frame.clone());
        compile_block(&mut b, &lay, &f.body);
        b.epilogue();
        out.push(b.finish()?);
    }
    let mut seen = std::collections::BTreeSet::new();
    for o in &objs {
        if seen.insert(o.tag()) {
            out.push(build_ctor(&lay, o)?);
            out.push(build_dtor(&lay, o)?);
        }
    }
    let mut protect: Vec<String> = fns.iter().filter(|f| f.protect).map(|f| f.name.clone()).collect();
    protect.extend(protect_extra.iter().cloned());
    Ok(ProgramManifest {
        functions: out,
        data: vec![],
        types: TYPES.to_vec(),
        entry: "main".into(),
        protect,
        checksum_addr: Some(COUNTER),
    })
}

/// Decode the event log left in `env`.
pub fn observe(env: &MachineEnv, names: &BTreeMap<u64, String>) -> Observables {
    let mut o = Observables::default();
    let rd = |a: u64| env.memory.read_u64(a).unwrap_or(0);
    o.counter = rd(COUNTER) as i64;
    o.resources = rd(RESOURCES) as i64;
    let end = rd(LOG_PTR).clamp(LOG_BASE, LOG_BASE + 8 * LOG_CAP);
    let mut live = std::collections::BTreeSet::new();
    let mut dead = std::collections::BTreeSet::new();
    let mut a = LOG_BASE;
    while a < end {
        let ev = rd(a);
        let (kind, data) = (ev >> 56, ev & ((1 << 56) - 1));
        match kind {
            EV_CONSTRUCT => {
                o.constructs.push(data);
                live.insert(data);
            }
            EV_DESTRUCT => {
                o.destructs.push(data);
                if !live.remove(&data) {
                    o.violations.push(format!("destruct of unconstructed tag {}", data));
                }
                if !dead.insert(data) {
                    o.violations.push(format!("tag {} destroyed twice", data));
                }
            }
            EV_CATCH => o.catches.push((names.get(&(data >> 8)).cloned().unwrap_or_default(), (data & 0xFF) as usize)),
            EV_OBJECT => o.object_ids.push(data),
            EV_DONE => o.completed = true,
            _ => o.violations.push(format!("unknown event {:#x}", ev)),
        }
        a += 8;
    }
    o
}

/// fid → function name of a manifest.
pub fn names_of(m: &ProgramManifest) -> BTreeMap<u64, String> {
    m.functions.iter().map(|f| (f.fid, f.name.clone())).collect()
}

/// Compare a run against the scenario's expectations.
pub fn judge(s: &EhScenario, out: &RunOutcome, env: &MachineEnv) -> Result<Observables, String> {
    let o = observe(env, &names_of(&s.manifest));
    let e = &s.expected;
    let mut errs = vec![];
    if e.completes && out.kind != OutcomeKind::NormalReturn {
        errs.push(format!("outcome {:?}", out.kind));
    }
    if o.catches != e.catches {
        errs.push(format!("catches {:?} != {:?}", o.catches, e.catches));
    }
    if o.object_ids.iter().any(|id| *id != e.object_id) || o.object_ids.len() != e.catches.len() {
        errs.push(format!("object ids {:?}, expected all {}", o.object_ids, e.object_id));
    }
    if o.constructs != e.constructs {
        errs.push(format!("constructs {:?} != {:?}", o.constructs, e.constructs));
    }
    if o.destructs != e.destructs {
        errs.push(format!("destructs {:?} != {:?}", o.destructs, e.destructs));
    }
    if o.counter != 0 || o.resources != 0 {
        errs.push(format!("counter {} resources {}", o.counter, o.resources));
    }
    if o.completed != e.completes {
        errs.push(format!("completed {}", o.completed));
    }
    if out.stats.frames_per_raise != e.frames {
        errs.push(format!("frames {:?} != {:?}", out.stats.frames_per_raise, e.frames));
    }
    errs.extend(o.violations.iter().cloned());
    if errs.is_empty() {
        Ok(o)
    } else {
        Err(errs.join("; "))
    }
}

fn call(n: &str) -> Step {
    Step::Call(n.into())
}

fn obj(t: u64) -> Step {
    Step::Obj(Obj::Plain(t))
}

fn catch_a(body: Vec<Step>) -> Step {
    Step::Try(body, vec![(T_A, vec![])])
}

fn scenario(name: &str, fns: Vec<ScenarioFn>, extra: &[&str], expected: Expected) -> EhScenario {
    let extra: Vec<String> = extra.iter().map(|s| s.to_string()).collect();
    EhScenario { name: name.into(), manifest: build_program(&fns, &extra).expect("scenario assembles"), expected }
}

fn expect(catches: &[(&str, usize)], constructs: &[u64], destructs: &[u64], frames: &[u64]) -> Expected {
    Expected {
        catches: catches.iter().map(|(n, k)| (n.to_string(), *k)).collect(),
        constructs: constructs.to_vec(),
        destructs: destructs.to_vec(),
        object_id: 1,
        completes: true,
        frames: frames.to_vec(),
    }
}

/// The eight scenarios.
pub fn build_eh_scenarios() -> Vec<EhScenario> {
    let f1 = || frame(&[RBX, RSI], 0x28, &[(R12, 0x10)]);
    let f2 = || frame(&[RDI, R13], 0x100, &[]);
    let f3 = || frame(&[R14], 0, &[]);
    let f4 = || frame(&[], 0x18, &[(R15, 0x8)]);
    let f5 = || frame(&[R15, RBX, RSI, RDI], 0x8, &[]);
    vec![
        scenario(
            "S1-exact-type",
            vec![
                ScenarioFn::new("f1", f1(), vec![Step::Work(1), catch_a(vec![obj(1), call("f2")])]),
                ScenarioFn::new("f2", f2(), vec![obj(2), Step::Work(2), Step::Throw(T_A, 0x51)]),
            ],
            &[],
            expect(&[("f1", 0)], &[1, 2], &[2, 1], &[2]),
        ),
        scenario(
            "S2-ancestor-type",
            vec![
                ScenarioFn::new("f1", f1(), vec![Step::Try(vec![call("f2")], vec![(T_C, vec![]), (T_A, vec![])])]),
                ScenarioFn::new("f2", f2(), vec![obj(3), Step::Work(3), call("f3")]),
                ScenarioFn::new("f3", f3(), vec![Step::Work(4), Step::Throw(T_D, 0x52)]),
            ],
            &[],
            expect(&[("f1", 1)], &[3], &[3], &[3]),
        ),
        scenario(
            "S3-rethrow-identity",
            vec![
                ScenarioFn::new("f1", f1(), vec![catch_a(vec![call("f2")])]),
                ScenarioFn::new(
                    "f2",
                    f2(),
                    vec![Step::Try(vec![obj(4), call("f3")], vec![(T_A, vec![obj(5), Step::Work(5), Step::Rethrow])])],
                ),
                ScenarioFn::new("f3", f3(), vec![Step::Throw(T_B, 0x53)]),
            ],
            &[],
            expect(&[("f2", 0), ("f1", 0)], &[4, 5], &[4, 5], &[2, 2]),
        ),
        scenario(
            "S4-cross-frame-depth4",
            vec![
                ScenarioFn::new("f1", f1(), vec![catch_a(vec![call("f2")])]),
                ScenarioFn::new("f2", f2(), vec![obj(6), call("f3")]),
                ScenarioFn::new("f3", f3(), vec![obj(7), Step::Work(6), call("f4")]),
                ScenarioFn::new("f4", f4(), vec![obj(8), call("f5")]),
                ScenarioFn::new("f5", f5(), vec![obj(9), Step::Work(7), Step::Throw(T_B, 0x54)]),
            ],
            &[],
            expect(&[("f1", 0)], &[6, 7, 8, 9], &[9, 8, 7, 6], &[5]),
        ),
        scenario(
            "S5-nested-helper",
            vec![
                ScenarioFn::new("f1", f1(), vec![Step::Try(vec![obj(10), call("helper")], vec![(T_C, vec![])])]),
                ScenarioFn::new("helper", f3(), vec![Step::Work(8), call("inner")]).unprotected(),
                ScenarioFn::new("inner", f4(), vec![Step::Throw(T_C, 0x55)]).unprotected(),
            ],
            &[],
            expect(&[("f1", 0)], &[10], &[10], &[3]),
        ),
        scenario(
            "S6-destructor-order",
            vec![
                ScenarioFn::new("f1", f1(), vec![catch_a(vec![call("f2")])]),
                ScenarioFn::new("f2", f2(), vec![obj(11), obj(12), obj(13), Step::Throw(T_A, 0x56)]),
            ],
            &["dtor11", "dtor12", "dtor13"],
            expect(&[("f1", 0)], &[11, 12, 13], &[13, 12, 11], &[2]),
        ),
        scenario(
            "S7-owning-object",
            vec![
                ScenarioFn::new(
                    "f1",
                    f1(),
                    vec![Step::Obj(Obj::Owning(16)), catch_a(vec![call("f2")]), Step::Work(9)],
                ),
                ScenarioFn::new("f2", f2(), vec![Step::Obj(Obj::Owning(14)), obj(15), Step::Throw(T_B, 0x57)]),
            ],
            &["dtor14", "ctor14", "dtor16"],
            expect(&[("f1", 0)], &[16, 14, 15], &[15, 14, 16], &[2]),
        ),
        scenario(
            "S8-composite-object",
            vec![
                ScenarioFn::new("f1", f1(), vec![catch_a(vec![call("f2")])]),
                ScenarioFn::new(
                    "f2",
                    f2(),
                    vec![Step::Obj(Obj::Composite(17, vec![18, 19])), Step::Work(10), Step::Throw(T_A, 0x58)],
                ),
            ],
            &["dtor17", "dtor18", "dtor19"],
            expect(&[("f1", 0)], &[18, 19, 17], &[17, 19, 18], &[2]),
        ),
    ]
}

/// `depth` frames between the throw and the catch: `c0` catches, `c1`..`c{depth}`
/// pass through, the last one throws.
pub fn depth_chain(depth: usize, protect: impl Fn(usize) -> bool) -> EhScenario {
    let mut fns = vec![];
    for k in 0..=depth {
        let fr = frame(&[RBX, RSI][..(k % 3).min(2)], 8 * (k as u32 % 4), &[]);
        let body = match (k == 0, k == depth) {
            (true, true) => vec![catch_a(vec![Step::Throw(T_A, 0x60)])],
            (true, false) => vec![catch_a(vec![call("c1")])],
            (false, true) => vec![obj(100 + k as u64), Step::Throw(T_A, 0x60)],
            (false, false) => vec![obj(100 + k as u64), call(&format!("c{}", k + 1))],
        };
        let f = ScenarioFn::new(&format!("c{}", k), fr, body);
        fns.push(if protect(k) { f } else { f.unprotected() });
    }
    let tags: Vec<u64> = (1..=depth as u64).map(|k| 100 + k).collect();
    let rev: Vec<u64> = tags.iter().rev().copied().collect();
    scenario(&format!("depth-{}", depth), fns, &[], expect(&[("c0", 0)], &tags, &rev, &[depth as u64 + 1]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    #[test]
    fn scenario_names_are_unique_and_manifests_valid() {
        let all = build_eh_scenarios();
        let names: BTreeSet<_> = all.iter().map(|s| s.name.clone()).collect();
        assert_eq!(names.len(), all.len());
        for s in &all {
            s.manifest.check().unwrap();
        }
    }

    #[test]
    fn depth_chain_protects_by_pattern() {
        let s = depth_chain(4, |i| i % 2 == 1);
        let fns = s.manifest.functions.len();
        assert!(fns >= 5);
        assert!(!s.manifest.protect.is_empty() && s.manifest.protect.len() < fns);
        assert!(depth_chain(4, |_| false).manifest.protect.is_empty());
    }
}
