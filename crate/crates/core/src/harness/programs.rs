//! Program-level differential cases: init globals, compute, checksum.

use super::asm::{abs, imm, ins, m, r, sib, Asm};
use super::build::{mov_imm, Frame};
use super::compare_runs;
use super::isa_cases::BOUNDARY;
use super::Verdict;
use crate::assemble::ProtectedModule;
use crate::cfg::{recover_function, RecoveryOptions};
use crate::isa::{Instruction, Opcode, Operand, Reg, Width, R10, R11, R12, R13, R14, R15, R8, R9, RAX, RBX, RCX, RDI, RDX, RSI};
use crate::machine::layout;
use crate::pipeline::{run_manifest, DataSegment, ManifestFunction, ProgramManifest};
use crate::process::{RunState, RunStats, DEFAULT_STEP_LIMIT};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const GLOBALS: u64 = layout::SCRATCH_BASE + 0x800;
pub const NGLOBALS: u64 = 16;
pub const COUNTERS: u64 = layout::SCRATCH_BASE + 0xA00;
pub const CHECKSUM: u64 = layout::SCRATCH_BASE;
const TABLES: u64 = layout::DATA_BASE;
const DRIVER: u64 = layout::CODE_BASE;
const COMPUTE: u64 = layout::CODE_BASE + 0x1000;
const HELPER: u64 = layout::CODE_BASE + 0x4000;
const CODE_END: u64 = layout::CODE_BASE + 0x5000;

/// Registers the compute body works on. R14 holds the globals base and
/// R15 is scratch for indexed accesses.
const WORK: [Reg; 11] = [RAX, RBX, RCX, RDX, RSI, RDI, R8, R9, R10, R11, R12];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProgramCase {
    pub index: u64,
    pub manifest: ProgramManifest,
    pub blocks: usize,
    pub jump_tables: usize,
}

enum Region {
    Basic(Vec<Instruction>),
    If(u8, Reg, i64, Box<Region>, Box<Region>),
    Loop(u64, Box<Region>),
    Switch(Reg, Vec<Region>),
    CallHelper,
    Seq(Vec<Region>),
}

struct Gen {
    rng: ChaCha8Rng,
    loops: u64,
    tables: Vec<(u64, Vec<String>)>,
    labels: u64,
}

fn w(rng: &mut ChaCha8Rng) -> Width {
    *[Width::W64, Width::W64, Width::W32, Width::W8].choose(rng).unwrap()
}

fn fit_imm(v: u64, width: Width) -> i64 {
    match width {
        Width::W8 => v as i8 as i64,
        _ => v as i32 as i64,
    }
}

impl Gen {
    fn reg(&mut self) -> Reg {
        *WORK.choose(&mut self.rng).unwrap()
    }

    fn global(&mut self) -> Operand {
        m(R14, 8 * self.rng.gen_range(0..NGLOBALS as i32))
    }

    fn value(&mut self) -> u64 {
        if self.rng.gen_bool(0.5) {
            *BOUNDARY.choose(&mut self.rng).unwrap()
        } else {
            self.rng.gen()
        }
    }

    fn label(&mut self, stem: &str) -> String {
        self.labels += 1;
        format!("{}{}", stem, self.labels)
    }

    /// A short straight-line snippet.
    fn snippet(&mut self) -> Vec<Instruction> {
        use Opcode::*;
        let alu = [ADD, SUB, AND, OR, XOR, ADC, SBB, CMP];
        let width = w(&mut self.rng);
        let (a, b) = (self.reg(), self.reg());
        let v = self.value();
        let g = self.global();
        let op = *alu.choose(&mut self.rng).unwrap();
        match self.rng.gen_range(0..20) {
            0 => vec![ins(op, width, vec![r(a), r(b)])],
            1 => vec![ins(op, width, vec![r(a), imm(fit_imm(v, width))])],
            2 => vec![ins(op, width, vec![r(a), g])],
            3 => vec![ins(op, width, vec![g, r(a)])],
            4 => vec![ins(*[NOT, NEG, INC, DEC].choose(&mut self.rng).unwrap(), width, vec![if v & 1 == 0 { r(a) } else { g }])],
            5 => {
                let sh = *[SHL, SHR, SAR, ROL, ROR].choose(&mut self.rng).unwrap();
                if v & 1 == 0 {
                    vec![ins(sh, width, vec![r(a), imm((v % 70) as i64)])]
                } else {
                    vec![ins(sh, width, vec![g, r(RCX)])]
                }
            }
            6 => {
                let wide = if width == Width::W8 { Width::W64 } else { width };
                vec![ins(IMUL, wide, vec![r(a), r(b), imm(fit_imm(v, Width::W32))])]
            }
            7 => vec![ins(MUL, width, vec![r(b)])],
            8 => vec![
                ins(MOV, Width::W64, vec![r(RDX), imm(0)]),
                ins(MOV, Width::W64, vec![r(R15), r(b)]),
                ins(OR, Width::W64, vec![r(R15), imm(1)]),
                ins(DIV, Width::W64, vec![r(R15)]),
            ],
            9 => {
                let wide = if width == Width::W8 { Width::W32 } else { width };
                let mv = if v & 1 == 0 { MOVZX } else { MOVSX };
                vec![ins(mv, wide, vec![r(a), g]).with_src_width(Width::W8)]
            }
            10 => vec![
                ins(MOV, Width::W64, vec![r(R15), r(b)]),
                ins(AND, Width::W64, vec![r(R15), imm(NGLOBALS as i64 - 1)]),
                ins(LEA, Width::W64, vec![r(a), sib(Some(R14), R15, 8, 0x10)]),
                ins(XOR, Width::W64, vec![r(a), sib(Some(R14), R15, 8, 0)]),
            ],
            11 => {
                let wide = if width == Width::W8 { Width::W64 } else { width };
                vec![ins(CMOVCC, wide, vec![r(a), g]).with_cond((v % 16) as u8)]
            }
            12 => vec![ins(SETCC, Width::W8, vec![if v & 1 == 0 { r(a) } else { g }]).with_cond((v % 16) as u8)],
            13 => vec![ins(BSWAP, if v & 1 == 0 { Width::W64 } else { Width::W32 }, vec![r(a)])],
            14 => vec![ins(BT, Width::W64, vec![r(a), imm((v % 64) as i64)])],
            15 => vec![ins(XCHG, width, vec![r(a), r(b)])],
            16 => vec![ins(PUSH, Width::W64, vec![r(a)]), ins(ADD, Width::W64, vec![r(b), r(a)]), ins(POP, Width::W64, vec![r(a)])],
            17 => vec![ins(PUSH, Width::W64, vec![imm(fit_imm(v, Width::W32))]), ins(POP, Width::W64, vec![g])],
            18 => vec![ins(MOV, width, vec![g, imm(fit_imm(v, width))])],
            _ => vec![ins(MOV, Width::W64, vec![r(RAX), r(a)]), ins(CQO, Width::W64, vec![]), ins(IMUL, Width::W64, vec![r(b), g])],
        }
    }

    fn basic(&mut self) -> Region {
        let n = self.rng.gen_range(1..4);
        Region::Basic((0..n).flat_map(|_| self.snippet()).collect())
    }

    fn region(&mut self, depth: u32, want_table: &mut bool) -> Region {
        let choice = if *want_table { 4 } else { self.rng.gen_range(0..10) };
        match choice {
            0..=2 if depth < 3 => {
                let (a, b) = (self.region(depth + 1, want_table), self.region(depth + 1, want_table));
                let v = self.value();
                Region::If(self.rng.gen_range(0..16), self.reg(), fit_imm(v, Width::W32), Box::new(a), Box::new(b))
            }
            3 if depth < 2 => {
                self.loops += 1;
                let body = self.region(depth + 1, want_table);
                Region::Loop(self.rng.gen_range(1..6), Box::new(body))
            }
            4 if depth < 3 => {
                *want_table = false;
                let k = *[2usize, 4, 8].choose(&mut self.rng).unwrap();
                let reg = self.reg();
                Region::Switch(reg, (0..k).map(|_| self.basic()).collect())
            }
            5 => Region::CallHelper,
            6 if depth < 3 => Region::Seq(vec![self.basic(), self.region(depth + 1, want_table)]),
            _ => self.basic(),
        }
    }

    fn emit(&mut self, a: &mut Asm, reg: &Region) {
        match reg {
            Region::Basic(v) => {
                for i in v {
                    a.ins(i.clone());
                }
            }
            Region::Seq(v) => {
                for x in v {
                    self.emit(a, x);
                }
            }
            Region::If(cc, rr, v, t, e) => {
                let (els, end) = (self.label("else"), self.label("fi"));
                a.op(Opcode::CMP, Width::W64, vec![r(*rr), imm(*v)]);
                a.jcc(*cc, els.clone());
                self.emit(a, t);
                a.jmp(end.clone());
                a.label(els);
                self.emit(a, e);
                a.label(end);
            }
            Region::Loop(n, body) => {
                let ctr = COUNTERS + 8 * self.loops;
                self.loops += 1;
                let head = self.label("loop");
                a.op(Opcode::MOV, Width::W64, vec![abs(ctr), imm(*n as i64)]);
                a.label(head.clone());
                self.emit(a, body);
                a.op(Opcode::DEC, Width::W64, vec![abs(ctr)]);
                a.jcc(5, head);
            }
            Region::Switch(sel, cases) => {
                let table = TABLES + 0x100 * self.tables.len() as u64;
                let end = self.label("esac");
                let labels: Vec<String> = (0..cases.len()).map(|_| self.label("case")).collect();
                self.tables.push((table, labels.clone()));
                a.op(Opcode::MOV, Width::W64, vec![r(R15), r(*sel)]);
                a.op(Opcode::AND, Width::W64, vec![r(R15), imm(cases.len() as i64 - 1)]);
                a.op(Opcode::JMP, Width::W64, vec![sib(None, R15, 8, table as i32)]);
                for (l, c) in labels.iter().zip(cases) {
                    a.label(l.clone());
                    self.emit(a, c);
                    a.jmp(end.clone());
                }
                a.label(end);
            }
            Region::CallHelper => {
                a.call(HELPER);
            }
        }
    }
}

fn function(name: &str, fid: u64, addr: u64, code: &[u8]) -> ManifestFunction {
    ManifestFunction { name: name.into(), fid, addr, code: hex::encode(code), noreturn: false, meta: None }
}

fn driver(rng: &mut ChaCha8Rng) -> Vec<u8> {
    let mut a = Asm::new(DRIVER);
    for i in 0..NGLOBALS {
        let v = if rng.gen_bool(0.5) { *BOUNDARY.choose(rng).unwrap() } else { rng.gen() };
        mov_imm(&mut a, RAX, v);
        a.op(Opcode::MOV, Width::W64, vec![abs(GLOBALS + 8 * i), r(RAX)]);
    }
    for reg in WORK {
        mov_imm(&mut a, reg, rng.gen());
    }
    a.call(COMPUTE);
    // fold the globals and the returned registers into the checksum
    a.op(Opcode::MOV, Width::W64, vec![r(R13), r(RAX)]);
    a.op(Opcode::XOR, Width::W64, vec![r(RAX), r(RAX)]);
    for i in 0..NGLOBALS {
        a.op(Opcode::ADD, Width::W64, vec![r(RAX), abs(GLOBALS + 8 * i)]);
        a.op(Opcode::ROL, Width::W64, vec![r(RAX), imm(5)]);
    }
    for reg in [R13, RBX, RDX, RSI, RDI, R8] {
        a.op(Opcode::XOR, Width::W64, vec![r(RAX), r(reg)]);
        a.op(Opcode::ROL, Width::W64, vec![r(RAX), imm(7)]);
    }
    a.op(Opcode::MOV, Width::W64, vec![abs(CHECKSUM), r(RAX)]);
    a.ret();
    a.finish().expect("driver assembles").bytes
}

fn helper(rng: &mut ChaCha8Rng) -> Vec<u8> {
    let mut a = Asm::new(HELPER);
    a.op(Opcode::PUSH, Width::W64, vec![r(RBX)]);
    a.op(Opcode::MOV, Width::W64, vec![r(RBX), abs(GLOBALS + 8 * rng.gen_range(0..NGLOBALS))]);
    a.op(Opcode::ADD, Width::W64, vec![r(RBX), r(RAX)]);
    a.op(Opcode::XOR, Width::W64, vec![abs(GLOBALS + 8 * rng.gen_range(0..NGLOBALS)), r(RBX)]);
    a.op(Opcode::IMUL, Width::W64, vec![r(RAX), r(RBX), imm(rng.gen_range(3..1000))]);
    a.op(Opcode::ROR, Width::W64, vec![r(R8), imm(rng.gen_range(1..64))]);
    a.op(Opcode::POP, Width::W64, vec![r(RBX)]);
    a.ret();
    a.finish().expect("helper assembles").bytes
}

/// Deterministic program `index` of the stream for `seed`.
pub fn gen_program_case(seed: u64, index: u64) -> ProgramCase {
    let force_table = index % 5 == 0;
    for attempt in 0u64.. {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.rotate_left(17) ^ index.wrapping_mul(0xA076_1D64_78BD_642F) ^ attempt << 40);
        let drv = driver(&mut rng);
        let hlp = helper(&mut rng);
        let mut g = Gen { rng: ChaCha8Rng::seed_from_u64(rng.gen()), loops: 0, tables: vec![], labels: 0 };
        let mut want_table = force_table;
        let n = g.rng.gen_range(2..7);
        let regions: Vec<Region> = (0..n).map(|_| g.region(0, &mut want_table)).collect();
        g.loops = 0;
        let frame = Frame { pushes: vec![RBX, RSI, RDI, R12, R13, R14, R15], alloc: 0x10, saves: vec![] };
        let mut a = Asm::new(COMPUTE);
        frame.prologue(&mut a);
        mov_imm(&mut a, R14, GLOBALS);
        for reg in &regions {
            g.emit(&mut a, reg);
        }
        frame.epilogue(&mut a);
        let Ok(out) = a.finish() else { continue };
        if out.end() > HELPER {
            continue;
        }
        let mut data = vec![];
        for (addr, labels) in &g.tables {
            let mut bytes: Vec<u8> = labels.iter().flat_map(|l| out.label(l).to_le_bytes()).collect();
            bytes.extend(0u64.to_le_bytes());
            data.push(DataSegment { addr: *addr, bytes: hex::encode(bytes) });
        }
        let manifest = ProgramManifest {
            functions: vec![
                function("main", 1, DRIVER, &drv),
                function("compute", 2, COMPUTE, &out.bytes),
                function("helper", 3, HELPER, &hlp),
            ],
            data,
            types: vec![],
            entry: "main".into(),
            protect: vec!["compute".into()],
            checksum_addr: Some(CHECKSUM),
        };
        let env = manifest.load_env().expect("program loads");
        let range = crate::cfg::FunctionRange::new(2, COMPUTE, out.end());
        let Ok(cfg) = recover_function(&env, &range, &RecoveryOptions::default()) else { continue };
        let blocks = cfg.blocks.len();
        if !(5..=40).contains(&blocks) || (force_table && cfg.jump_tables.is_empty()) {
            continue;
        }
        return ProgramCase { index, manifest, blocks, jump_tables: cfg.jump_tables.len() };
    }
    unreachable!()
}

pub fn gen_program_cases(seed: u64, count: u64) -> impl Iterator<Item = ProgramCase> {
    (0..count).map(move |i| gen_program_case(seed, i))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProgramCheck {
    pub verdict: Verdict,
    /// Checksum written by the oracle run.
    pub checksum: u64,
    /// Statistics of the protected run.
    pub stats: RunStats,
}

/// Oracle vs protected run of a program.
pub fn program_check(case: &ProgramCase, module: &ProtectedModule) -> ProgramCheck {
    let run = |m: Option<ProtectedModule>| run_manifest(&case.manifest, m, None, RunState::new(DEFAULT_STEP_LIMIT));
    let (e, a) = match (run(None), run(Some(module.clone()))) {
        (Ok(e), Ok(a)) => (e, a),
        (e, a) => {
            let err = |r: &Result<_, crate::pipeline::PipelineError>| r.as_ref().err().map_or("ok".into(), |x| x.to_string());
            let d = super::Divergence { field: "setup".into(), expected: err(&e), actual: err(&a), dispatch_index: 0 };
            return ProgramCheck { verdict: Verdict::Fail(d), checksum: 0, stats: RunStats::default() };
        }
    };
    let checksum = e.1.memory.read_u64(CHECKSUM).unwrap_or(0);
    let verdict = match compare_runs((&e.0, &e.1), (&a.0, &a.1), &[(layout::CODE_BASE, CODE_END)], false) {
        None => Verdict::Pass,
        Some(d) => Verdict::Fail(d),
    };
    ProgramCheck { verdict, checksum, stats: a.0.stats }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generated_programs_hit_shape_bounds() {
        for i in 0..10 {
            let c = gen_program_case(5, i);
            assert!((5..=40).contains(&c.blocks));
            if i % 5 == 0 {
                assert!(c.jump_tables > 0);
            }
            assert_eq!(c.manifest, gen_program_case(5, i).manifest);
        }
    }
}
