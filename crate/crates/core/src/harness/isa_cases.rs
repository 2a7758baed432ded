//! Instruction-level differential cases.

use super::{compare_runs, af_undefined, Verdict};
use crate::assemble::ProtectedModule;
use crate::isa::{decode, encode, legal_forms, Flags, Form, Instruction, MemOperand, Opcode, Operand, Reg, Width, RCX, RSP, RBP};
use crate::machine::{layout, MachineState};
use crate::pipeline::{run_state, DataSegment, ManifestFunction, ProgramManifest};
use crate::process::{RunState, DEFAULT_STEP_LIMIT};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const BOUNDARY: [u64; 12] = [
    0x00,
    0x01,
    0x7F,
    0x80,
    0xFF,
    0x7FFF,
    0x8000,
    0x7FFF_FFFF,
    0x8000_0000,
    0xFFFF_FFFF,
    0x8000_0000_0000_0000,
    0xFFFF_FFFF_FFFF_FFFF,
];

/// Bytes of scratch seeded per case, starting at the scratch base.
pub const WINDOW: u64 = 0x800;
const TABLE: u64 = layout::SCRATCH_BASE + 0x780;
const CASE_RSP: u64 = layout::INITIAL_RSP - 0x100;
const DISPS: [i32; 8] = [0, 8, -8, 0x10, 0x7F, -0x80, 0x100, 0x1000];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MemShape {
    Base,
    BaseDisp,
    BaseIndexDisp,
    IndexDisp,
    Absolute,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructionCase {
    pub index: u64,
    pub instr: Instruction,
    pub bytes: Vec<u8>,
    pub state: MachineState,
    /// Initial image of `[SCRATCH_BASE, SCRATCH_BASE + WINDOW)`.
    pub scratch: Vec<u8>,
    pub mem_shape: Option<MemShape>,
}

impl InstructionCase {
    /// Single-function program: the instruction, then `JMP EXIT_A; JMP EXIT_B`.
    pub fn code(&self) -> Vec<u8> {
        let mut code = self.bytes.clone();
        for exit in [layout::EXIT_A, layout::EXIT_B] {
            let pc = layout::CODE_BASE + code.len() as u64;
            let j = Instruction::new(Opcode::JMP, Width::W64, vec![Operand::Imm(exit.wrapping_sub(pc + 5) as i64)]);
            code.extend(encode(&j).expect("rel32 reaches the exits"));
        }
        code
    }

    pub fn manifest(&self) -> ProgramManifest {
        ProgramManifest {
            functions: vec![ManifestFunction {
                name: "case".into(),
                fid: 1,
                addr: layout::CODE_BASE,
                code: hex::encode(self.code()),
                noreturn: false,
                meta: None,
            }],
            data: vec![
                DataSegment { addr: layout::SCRATCH_BASE, bytes: hex::encode(&self.scratch) },
                DataSegment { addr: CASE_RSP, bytes: hex::encode(layout::EXIT_B.to_le_bytes()) },
            ],
            types: vec![],
            entry: "case".into(),
            protect: vec!["case".into()],
            checksum_addr: None,
        }
    }
}

fn operand_regs() -> Vec<Reg> {
    (0..16).filter(|r| *r != RSP).collect()
}

fn pick_imm(rng: &mut ChaCha8Rng) -> u64 {
    if rng.gen_bool(0.6) {
        *BOUNDARY.choose(rng).unwrap()
    } else {
        rng.gen()
    }
}

fn reg_value(rng: &mut ChaCha8Rng) -> u64 {
    if rng.gen_bool(0.5) {
        *BOUNDARY.choose(rng).unwrap()
    } else {
        rng.gen()
    }
}

/// Candidate encodings of `v` for an immediate slot, in preference order.
fn imm_candidates(v: u64) -> [i64; 5] {
    [v as i64, v as i32 as i64, v as i8 as i64, (v & 0xFF) as i64, (v & 0xFFFF) as i64]
}

/// Memory operand resolving to `ea`; sets the registers it uses.
fn mem_operand(rng: &mut ChaCha8Rng, st: &mut MachineState, ea: u64, avoid: &[Reg]) -> (MemOperand, MemShape) {
    let shapes = [MemShape::Base, MemShape::BaseDisp, MemShape::BaseIndexDisp, MemShape::IndexDisp, MemShape::Absolute];
    let shape = *shapes.choose(rng).unwrap();
    let mut regs: Vec<Reg> = operand_regs().into_iter().filter(|r| !avoid.contains(r)).collect();
    regs.shuffle(rng);
    let (base, index) = (regs[0], regs[1]);
    let disp = *DISPS.choose(rng).unwrap();
    let scale = *[1u8, 2, 4, 8].choose(rng).unwrap();
    let iv: u64 = rng.gen_range(0..16);
    let m = match shape {
        MemShape::Base => {
            st.gpr[base as usize] = ea;
            MemOperand { base: Some(base), index: None, disp: 0 }
        }
        MemShape::BaseDisp => {
            st.gpr[base as usize] = ea.wrapping_sub(disp as i64 as u64);
            MemOperand { base: Some(base), index: None, disp }
        }
        MemShape::BaseIndexDisp => {
            st.gpr[index as usize] = iv;
            st.gpr[base as usize] = ea.wrapping_sub(iv * scale as u64).wrapping_sub(disp as i64 as u64);
            MemOperand { base: Some(base), index: Some((index, scale)), disp }
        }
        MemShape::IndexDisp => {
            st.gpr[index as usize] = iv;
            MemOperand { base: None, index: Some((index, scale)), disp: ea.wrapping_sub(iv * scale as u64) as i32 }
        }
        MemShape::Absolute => MemOperand::absolute(ea as i32),
    };
    (m, shape)
}

/// Build one operand list for `form`; returns None when the form cannot be
/// exercised as a standalone case.
fn instantiate(form: &Form, rng: &mut ChaCha8Rng, st: &mut MachineState) -> Option<(Instruction, Option<MemShape>)> {
    use Opcode::*;
    let shape = form.shape.as_str();
    let regs = operand_regs();
    let mut ops = vec![];
    let mut mem_shape = None;
    let mut used: Vec<Reg> = vec![];
    let shift = matches!(form.opcode, SHL | SHR | SAR | ROL | ROR);
    for (k, ch) in shape.chars().enumerate() {
        if shape == "none" {
            break;
        }
        match ch {
            'r' => {
                let reg = if shift && k == 1 { RCX } else { *regs.choose(rng).unwrap() };
                used.push(reg);
                ops.push(Operand::Reg(reg));
            }
            'i' => ops.push(Operand::Imm(0)),
            'm' => ops.push(Operand::Mem(MemOperand::absolute(0))),
            _ => unreachable!(),
        }
    }
    // control transfers get targets the case layout can honour
    match (form.opcode, shape.as_str()) {
        (JMP, "r") => return None,
        (JCC, _) => ops[0] = Operand::Imm(5),
        (JMP, "i") => ops[0] = Operand::Imm(5),
        (CALL, "i") => ops[0] = Operand::Imm(0),
        _ => {}
    }
    let width = form.width;
    let mut instr = Instruction::new(form.opcode, width, ops);
    if matches!(form.opcode, JCC | SETCC | CMOVCC) {
        instr = instr.with_cond(rng.gen_range(0..16));
    }
    if matches!(form.opcode, MOVZX | MOVSX) {
        let sw = if form.opcode == MOVSX && width == Width::W64 && rng.gen_bool(0.5) { Width::W32 } else { Width::W8 };
        instr = instr.with_src_width(sw);
    }
    // memory operand
    if let Some(pos) = instr.operands.iter().position(|o| matches!(o, Operand::Mem(_))) {
        let (ea, avoid) = if form.opcode == JMP {
            // table dispatch: [index*8 + table]
            let idx = *regs.iter().filter(|r| **r != RCX).collect::<Vec<_>>().choose(rng).unwrap();
            let iv = rng.gen_range(0..2u64);
            st.gpr[*idx as usize] = iv;
            instr.operands[pos] = Operand::Mem(MemOperand { base: None, index: Some((*idx, 8)), disp: TABLE as i32 });
            return Some((instr, Some(MemShape::IndexDisp)));
        } else {
            let ea = layout::SCRATCH_BASE + 0x40 + 8 * rng.gen_range(0..0xE0u64);
            let mut avoid = used.clone();
            if matches!(form.opcode, DIV | IDIV) {
                avoid.extend([crate::isa::RAX, crate::isa::RDX]);
            }
            (ea, avoid)
        };
        let (m, s) = mem_operand(rng, st, ea, &avoid);
        instr.operands[pos] = Operand::Mem(m);
        mem_shape = Some(s);
    }
    // immediates
    if let Some(pos) = instr.operands.iter().position(|o| matches!(o, Operand::Imm(_))) {
        if !matches!(form.opcode, JCC | JMP | CALL) {
            let v = match form.opcode {
                SHL | SHR | SAR | ROL | ROR => pick_imm(rng) & if rng.gen_bool(0.7) { 0x3F } else { 0xFF },
                BT => pick_imm(rng) & 0xFF,
                RET => pick_imm(rng) & 0xFFF8,
                _ => pick_imm(rng),
            };
            let mut ok = false;
            for c in imm_candidates(v) {
                instr.operands[pos] = Operand::Imm(c);
                if encode(&instr).is_ok() {
                    ok = true;
                    break;
                }
            }
            if !ok {
                return None;
            }
        } else if form.opcode == CALL {
            let len = encode(&instr).ok()?.len() as u64;
            instr.operands[pos] = Operand::Imm(layout::EXIT_C.wrapping_sub(layout::CODE_BASE + len) as i64);
        }
    }
    Some((instr, mem_shape))
}

fn case_state(rng: &mut ChaCha8Rng) -> MachineState {
    let mut st = MachineState::new(layout::CODE_BASE, CASE_RSP);
    for r in 0..16 {
        if r != RSP as usize {
            st.gpr[r] = reg_value(rng);
        }
    }
    st.flags = Flags::from_bits(rng.gen::<u64>() & 0x8D5);
    st
}

/// Fix up registers for forms with implicit requirements.
fn adjust(instr: &Instruction, rng: &mut ChaCha8Rng, st: &mut MachineState, scratch: &mut [u8]) {
    use Opcode::*;
    match instr.opcode {
        LEAVE => st.gpr[RBP as usize] = CASE_RSP,
        CALL | JMP if !matches!(instr.operands[0], Operand::Imm(_)) => match &instr.operands[0] {
            Operand::Reg(r) => st.gpr[*r as usize] = layout::EXIT_C,
            Operand::Mem(m) if instr.opcode == CALL => {
                let ea = crate::isa::effective_address(st, m);
                let off = (ea - layout::SCRATCH_BASE) as usize;
                scratch[off..off + 8].copy_from_slice(&layout::EXIT_C.to_le_bytes());
            }
            _ => {}
        },
        DIV | IDIV if rng.gen_bool(0.5) => {
            // keep the quotient in range half of the time
            let w = instr.width;
            if w == Width::W8 {
                st.gpr[0] &= !0xFF00;
            } else {
                st.gpr[2] = if instr.opcode == IDIV && st.gpr[0] & w.sign_bit() != 0 { w.mask() | !w.mask() & st.gpr[2] } else { !w.mask() & st.gpr[2] };
            }
        }
        _ => {}
    }
}

/// Deterministic case `index` of the stream for `seed`.
pub fn gen_isa_case(seed: u64, index: u64) -> InstructionCase {
    let forms: Vec<&Form> = legal_forms().iter().collect();
    let mut attempt = 0u64;
    loop {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ attempt << 48);
        let form = forms[((index + attempt) % forms.len() as u64) as usize];
        attempt += 1;
        let mut st = case_state(&mut rng);
        let mut scratch = vec![0u8; WINDOW as usize];
        rng.fill(&mut scratch[..]);
        let Some((instr, mem_shape)) = instantiate(form, &mut rng, &mut st) else { continue };
        adjust(&instr, &mut rng, &mut st, &mut scratch);
        let Ok(bytes) = encode(&instr) else { continue };
        let (decoded, _) = decode(&bytes, 0).expect("encoder output decodes");
        if instr.opcode == Opcode::JMP {
            // table entries: the two exit stubs
            let first = layout::CODE_BASE + bytes.len() as u64;
            let off = (TABLE - layout::SCRATCH_BASE) as usize;
            scratch[off..off + 8].copy_from_slice(&first.to_le_bytes());
            scratch[off + 8..off + 16].copy_from_slice(&(first + 5).to_le_bytes());
            scratch[off + 16..off + 24].copy_from_slice(&0u64.to_le_bytes());
        }
        return InstructionCase { index, instr: decoded, bytes, state: st, scratch, mem_shape };
    }
}

pub fn gen_isa_cases(seed: u64, count: u64) -> impl Iterator<Item = InstructionCase> {
    (0..count).map(move |i| gen_isa_case(seed, i))
}

/// Run the case natively and under protection and compare.
pub fn differential_check(case: &InstructionCase, module: &ProtectedModule) -> Verdict {
    let manifest = case.manifest();
    let run = |m: Option<ProtectedModule>| run_state(&manifest, m, &case.state, RunState::new(DEFAULT_STEP_LIMIT));
    let (e, a) = match (run(None), run(Some(module.clone()))) {
        (Ok(e), Ok(a)) => (e, a),
        (e, a) => {
            let err = |r: &Result<_, crate::pipeline::PipelineError>| r.as_ref().err().map_or("ok".into(), |x| x.to_string());
            return Verdict::Fail(super::Divergence { field: "setup".into(), expected: err(&e), actual: err(&a), dispatch_index: 0 });
        }
    };
    let code = (layout::CODE_BASE, layout::CODE_BASE + case.code().len() as u64);
    match compare_runs((&e.0, &e.1), (&a.0, &a.1), &[code], af_undefined(case.instr.opcode)) {
        None => Verdict::Pass,
        Some(d) => Verdict::Fail(d),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cases_are_deterministic_and_decodable() {
        for i in 0..200 {
            let a = gen_isa_case(11, i);
            assert_eq!(a, gen_isa_case(11, i));
            let (d, n) = decode(&a.bytes, 0).unwrap();
            assert_eq!(d, a.instr);
            assert_eq!(n, a.bytes.len());
            assert!(a.manifest().check().is_ok());
        }
        assert_ne!(gen_isa_case(11, 0).state, gen_isa_case(12, 0).state);
    }
}
