//! Whole-function lowering from a recovered CFG to VMIR.

use super::{translate_instruction, ExitKind, Label, RuleTable, TranslateError, VArg, VOp, VmirBlock, VmirFunction, VmirInst};
use crate::cfg::{ControlFlowGraph, Successor};
use crate::isa::{BranchInfo, Opcode, Width};
use std::collections::BTreeSet;

#[derive(Clone, Debug, Default)]
pub struct TranslateOptions {
    /// Calls to these addresses raise an exception and are lowered to VTHROW.
    pub throw_entries: BTreeSet<u64>,
}

/// Labels of synthesized exit stubs count down from the top of the label space.
fn stub_label(k: usize) -> Label {
    u64::MAX - k as u64
}

/// Translate every block of `cfg`. Block labels are the source pcs.
pub fn translate_function(
    cfg: &ControlFlowGraph,
    rules: &RuleTable,
    opts: &TranslateOptions,
) -> Result<VmirFunction, TranslateError> {
    let mut blocks = Vec::with_capacity(cfg.blocks.len());
    let mut stubs: Vec<VmirBlock> = vec![];
    let is_block = |t: u64| cfg.blocks.contains_key(&t);

    for (&start, bb) in &cfg.blocks {
        let mut insts: Vec<VmirInst> = vec![];
        let mut exit = ExitKind::Branch;
        for (k, (pc, instr)) in bb.instrs.iter().enumerate() {
            let last = k + 1 == bb.instrs.len();
            if last && instr.opcode == Opcode::JMP {
                if let Some(jt) = cfg.jump_tables.iter().find(|t| t.jump_pc == *pc) {
                    // load the table entry, then dispatch on the loaded address
                    let m = *instr.mem_operand().expect("table jump has a memory operand");
                    insts.push(VmirInst::new(VOp::VEA, Width::W64, vec![VArg::V(0), VArg::Ea(m)]));
                    insts.push(VmirInst::new(VOp::VLOADM, Width::W64, vec![VArg::V(1), VArg::V(0)]));
                    let mut seen = BTreeSet::new();
                    for t in &jt.targets {
                        if seen.insert(*t) {
                            insts.push(VmirInst::new(
                                VOp::VJEQ,
                                Width::W64,
                                vec![VArg::V(1), VArg::Imm(*t as i64), VArg::Label(*t)],
                            ));
                        }
                    }
                    insts.push(VmirInst::new(VOp::VEXIT, Width::W64, vec![VArg::V(1)]));
                    exit = ExitKind::Indirect;
                    continue;
                }
            }
            for mut v in translate_instruction(instr, *pc, rules)? {
                if v.op == VOp::VCALL {
                    if let VArg::Imm(t) = v.args[0] {
                        if opts.throw_entries.contains(&(t as u64)) {
                            v.op = VOp::VTHROW;
                        }
                    }
                }
                insts.push(v);
            }
        }

        // fix up the block end
        match insts.last().map(|i| i.op) {
            Some(VOp::VJMP) => {
                let t = insts.last().unwrap().labels().next().unwrap();
                if !is_block(t) {
                    *insts.last_mut().unwrap() = VmirInst::new(VOp::VEXIT, Width::W64, vec![VArg::Imm(t as i64)]);
                    exit = ExitKind::TailCall(t);
                }
            }
            Some(VOp::VJCC) => {
                let last = insts.last_mut().unwrap();
                for a in last.args.iter_mut().skip(1) {
                    if let VArg::Label(t) = a {
                        if !is_block(*t) {
                            let label = stub_label(stubs.len());
                            stubs.push(VmirBlock {
                                label,
                                pc: None,
                                insts: vec![VmirInst::new(VOp::VEXIT, Width::W64, vec![VArg::Imm(*t as i64)])],
                                exit: ExitKind::TailCall(*t),
                            });
                            *a = VArg::Label(label);
                        }
                    }
                }
            }
            Some(VOp::VRET) => exit = ExitKind::Return,
            Some(VOp::VEXIT) if exit != ExitKind::Indirect => exit = ExitKind::Indirect,
            Some(VOp::VTHROW) => exit = ExitKind::Throw,
            _ => match bb.succs.as_slice() {
                [Successor::Block(next)] if !matches!(bb.terminator, BranchInfo::DirectJump(_)) => {
                    insts.push(VmirInst::new(VOp::VJMP, Width::W64, vec![VArg::Label(*next)]));
                }
                _ => {
                    if insts.is_empty() {
                        insts.push(VmirInst::new(VOp::VNOP, Width::W64, vec![]));
                    }
                    exit = ExitKind::NoReturn;
                }
            },
        }
        blocks.push(VmirBlock { label: start, pc: Some(start), insts, exit });
    }
    blocks.extend(stubs);
    let f = VmirFunction { range: cfg.range, entry: cfg.entry, blocks, roots: cfg.roots.clone() };
    f.validate().map_err(|msg| TranslateError::Instantiate { instr: format!("function {}", cfg.range.fid), msg })?;
    Ok(f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cfg::{recover_function, FunctionRange, RecoveryOptions};
    use crate::isa::{encode, Instruction, Operand, RAX};
    use crate::machine::MachineEnv;

    fn build(code: &[Instruction]) -> (MachineEnv, FunctionRange) {
        let bytes: Vec<u8> = code.iter().flat_map(|i| encode(i).unwrap()).collect();
        let mut env = MachineEnv::new();
        env.load_code(1, 0x1000, &bytes);
        (env, FunctionRange::new(1, 0x1000, 0x1000 + bytes.len() as u64))
    }

    fn lower(code: &[Instruction]) -> VmirFunction {
        let (env, r) = build(code);
        let cfg = recover_function(&env, &r, &RecoveryOptions::default()).unwrap();
        translate_function(&cfg, &RuleTable::default(), &TranslateOptions::default()).unwrap()
    }

    #[test]
    fn straight_line_lowering() {
        let f = lower(&[
            Instruction::new(Opcode::MOV, Width::W64, vec![Operand::Reg(RAX), Operand::Imm(1)]),
            Instruction::new(Opcode::RET, Width::W64, vec![]),
        ]);
        let ops: Vec<VOp> = f.blocks[0].insts.iter().map(|i| i.op).collect();
        assert_eq!(ops, vec![VOp::VLIMM, VOp::VSTORER, VOp::VRET]);
        assert_eq!(f.blocks[0].exit, ExitKind::Return);
    }

    #[test]
    fn conditional_lowering_keeps_labels() {
        let cmp = Instruction::new(Opcode::CMP, Width::W64, vec![Operand::Reg(RAX), Operand::Imm(0)]);
        let jz = Instruction::new(Opcode::JCC, Width::W64, vec![Operand::Imm(1)]).with_cond(4);
        let ret = Instruction::new(Opcode::RET, Width::W64, vec![]);
        let f = lower(&[cmp, jz, ret.clone(), ret]);
        assert_eq!(f.blocks.len(), 3);
        let jcc = f.blocks[0].insts.last().unwrap();
        assert_eq!(jcc.op, VOp::VJCC);
        let labels: Vec<Label> = jcc.labels().collect();
        assert_eq!(labels, vec![0x100B, 0x100A]);
    }

    #[test]
    fn tail_call_becomes_exit() {
        let jmp = Instruction::new(Opcode::JMP, Width::W64, vec![Operand::Imm(0x2000 - 0x1005)]);
        let f = lower(&[jmp]);
        let last = f.blocks[0].insts.last().unwrap();
        assert_eq!(*last, VmirInst::new(VOp::VEXIT, Width::W64, vec![VArg::Imm(0x2000)]));
        assert_eq!(f.blocks[0].exit, ExitKind::TailCall(0x2000));
    }
}
