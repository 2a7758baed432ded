//! Recursive-descent control-flow recovery.

use crate::isa::{branch_info, decode, BranchInfo, DecodeError, Instruction, Opcode, Operand, Reg};
use crate::machine::MachineEnv;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use thiserror::Error;

/// Hard cap on jump-table length.
pub const MAX_TABLE_ENTRIES: usize = 1024;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FunctionRange {
    pub start: u64,
    /// Exclusive.
    pub end: u64,
    pub fid: u64,
}

impl FunctionRange {
    pub fn new(fid: u64, start: u64, end: u64) -> Self {
        assert!(start < end, "empty function range");
        FunctionRange { start, end, fid }
    }

    pub fn contains(&self, pc: u64) -> bool {
        pc >= self.start && pc < self.end
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
pub enum CfgError {
    #[error("undecodable reachable byte at {pc:#x}")]
    DecodeFailure { pc: u64 },
    #[error("control flow leaves the code image at {pc:#x}")]
    TargetOutOfImage { pc: u64 },
    #[error("indirect jump at {pc:#x} has no table pattern")]
    NoTablePattern { pc: u64 },
    #[error("jump table for {pc:#x} has no in-range entries")]
    EmptyTable { pc: u64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum JumpClass {
    LocalJump,
    TailCall,
}

pub fn classify_jump(target: u64, range: &FunctionRange) -> JumpClass {
    if range.contains(target) {
        JumpClass::LocalJump
    } else {
        JumpClass::TailCall
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Successor {
    Block(u64),
    /// Control leaves the function (tail call).
    Exit(u64),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BasicBlock {
    pub start: u64,
    /// Contiguous (pc, instruction) pairs.
    pub instrs: Vec<(u64, Instruction)>,
    pub terminator: BranchInfo,
    pub succs: Vec<Successor>,
}

impl BasicBlock {
    pub fn end(&self) -> u64 {
        self.instrs.last().map(|(pc, i)| pc + i.len as u64).unwrap_or(self.start)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct JumpTable {
    pub jump_pc: u64,
    pub table: u64,
    pub index_reg: Reg,
    pub targets: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ControlFlowGraph {
    pub range: FunctionRange,
    pub entry: u64,
    pub blocks: BTreeMap<u64, BasicBlock>,
    pub exits: BTreeSet<u64>,
    pub jump_tables: Vec<JumpTable>,
    /// Additional traversal roots (exception landing pads).
    pub roots: Vec<u64>,
}

impl ControlFlowGraph {
    /// Block containing `pc`.
    pub fn block_at(&self, pc: u64) -> Option<&BasicBlock> {
        self.blocks.range(..=pc).next_back().map(|(_, b)| b).filter(|b| pc < b.end())
    }

    pub fn instruction_count(&self) -> usize {
        self.blocks.values().map(|b| b.instrs.len()).sum()
    }

    /// Blocks reachable from the entry and the extra roots.
    pub fn reachable(&self) -> BTreeSet<u64> {
        let mut seen = BTreeSet::new();
        let mut work: Vec<u64> = std::iter::once(self.entry).chain(self.roots.iter().copied()).collect();
        while let Some(b) = work.pop() {
            if !seen.insert(b) {
                continue;
            }
            if let Some(bb) = self.blocks.get(&b) {
                for s in &bb.succs {
                    if let Successor::Block(t) = s {
                        work.push(*t);
                    }
                }
            }
        }
        seen
    }
}

#[derive(Clone, Debug, Default)]
pub struct RecoveryOptions {
    /// Call targets that never return.
    pub noreturn: BTreeSet<u64>,
    /// Extra entry points (landing pads) traversed like the entry.
    pub roots: Vec<u64>,
}

fn decode_at(env: &MachineEnv, pc: u64) -> Result<Instruction, CfgError> {
    let bytes = env.memory.fetch(pc, 15);
    if bytes.is_empty() {
        return Err(CfgError::TargetOutOfImage { pc });
    }
    match decode(&bytes, 0) {
        Ok((i, _)) => Ok(i),
        Err(DecodeError::TruncatedInstruction { .. }) if bytes.len() < 15 => {
            Err(CfgError::TargetOutOfImage { pc })
        }
        Err(_) => Err(CfgError::DecodeFailure { pc }),
    }
}

/// Reads the 64-bit entries of a `JMP [table + idx*8]` jump table.
pub fn resolve_jump_table(
    env: &MachineEnv,
    jump: &Instruction,
    pc: u64,
    range: &FunctionRange,
) -> Result<JumpTable, CfgError> {
    let m = match jump.operands.first() {
        Some(Operand::Mem(m)) if jump.opcode == Opcode::JMP => *m,
        _ => return Err(CfgError::NoTablePattern { pc }),
    };
    let index_reg = match (m.base, m.index) {
        (None, Some((r, 8))) => r,
        _ => return Err(CfgError::NoTablePattern { pc }),
    };
    let table = m.disp as i64 as u64;
    let mut targets = vec![];
    for k in 0..MAX_TABLE_ENTRIES as u64 {
        match env.memory.read_u64(table.wrapping_add(8 * k)) {
            Ok(t) if range.contains(t) => targets.push(t),
            _ => break,
        }
    }
    if targets.is_empty() {
        return Err(CfgError::EmptyTable { pc });
    }
    Ok(JumpTable { jump_pc: pc, table, index_reg, targets })
}

/// Recover the CFG of the function occupying `range`.
pub fn recover_function(
    env: &MachineEnv,
    range: &FunctionRange,
    opts: &RecoveryOptions,
) -> Result<ControlFlowGraph, CfgError> {
    let mut decoded: BTreeMap<u64, Instruction> = BTreeMap::new();
    let mut leaders: BTreeSet<u64> = BTreeSet::new();
    let mut exits = BTreeSet::new();
    let mut tables: Vec<JumpTable> = vec![];
    let mut work: Vec<u64> = vec![range.start];
    leaders.insert(range.start);
    for r in &opts.roots {
        if !range.contains(*r) {
            return Err(CfgError::TargetOutOfImage { pc: *r });
        }
        leaders.insert(*r);
        work.push(*r);
    }

    while let Some(start) = work.pop() {
        let mut pc = start;
        loop {
            if decoded.contains_key(&pc) {
                break;
            }
            if !range.contains(pc) {
                return Err(CfgError::TargetOutOfImage { pc });
            }
            let instr = decode_at(env, pc)?;
            let info = branch_info(&instr, pc);
            let next = pc + instr.len as u64;
            let jump = instr.clone();
            decoded.insert(pc, instr);
            let mut local = |t: u64, leaders: &mut BTreeSet<u64>, work: &mut Vec<u64>| {
                if classify_jump(t, range) == JumpClass::LocalJump {
                    if leaders.insert(t) {
                        work.push(t);
                    }
                } else {
                    exits.insert(t);
                }
            };
            match info {
                BranchInfo::Fallthrough => {}
                BranchInfo::Call(Some(t)) if opts.noreturn.contains(&t) => break,
                BranchInfo::Call(_) => {}
                BranchInfo::DirectJump(t) => {
                    local(t, &mut leaders, &mut work);
                    break;
                }
                BranchInfo::ConditionalBranch { taken, fallthrough } => {
                    local(taken, &mut leaders, &mut work);
                    local(fallthrough, &mut leaders, &mut work);
                    break;
                }
                BranchInfo::IndirectJump => {
                    let jt = resolve_jump_table(env, &jump, pc, range)?;
                    for t in &jt.targets {
                        local(*t, &mut leaders, &mut work);
                    }
                    tables.push(jt);
                    break;
                }
                BranchInfo::Return | BranchInfo::Barrier => break,
            }
            pc = next;
        }
    }

    // every leader must start an instruction (no overlapping decodes)
    for l in &leaders {
        if !decoded.contains_key(l) {
            return Err(CfgError::DecodeFailure { pc: *l });
        }
    }
    let mut prev_end = 0u64;
    for (pc, i) in &decoded {
        if *pc < prev_end {
            return Err(CfgError::DecodeFailure { pc: *pc });
        }
        prev_end = pc + i.len as u64;
    }

    let table_of: BTreeMap<u64, &JumpTable> = tables.iter().map(|t| (t.jump_pc, t)).collect();
    let mut blocks = BTreeMap::new();
    for &start in &leaders {
        let mut instrs = vec![];
        let mut pc = start;
        let (terminator, succs) = loop {
            let i = decoded[&pc].clone();
            let info = branch_info(&i, pc);
            let next = pc + i.len as u64;
            instrs.push((pc, i));
            let to = |t: u64| {
                if range.contains(t) {
                    Successor::Block(t)
                } else {
                    Successor::Exit(t)
                }
            };
            match info {
                BranchInfo::DirectJump(t) => break (info, vec![to(t)]),
                BranchInfo::ConditionalBranch { taken, fallthrough } => {
                    break (info, vec![to(taken), to(fallthrough)])
                }
                BranchInfo::IndirectJump => {
                    let mut s: Vec<Successor> = vec![];
                    for t in &table_of[&pc].targets {
                        if !s.contains(&Successor::Block(*t)) {
                            s.push(Successor::Block(*t));
                        }
                    }
                    break (info, s);
                }
                BranchInfo::Return | BranchInfo::Barrier => break (info, vec![]),
                BranchInfo::Call(Some(t)) if opts.noreturn.contains(&t) => break (info, vec![]),
                BranchInfo::Fallthrough | BranchInfo::Call(_) => {
                    if leaders.contains(&next) {
                        break (info, vec![Successor::Block(next)]);
                    }
                    pc = next;
                }
            }
        };
        blocks.insert(start, BasicBlock { start, instrs, terminator, succs });
    }

    Ok(ControlFlowGraph {
        range: *range,
        entry: range.start,
        blocks,
        exits,
        jump_tables: tables,
        roots: opts.roots.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::isa::{encode, MemOperand, Width, RAX, RCX};

    fn assemble(code: &[Instruction]) -> Vec<u8> {
        code.iter().flat_map(|i| encode(i).unwrap()).collect()
    }

    fn env_with(addr: u64, bytes: &[u8]) -> MachineEnv {
        let mut env = MachineEnv::new();
        env.load_code(1, addr, bytes);
        env
    }

    fn mov_rax(v: i64) -> Instruction {
        Instruction::new(Opcode::MOV, Width::W64, vec![Operand::Reg(RAX), Operand::Imm(v)])
    }

    fn ret() -> Instruction {
        Instruction::new(Opcode::RET, Width::W64, vec![])
    }

    #[test]
    fn classify_examples() {
        let r = FunctionRange::new(0, 0x1000, 0x1100);
        assert_eq!(classify_jump(0x1050, &r), JumpClass::LocalJump);
        assert_eq!(classify_jump(0x2000, &r), JumpClass::TailCall);
        assert_eq!(classify_jump(0x1100, &r), JumpClass::TailCall);
    }

    #[test]
    fn straight_line() {
        let bytes = assemble(&[mov_rax(1), ret()]);
        let env = env_with(0x1000, &bytes);
        let r = FunctionRange::new(1, 0x1000, 0x1000 + bytes.len() as u64);
        let cfg = recover_function(&env, &r, &RecoveryOptions::default()).unwrap();
        assert_eq!(cfg.blocks.len(), 1);
        assert_eq!(cfg.blocks[&0x1000].terminator, BranchInfo::Return);
    }

    #[test]
    fn conditional_three_blocks() {
        let cmp = Instruction::new(Opcode::CMP, Width::W64, vec![Operand::Reg(RAX), Operand::Imm(0)]);
        // JZ over the MOV+RET pair (8 bytes: mov rax,imm32 is 7 + ret 1)
        let jz = Instruction::new(Opcode::JCC, Width::W64, vec![Operand::Imm(8)]).with_cond(4);
        let bytes = assemble(&[cmp, jz, mov_rax(1), ret(), mov_rax(2), ret()]);
        let env = env_with(0x1000, &bytes);
        let r = FunctionRange::new(1, 0x1000, 0x1000 + bytes.len() as u64);
        let cfg = recover_function(&env, &r, &RecoveryOptions::default()).unwrap();
        assert_eq!(cfg.blocks.len(), 3);
        assert_eq!(cfg.blocks[&0x1000].succs.len(), 2);
        assert_eq!(cfg.reachable().len(), 3);
    }

    #[test]
    fn noreturn_call_stops_before_padding() {
        let call = Instruction::new(Opcode::CALL, Width::W64, vec![Operand::Imm(0x100)]);
        let mut bytes = assemble(&[call]);
        // garbage the decoder rejects, standing in for padding
        bytes.extend_from_slice(&[0x0F, 0x0B, 0xCC]);
        let env = env_with(0x1000, &bytes);
        let r = FunctionRange::new(1, 0x1000, 0x1000 + bytes.len() as u64);
        let opts = RecoveryOptions { noreturn: [0x1105].into(), roots: vec![] };
        let cfg = recover_function(&env, &r, &opts).unwrap();
        assert_eq!(cfg.instruction_count(), 1);
        assert!(recover_function(&env, &r, &RecoveryOptions::default()).is_err());
    }

    #[test]
    fn jump_table_examples() {
        let mut env = MachineEnv::new();
        env.memory.map(0x3000, 0x100);
        for (k, t) in [0x1010u64, 0x1020, 0x1030].iter().enumerate() {
            env.memory.write_u64(0x3000 + 8 * k as u64, *t).unwrap();
        }
        let r = FunctionRange::new(1, 0x1000, 0x1100);
        let jmp = Instruction::new(
            Opcode::JMP,
            Width::W64,
            vec![Operand::Mem(MemOperand { base: None, index: Some((RCX, 8)), disp: 0x3000 })],
        );
        let jt = resolve_jump_table(&env, &jmp, 0x1000, &r).unwrap();
        assert_eq!(jt.targets, vec![0x1010, 0x1020, 0x1030]);

        env.memory.write_u64(0x3000, 0x5000).unwrap();
        assert_eq!(resolve_jump_table(&env, &jmp, 0x1000, &r), Err(CfgError::EmptyTable { pc: 0x1000 }));

        let via_reg = Instruction::new(Opcode::JMP, Width::W64, vec![Operand::Reg(RAX)]);
        assert_eq!(resolve_jump_table(&env, &via_reg, 0x1000, &r), Err(CfgError::NoTablePattern { pc: 0x1000 }));
    }

    #[test]
    fn tail_call_is_exit() {
        let jmp = Instruction::new(Opcode::JMP, Width::W64, vec![Operand::Imm(0x1000)]);
        let bytes = assemble(&[jmp]);
        let env = env_with(0x1000, &bytes);
        let r = FunctionRange::new(1, 0x1000, 0x1005);
        let cfg = recover_function(&env, &r, &RecoveryOptions::default()).unwrap();
        assert_eq!(cfg.blocks[&0x1000].succs, vec![Successor::Exit(0x2005)]);
        assert!(cfg.exits.contains(&0x2005));
        assert_eq!(recover_function(&env, &r, &RecoveryOptions::default()).unwrap(), cfg);
    }
}
