//! Function co-builder: emits prologue and epilogue from one frame
//! description, so code and unwind metadata cannot disagree, and tracks the
//! local-unwind state machine as code is emitted.

use super::asm::{ins, m, r, AsmError, Asm, Target};
use crate::eh::{CatchClause, IpState, LsData, TryBlock, UnwindCode, UnwindEntry};
use crate::isa::{Opcode, Reg, Width, RSP};
use crate::pipeline::{ManifestFunction, ManifestMeta};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Frame {
    /// Pushed in order.
    pub pushes: Vec<Reg>,
    /// Bytes allocated below the pushes.
    pub alloc: u32,
    /// Registers stored at `[rsp + off]` after the allocation.
    pub saves: Vec<(Reg, u32)>,
}

impl Frame {
    /// Unwind codes in application order: saves, allocation, pops.
    pub fn unwind_codes(&self) -> Vec<UnwindCode> {
        let mut v: Vec<UnwindCode> = self.saves.iter().map(|(r, o)| UnwindCode::SaveNonvol(*r, *o)).collect();
        if self.alloc > 0 {
            v.push(if self.alloc <= 128 { UnwindCode::AllocSmall(self.alloc) } else { UnwindCode::AllocLarge(self.alloc) });
        }
        v.extend(self.pushes.iter().rev().map(|r| UnwindCode::PushNonvol(*r)));
        v
    }

    pub fn prologue(&self, a: &mut Asm) {
        for p in &self.pushes {
            a.op(Opcode::PUSH, Width::W64, vec![r(*p)]);
        }
        if self.alloc > 0 {
            a.op(Opcode::SUB, Width::W64, vec![r(RSP), crate::harness::asm::imm(self.alloc as i64)]);
        }
        for (reg, off) in &self.saves {
            a.op(Opcode::MOV, Width::W64, vec![m(RSP, *off as i32), r(*reg)]);
        }
    }

    pub fn epilogue(&self, a: &mut Asm) {
        for (reg, off) in &self.saves {
            a.op(Opcode::MOV, Width::W64, vec![r(*reg), m(RSP, *off as i32)]);
        }
        if self.alloc > 0 {
            a.op(Opcode::ADD, Width::W64, vec![r(RSP), crate::harness::asm::imm(self.alloc as i64)]);
        }
        for p in self.pushes.iter().rev() {
            a.op(Opcode::POP, Width::W64, vec![r(*p)]);
        }
        a.ret();
    }
}

/// A function under construction.
pub struct FnBuilder {
    pub name: String,
    pub fid: u64,
    pub asm: Asm,
    pub frame: Frame,
    state: i32,
    unwind_map: Vec<UnwindEntry>,
    try_blocks: Vec<TryBlock>,
    /// (label, state) transitions in emission order.
    marks: Vec<(String, i32)>,
    /// Catch clauses by label, resolved at finish.
    pending: Vec<(usize, u64, String, i32)>,
    fresh: usize,
    with_meta: bool,
}

impl FnBuilder {
    /// Starts the function and emits its prologue.
    pub fn new(name: &str, fid: u64, addr: u64, frame: Frame) -> Self {
        let mut asm = Asm::new(addr);
        frame.prologue(&mut asm);
        let mut b = FnBuilder {
            name: name.into(),
            fid,
            asm,
            frame,
            state: -1,
            unwind_map: vec![],
            try_blocks: vec![],
            marks: vec![],
            pending: vec![],
            fresh: 0,
            with_meta: true,
        };
        b.set_state(-1);
        b
    }

    /// Leaf function without metadata.
    pub fn leaf(name: &str, fid: u64, addr: u64) -> Self {
        let mut b = Self::new(name, fid, addr, Frame::default());
        b.with_meta = false;
        b
    }

    pub fn fresh_label(&mut self, stem: &str) -> String {
        self.fresh += 1;
        format!(".{}{}", stem, self.fresh)
    }

    pub fn state(&self) -> i32 {
        self.state
    }

    pub fn parent_of(&self, s: i32) -> i32 {
        if s < 0 {
            -1
        } else {
            self.unwind_map[s as usize].parent
        }
    }

    pub fn set_state(&mut self, s: i32) {
        let l = self.fresh_label("s");
        self.asm.label(l.clone());
        self.marks.push((l, s));
        self.state = s;
    }

    /// Enter a new state below the current one.
    pub fn push_state(&mut self, dtor: Option<u64>) -> i32 {
        let s = self.unwind_map.len() as i32;
        self.unwind_map.push(UnwindEntry { parent: self.state, dtor });
        self.set_state(s);
        s
    }

    pub fn pop_state(&mut self) {
        let p = self.parent_of(self.state);
        self.set_state(p);
    }

    /// Opens a try region; returns its marker state.
    pub fn try_begin(&mut self) -> i32 {
        self.push_state(None)
    }

    /// Registers the handlers of the try region `marker`; each catch lands at
    /// `label` in the state enclosing the region.
    pub fn try_catches(&mut self, marker: i32, catches: &[(u64, String)]) {
        let outer = self.parent_of(marker);
        let k = self.try_blocks.len();
        self.try_blocks.push(TryBlock { low: marker, high: marker, catches: vec![] });
        for (t, l) in catches {
            self.pending.push((k, *t, l.clone(), outer));
        }
    }

    pub fn call(&mut self, t: impl Into<Target>) {
        self.asm.call(t);
    }

    pub fn epilogue(&mut self) {
        let f = self.frame.clone();
        f.epilogue(&mut self.asm);
    }

    pub fn finish(mut self) -> Result<ManifestFunction, AsmError> {
        let end = self.fresh_label("end");
        self.asm.label(end.clone());
        let out = self.asm.finish()?;
        let meta = self.with_meta.then(|| {
            let mut ip_map = vec![];
            for (k, (l, s)) in self.marks.iter().enumerate() {
                let start = out.label(l);
                let stop = self.marks.get(k + 1).map_or(out.label(&end), |(n, _)| out.label(n));
                if *s >= 0 && start < stop {
                    ip_map.push(IpState { start, end: stop, state: *s });
                }
            }
            for (k, t, l, st) in &self.pending {
                self.try_blocks[*k].catches.push(CatchClause { type_id: *t, target: out.label(l), state: *st });
            }
            let lsd = (!self.unwind_map.is_empty()).then(|| LsData {
                ip_map,
                unwind_map: self.unwind_map.clone(),
                try_blocks: self.try_blocks.clone(),
            });
            ManifestMeta { codes: self.frame.unwind_codes(), lsd }
        });
        Ok(ManifestFunction {
            name: self.name,
            fid: self.fid,
            addr: out.base,
            code: hex::encode(&out.bytes),
            noreturn: false,
            meta,
        })
    }
}

/// `MOV r64, imm` helper.
pub fn mov_imm(a: &mut Asm, reg: Reg, v: u64) {
    a.ins(ins(Opcode::MOV, Width::W64, vec![r(reg), crate::harness::asm::imm(v as i64)]));
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::isa::{RBX, RSI};

    #[test]
    fn unwind_codes_undo_the_prologue() {
        let f = Frame { pushes: vec![RBX, RSI], alloc: 0x200, saves: vec![(RBX, 8)] };
        assert_eq!(
            f.unwind_codes(),
            vec![
                UnwindCode::SaveNonvol(RBX, 8),
                UnwindCode::AllocLarge(0x200),
                UnwindCode::PushNonvol(RSI),
                UnwindCode::PushNonvol(RBX)
            ]
        );
        let small = Frame { pushes: vec![], alloc: 0x10, saves: vec![] };
        assert_eq!(small.unwind_codes(), vec![UnwindCode::AllocSmall(0x10)]);
        assert!(Frame::default().unwind_codes().is_empty());
    }
}
