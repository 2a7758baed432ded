//! Pass interface over VMIR functions.

use super::{Label, VArg, VmirFunction};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PassError {
    #[error("pass `{pass}` produced an invalid function: {msg}")]
    PassViolation { pass: String, msg: String },
}

pub trait Pass {
    fn name(&self) -> &str;
    fn run(&self, f: VmirFunction) -> VmirFunction;
}

pub struct IdentityPass;

impl Pass for IdentityPass {
    fn name(&self) -> &str {
        "identity"
    }

    fn run(&self, f: VmirFunction) -> VmirFunction {
        f
    }
}

/// Renames block labels to their position in the block list.
pub struct RenumberLabels;

impl Pass for RenumberLabels {
    fn name(&self) -> &str {
        "renumber-labels"
    }

    fn run(&self, mut f: VmirFunction) -> VmirFunction {
        let map: BTreeMap<Label, Label> =
            f.blocks.iter().enumerate().map(|(i, b)| (b.label, i as Label)).collect();
        f.entry = map[&f.entry];
        for b in &mut f.blocks {
            b.label = map[&b.label];
            for i in &mut b.insts {
                for a in &mut i.args {
                    if let VArg::Label(l) = a {
                        *l = map[l];
                    }
                }
            }
        }
        f
    }
}

/// Apply `passes` in order, validating after each one.
pub fn run_passes(mut f: VmirFunction, passes: &[&dyn Pass]) -> Result<VmirFunction, PassError> {
    for p in passes {
        f = p.run(f);
        f.validate().map_err(|msg| PassError::PassViolation { pass: p.name().to_string(), msg })?;
    }
    Ok(f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cfg::FunctionRange;
    use crate::isa::Width;
    use crate::vmir::{ExitKind, VOp, VmirBlock, VmirInst};

    fn sample() -> VmirFunction {
        let jmp = |l| VmirInst::new(VOp::VJMP, Width::W64, vec![VArg::Label(l)]);
        VmirFunction {
            range: FunctionRange::new(1, 0x1000, 0x1100),
            entry: 0x1000,
            blocks: vec![
                VmirBlock { label: 0x1000, pc: Some(0x1000), insts: vec![jmp(0x1010)], exit: ExitKind::Branch },
                VmirBlock {
                    label: 0x1010,
                    pc: Some(0x1010),
                    insts: vec![VmirInst::new(VOp::VRET, Width::W64, vec![VArg::Imm(0)])],
                    exit: ExitKind::Return,
                },
            ],
            roots: vec![],
        }
    }

    #[test]
    fn identity_and_empty_list() {
        let f = sample();
        assert_eq!(run_passes(f.clone(), &[]).unwrap(), f);
        assert_eq!(run_passes(f.clone(), &[&IdentityPass]).unwrap(), f);
    }

    #[test]
    fn renumber_is_idempotent() {
        let once = run_passes(sample(), &[&RenumberLabels]).unwrap();
        assert_eq!(once.entry, 0);
        assert_eq!(once.blocks[0].insts[0].args[0], VArg::Label(1));
        let twice = run_passes(once.clone(), &[&RenumberLabels]).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn violations_are_reported() {
        struct Breaker;
        impl Pass for Breaker {
            fn name(&self) -> &str {
                "breaker"
            }
            fn run(&self, mut f: VmirFunction) -> VmirFunction {
                f.blocks.pop();
                f
            }
        }
        assert!(matches!(run_passes(sample(), &[&Breaker]), Err(PassError::PassViolation { .. })));
    }
}
