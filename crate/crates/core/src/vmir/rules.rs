//! The declarative translation rule table and its text format.

use super::{ArgKind, VArg, VOp, VmirInst, VREGS};
use crate::isa::{encode, legal_forms, reg_from_name, Form, Instruction, Opcode, Shape, Width};
use std::collections::BTreeMap;
use thiserror::Error;

/// The rule table shipped with the crate.
pub const DEFAULT_RULES: &str = include_str!("rules.txt");

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RuleError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("line {line}: duplicate rule for {form}")]
    Duplicate { line: usize, form: String },
    #[error("line {line}: {form}: {msg}")]
    BadTemplate { line: usize, form: String, msg: String },
    #[error("no rule for {} form(s): {}", .0.len(), .0.join(", "))]
    Gaps(Vec<String>),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TranslateError {
    #[error("no rule for {0}")]
    NoRule(String),
    #[error("cannot instantiate rule for {instr}: {msg}")]
    Instantiate { instr: String, msg: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum TWidth {
    Instr,
    Src,
    Fixed(Width),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum TArg {
    V(u8),
    G(u8),
    Lit(i64),
    Dst,
    Src,
    Imm,
    Ea,
    Cc,
    Target,
    Next,
}

/// One instruction of a rule template.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TInst {
    op: VOp,
    width: TWidth,
    args: Vec<TArg>,
}

/// Body of a rule: a parameterised VMIR sequence or the native fallback marker.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Template {
    Seq(Vec<TInst>),
    Fallback,
}

#[derive(Clone, Debug)]
pub struct RuleTable {
    rules: BTreeMap<Form, Template>,
}

impl Default for RuleTable {
    fn default() -> Self {
        RuleTable::parse(DEFAULT_RULES).expect("embedded rule table is valid")
    }
}

fn parse_widths(s: &str) -> Option<Vec<Width>> {
    if s == "*" {
        return Some(Width::ALL.to_vec());
    }
    s.split(',').map(|w| w.trim().parse::<u32>().ok().and_then(Width::from_bits)).collect()
}

fn parse_int(s: &str) -> Option<i64> {
    let (neg, body) = match s.strip_prefix('-') {
        Some(b) => (true, b),
        None => (false, s),
    };
    let v = match body.strip_prefix("0x") {
        Some(h) => u64::from_str_radix(h, 16).ok()? as i64,
        None => body.parse::<i64>().ok()?,
    };
    Some(if neg { v.wrapping_neg() } else { v })
}

fn parse_arg(s: &str) -> Option<TArg> {
    Some(match s {
        "$dst" => TArg::Dst,
        "$src" => TArg::Src,
        "$imm" => TArg::Imm,
        "$ea" => TArg::Ea,
        "$cc" => TArg::Cc,
        "$target" => TArg::Target,
        "$next" => TArg::Next,
        _ => {
            if let Some(n) = s.strip_prefix('v').and_then(|n| n.parse::<u8>().ok()) {
                TArg::V(n)
            } else if let Some(r) = reg_from_name(s) {
                TArg::G(r)
            } else {
                TArg::Lit(parse_int(s)?)
            }
        }
    })
}

fn parse_inst(s: &str) -> Result<TInst, String> {
    let s = s.trim();
    let (head, rest) = match s.find(char::is_whitespace) {
        Some(i) => (&s[..i], s[i..].trim()),
        None => (s, ""),
    };
    let (name, width) = match head.split_once('.') {
        Some((n, w)) => {
            let width = match w {
                "W" => TWidth::Instr,
                "S" => TWidth::Src,
                _ => TWidth::Fixed(
                    w.parse::<u32>().ok().and_then(Width::from_bits).ok_or(format!("bad width `{}`", w))?,
                ),
            };
            (n, width)
        }
        None => (head, TWidth::Fixed(Width::W64)),
    };
    let op = VOp::from_name(name).ok_or(format!("unknown VMIR op `{}`", name))?;
    let args = if rest.is_empty() {
        vec![]
    } else {
        rest.split(',')
            .map(|a| parse_arg(a.trim()).ok_or(format!("bad operand `{}`", a.trim())))
            .collect::<Result<Vec<_>, _>>()?
    };
    Ok(TInst { op, width, args })
}

/// Kind of operand a placeholder produces in a given slot.
fn arg_fits(a: TArg, slot: ArgKind) -> bool {
    use ArgKind as K;
    match a {
        TArg::V(n) => n < VREGS && matches!(slot, K::V | K::T),
        TArg::G(_) | TArg::Dst | TArg::Src => slot == K::G,
        TArg::Lit(_) | TArg::Imm | TArg::Cc => matches!(slot, K::I | K::T),
        TArg::Ea => slot == K::E,
        TArg::Target | TArg::Next => matches!(slot, K::I | K::L | K::T),
    }
}

/// Whether `form` provides what the placeholder refers to.
fn placeholder_available(a: TArg, form: &Form) -> bool {
    let shape = form.shape.as_str();
    let b = shape.as_bytes();
    let is_branch = matches!(form.opcode, Opcode::JMP | Opcode::JCC | Opcode::CALL);
    match a {
        TArg::Dst => b.first() == Some(&b'r'),
        TArg::Src => b.get(1) == Some(&b'r'),
        TArg::Imm => b.contains(&b'i'),
        TArg::Ea => b.contains(&b'm'),
        TArg::Cc => matches!(form.opcode, Opcode::JCC | Opcode::SETCC | Opcode::CMOVCC),
        TArg::Target => is_branch && shape == "i",
        TArg::Next => is_branch || form.opcode == Opcode::CALL,
        _ => true,
    }
}

impl RuleTable {
    /// Parse and check a rule table. Every legal form must be covered
    /// exactly once.
    pub fn parse(text: &str) -> Result<RuleTable, RuleError> {
        let mut rules = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = n + 1;
            let l = raw.trim();
            if l.is_empty() || l.starts_with('#') {
                continue;
            }
            let body = l.strip_prefix("RULE ").ok_or(RuleError::Syntax { line, msg: "expected RULE".into() })?;
            let (key, tmpl) =
                body.split_once("=>").ok_or(RuleError::Syntax { line, msg: "expected `=>`".into() })?;
            let mut parts = key.trim().splitn(3, '.');
            let (op, shape, widths) = match (parts.next(), parts.next(), parts.next()) {
                (Some(o), Some(s), Some(w)) => (o, s, w),
                _ => return Err(RuleError::Syntax { line, msg: format!("bad rule key `{}`", key.trim()) }),
            };
            let opcode = Opcode::from_name(op)
                .ok_or(RuleError::Syntax { line, msg: format!("unknown opcode `{}`", op) })?;
            let shape =
                Shape::parse(shape).ok_or(RuleError::Syntax { line, msg: format!("bad shape `{}`", shape) })?;
            let widths =
                parse_widths(widths).ok_or(RuleError::Syntax { line, msg: format!("bad widths `{}`", widths) })?;
            let tmpl = tmpl.trim();
            let template = if tmpl == "FALLBACK" {
                Template::Fallback
            } else if tmpl.is_empty() {
                Template::Seq(vec![])
            } else {
                let insts = tmpl
                    .split(';')
                    .filter(|s| !s.trim().is_empty())
                    .map(parse_inst)
                    .collect::<Result<Vec<_>, _>>()
                    .map_err(|msg| RuleError::Syntax { line, msg })?;
                Template::Seq(insts)
            };
            let explicit = !key.trim().ends_with('*');
            for w in widths {
                let form = Form { opcode, shape, width: w };
                if !legal_forms().contains(&form) {
                    if explicit {
                        return Err(RuleError::BadTemplate {
                            line,
                            form: form.to_string(),
                            msg: "not a legal form".into(),
                        });
                    }
                    continue;
                }
                check_template(&form, &template).map_err(|msg| RuleError::BadTemplate {
                    line,
                    form: form.to_string(),
                    msg,
                })?;
                if rules.insert(form, template.clone()).is_some() {
                    return Err(RuleError::Duplicate { line, form: form.to_string() });
                }
            }
        }
        let gaps: Vec<String> =
            legal_forms().iter().filter(|f| !rules.contains_key(*f)).map(|f| f.to_string()).collect();
        if !gaps.is_empty() {
            return Err(RuleError::Gaps(gaps));
        }
        Ok(RuleTable { rules })
    }

    /// Load from a file path.
    pub fn from_file(path: &std::path::Path) -> Result<RuleTable, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {}", path.display(), e))?;
        RuleTable::parse(&text).map_err(|e| e.to_string())
    }

    /// A copy with every form of `opcode` routed to native fallback.
    pub fn with_fallback_for(&self, opcode: Opcode) -> RuleTable {
        let mut t = self.clone();
        for (f, body) in t.rules.iter_mut() {
            if f.opcode == opcode {
                *body = Template::Fallback;
            }
        }
        t
    }

    pub fn get(&self, form: &Form) -> Option<&Template> {
        self.rules.get(form)
    }

    pub fn len(&self) -> usize {
        self.rules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }

    /// Forms routed to native fallback.
    pub fn fallback_forms(&self) -> Vec<Form> {
        self.rules.iter().filter(|(_, t)| **t == Template::Fallback).map(|(f, _)| *f).collect()
    }
}

fn check_template(form: &Form, t: &Template) -> Result<(), String> {
    let insts = match t {
        Template::Fallback => {
            if matches!(form.opcode, Opcode::CALL | Opcode::RET | Opcode::JMP | Opcode::JCC) {
                return Err("control transfers cannot fall back to native execution".into());
            }
            return Ok(());
        }
        Template::Seq(s) => s,
    };
    for i in insts {
        let sig = i.op.signature();
        if sig.len() != i.args.len() {
            return Err(format!("{} takes {} operands", i.op, sig.len()));
        }
        if i.width == TWidth::Src && !matches!(form.opcode, Opcode::MOVZX | Opcode::MOVSX) {
            return Err(".S width outside a widening move".into());
        }
        for (a, k) in i.args.iter().zip(sig) {
            if !arg_fits(*a, *k) {
                return Err(format!("{}: operand {:?} does not fit slot {:?}", i.op, a, k));
            }
            if !placeholder_available(*a, form) {
                return Err(format!("{}: {:?} not available for this form", i.op, a));
            }
        }
    }
    Ok(())
}

fn inst_err(instr: &Instruction, msg: &str) -> TranslateError {
    TranslateError::Instantiate { instr: instr.to_string(), msg: msg.to_string() }
}

/// Translate one instruction located at `pc`.
///
/// Forms marked FALLBACK produce a single VNATIVE carrying the instruction's
/// encoding. Branch targets are emitted as labels equal to the target pc.
pub fn translate_instruction(instr: &Instruction, pc: u64, rules: &RuleTable) -> Result<Vec<VmirInst>, TranslateError> {
    let form = instr.form();
    let t = rules.get(&form).ok_or_else(|| TranslateError::NoRule(form.to_string()))?;
    let insts = match t {
        Template::Fallback => {
            let bytes = encode(instr).map_err(|e| inst_err(instr, &e.to_string()))?;
            return Ok(vec![VmirInst::new(
                VOp::VNATIVE,
                Width::W64,
                vec![VArg::Bytes(bytes), VArg::Imm((pc | (instr.len as u64) << 56) as i64)],
            )]);
        }
        Template::Seq(s) => s,
    };
    let next = pc.wrapping_add(instr.len as u64);
    let target = || -> Result<u64, TranslateError> {
        let d = instr.operands.first().and_then(|o| o.imm()).ok_or_else(|| inst_err(instr, "no target"))?;
        Ok(next.wrapping_add(d as u64))
    };
    let mut out = Vec::with_capacity(insts.len());
    for ti in insts {
        let width = match ti.width {
            TWidth::Instr => instr.width,
            TWidth::Src => instr.src_width.ok_or_else(|| inst_err(instr, "no source width"))?,
            TWidth::Fixed(w) => w,
        };
        let sig = ti.op.signature();
        let mut args = Vec::with_capacity(ti.args.len());
        for (a, slot) in ti.args.iter().zip(sig) {
            let as_addr = |v: u64| if *slot == ArgKind::L { VArg::Label(v) } else { VArg::Imm(v as i64) };
            args.push(match a {
                TArg::V(n) => VArg::V(*n),
                TArg::G(r) => VArg::G(*r),
                TArg::Lit(v) => VArg::Imm(*v),
                TArg::Dst => VArg::G(instr.operands[0].reg().ok_or_else(|| inst_err(instr, "$dst"))?),
                TArg::Src => VArg::G(instr.operands[1].reg().ok_or_else(|| inst_err(instr, "$src"))?),
                TArg::Imm => VArg::Imm(
                    instr.operands.iter().find_map(|o| o.imm()).ok_or_else(|| inst_err(instr, "$imm"))?,
                ),
                TArg::Ea => VArg::Ea(*instr.mem_operand().ok_or_else(|| inst_err(instr, "$ea"))?),
                TArg::Cc => VArg::Imm(instr.cond.ok_or_else(|| inst_err(instr, "$cc"))?.0 as i64),
                TArg::Target => as_addr(target()?),
                TArg::Next => as_addr(next),
            });
        }
        out.push(VmirInst::new(ti.op, width, args));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::isa::{MemOperand, Operand, RAX, RBX};

    #[test]
    fn embedded_table_is_total() {
        let t = RuleTable::default();
        assert_eq!(t.len(), legal_forms().len());
        assert_eq!(t.fallback_forms().len(), 1);
    }

    #[test]
    fn gaps_are_rejected() {
        let trimmed: String =
            DEFAULT_RULES.lines().filter(|l| !l.starts_with("RULE BSWAP")).collect::<Vec<_>>().join("\n");
        match RuleTable::parse(&trimmed) {
            Err(RuleError::Gaps(g)) => assert_eq!(g, vec!["BSWAP.r.32", "BSWAP.r.64"]),
            other => panic!("{:?}", other),
        }
    }

    #[test]
    fn duplicates_and_bad_placeholders_are_rejected() {
        let dup = format!("{}\nRULE NOP.none.32 =>", DEFAULT_RULES);
        assert!(matches!(RuleTable::parse(&dup), Err(RuleError::Duplicate { .. })));
        let bad = DEFAULT_RULES.replace("RULE LEA.rm.* => VEA v0, $ea;", "RULE LEA.rm.* => VEA v0, $imm;");
        assert!(matches!(RuleTable::parse(&bad), Err(RuleError::BadTemplate { .. })));
    }

    #[test]
    fn add_mem_imm_sequence() {
        let t = RuleTable::default();
        let mut i = Instruction::new(
            Opcode::ADD,
            Width::W64,
            vec![Operand::Mem(MemOperand::base_disp(RBX, 8)), Operand::Imm(0x10)],
        );
        i.len = 4;
        let seq = translate_instruction(&i, 0x1000, &t).unwrap();
        let ops: Vec<VOp> = seq.iter().map(|v| v.op).collect();
        assert_eq!(ops, vec![VOp::VEA, VOp::VLOADM, VOp::VLIMM, VOp::VADD, VOp::VSTOREM]);
        assert_eq!(seq[2].args[1], VArg::Imm(0x10));
        assert_eq!(seq[3].width, Width::W64);
    }

    #[test]
    fn mov_and_nop() {
        let t = RuleTable::default();
        let mov = Instruction::new(Opcode::MOV, Width::W64, vec![Operand::Reg(RAX), Operand::Reg(RBX)]);
        let seq = translate_instruction(&mov, 0, &t).unwrap();
        assert_eq!(seq[0], VmirInst::new(VOp::VLOADR, Width::W64, vec![VArg::V(0), VArg::G(RBX)]));
        assert_eq!(seq[1], VmirInst::new(VOp::VSTORER, Width::W64, vec![VArg::G(RAX), VArg::V(0)]));
        let nop = Instruction::new(Opcode::NOP, Width::W32, vec![]);
        assert!(translate_instruction(&nop, 0, &t).unwrap().is_empty());
    }

    #[test]
    fn fallback_emits_native() {
        let t = RuleTable::default().with_fallback_for(Opcode::BSWAP);
        let mut i = Instruction::new(Opcode::BSWAP, Width::W64, vec![Operand::Reg(RAX)]);
        i.len = 3;
        let seq = translate_instruction(&i, 0x2000, &t).unwrap();
        assert_eq!(seq.len(), 1);
        assert_eq!(seq[0].op, VOp::VNATIVE);
        assert_eq!(seq[0].args[0], VArg::Bytes(vec![0x48, 0x0F, 0xC8]));
    }
}
