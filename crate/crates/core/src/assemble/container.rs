//! The XJPM container: header, section table and sections, all little-endian.

use super::{
    crypt_stream, crypt_window, layout_of, lower_to_bytecode, relocate, unpack_args, Cell, HandlerDesc,
    HandlerTable, LowerError, CELL_SIZE, SENTINEL,
};
use crate::cfg::FunctionRange;
use crate::eh::{decode_metadata, UnwindCode};
use crate::isa::Width;
use crate::shadow::{payload_nonce, validate_shadow, PayloadEntry, ShadowRecord};
use crate::vmir::{ArgKind, VOp, VmirFunction};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeSet;
use thiserror::Error;

pub const MAGIC: [u8; 4] = *b"XJPM";
pub const VERSION: u16 = 1;
pub const FLAG_EH_PROTECTED: u16 = 1;

const HEADER_LEN: usize = 44;
const ENTRY_LEN: usize = 20;
const TAGS: [&[u8; 4]; 7] = [b"HTAB", b"BYTC", b"FMAP", b"SUWD", b"EEHP", b"PEHM", b"DGST"];

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ModuleError {
    #[error("bad magic")]
    BadMagic,
    #[error("unsupported version {0}")]
    BadVersion(u16),
    #[error("section {0} extends past the end of the file")]
    SectionOverflow(String),
    #[error("duplicate section {0}")]
    DuplicateSection(String),
    #[error("missing section {0}")]
    MissingSection(String),
    #[error("unknown section {0}")]
    UnknownSection(String),
    #[error("truncated container")]
    Truncated,
    #[error("malformed section {tag}: {msg}")]
    Malformed { tag: String, msg: String },
    #[error("validation failed: {0}")]
    ValidationFailure(String),
    #[error(transparent)]
    Lower(#[from] LowerError),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FunctionEntry {
    pub fid: u64,
    pub entry_pc: u64,
    pub range: FunctionRange,
    pub entry_cell: u32,
    /// (native pc, cell) pairs where control may come back into the VM.
    pub reentry: Vec<(u64, u32)>,
}

/// Genuine metadata of a protected function left in the clear (base mode).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlainMetadata {
    pub fid: u64,
    pub bytes: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProtectedModule {
    pub flags: u16,
    pub key: [u8; 16],
    pub bytecode_nonce: u64,
    pub eh_nonce: u64,
    pub handlers: HandlerTable,
    /// Encrypted cells.
    pub bytecode: Vec<u8>,
    pub functions: Vec<FunctionEntry>,
    pub shadow: Vec<ShadowRecord>,
    pub eh_payload: Vec<PayloadEntry>,
    pub plain_eh: Vec<PlainMetadata>,
    /// SHA-256 over the plaintext bytecode followed by every plaintext EH payload.
    pub digest: [u8; 32],
}

pub struct ModuleInputs<'a> {
    pub functions: &'a [VmirFunction],
    pub table: &'a HandlerTable,
    pub shadow: Vec<ShadowRecord>,
    pub eh_payload: Vec<PayloadEntry>,
    pub plain_eh: Vec<PlainMetadata>,
    pub eh_protected: bool,
    pub key: [u8; 16],
    pub eh_nonce: u64,
    pub seed: u64,
}

fn digest_of(bytecode: &[u8], eh: &[Vec<u8>]) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(bytecode);
    for p in eh {
        h.update(p);
    }
    h.finalize().into()
}

pub fn assemble_module(inp: ModuleInputs) -> Result<ProtectedModule, ModuleError> {
    let mut rng = ChaCha8Rng::seed_from_u64(inp.seed);
    let bytecode_nonce: u64 = rng.gen();
    let mut cells: Vec<Cell> = vec![];
    let mut functions = vec![];
    for f in inp.functions {
        let mut l = lower_to_bytecode(f, inp.table, rng.gen())?;
        let base = cells.len() as u32;
        relocate(&mut l.cells, base, inp.table);
        cells.extend(l.cells);
        functions.push(FunctionEntry {
            fid: f.fid(),
            entry_pc: f.range.start,
            range: f.range,
            entry_cell: l.entry + base,
            reentry: l.reentry.into_iter().map(|(pc, c)| (pc, c + base)).collect(),
        });
    }
    let plain: Vec<u8> = cells.iter().flat_map(|c| c.to_bytes()).collect();
    let eh_plain: Vec<Vec<u8>> = inp
        .eh_payload
        .iter()
        .map(|p| crypt_stream(&inp.key, payload_nonce(inp.eh_nonce, p.fid), &p.ciphertext))
        .collect();
    let m = ProtectedModule {
        flags: if inp.eh_protected { FLAG_EH_PROTECTED } else { 0 },
        key: inp.key,
        bytecode_nonce,
        eh_nonce: inp.eh_nonce,
        handlers: inp.table.clone(),
        bytecode: crypt_stream(&inp.key, bytecode_nonce, &plain),
        functions,
        shadow: inp.shadow,
        eh_payload: inp.eh_payload,
        plain_eh: inp.plain_eh,
        digest: digest_of(&plain, &eh_plain),
    };
    m.validate()?;
    Ok(m)
}

impl ProtectedModule {
    pub fn eh_protected(&self) -> bool {
        self.flags & FLAG_EH_PROTECTED != 0
    }

    pub fn cell_count(&self) -> usize {
        self.bytecode.len() / CELL_SIZE
    }

    /// Decrypt one cell in place of the stream; nothing else is decrypted.
    pub fn fetch_cell(&self, idx: u32) -> Option<Cell> {
        let off = idx as usize * CELL_SIZE;
        let ct = self.bytecode.get(off..off + CELL_SIZE)?;
        let mut buf = [0u8; CELL_SIZE];
        buf.copy_from_slice(ct);
        crypt_window(&self.key, self.bytecode_nonce, off as u64, &mut buf);
        Some(Cell::from_bytes(&buf))
    }

    pub fn function(&self, fid: u64) -> Option<&FunctionEntry> {
        self.functions.iter().find(|f| f.fid == fid)
    }

    pub fn shadow_for(&self, fid: u64) -> Option<&ShadowRecord> {
        self.shadow.iter().find(|s| s.fid() == fid)
    }

    pub fn payload_for(&self, fid: u64) -> Option<&PayloadEntry> {
        self.eh_payload.iter().find(|p| p.fid == fid)
    }

    /// Decrypt every cell (validation and tests only).
    pub fn decrypt_cells(&self) -> Vec<Cell> {
        let plain = crypt_stream(&self.key, self.bytecode_nonce, &self.bytecode);
        plain.chunks(CELL_SIZE).map(Cell::from_bytes).collect()
    }

    /// Handler ids referenced by the bytecode.
    pub fn referenced_handlers(&self) -> BTreeSet<u16> {
        self.decrypt_cells().iter().map(|c| c.handler).collect()
    }

    /// Decrypt-and-validate self-check.
    pub fn validate(&self) -> Result<(), ModuleError> {
        let fail = |m: String| Err(ModuleError::ValidationFailure(m));
        self.handlers.check().or_else(|e| fail(e))?;
        if self.bytecode.len() % CELL_SIZE != 0 {
            return fail("bytecode length is not a whole number of cells".into());
        }
        let n = self.cell_count() as u64;
        let in_range = |i: u64| i < n;
        let cells = self.decrypt_cells();
        for (i, c) in cells.iter().enumerate() {
            let d = match self.handlers.get(c.handler) {
                Some(d) => d,
                None => return fail(format!("cell {} has unknown handler id {}", i, c.handler)),
            };
            let args = match unpack_args(d.op, &c.words) {
                Some(a) => a,
                None => return fail(format!("cell {} has malformed operands for {}", i, d.op)),
            };
            if args.iter().any(|a| matches!(a, crate::vmir::VArg::Label(l) if !in_range(*l))) {
                return fail(format!("cell {} branches out of range", i));
            }
            if d.op.is_terminator() {
                if c.next != SENTINEL {
                    return fail(format!("terminator cell {} has a next-link", i));
                }
            } else if c.next != SENTINEL && !in_range(c.next as u64) {
                return fail(format!("cell {} next-link out of range", i));
            }
        }
        for f in &self.functions {
            if !in_range(f.entry_cell as u64) || f.reentry.iter().any(|(_, c)| !in_range(*c as u64)) {
                return fail(format!("function {} refers to a cell out of range", f.fid));
            }
        }
        let mut eh_plain = vec![];
        for p in &self.eh_payload {
            let bytes = crypt_stream(&self.key, payload_nonce(self.eh_nonce, p.fid), &p.ciphertext);
            match decode_metadata(&bytes) {
                Ok(info) if info.range.fid == p.fid => {}
                _ => return fail(format!("EH payload of function {} does not decrypt", p.fid)),
            }
            eh_plain.push(bytes);
        }
        for s in &self.shadow {
            let v = validate_shadow(&s.codes);
            if !v.is_empty() {
                return fail(format!("shadow record of function {}: {}", s.fid(), v.join("; ")));
            }
        }
        let plain: Vec<u8> = cells.iter().flat_map(|c| c.to_bytes()).collect();
        if digest_of(&plain, &eh_plain) != self.digest {
            return fail("digest mismatch".into());
        }
        Ok(())
    }

    pub fn serialize(&self) -> Vec<u8> {
        let sections: Vec<Vec<u8>> = vec![
            self.ser_htab(),
            self.bytecode.clone(),
            self.ser_fmap(),
            self.ser_suwd(),
            counted_blobs(self.eh_payload.iter().map(|p| (p.fid, &p.ciphertext[..]))),
            counted_blobs(self.plain_eh.iter().map(|p| (p.fid, &p.bytes[..]))),
            self.digest.to_vec(),
        ];
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.flags.to_le_bytes());
        out.extend_from_slice(&self.key);
        out.extend_from_slice(&self.bytecode_nonce.to_le_bytes());
        out.extend_from_slice(&self.eh_nonce.to_le_bytes());
        out.extend_from_slice(&(sections.len() as u32).to_le_bytes());
        let mut off = (HEADER_LEN + ENTRY_LEN * sections.len()) as u64;
        for (tag, s) in TAGS.iter().zip(&sections) {
            out.extend_from_slice(*tag);
            out.extend_from_slice(&off.to_le_bytes());
            out.extend_from_slice(&(s.len() as u64).to_le_bytes());
            off += s.len() as u64;
        }
        for s in sections {
            out.extend_from_slice(&s);
        }
        out
    }

    fn ser_htab(&self) -> Vec<u8> {
        let mut o = (self.handlers.len() as u32).to_le_bytes().to_vec();
        for d in &self.handlers.entries {
            o.extend_from_slice(&d.id.to_le_bytes());
            o.push(VOp::ALL.iter().position(|x| *x == d.op).unwrap() as u8);
            o.push(d.width.bits() as u8);
            o.extend_from_slice(&d.layout);
        }
        o
    }

    fn ser_fmap(&self) -> Vec<u8> {
        let mut o = (self.functions.len() as u32).to_le_bytes().to_vec();
        for f in &self.functions {
            for v in [f.fid, f.entry_pc, f.range.start, f.range.end] {
                o.extend_from_slice(&v.to_le_bytes());
            }
            o.extend_from_slice(&f.entry_cell.to_le_bytes());
            o.extend_from_slice(&(f.reentry.len() as u32).to_le_bytes());
            for (pc, c) in &f.reentry {
                o.extend_from_slice(&pc.to_le_bytes());
                o.extend_from_slice(&c.to_le_bytes());
            }
        }
        o
    }

    fn ser_suwd(&self) -> Vec<u8> {
        let mut o = (self.shadow.len() as u32).to_le_bytes().to_vec();
        for s in &self.shadow {
            for v in [s.fid(), s.range.start, s.range.end, s.handler] {
                o.extend_from_slice(&v.to_le_bytes());
            }
            o.push(s.codes.len() as u8);
            for c in &s.codes {
                o.extend_from_slice(&c.to_bytes());
            }
            o.extend_from_slice(&(s.net_delta as u64).to_le_bytes());
        }
        o
    }
}

fn counted_blobs<'a>(items: impl ExactSizeIterator<Item = (u64, &'a [u8])>) -> Vec<u8> {
    let mut o = (items.len() as u32).to_le_bytes().to_vec();
    for (fid, b) in items {
        o.extend_from_slice(&fid.to_le_bytes());
        o.extend_from_slice(&(b.len() as u32).to_le_bytes());
        o.extend_from_slice(b);
    }
    o
}

struct Rd<'a> {
    b: &'a [u8],
    at: usize,
    tag: &'static str,
}

impl<'a> Rd<'a> {
    fn new(b: &'a [u8], tag: &'static str) -> Self {
        Rd { b, at: 0, tag }
    }

    fn err(&self, msg: impl Into<String>) -> ModuleError {
        ModuleError::Malformed { tag: self.tag.to_string(), msg: msg.into() }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], ModuleError> {
        if self.b.len() - self.at < n {
            return Err(self.err(format!("truncated at byte {}", self.at)));
        }
        self.at += n;
        Ok(&self.b[self.at - n..self.at])
    }

    fn u8(&mut self) -> Result<u8, ModuleError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, ModuleError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, ModuleError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, ModuleError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    /// Element count, bounded by the bytes left at `min` bytes per element.
    fn count(&mut self, min: usize) -> Result<usize, ModuleError> {
        let n = self.u32()? as usize;
        if n.saturating_mul(min) > self.b.len() - self.at {
            return Err(self.err(format!("count {} exceeds section", n)));
        }
        Ok(n)
    }

    fn range(&self, fid: u64, start: u64, end: u64) -> Result<FunctionRange, ModuleError> {
        if start >= end {
            return Err(self.err(format!("empty range for function {}", fid)));
        }
        Ok(FunctionRange { fid, start, end })
    }

    fn finish(self) -> Result<(), ModuleError> {
        if self.at != self.b.len() {
            return Err(self.err("trailing bytes"));
        }
        Ok(())
    }
}

fn parse_htab(b: &[u8]) -> Result<HandlerTable, ModuleError> {
    let mut r = Rd::new(b, "HTAB");
    let mut entries = vec![];
    for _ in 0..r.count(7)? {
        let id = r.u16()?;
        let op = *VOp::ALL.get(r.u8()? as usize).ok_or_else(|| r.err("unknown op"))?;
        let width = Width::from_bits(r.u8()? as u32).ok_or_else(|| r.err("bad width"))?;
        let layout: [u8; 3] = r.take(3)?.try_into().unwrap();
        if layout != layout_of(op) {
            return Err(r.err(format!("layout mismatch for {}", op)));
        }
        entries.push(HandlerDesc { id, op, width, layout });
    }
    r.finish()?;
    let t = HandlerTable { entries };
    t.check().map_err(|m| ModuleError::Malformed { tag: "HTAB".into(), msg: m })?;
    Ok(t)
}

fn parse_fmap(b: &[u8]) -> Result<Vec<FunctionEntry>, ModuleError> {
    let mut r = Rd::new(b, "FMAP");
    let mut out = vec![];
    for _ in 0..r.count(40)? {
        let (fid, entry_pc, start, end) = (r.u64()?, r.u64()?, r.u64()?, r.u64()?);
        let range = r.range(fid, start, end)?;
        let entry_cell = r.u32()?;
        let mut reentry = vec![];
        for _ in 0..r.count(12)? {
            reentry.push((r.u64()?, r.u32()?));
        }
        out.push(FunctionEntry { fid, entry_pc, range, entry_cell, reentry });
    }
    r.finish()?;
    Ok(out)
}

fn parse_suwd(b: &[u8]) -> Result<Vec<ShadowRecord>, ModuleError> {
    let mut r = Rd::new(b, "SUWD");
    let mut out = vec![];
    for _ in 0..r.count(41)? {
        let (fid, start, end, handler) = (r.u64()?, r.u64()?, r.u64()?, r.u64()?);
        let range = r.range(fid, start, end)?;
        let n = r.u8()? as usize;
        let mut codes = vec![];
        for _ in 0..n {
            let c: [u8; 4] = r.take(4)?.try_into().unwrap();
            codes.push(UnwindCode::from_bytes(c).map_err(|m| r.err(m))?);
        }
        let delta = r.u64()? as i64;
        let s = ShadowRecord::new(range, codes, handler);
        if s.net_delta != delta {
            return Err(r.err(format!("net delta of function {} does not match its codes", fid)));
        }
        out.push(s);
    }
    r.finish()?;
    Ok(out)
}

fn parse_blobs(b: &[u8], tag: &'static str) -> Result<Vec<(u64, Vec<u8>)>, ModuleError> {
    let mut r = Rd::new(b, tag);
    let mut out = vec![];
    for _ in 0..r.count(12)? {
        let fid = r.u64()?;
        let n = r.u32()? as usize;
        out.push((fid, r.take(n)?.to_vec()));
    }
    r.finish()?;
    Ok(out)
}

fn tag_name(t: &[u8]) -> String {
    String::from_utf8_lossy(t).into_owned()
}

/// Strict parse of a serialized container.
pub fn parse_module(bytes: &[u8]) -> Result<ProtectedModule, ModuleError> {
    if bytes.len() < 4 || bytes[..4] != MAGIC {
        return Err(ModuleError::BadMagic);
    }
    if bytes.len() < HEADER_LEN {
        return Err(ModuleError::Truncated);
    }
    let mut r = Rd::new(bytes, "header");
    r.take(4)?;
    let version = r.u16()?;
    if version != VERSION {
        return Err(ModuleError::BadVersion(version));
    }
    let flags = r.u16()?;
    let key: [u8; 16] = r.take(16)?.try_into().unwrap();
    let bytecode_nonce = r.u64()?;
    let eh_nonce = r.u64()?;
    let count = r.u32()? as usize;
    if bytes.len() < HEADER_LEN + count.saturating_mul(ENTRY_LEN) {
        return Err(ModuleError::Truncated);
    }
    let mut found: [Option<&[u8]>; 7] = [None; 7];
    for _ in 0..count {
        let tag = r.take(4)?;
        let off = r.u64()?;
        let size = r.u64()?;
        let name = tag_name(tag);
        let slot = TAGS.iter().position(|t| &t[..] == tag).ok_or(ModuleError::UnknownSection(name.clone()))?;
        let end = off.checked_add(size).ok_or(ModuleError::SectionOverflow(name.clone()))?;
        if end > bytes.len() as u64 {
            return Err(ModuleError::SectionOverflow(name));
        }
        if found[slot].is_some() {
            return Err(ModuleError::DuplicateSection(name));
        }
        found[slot] = Some(&bytes[off as usize..end as usize]);
    }
    let sec = |i: usize| found[i].ok_or_else(|| ModuleError::MissingSection(tag_name(TAGS[i])));
    let handlers = parse_htab(sec(0)?)?;
    let bytecode = sec(1)?.to_vec();
    if bytecode.len() % CELL_SIZE != 0 {
        return Err(ModuleError::Malformed { tag: "BYTC".into(), msg: "partial cell".into() });
    }
    let functions = parse_fmap(sec(2)?)?;
    let shadow = parse_suwd(sec(3)?)?;
    let eh_payload =
        parse_blobs(sec(4)?, "EEHP")?.into_iter().map(|(fid, ciphertext)| PayloadEntry { fid, ciphertext }).collect();
    let plain_eh = parse_blobs(sec(5)?, "PEHM")?.into_iter().map(|(fid, bytes)| PlainMetadata { fid, bytes }).collect();
    let digest: [u8; 32] = sec(6)?
        .try_into()
        .map_err(|_| ModuleError::Malformed { tag: "DGST".into(), msg: "digest must be 32 bytes".into() })?;
    Ok(ProtectedModule {
        flags,
        key,
        bytecode_nonce,
        eh_nonce,
        handlers,
        bytecode,
        functions,
        shadow,
        eh_payload,
        plain_eh,
        digest,
    })
}

/// (tag, offset, size) of every section, in file order.
pub fn section_table(bytes: &[u8]) -> Result<Vec<(String, u64, u64)>, ModuleError> {
    parse_module(bytes)?;
    let count = u32::from_le_bytes(bytes[HEADER_LEN - 4..HEADER_LEN].try_into().unwrap()) as usize;
    Ok((0..count)
        .map(|i| {
            let e = &bytes[HEADER_LEN + i * ENTRY_LEN..HEADER_LEN + (i + 1) * ENTRY_LEN];
            (tag_name(&e[..4]), u64::from_le_bytes(e[4..12].try_into().unwrap()), u64::from_le_bytes(e[12..20].try_into().unwrap()))
        })
        .collect())
}

/// Operand slots of each handler, for rendering.
pub fn describe_layout(d: &HandlerDesc) -> String {
    d.op
        .signature()
        .iter()
        .map(|k| match k {
            ArgKind::V => "v",
            ArgKind::G => "g",
            ArgKind::I => "imm",
            ArgKind::L => "cell",
            ArgKind::E => "ea",
            ArgKind::T => "target",
            ArgKind::B => "bytes",
        })
        .collect::<Vec<_>>()
        .join(",")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assemble::select_handlers;
    use crate::isa::{Width, RAX};
    use crate::vmir::{ExitKind, VArg, VmirBlock, VmirInst};

    fn func(fid: u64, start: u64) -> VmirFunction {
        let i = |op, args| VmirInst::new(op, Width::W64, args);
        VmirFunction {
            range: FunctionRange::new(fid, start, start + 0x20),
            entry: start,
            blocks: vec![VmirBlock {
                label: start,
                pc: Some(start),
                insts: vec![
                    i(VOp::VLIMM, vec![VArg::V(0), VArg::Imm(fid as i64)]),
                    i(VOp::VSTORER, vec![VArg::G(RAX), VArg::V(0)]),
                    i(VOp::VCALL, vec![VArg::Imm(0x5000), VArg::Imm(start as i64 + 8)]),
                    i(VOp::VRET, vec![VArg::Imm(0)]),
                ],
                exit: ExitKind::Return,
            }],
            roots: vec![],
        }
    }

    fn module(fs: &[VmirFunction]) -> ProtectedModule {
        let t = select_handlers(fs);
        assemble_module(ModuleInputs {
            functions: fs,
            table: &t,
            shadow: vec![],
            eh_payload: vec![],
            plain_eh: vec![],
            eh_protected: false,
            key: [9; 16],
            eh_nonce: 3,
            seed: 77,
        })
        .unwrap()
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let m = module(&[func(1, 0x1000), func(2, 0x2000)]);
        let bytes = m.serialize();
        let p = parse_module(&bytes).unwrap();
        assert_eq!(p, m);
        assert_eq!(p.serialize(), bytes);
        assert!(!p.eh_protected());
        assert!(p.shadow.is_empty() && p.eh_payload.is_empty());
    }

    #[test]
    fn relocated_reentry_points() {
        let m = module(&[func(1, 0x1000), func(2, 0x2000)]);
        let f2 = m.function(2).unwrap();
        assert!(f2.entry_cell >= 4);
        assert_eq!(f2.reentry.len(), 1);
        assert_eq!(f2.reentry[0].0, 0x2008);
    }

    #[test]
    fn malformed_containers() {
        let bytes = module(&[func(1, 0x1000)]).serialize();
        let mut bad = bytes.clone();
        bad[0] = b'Y';
        assert_eq!(parse_module(&bad), Err(ModuleError::BadMagic));
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert_eq!(parse_module(&bad), Err(ModuleError::BadVersion(2)));
        let mut bad = bytes.clone();
        bad[HEADER_LEN + 4..HEADER_LEN + 12].copy_from_slice(&(bytes.len() as u64).to_le_bytes());
        assert_eq!(parse_module(&bad), Err(ModuleError::SectionOverflow("HTAB".into())));
        let mut bad = bytes.clone();
        bad[HEADER_LEN + ENTRY_LEN..HEADER_LEN + ENTRY_LEN + 4].copy_from_slice(b"HTAB");
        assert_eq!(parse_module(&bad), Err(ModuleError::DuplicateSection("HTAB".into())));
        assert_eq!(parse_module(&bytes[..20]), Err(ModuleError::Truncated));
    }

    #[test]
    fn ciphertext_flip_is_detected() {
        let m = module(&[func(1, 0x1000)]);
        for i in 0..m.bytecode.len() {
            let mut t = m.clone();
            t.bytecode[i] ^= 0x01;
            assert!(t.validate().is_err(), "flip at {}", i);
        }
    }

    #[test]
    fn no_plaintext_bytecode_in_file() {
        let m = module(&[func(1, 0x1000), func(2, 0x2000)]);
        let plain: Vec<u8> = m.decrypt_cells().iter().flat_map(|c| c.to_bytes()).collect();
        let file = m.serialize();
        assert!(!crate::shadow::shares_window(&plain, &file, 16));
    }
}
