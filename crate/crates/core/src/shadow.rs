//! Shadow unwind codes: random ABI-valid replacements for a protected
//! function's genuine unwind metadata, plus the encrypted genuine payload.

use crate::assemble::crypt_stream;
use crate::cfg::FunctionRange;
use crate::eh::{apply_unwind_code, encode_metadata, ContextRecord, EhError, UnwindCode, UnwindInfo, NONVOL};
use crate::isa::{Reg, RBX, R12, RBP, RSP};
use crate::machine::{MachineState, Memory};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

/// Number of distinct shadow code types.
pub const SHADOW_TYPES: usize = 12;
pub const MAX_SAVE_OFFSET: u32 = 0x1F8;
pub const MAX_NET_DELTA: i64 = 0x8000;

/// Type index (0..12) of a code, if it is one of the shadow types.
pub fn shadow_type(c: &UnwindCode) -> Option<usize> {
    match *c {
        UnwindCode::AllocSmall(_) => Some(0),
        UnwindCode::AllocLarge(_) => Some(1),
        UnwindCode::PushNonvol(r) => NONVOL.iter().position(|x| *x == r).map(|i| 2 + i),
        UnwindCode::SaveNonvol(RBX, _) => Some(9),
        UnwindCode::SaveNonvol(R12, _) => Some(10),
        UnwindCode::SaveNonvol(..) => None,
        UnwindCode::NopPad => Some(11),
    }
}

fn draw(rng: &mut ChaCha8Rng) -> UnwindCode {
    match rng.gen_range(0..SHADOW_TYPES) {
        0 => UnwindCode::AllocSmall(8 * rng.gen_range(1..=16)),
        1 => UnwindCode::AllocLarge(8 * rng.gen_range(17..=512)),
        t @ 2..=8 => UnwindCode::PushNonvol(NONVOL[t - 2]),
        9 => UnwindCode::SaveNonvol(RBX, 8 * rng.gen_range(0..=MAX_SAVE_OFFSET / 8)),
        10 => UnwindCode::SaveNonvol(R12, 8 * rng.gen_range(0..=MAX_SAVE_OFFSET / 8)),
        _ => UnwindCode::NopPad,
    }
}

pub fn gen_shadow_codes(seed: u64, length: usize) -> Vec<UnwindCode> {
    assert!(length >= 1, "shadow length must be at least 1");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..length).map(|_| draw(&mut rng)).collect()
}

pub fn net_delta(codes: &[UnwindCode]) -> i64 {
    codes.iter().map(|c| c.stack_delta() as i64).sum()
}

/// Validation with every register-writing type forbidden leaves the three
/// delta-only types.
pub fn validate_shadow_with(codes: &[UnwindCode], forbid_register_writes: bool) -> Vec<String> {
    let mut v = vec![];
    if codes.is_empty() {
        v.push("empty shadow sequence".to_string());
    }
    for (i, c) in codes.iter().enumerate() {
        if let Some(r) = c.restored_reg() {
            if r == RBP || r == RSP {
                v.push(format!("code {} restores {}", i, crate::isa::reg_name(r)));
                continue;
            }
            if forbid_register_writes {
                v.push(format!("code {} ({}) writes a register", i, c));
            }
        }
        if shadow_type(c).is_none() || c.validate().is_err() {
            v.push(format!("code {} ({}) is not a valid shadow code", i, c));
        }
        if let UnwindCode::SaveNonvol(_, off) = c {
            if *off > MAX_SAVE_OFFSET {
                v.push(format!("code {} save offset {:#x} too large", i, off));
            }
        }
    }
    let delta = net_delta(codes);
    if delta >= MAX_NET_DELTA {
        v.push(format!("net stack delta {:#x} too large", delta));
    }
    if v.is_empty() {
        // dry run on a fully mapped synthetic stack
        let base = 0x10_0000u64;
        let mut mem = Memory::new();
        mem.map(base, (MAX_NET_DELTA + MAX_SAVE_OFFSET as i64 + 8) as u64);
        let mut rec = ContextRecord::new(MachineState::new(0, base));
        for c in codes {
            match apply_unwind_code(&rec, c, &mem) {
                Ok(r) => rec = r,
                Err(f) => {
                    v.push(format!("{} faults on a mapped stack: {}", c, f));
                    break;
                }
            }
        }
    }
    v
}

pub fn validate_shadow(codes: &[UnwindCode]) -> Vec<String> {
    validate_shadow_with(codes, false)
}

/// A register a shadow code overwrites, and the code that does it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RestoreSlot {
    pub reg: Reg,
    pub code_index: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShadowRecord {
    pub range: FunctionRange,
    pub codes: Vec<UnwindCode>,
    /// LSHandler field: the interceptor entry.
    pub handler: u64,
    pub net_delta: i64,
    pub clobbered: Vec<RestoreSlot>,
}

impl ShadowRecord {
    pub fn new(range: FunctionRange, codes: Vec<UnwindCode>, handler: u64) -> Self {
        let clobbered = codes
            .iter()
            .enumerate()
            .filter_map(|(i, c)| c.restored_reg().map(|reg| RestoreSlot { reg, code_index: i }))
            .collect();
        ShadowRecord { range, net_delta: net_delta(&codes), codes, handler, clobbered }
    }

    pub fn fid(&self) -> u64 {
        self.range.fid
    }

    /// Apply the shadow codes as the dispatcher does: without popping a frame.
    pub fn apply(&self, rec: &ContextRecord, mem: &Memory) -> Result<ContextRecord, crate::machine::Fault> {
        let mut r = *rec;
        for c in &self.codes {
            r = apply_unwind_code(&r, c, mem)?;
        }
        Ok(r)
    }

    /// Undo `apply`: subtract the net delta and restore clobbered registers
    /// from the pre-shadow snapshot.
    pub fn rollback(&self, rec: &ContextRecord, snapshot: &ContextRecord) -> ContextRecord {
        let mut r = *rec;
        r.state.set_rsp(r.state.rsp().wrapping_sub(self.net_delta as u64));
        for s in &self.clobbered {
            r.state.gpr[s.reg as usize] = snapshot.state.gpr[s.reg as usize];
        }
        r
    }
}

/// Encrypted genuine metadata of one function.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PayloadEntry {
    pub fid: u64,
    pub ciphertext: Vec<u8>,
}

pub fn payload_nonce(eh_nonce: u64, fid: u64) -> u64 {
    eh_nonce ^ fid
}

/// True if any `window`-byte substring of `needle` occurs in `hay`.
pub fn shares_window(needle: &[u8], hay: &[u8], window: usize) -> bool {
    if needle.len() < window || hay.len() < window {
        return false;
    }
    let windows: BTreeSet<&[u8]> = needle.windows(window).collect();
    hay.windows(window).any(|w| windows.contains(w))
}

/// Shadow the genuine metadata of one protected function.
pub fn protect_metadata(
    info: &UnwindInfo,
    key: &[u8; 16],
    eh_nonce: u64,
    seed: u64,
    shadow_len: usize,
    interceptor: u64,
) -> Result<(ShadowRecord, PayloadEntry), EhError> {
    info.validate()?;
    let genuine = encode_metadata(info);
    // redraw in the (rare) event that the shadow codes coincide with a
    // stretch of the genuine serialization
    let mut k = 0u64;
    let codes = loop {
        let codes = gen_shadow_codes(seed.wrapping_add(k.wrapping_mul(0x9E37_79B9_7F4A_7C15)), shadow_len);
        let bytes: Vec<u8> = codes.iter().flat_map(|c| c.to_bytes()).collect();
        if !shares_window(&genuine, &bytes, 8) {
            break codes;
        }
        k += 1;
    };
    let fid = info.range.fid;
    let ciphertext = crypt_stream(key, payload_nonce(eh_nonce, fid), &genuine);
    Ok((ShadowRecord::new(info.range, codes, interceptor), PayloadEntry { fid, ciphertext }))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiversityReport {
    pub length: usize,
    pub samples: usize,
    pub distinct_sequences: usize,
    pub distinct_signatures: usize,
    pub histogram: [u64; SHADOW_TYPES],
}

pub fn diversity_report(length: usize, samples: usize, base_seed: u64) -> DiversityReport {
    assert!(samples >= 1);
    let mut seqs = BTreeSet::new();
    let mut sigs = BTreeSet::new();
    let mut histogram = [0u64; SHADOW_TYPES];
    for i in 0..samples as u64 {
        let codes = gen_shadow_codes(base_seed.wrapping_add(i), length);
        let sig: Vec<usize> = codes.iter().map(|c| shadow_type(c).expect("generated type")).collect();
        for t in &sig {
            histogram[*t] += 1;
        }
        sigs.insert(sig);
        seqs.insert(codes.iter().flat_map(|c| c.to_bytes()).collect::<Vec<u8>>());
    }
    DiversityReport {
        length,
        samples,
        distinct_sequences: seqs.len(),
        distinct_signatures: sigs.len(),
        histogram,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::isa::{RSI, R13};
    use proptest::prelude::*;

    #[test]
    fn twelve_types() {
        let mut all = BTreeSet::new();
        for s in 0..500 {
            all.insert(shadow_type(&gen_shadow_codes(s, 1)[0]).unwrap());
        }
        assert_eq!(all.len(), SHADOW_TYPES);
    }

    #[test]
    fn validation_examples() {
        assert!(validate_shadow(&[UnwindCode::AllocSmall(0x78)]).is_empty());
        assert_eq!(net_delta(&[UnwindCode::AllocSmall(0x78)]), 0x78);
        assert!(!validate_shadow(&[UnwindCode::PushNonvol(RBP)]).is_empty());
        assert!(!validate_shadow(&[UnwindCode::SaveNonvol(RSI, 8)]).is_empty());
        let c = [UnwindCode::PushNonvol(RBX), UnwindCode::AllocLarge(0x100)];
        assert!(validate_shadow(&c).is_empty());
        assert_eq!(net_delta(&c), 0x108);
        assert!(!validate_shadow_with(&c, true).is_empty());
        assert!(validate_shadow_with(&[UnwindCode::NopPad, UnwindCode::AllocSmall(8)], true).is_empty());
    }

    #[test]
    fn diversity_single_sample() {
        let r = diversity_report(3, 1, 42);
        assert_eq!((r.distinct_sequences, r.distinct_signatures), (1, 1));
    }

    #[test]
    fn rollback_undoes_push_and_save() {
        let mut mem = Memory::new();
        mem.map(0x2000, 0x1000);
        mem.write_u64(0x2000, 0xAAAA).unwrap();
        let mut st = MachineState::new(0x10, 0x2000);
        st.gpr[R13 as usize] = 7;
        let snap = ContextRecord::new(st);
        let s = ShadowRecord::new(
            FunctionRange::new(1, 0, 0x10),
            vec![UnwindCode::PushNonvol(R13), UnwindCode::SaveNonvol(RBX, 0)],
            0,
        );
        let after = s.apply(&snap, &mem).unwrap();
        assert_eq!(after.state.gpr[R13 as usize], 0xAAAA);
        assert_eq!(s.rollback(&after, &snap), snap);
    }

    proptest! {
        #[test]
        fn generated_codes_validate(seed: u64, len in 1usize..=5) {
            let c = gen_shadow_codes(seed, len);
            prop_assert_eq!(c.len(), len);
            prop_assert!(validate_shadow(&c).is_empty());
        }

        #[test]
        fn rollback_inverts_shadow(seed: u64, len in 1usize..=5, regs in proptest::array::uniform16(any::<u64>()), fill: u8) {
            let base = 0x7FFF_0000u64;
            let mut mem = Memory::new();
            mem.map(base, 0x1_0000);
            mem.write(base, &vec![fill; 0x1_0000]).unwrap();
            let mut st = MachineState::new(0x1234, base + 0x100);
            st.gpr = regs;
            st.set_rsp(base + 0x100);
            let snap = ContextRecord::new(st);
            let s = ShadowRecord::new(FunctionRange::new(1, 0x1000, 0x2000), gen_shadow_codes(seed, len), 0);
            let after = s.apply(&snap, &mem).unwrap();
            prop_assert_eq!(s.rollback(&after, &snap), snap);
        }
    }
}
