//! Architectural state and the simulated process environment shared by the
//! reference interpreter and the VM.

use crate::isa::{Flags, Width, RSP};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap};
use std::fmt;

/// Fixed address-space layout of a simulated process.
pub mod layout {
    pub const SCRATCH_BASE: u64 = 0x1000;
    pub const SCRATCH_SIZE: u64 = 0x10000;
    pub const DATA_BASE: u64 = 0x20000;
    pub const CODE_BASE: u64 = 0x40_0000;
    pub const STACK_BASE: u64 = 0x7FFF_0000;
    pub const STACK_TOP: u64 = 0x8000_0000;
    pub const INITIAL_RSP: u64 = 0x7FFF_8000;

    // Well-known addresses. None of them is mapped; control arriving at one
    // of them is intercepted by the process driver.
    pub const HALT: u64 = 0x0F00_0000;
    pub const THROW_ENTRY: u64 = 0x0F00_0010;
    pub const RETHROW_ENTRY: u64 = 0x0F00_0020;
    pub const GENERIC_HANDLER: u64 = 0x0F00_0030;
    pub const INTERCEPTOR: u64 = 0x0F00_0040;
    pub const DTOR_RETURN: u64 = 0x0F00_0050;
    pub const EXIT_A: u64 = 0x0F00_0100;
    pub const EXIT_B: u64 = 0x0F00_0110;
    pub const EXIT_C: u64 = 0x0F00_0120;
}

const PAGE: u64 = 4096;

/// An access to an unmapped address.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Fault {
    pub addr: u64,
    pub write: bool,
}

impl fmt::Display for Fault {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = if self.write { "write" } else { "read" };
        write!(f, "{} fault at {:#x}", kind, self.addr)
    }
}

impl std::error::Error for Fault {}

/// Sparse byte-addressable memory with 4 KiB mapping granularity.
#[derive(Clone, Default)]
pub struct Memory {
    pages: HashMap<u64, Box<[u8; PAGE as usize]>>,
}

impl fmt::Debug for Memory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Memory({} pages)", self.pages.len())
    }
}

impl PartialEq for Memory {
    fn eq(&self, other: &Self) -> bool {
        self.pages.len() == other.pages.len()
            && self.pages.iter().all(|(k, v)| other.pages.get(k).is_some_and(|o| o[..] == v[..]))
    }
}

impl Eq for Memory {}

impl Memory {
    pub fn new() -> Self {
        Self::default()
    }

    /// Map (zero-filled) every page touching `[addr, addr+len)`.
    pub fn map(&mut self, addr: u64, len: u64) {
        if len == 0 {
            return;
        }
        let first = addr / PAGE;
        let last = (addr + len - 1) / PAGE;
        for p in first..=last {
            self.pages.entry(p).or_insert_with(|| Box::new([0u8; PAGE as usize]));
        }
    }

    pub fn is_mapped(&self, addr: u64) -> bool {
        self.pages.contains_key(&(addr / PAGE))
    }

    pub fn read_byte(&self, addr: u64) -> Result<u8, Fault> {
        self.pages
            .get(&(addr / PAGE))
            .map(|p| p[(addr % PAGE) as usize])
            .ok_or(Fault { addr, write: false })
    }

    pub fn read(&self, addr: u64, buf: &mut [u8]) -> Result<(), Fault> {
        for (i, b) in buf.iter_mut().enumerate() {
            *b = self.read_byte(addr.wrapping_add(i as u64))?;
        }
        Ok(())
    }

    pub fn read_vec(&self, addr: u64, len: usize) -> Result<Vec<u8>, Fault> {
        let mut v = vec![0u8; len];
        self.read(addr, &mut v)?;
        Ok(v)
    }

    /// Little-endian read of `w` bytes, zero-extended.
    pub fn read_uint(&self, addr: u64, w: Width) -> Result<u64, Fault> {
        let mut b = [0u8; 8];
        self.read(addr, &mut b[..w.bytes()])?;
        Ok(u64::from_le_bytes(b))
    }

    pub fn read_u64(&self, addr: u64) -> Result<u64, Fault> {
        self.read_uint(addr, Width::W64)
    }

    /// First unmapped address in `[addr, addr+len)`, if any.
    pub fn check_write(&self, addr: u64, len: usize) -> Result<(), Fault> {
        for i in 0..len as u64 {
            let a = addr.wrapping_add(i);
            if !self.is_mapped(a) {
                return Err(Fault { addr: a, write: true });
            }
        }
        Ok(())
    }

    /// Writes all bytes or none.
    pub fn write(&mut self, addr: u64, data: &[u8]) -> Result<(), Fault> {
        self.check_write(addr, data.len())?;
        for (i, b) in data.iter().enumerate() {
            let a = addr.wrapping_add(i as u64);
            self.pages.get_mut(&(a / PAGE)).unwrap()[(a % PAGE) as usize] = *b;
        }
        Ok(())
    }

    pub fn write_uint(&mut self, addr: u64, w: Width, v: u64) -> Result<(), Fault> {
        self.write(addr, &v.to_le_bytes()[..w.bytes()])
    }

    pub fn write_u64(&mut self, addr: u64, v: u64) -> Result<(), Fault> {
        self.write_uint(addr, Width::W64, v)
    }

    /// Map and fill.
    pub fn load(&mut self, addr: u64, data: &[u8]) {
        self.map(addr, data.len() as u64);
        self.write(addr, data).expect("freshly mapped");
    }

    /// Up to `max` bytes starting at `addr`, stopping at the first unmapped byte.
    pub fn fetch(&self, addr: u64, max: usize) -> Vec<u8> {
        let mut out = Vec::with_capacity(max);
        for i in 0..max as u64 {
            match self.read_byte(addr.wrapping_add(i)) {
                Ok(b) => out.push(b),
                Err(_) => break,
            }
        }
        out
    }

    /// Mapped pages in address order.
    pub fn pages(&self) -> Vec<(u64, &[u8])> {
        let mut v: Vec<_> = self.pages.iter().map(|(k, p)| (k * PAGE, &p[..])).collect();
        v.sort_by_key(|(a, _)| *a);
        v
    }

    /// Addresses (in order) where the two memories differ, including
    /// pages mapped on only one side.
    pub fn diff(&self, other: &Memory, limit: usize) -> Vec<u64> {
        let mut keys: Vec<u64> = self.pages.keys().chain(other.pages.keys()).copied().collect();
        keys.sort_unstable();
        keys.dedup();
        let mut out = vec![];
        for k in keys {
            match (self.pages.get(&k), other.pages.get(&k)) {
                (Some(a), Some(b)) => {
                    for i in 0..PAGE as usize {
                        if a[i] != b[i] {
                            out.push(k * PAGE + i as u64);
                            if out.len() >= limit {
                                return out;
                            }
                        }
                    }
                }
                _ => {
                    out.push(k * PAGE);
                    if out.len() >= limit {
                        return out;
                    }
                }
            }
        }
        out
    }
}

/// Architectural register and flag state.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MachineState {
    pub gpr: [u64; 16],
    pub rip: u64,
    pub flags: Flags,
}

impl MachineState {
    pub fn new(rip: u64, rsp: u64) -> Self {
        let mut s = MachineState { rip, ..Default::default() };
        s.gpr[RSP as usize] = rsp;
        s
    }

    pub fn rsp(&self) -> u64 {
        self.gpr[RSP as usize]
    }

    pub fn set_rsp(&mut self, v: u64) {
        self.gpr[RSP as usize] = v;
    }

    /// Width-aware register write: 32-bit writes zero-extend, 8-bit writes
    /// merge into the low byte.
    pub fn write_reg(&mut self, r: u8, w: Width, v: u64) {
        let slot = &mut self.gpr[r as usize];
        *slot = match w {
            Width::W8 => (*slot & !0xFF) | (v & 0xFF),
            Width::W32 => v & 0xFFFF_FFFF,
            Width::W64 => v,
        };
    }

    pub fn read_reg(&self, r: u8, w: Width) -> u64 {
        self.gpr[r as usize] & w.mask()
    }
}

/// A function's code as loaded into the process.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodeImage {
    pub addr: u64,
    pub bytes: Vec<u8>,
}

/// Simulated process: memory, loaded code images and well-known entry points.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MachineEnv {
    pub memory: Memory,
    pub code_images: BTreeMap<u64, CodeImage>,
    pub throw_entry: u64,
    pub rethrow_entry: u64,
    pub interceptor_entry: u64,
}

impl Default for MachineEnv {
    fn default() -> Self {
        Self::new()
    }
}

impl MachineEnv {
    pub fn new() -> Self {
        MachineEnv {
            memory: Memory::new(),
            code_images: BTreeMap::new(),
            throw_entry: layout::THROW_ENTRY,
            rethrow_entry: layout::RETHROW_ENTRY,
            interceptor_entry: layout::INTERCEPTOR,
        }
    }

    /// Standard process: scratch region and stack mapped.
    pub fn with_standard_layout() -> Self {
        let mut env = Self::new();
        env.memory.map(layout::SCRATCH_BASE, layout::SCRATCH_SIZE);
        env.memory.map(layout::STACK_BASE, layout::STACK_TOP - layout::STACK_BASE);
        env
    }

    pub fn load_code(&mut self, fid: u64, addr: u64, bytes: &[u8]) {
        self.memory.load(addr, bytes);
        self.code_images.insert(fid, CodeImage { addr, bytes: bytes.to_vec() });
    }

    /// Function whose image covers `pc`.
    pub fn function_at(&self, pc: u64) -> Option<u64> {
        self.code_images
            .iter()
            .find(|(_, c)| pc >= c.addr && pc < c.addr + c.bytes.len() as u64)
            .map(|(f, _)| *f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unmapped_read_faults() {
        let m = Memory::new();
        assert_eq!(m.read_u64(0x5000), Err(Fault { addr: 0x5000, write: false }));
    }

    #[test]
    fn write_is_all_or_nothing() {
        let mut m = Memory::new();
        m.map(0x1000, 0x1000);
        assert_eq!(m.write_u64(0x1FFC, u64::MAX), Err(Fault { addr: 0x2000, write: true }));
        assert_eq!(m.read_byte(0x1FFC), Ok(0));
    }

    #[test]
    fn register_write_widths() {
        let mut s = MachineState::default();
        s.gpr[0] = u64::MAX;
        s.write_reg(0, Width::W8, 0x12);
        assert_eq!(s.gpr[0], 0xFFFF_FFFF_FFFF_FF12);
        s.write_reg(0, Width::W32, 0x1234_5678_9ABC);
        assert_eq!(s.gpr[0], 0x5678_9ABC);
    }
}
