//! Byte format of unwind metadata. Integers are LEB128; addresses inside the
//! function are stored as offsets from its start.

use super::{CatchClause, EhError, IpState, LsData, TryBlock, UnwindCode, UnwindEntry, UnwindInfo};
use crate::cfg::FunctionRange;
use std::io::{Cursor, Read};

fn uw(out: &mut Vec<u8>, v: u64) {
    leb128::write::unsigned(out, v).expect("vec write");
}

fn sw(out: &mut Vec<u8>, v: i64) {
    leb128::write::signed(out, v).expect("vec write");
}

fn encode_lsd(l: &LsData, start: u64) -> Vec<u8> {
    let mut o = vec![];
    uw(&mut o, l.ip_map.len() as u64);
    for r in &l.ip_map {
        uw(&mut o, r.start - start);
        uw(&mut o, r.end - r.start);
        sw(&mut o, r.state as i64);
    }
    uw(&mut o, l.unwind_map.len() as u64);
    for e in &l.unwind_map {
        sw(&mut o, e.parent as i64);
        uw(&mut o, e.dtor.map_or(0, |d| d + 1));
    }
    uw(&mut o, l.try_blocks.len() as u64);
    for t in &l.try_blocks {
        sw(&mut o, t.low as i64);
        sw(&mut o, t.high as i64);
        uw(&mut o, t.catches.len() as u64);
        for c in &t.catches {
            uw(&mut o, c.type_id);
            uw(&mut o, c.target - start);
            sw(&mut o, c.state as i64);
        }
    }
    o
}

pub fn encode_metadata(info: &UnwindInfo) -> Vec<u8> {
    let r = &info.range;
    let mut o = vec![];
    uw(&mut o, r.fid);
    uw(&mut o, r.start);
    uw(&mut o, r.end - r.start);
    uw(&mut o, info.handler);
    o.push(info.codes.len() as u8);
    for c in &info.codes {
        o.extend_from_slice(&c.to_bytes());
    }
    match &info.lsd {
        None => uw(&mut o, 0),
        Some(l) => {
            let body = encode_lsd(l, r.start);
            uw(&mut o, body.len() as u64);
            o.extend_from_slice(&body);
        }
    }
    o
}

struct Reader<'a>(Cursor<&'a [u8]>);

fn malformed<E: std::fmt::Display>(e: E) -> EhError {
    EhError::MalformedMetadata(e.to_string())
}

impl Reader<'_> {
    fn u(&mut self) -> Result<u64, EhError> {
        leb128::read::unsigned(&mut self.0).map_err(malformed)
    }

    fn s32(&mut self) -> Result<i32, EhError> {
        let v = leb128::read::signed(&mut self.0).map_err(malformed)?;
        i32::try_from(v).map_err(malformed)
    }

    fn count(&mut self) -> Result<usize, EhError> {
        let n = self.u()?;
        let left = self.0.get_ref().len() as u64 - self.0.position();
        if n > left {
            return Err(malformed(format!("count {} exceeds remaining {} bytes", n, left)));
        }
        Ok(n as usize)
    }

    fn bytes(&mut self, n: usize) -> Result<Vec<u8>, EhError> {
        let mut b = vec![0; n];
        self.0.read_exact(&mut b).map_err(malformed)?;
        Ok(b)
    }

    fn done(&self) -> bool {
        self.0.position() as usize == self.0.get_ref().len()
    }
}

fn add(start: u64, off: u64) -> Result<u64, EhError> {
    start.checked_add(off).ok_or_else(|| malformed("address overflow"))
}

fn decode_lsd(r: &mut Reader, start: u64) -> Result<LsData, EhError> {
    let mut l = LsData::default();
    for _ in 0..r.count()? {
        let s = add(start, r.u()?)?;
        let e = add(s, r.u()?)?;
        l.ip_map.push(IpState { start: s, end: e, state: r.s32()? });
    }
    for _ in 0..r.count()? {
        let parent = r.s32()?;
        let d = r.u()?;
        l.unwind_map.push(UnwindEntry { parent, dtor: d.checked_sub(1) });
    }
    for _ in 0..r.count()? {
        let (low, high) = (r.s32()?, r.s32()?);
        let mut catches = vec![];
        for _ in 0..r.count()? {
            let type_id = r.u()?;
            let target = add(start, r.u()?)?;
            catches.push(CatchClause { type_id, target, state: r.s32()? });
        }
        l.try_blocks.push(TryBlock { low, high, catches });
    }
    Ok(l)
}

pub fn decode_metadata(bytes: &[u8]) -> Result<UnwindInfo, EhError> {
    let mut r = Reader(Cursor::new(bytes));
    let fid = r.u()?;
    let start = r.u()?;
    let len = r.u()?;
    if len == 0 {
        return Err(malformed("empty function range"));
    }
    let range = FunctionRange { fid, start, end: add(start, len)? };
    let handler = r.u()?;
    let n = r.bytes(1)?[0] as usize;
    let mut codes = Vec::with_capacity(n);
    for _ in 0..n {
        let b = r.bytes(4)?;
        codes.push(UnwindCode::from_bytes(b.try_into().unwrap()).map_err(EhError::MalformedMetadata)?);
    }
    let lsd_len = r.count()?;
    let lsd = if lsd_len == 0 {
        None
    } else {
        let body = r.bytes(lsd_len)?;
        let mut lr = Reader(Cursor::new(&body[..]));
        let l = decode_lsd(&mut lr, start)?;
        if !lr.done() {
            return Err(malformed("trailing bytes in LSData"));
        }
        Some(l)
    };
    if !r.done() {
        return Err(malformed("trailing bytes"));
    }
    let info = UnwindInfo { range, codes, handler, lsd };
    info.validate().map_err(|e| match e {
        EhError::MalformedMetadata(m) | EhError::MalformedLsData(m) => EhError::MalformedMetadata(m),
        other => other,
    })?;
    Ok(info)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::isa::RBX;

    fn sample() -> UnwindInfo {
        UnwindInfo {
            range: FunctionRange::new(4, 0x40_1000, 0x40_1080),
            codes: vec![UnwindCode::AllocSmall(0x20), UnwindCode::PushNonvol(RBX)],
            handler: 0x0F00_0030,
            lsd: Some(LsData {
                ip_map: vec![IpState { start: 0x40_1010, end: 0x40_1040, state: 0 }],
                unwind_map: vec![UnwindEntry { parent: -1, dtor: Some(9) }],
                try_blocks: vec![TryBlock {
                    low: 0,
                    high: 0,
                    catches: vec![CatchClause { type_id: 2, target: 0x40_1050, state: -1 }],
                }],
            }),
        }
    }

    #[test]
    fn round_trip() {
        let i = sample();
        assert_eq!(decode_metadata(&encode_metadata(&i)), Ok(i.clone()));
        let plain = UnwindInfo { handler: 0, lsd: None, ..i };
        assert_eq!(decode_metadata(&encode_metadata(&plain)), Ok(plain));
    }

    #[test]
    fn truncation_is_malformed() {
        let b = encode_metadata(&sample());
        for n in 0..b.len() {
            assert!(matches!(decode_metadata(&b[..n]), Err(EhError::MalformedMetadata(_))), "prefix {}", n);
        }
        let mut longer = b.clone();
        longer.push(0);
        assert!(decode_metadata(&longer).is_err());
    }
}
