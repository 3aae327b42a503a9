//! Trace export: line-delimited JSON (one [`TurnRecord`] per line) and a
//! compact binary form for long runs.
//!
//! Binary layout (little endian):
//!
//! ```text
//! "ODMT" | version u16 | K u32 | G u32 | count u64 |
//!   count × { turn u64 | in_warmup u8 | eps f64 | G × domain u32 |
//!             K × summed_loss f64 | K × prob f64 | policy_s f64 | total_s f64 } |
//! crc32 u32
//! ```

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use super::TurnRecord;
use crate::error::{Error, Result};
use crate::wire::{Reader, Writer};

pub const TRACE_MAGIC: [u8; 4] = *b"ODMT";
pub const TRACE_VERSION: u16 = 1;

pub fn write_jsonl(records: &[TurnRecord], path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io("cannot create trace", path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r).expect("records serialize");
        w.write_all(b"\n").map_err(|e| Error::io("cannot write trace", path, e))?;
    }
    w.flush().map_err(|e| Error::io("cannot write trace", path, e))
}

pub fn read_jsonl(path: &Path) -> Result<Vec<TurnRecord>> {
    let file = File::open(path).map_err(|e| Error::io("cannot open trace", path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io("cannot read trace", path, e))?;
        let r = serde_json::from_str(&line).map_err(|e| Error::MalformedLine {
            path: path.to_path_buf(),
            line: i + 1,
            reason: e.to_string(),
        })?;
        out.push(r);
    }
    Ok(out)
}

pub fn encode_binary(records: &[TurnRecord], num_domains: usize, accumulation_steps: usize) -> Result<Vec<u8>> {
    let mut w = Writer::default();
    w.bytes(&TRACE_MAGIC);
    w.u16(TRACE_VERSION);
    w.u32(num_domains as u32);
    w.u32(accumulation_steps as u32);
    w.u64(records.len() as u64);
    for r in records {
        if r.sampled.len() != accumulation_steps
            || r.summed_losses.len() != num_domains
            || r.distribution.len() != num_domains
        {
            return Err(Error::Contract(format!("turn {} does not match the trace shape", r.turn)));
        }
        w.u64(r.turn);
        w.bool(r.in_warmup);
        w.f64(r.eps_current);
        r.sampled.iter().for_each(|d| w.u32(*d as u32));
        r.summed_losses.iter().for_each(|x| w.f64(*x));
        r.distribution.iter().for_each(|x| w.f64(*x));
        w.f64(r.wall_time_policy);
        w.f64(r.wall_time_total);
    }
    let mut out = w.into_inner();
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

pub fn decode_binary(bytes: &[u8]) -> Result<Vec<TurnRecord>> {
    if bytes.len() < 4 {
        return Err(Error::StateFormat("truncated trace".into()));
    }
    let (body, crc) = bytes.split_at(bytes.len() - 4);
    if crc32fast::hash(body) != u32::from_le_bytes(crc.try_into().unwrap()) {
        return Err(Error::StateFormat("trace checksum mismatch".into()));
    }
    let mut r = Reader::new(body);
    if r.bytes(4)? != TRACE_MAGIC {
        return Err(Error::StateFormat("not a binary trace".into()));
    }
    let version = r.u16()?;
    if version != TRACE_VERSION {
        return Err(Error::StateFormat(format!("trace version {version} is not supported")));
    }
    let k = r.u32()? as usize;
    let g = r.u32()? as usize;
    let count = r.u64()? as usize;
    let mut out = Vec::with_capacity(count.min(r.remaining()));
    for _ in 0..count {
        let turn = r.u64()?;
        let in_warmup = r.bool()?;
        let eps_current = r.f64()?;
        let sampled = (0..g).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let summed_losses = (0..k).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        let distribution = (0..k).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        out.push(TurnRecord {
            turn,
            sampled,
            summed_losses,
            distribution,
            eps_current,
            in_warmup,
            wall_time_policy: r.f64()?,
            wall_time_total: r.f64()?,
        });
    }
    r.finish()?;
    Ok(out)
}

pub fn write_binary(records: &[TurnRecord], num_domains: usize, accumulation_steps: usize, path: &Path) -> Result<()> {
    let bytes = encode_binary(records, num_domains, accumulation_steps)?;
    std::fs::write(path, bytes).map_err(|e| Error::io("cannot write trace", path, e))
}

pub fn read_binary(path: &Path) -> Result<Vec<TurnRecord>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io("cannot read trace", path, e))?;
    decode_binary(&bytes)
}
