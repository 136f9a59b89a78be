//! Binary checkpoint and tensor-dump formats.
//!
//! Checkpoint layout, all integers little-endian:
//!
//! ```text
//! "PVLC" | version u16 | epoch u32 | config_len u32 | config JSON
//! params section | optimizer section | rng section
//! ```
//!
//! A section is a `u32` record count followed by tensor records:
//! `name_len u32 | UTF-8 name | rank u32 | dims u32 * rank | f32 data`.
//! Tensor dumps are `"PVLT" | version u16 | section`.

use std::collections::BTreeMap;
use std::path::Path;

use rand_chacha::ChaCha8Rng;

use crate::config::Config;
use crate::error::{CoreError, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PVLC";
pub const DUMP_MAGIC: &[u8; 4] = b"PVLT";
pub const FORMAT_VERSION: u16 = 1;
const MAX_RANK: usize = 8;
const VELOCITY_PREFIX: &str = "optim.velocity.";
const STEPS_NAME: &str = "optim.steps";
const RNG_NAME: &str = "rng.chacha8";

fn bad(detail: impl Into<String>) -> CoreError {
    CoreError::format("tensor file", detail)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(bad(format!("truncated at byte {} (need {n} more)", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn write_record(out: &mut Vec<u8>, name: &str, t: &Tensor) {
    put_u32(out, name.len());
    out.extend_from_slice(name.as_bytes());
    put_u32(out, t.shape().len());
    for &d in t.shape() {
        put_u32(out, d);
    }
    for &v in t.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

fn read_record(r: &mut Reader) -> Result<(String, Tensor)> {
    let name_len = r.u32()? as usize;
    let name = std::str::from_utf8(r.take(name_len)?)
        .map_err(|_| bad("tensor name is not UTF-8"))?
        .to_string();
    let rank = r.u32()? as usize;
    if rank > MAX_RANK {
        return Err(bad(format!("{name}: rank {rank} exceeds {MAX_RANK}")));
    }
    let mut shape = Vec::with_capacity(rank);
    let mut count: usize = 1;
    for _ in 0..rank {
        let d = r.u32()? as usize;
        count = count
            .checked_mul(d)
            .ok_or_else(|| bad(format!("{name}: element count overflows")))?;
        shape.push(d);
    }
    if count.checked_mul(4).map_or(true, |b| b > r.remaining()) {
        return Err(bad(format!("{name}: {count} values exceed the remaining bytes")));
    }
    let bytes = r.take(count * 4)?;
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    Ok((name, Tensor::new(shape, data)?))
}

pub fn write_section(out: &mut Vec<u8>, records: &[(&str, &Tensor)]) {
    put_u32(out, records.len());
    for (name, t) in records {
        write_record(out, name, t);
    }
}

fn read_section(r: &mut Reader) -> Result<Vec<(String, Tensor)>> {
    let n = r.u32()? as usize;
    // Every record needs at least 8 bytes, which bounds the allocation.
    if n > r.remaining() / 8 {
        return Err(bad(format!("section claims {n} records")));
    }
    let mut records = Vec::with_capacity(n);
    for _ in 0..n {
        records.push(read_record(r)?);
    }
    Ok(records)
}

/// Serializes named tensors as a standalone dump.
pub fn encode_dump(records: &[(&str, &Tensor)]) -> Vec<u8> {
    let mut out = DUMP_MAGIC.to_vec();
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    write_section(&mut out, records);
    out
}

pub fn decode_dump(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != DUMP_MAGIC {
        return Err(bad("missing PVLT magic"));
    }
    let version = r.u16()?;
    if version != FORMAT_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let records = read_section(&mut r)?;
    if r.remaining() != 0 {
        return Err(bad(format!("{} trailing bytes", r.remaining())));
    }
    Ok(records)
}

/// Exact state of a ChaCha8 generator.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }

    /// 16-bit chunks, each exactly representable in `f32`.
    fn to_tensor(&self) -> Tensor {
        let mut v: Vec<f64> = self
            .seed
            .chunks_exact(2)
            .map(|c| u16::from_le_bytes([c[0], c[1]]) as f64)
            .collect();
        v.extend((0..4).map(|i| ((self.stream >> (16 * i)) & 0xFFFF) as f64));
        v.extend((0..8).map(|i| ((self.word_pos >> (16 * i)) & 0xFFFF) as f64));
        Tensor::vector(v)
    }

    fn from_tensor(t: &Tensor) -> Result<Self> {
        let d = t.data();
        if d.len() != 28 || d.iter().any(|&v| v.fract() != 0.0 || !(0.0..65536.0).contains(&v)) {
            return Err(bad("rng state must be 28 16-bit words"));
        }
        let words: Vec<u16> = d.iter().map(|&v| v as u16).collect();
        let mut seed = [0u8; 32];
        for (i, w) in words[..16].iter().enumerate() {
            seed[2 * i..2 * i + 2].copy_from_slice(&w.to_le_bytes());
        }
        let stream = words[16..20].iter().enumerate().fold(0u64, |a, (i, &w)| a | (w as u64) << (16 * i));
        let word_pos = words[20..28].iter().enumerate().fold(0u128, |a, (i, &w)| a | (w as u128) << (16 * i));
        Ok(Self { seed, stream, word_pos })
    }
}

fn u64_tensor(v: u64) -> Tensor {
    Tensor::vector((0..4).map(|i| ((v >> (16 * i)) & 0xFFFF) as f64).collect())
}

fn u64_from_tensor(t: &Tensor) -> Result<u64> {
    let d = t.data();
    if d.len() != 4 || d.iter().any(|&v| v.fract() != 0.0 || !(0.0..65536.0).contains(&v)) {
        return Err(bad("step counter must be 4 16-bit words"));
    }
    Ok(d.iter().enumerate().fold(0u64, |a, (i, &w)| a | (w as u64) << (16 * i)))
}

/// Everything needed to resume a run.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: Config,
    pub epoch: u32,
    pub params: ParamStore,
    pub velocity: BTreeMap<String, Tensor>,
    pub steps: u64,
    pub rng: RngState,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = CHECKPOINT_MAGIC.to_vec();
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.epoch.to_le_bytes());
        let cfg = self.config.to_canonical_json();
        put_u32(&mut out, cfg.len());
        out.extend_from_slice(cfg.as_bytes());

        let params: Vec<(&str, &Tensor)> = self.params.iter().map(|(n, t)| (n.as_str(), t)).collect();
        write_section(&mut out, &params);

        let names: Vec<String> = self.velocity.keys().map(|n| format!("{VELOCITY_PREFIX}{n}")).collect();
        let steps = u64_tensor(self.steps);
        let mut optim: Vec<(&str, &Tensor)> = names.iter().map(String::as_str).zip(self.velocity.values()).collect();
        optim.push((STEPS_NAME, &steps));
        write_section(&mut out, &optim);

        let rng = self.rng.to_tensor();
        write_section(&mut out, &[(RNG_NAME, &rng)]);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(bad("missing PVLC magic"));
        }
        let version = r.u16()?;
        if version != FORMAT_VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let epoch = r.u32()?;
        let cfg_len = r.u32()? as usize;
        let cfg_text = std::str::from_utf8(r.take(cfg_len)?).map_err(|_| bad("config is not UTF-8"))?;
        let config = Config::from_json(cfg_text)?;

        let mut params = ParamStore::new();
        for (name, t) in read_section(&mut r)? {
            if params.contains(&name) {
                return Err(bad(format!("duplicate parameter {name}")));
            }
            params.insert(name, t);
        }
        let mut velocity = BTreeMap::new();
        let mut steps = None;
        for (name, t) in read_section(&mut r)? {
            if name == STEPS_NAME {
                steps = Some(u64_from_tensor(&t)?);
            } else if let Some(p) = name.strip_prefix(VELOCITY_PREFIX) {
                if velocity.insert(p.to_string(), t).is_some() {
                    return Err(bad(format!("duplicate optimizer entry {name}")));
                }
            } else {
                return Err(bad(format!("unexpected optimizer entry {name}")));
            }
        }
        let steps = steps.ok_or_else(|| bad("missing optimizer step counter"))?;
        let rng_records = read_section(&mut r)?;
        let rng = match rng_records.as_slice() {
            [(name, t)] if name == RNG_NAME => RngState::from_tensor(t)?,
            _ => return Err(bad("rng section must hold exactly one generator")),
        };
        if r.remaining() != 0 {
            return Err(bad(format!("{} trailing bytes", r.remaining())));
        }
        Ok(Self {
            config,
            epoch,
            params,
            velocity,
            steps,
            rng,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{RngCore, SeedableRng};

    fn sample() -> Checkpoint {
        let mut params = ParamStore::new();
        params.insert("a.w", Tensor::from_fn(2, 3, |i, j| (i * 3 + j) as f64 * 0.25));
        params.insert("b", Tensor::scalar(-1.5));
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        rng.set_stream(7);
        rng.next_u32();
        Checkpoint {
            config: Config::toy(),
            epoch: 3,
            params,
            velocity: BTreeMap::from([("a.w".to_string(), Tensor::full(&[2, 3], 0.5))]),
            steps: 70_000,
            rng: RngState::capture(&rng),
        }
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let ck = sample();
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn rng_state_resumes_stream() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        rng.next_u64();
        let state = RngState::capture(&rng);
        let mut again = RngState::from_tensor(&state.to_tensor()).unwrap().restore();
        assert_eq!(rng.next_u64(), again.next_u64());
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let bytes = sample().to_bytes();
        for cut in [0, 3, 5, 10, bytes.len() - 1] {
            assert!(Checkpoint::from_bytes(&bytes[..cut]).is_err());
        }
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(Checkpoint::from_bytes(&wrong).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
    }

    #[test]
    fn dump_round_trip() {
        let t = Tensor::from_fn(3, 2, |i, j| i as f64 - j as f64);
        let bytes = encode_dump(&[("x", &t)]);
        let back = decode_dump(&bytes).unwrap();
        assert_eq!(back, vec![("x".to_string(), t)]);
        assert!(decode_dump(&bytes[..bytes.len() - 2]).is_err());
    }
}
