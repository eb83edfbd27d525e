//! `LBT1` checkpoints. All integers and floats little-endian:
//!
//! ```text
//! "LBT1" version:u32
//! config_len:u32 config:utf8
//! input_rank:u32 input_dims:u32*
//! counters: step:u64 epoch:u32 epoch_pos:u64 updates:u64 best_accuracy:f64
//!           epoch_loss_sum:f64 epoch_zeroed_sum:f64 epoch_batches:u64 acc_saturations:u64
//! record_count:u32 records*
//! record: role:u8 slot:u32 kind:u8 payload
//!   kind 0 (codes): rank:u32 dims:u32* bit_width:u32 exponent:i32 codes:i32*
//!   kind 1 (f32) / 2 (f64): rank:u32 dims:u32* values*
//!   kind 3 (count): u64
//! ```
//!
//! `best_accuracy` is NaN when no evaluation has run yet.

use std::path::Path;

use crate::error::{Error, Result};
use crate::fixedpoint::FixedPointFormat;
use crate::qtensor::QTensor;

pub const MAGIC: &[u8; 4] = b"LBT1";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Role {
    Weight = 1,
    WeightAcc = 2,
    Bias = 3,
    BiasAcc = 4,
    Velocity = 5,
    FirstMoment = 6,
    SecondMoment = 7,
    AdamSteps = 8,
}

impl Role {
    fn from_u8(v: u8) -> Option<Role> {
        Some(match v {
            1 => Role::Weight,
            2 => Role::WeightAcc,
            3 => Role::Bias,
            4 => Role::BiasAcc,
            5 => Role::Velocity,
            6 => Role::FirstMoment,
            7 => Role::SecondMoment,
            8 => Role::AdamSteps,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Role::Weight => "weight",
            Role::WeightAcc => "weight_acc",
            Role::Bias => "bias",
            Role::BiasAcc => "bias_acc",
            Role::Velocity => "velocity",
            Role::FirstMoment => "first_moment",
            Role::SecondMoment => "second_moment",
            Role::AdamSteps => "adam_steps",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Codes(QTensor),
    F32 { shape: Vec<usize>, values: Vec<f32> },
    F64 { shape: Vec<usize>, values: Vec<f64> },
    Count(u64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub role: Role,
    /// Layer index for parameters; optimizer slot index for optimizer state.
    pub slot: u32,
    pub payload: Payload,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Counters {
    pub step: u64,
    pub epoch: u32,
    /// Samples of the current epoch already consumed.
    pub epoch_pos: u64,
    pub updates: u64,
    pub best_accuracy: Option<f64>,
    pub epoch_loss_sum: f64,
    pub epoch_zeroed_sum: f64,
    pub epoch_batches: u64,
    pub acc_saturations: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_text: String,
    pub input_shape: Vec<usize>,
    pub counters: Counters,
    pub records: Vec<Record>,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_shape(out: &mut Vec<u8>, shape: &[usize]) {
    put_u32(out, shape.len() as u32);
    shape.iter().for_each(|&d| put_u32(out, d as u32));
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = MAGIC.to_vec();
        put_u32(&mut out, VERSION);
        put_u32(&mut out, self.config_text.len() as u32);
        out.extend_from_slice(self.config_text.as_bytes());
        put_shape(&mut out, &self.input_shape);
        let c = &self.counters;
        put_u64(&mut out, c.step);
        put_u32(&mut out, c.epoch);
        put_u64(&mut out, c.epoch_pos);
        put_u64(&mut out, c.updates);
        put_u64(&mut out, c.best_accuracy.unwrap_or(f64::NAN).to_bits());
        put_u64(&mut out, c.epoch_loss_sum.to_bits());
        put_u64(&mut out, c.epoch_zeroed_sum.to_bits());
        put_u64(&mut out, c.epoch_batches);
        put_u64(&mut out, c.acc_saturations);
        put_u32(&mut out, self.records.len() as u32);
        for r in &self.records {
            out.push(r.role as u8);
            put_u32(&mut out, r.slot);
            match &r.payload {
                Payload::Codes(q) => {
                    out.push(0);
                    put_shape(&mut out, q.shape());
                    put_u32(&mut out, q.format().bit_width());
                    out.extend_from_slice(&q.format().exponent().to_le_bytes());
                    q.codes().iter().for_each(|c| out.extend_from_slice(&c.to_le_bytes()));
                }
                Payload::F32 { shape, values } => {
                    out.push(1);
                    put_shape(&mut out, shape);
                    values.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
                }
                Payload::F64 { shape, values } => {
                    out.push(2);
                    put_shape(&mut out, shape);
                    values.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
                }
                Payload::Count(n) => {
                    out.push(3);
                    put_u64(&mut out, *n);
                }
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::Checkpoint("bad magic (expected LBT1)".into()));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version} (expected {VERSION})")));
        }
        let len = r.u32("config length")? as usize;
        let config_text = String::from_utf8(r.take(len, "config")?.to_vec())
            .map_err(|_| Error::Checkpoint("config text is not UTF-8".into()))?;
        let input_shape = r.shape("input shape")?;
        let mut counters = Counters {
            step: r.u64("counters")?,
            epoch: r.u32("counters")?,
            epoch_pos: r.u64("counters")?,
            updates: r.u64("counters")?,
            best_accuracy: Some(f64::from_bits(r.u64("counters")?)),
            epoch_loss_sum: f64::from_bits(r.u64("counters")?),
            epoch_zeroed_sum: f64::from_bits(r.u64("counters")?),
            epoch_batches: r.u64("counters")?,
            acc_saturations: r.u64("counters")?,
        };
        counters.best_accuracy = counters.best_accuracy.filter(|v| !v.is_nan());
        let count = r.u32("record count")?;
        let mut records = Vec::new();
        for i in 0..count {
            let what = format!("record {i}");
            let tag = r.u8(&what)?;
            let role = Role::from_u8(tag).ok_or_else(|| Error::Checkpoint(format!("{what}: unknown role tag {tag}")))?;
            let slot = r.u32(&what)?;
            let payload = match r.u8(&what)? {
                0 => {
                    let shape = r.shape(&what)?;
                    let bits = r.u32(&what)?;
                    let exponent = r.u32(&what)? as i32;
                    let n = numel(&shape, &what)?;
                    let codes = r.take(4 * n, &what)?.chunks_exact(4).map(|c| i32::from_le_bytes(c.try_into().unwrap())).collect();
                    let format = FixedPointFormat::new(bits, exponent).map_err(|e| Error::Checkpoint(format!("{what}: {e}")))?;
                    Payload::Codes(QTensor::new(shape, codes, format).map_err(|e| Error::Checkpoint(format!("{what}: {e}")))?)
                }
                1 => {
                    let shape = r.shape(&what)?;
                    let n = numel(&shape, &what)?;
                    let values = r.take(4 * n, &what)?.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
                    Payload::F32 { shape, values }
                }
                2 => {
                    let shape = r.shape(&what)?;
                    let n = numel(&shape, &what)?;
                    let values = r.take(8 * n, &what)?.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
                    Payload::F64 { shape, values }
                }
                3 => Payload::Count(r.u64(&what)?),
                k => return Err(Error::Checkpoint(format!("{what}: unknown payload kind {k}"))),
            };
            records.push(Record { role, slot, payload });
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes after the last record", bytes.len() - r.pos)));
        }
        Ok(Checkpoint { config_text, input_shape, counters, records })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::decode(&bytes).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
    }

    pub fn find(&self, role: Role, slot: u32) -> Result<&Payload> {
        self.records
            .iter()
            .find(|r| r.role == role && r.slot == slot)
            .map(|r| &r.payload)
            .ok_or_else(|| Error::Checkpoint(format!("missing {} record for slot {slot}", role.name())))
    }

    /// Human-readable header and record list.
    pub fn summary(&self) -> String {
        let c = &self.counters;
        let mut s = format!(
            "version = {VERSION}\ninput_shape = {:?}\nstep = {}\nepoch = {}\nepoch_pos = {}\nupdates = {}\nbest_accuracy = {}\nacc_saturations = {}\nrecords = {}\n",
            self.input_shape,
            c.step,
            c.epoch,
            c.epoch_pos,
            c.updates,
            c.best_accuracy.map_or("none".to_string(), |a| format!("{a}")),
            c.acc_saturations,
            self.records.len()
        );
        for r in &self.records {
            let desc = match &r.payload {
                Payload::Codes(q) => format!("codes {:?} bits {} exponent {}", q.shape(), q.format().bit_width(), q.format().exponent()),
                Payload::F32 { shape, .. } => format!("f32 {shape:?}"),
                Payload::F64 { shape, .. } => format!("f64 {shape:?}"),
                Payload::Count(n) => format!("count {n}"),
            };
            s.push_str(&format!("  {} {}: {desc}\n", r.role.name(), r.slot));
        }
        s.push_str("config:\n");
        for line in self.config_text.lines() {
            s.push_str(&format!("  {line}\n"));
        }
        s
    }
}

fn numel(shape: &[usize], what: &str) -> Result<usize> {
    shape
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .filter(|&n| n <= 1 << 32)
        .ok_or_else(|| Error::Checkpoint(format!("{what}: shape {shape:?} too large")))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Checkpoint(format!("truncated {what} at byte {} (file has {})", self.pos, self.bytes.len()))
        })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn shape(&mut self, what: &str) -> Result<Vec<usize>> {
        let rank = self.u32(what)?;
        if rank > 8 {
            return Err(Error::Checkpoint(format!("{what}: rank {rank} too large")));
        }
        (0..rank).map(|_| self.u32(what).map(|d| d as usize)).collect()
    }
}
