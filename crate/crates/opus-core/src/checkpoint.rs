//! Binary checkpoint format.
//!
//! A checkpoint is a sequence of sections, each ending in a CRC32 (IEEE)
//! trailer over all of that section's preceding bytes:
//!
//! * model section (always present): magic "OPUS", version u32, the model
//!   config as little-endian u32/u64 fields, then every parameter in
//!   registry order as little-endian f64;
//! * optional optimizer section, magic "OPST": update-rule kind, the shared
//!   AdamW step count, then per registry entry a slot tag and its state
//!   arrays;
//! * optional run-state section, magic "OPRN": config fingerprint and the
//!   counters needed to resume a run bit-exactly.

use std::path::Path;

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::nn::{ModelConfig, ModelState, Param, ParamShape};
use crate::optim::{Optimizer, Slot};

const MODEL_MAGIC: &[u8; 4] = b"OPUS";
const OPT_MAGIC: &[u8; 4] = b"OPST";
const RUN_MAGIC: &[u8; 4] = b"OPRN";
const VERSION: u32 = 1;

/// CRC-32 (IEEE 802.3, reflected, polynomial 0xEDB88320).
pub fn crc32(bytes: &[u8]) -> u32 {
    let mut table = [0u32; 256];
    for (i, e) in table.iter_mut().enumerate() {
        let mut c = i as u32;
        for _ in 0..8 {
            c = if c & 1 == 1 { 0xEDB8_8320 ^ (c >> 1) } else { c >> 1 };
        }
        *e = c;
    }
    let mut crc = 0xFFFF_FFFFu32;
    for &b in bytes {
        crc = table[((crc ^ b as u32) & 0xFF) as usize] ^ (crc >> 8);
    }
    crc ^ 0xFFFF_FFFF
}

/// Harness counters needed for bit-exact resume.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunState {
    pub fingerprint: u64,
    pub step: u64,
    pub update_tokens: u64,
    pub scored_tokens: u64,
    pub stream_cursor: u64,
}

#[derive(Debug, Clone)]
pub enum SlotSnapshot {
    Sgd,
    Adam { m: Vec<f64>, v: Vec<f64> },
    Muon { m: Vec<f64> },
}

#[derive(Debug, Clone)]
pub struct OptimizerSnapshot {
    pub kind: u8,
    pub adam_t: u64,
    pub slots: Vec<SlotSnapshot>,
}

#[derive(Debug)]
pub struct Checkpoint {
    pub model: ModelState,
    pub optimizer: Option<OptimizerSnapshot>,
    pub run: Option<RunState>,
}

struct Writer {
    buf: Vec<u8>,
    section_start: usize,
}

impl Writer {
    fn new() -> Self {
        Self { buf: Vec::new(), section_start: 0 }
    }
    fn begin(&mut self, magic: &[u8; 4]) {
        self.section_start = self.buf.len();
        self.buf.extend_from_slice(magic);
        self.u32(VERSION);
    }
    fn end(&mut self) {
        let crc = crc32(&self.buf[self.section_start..]);
        self.buf.extend_from_slice(&crc.to_le_bytes());
    }
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f64s<'a>(&mut self, vs: impl Iterator<Item = &'a f64>) {
        for v in vs {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    section_start: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0, section_start: 0 }
    }
    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::Checkpoint("truncated checkpoint".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn begin(&mut self, magic: &[u8; 4], what: &str) -> Result<()> {
        self.section_start = self.pos;
        if self.take(4)? != magic {
            return Err(Error::Checkpoint(format!("bad {what} magic")));
        }
        let version = self.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported {what} version {version}")));
        }
        Ok(())
    }
    fn end(&mut self, what: &str) -> Result<()> {
        let body_crc = crc32(&self.buf[self.section_start..self.pos]);
        let stored = self.u32()?;
        if body_crc != stored {
            return Err(Error::Checkpoint(format!("{what} checksum mismatch")));
        }
        Ok(())
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(8 * n)?;
        Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

pub fn encode(
    model: &ModelState,
    optimizer: Option<&Optimizer>,
    run: Option<&RunState>,
) -> Vec<u8> {
    let mut w = Writer::new();

    w.begin(MODEL_MAGIC);
    let c = &model.config;
    for v in [c.vocab_size, c.d_model, c.n_layers, c.n_heads, c.seq_len_train, c.seq_len_score] {
        w.u32(v as u32);
    }
    w.u64(c.seed);
    w.u64(model.total_param_count() as u64);
    for p in &model.params {
        match p {
            Param::Matrix(m) => w.f64s(m.iter()),
            Param::Vector(v) => w.f64s(v.iter()),
        }
    }
    w.end();

    if let Some(opt) = optimizer {
        w.begin(OPT_MAGIC);
        let kind = match opt.config.choice {
            crate::optim::OptimizerKind::Sgd => 0u8,
            crate::optim::OptimizerKind::Adamw => 1,
            crate::optim::OptimizerKind::MuonHybrid => 2,
        };
        w.u8(kind);
        let adam_t = opt
            .slots()
            .iter()
            .find_map(|s| match s {
                Slot::Adam(a) => Some(a.t),
                _ => None,
            })
            .unwrap_or(0);
        w.u64(adam_t);
        for slot in opt.slots() {
            match slot {
                Slot::Sgd => w.u8(0),
                Slot::Adam(a) => {
                    w.u8(1);
                    w.f64s(a.m.iter());
                    w.f64s(a.v.iter());
                }
                Slot::Muon(m) => {
                    w.u8(2);
                    w.f64s(m.m.iter());
                }
            }
        }
        w.end();
    }

    if let Some(r) = run {
        w.begin(RUN_MAGIC);
        w.u64(r.fingerprint);
        w.u64(r.step);
        w.u64(r.update_tokens);
        w.u64(r.scored_tokens);
        w.u64(r.stream_cursor);
        w.end();
    }

    w.buf
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader::new(bytes);

    r.begin(MODEL_MAGIC, "model")?;
    let vals: Vec<usize> = (0..6).map(|_| r.u32().map(|v| v as usize)).collect::<Result<_>>()?;
    let config = ModelConfig {
        vocab_size: vals[0],
        d_model: vals[1],
        n_layers: vals[2],
        n_heads: vals[3],
        seq_len_train: vals[4],
        seq_len_score: vals[5],
        seed: r.u64()?,
    };
    let n_params = r.u64()? as usize;
    let mut model = crate::nn::init_model(&config)?;
    if model.total_param_count() != n_params {
        return Err(Error::Checkpoint(format!(
            "parameter count {} does not match config ({})",
            n_params,
            model.total_param_count()
        )));
    }
    for (info, p) in model.registry.clone().iter().zip(model.params.iter_mut()) {
        let flat = r.f64s(info.shape.len())?;
        *p = match info.shape {
            ParamShape::Matrix(rows, cols) => Param::Matrix(
                Array2::from_shape_vec((rows, cols), flat)
                    .map_err(|e| Error::Checkpoint(e.to_string()))?,
            ),
            ParamShape::Vector(_) => Param::Vector(Array1::from_vec(flat)),
        };
    }
    r.end("model")?;

    let mut optimizer = None;
    if r.remaining() > 0 {
        r.begin(OPT_MAGIC, "optimizer")?;
        let kind = r.u8()?;
        let adam_t = r.u64()?;
        let mut slots = Vec::with_capacity(model.registry.len());
        for info in &model.registry {
            let tag = r.u8()?;
            let len = info.shape.len();
            slots.push(match tag {
                0 => SlotSnapshot::Sgd,
                1 => SlotSnapshot::Adam { m: r.f64s(len)?, v: r.f64s(len)? },
                2 => SlotSnapshot::Muon { m: r.f64s(len)? },
                other => {
                    return Err(Error::Checkpoint(format!("unknown slot tag {other}")));
                }
            });
        }
        r.end("optimizer")?;
        optimizer = Some(OptimizerSnapshot { kind, adam_t, slots });
    }

    let mut run = None;
    if r.remaining() > 0 {
        r.begin(RUN_MAGIC, "run state")?;
        run = Some(RunState {
            fingerprint: r.u64()?,
            step: r.u64()?,
            update_tokens: r.u64()?,
            scored_tokens: r.u64()?,
            stream_cursor: r.u64()?,
        });
        r.end("run state")?;
    }

    Ok(Checkpoint { model, optimizer, run })
}

pub fn write_checkpoint(
    path: &Path,
    model: &ModelState,
    optimizer: Option<&Optimizer>,
    run: Option<&RunState>,
) -> Result<()> {
    let bytes = encode(model, optimizer, run);
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, &bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode(&std::fs::read(path)?)
}

impl Optimizer {
    /// Restore state arrays from a snapshot (shapes validated against the
    /// live slots). The replaced step count comes from the run section.
    pub fn load_snapshot(&mut self, snap: &OptimizerSnapshot, step_count: u64) -> Result<()> {
        if snap.slots.len() != self.slots().len() {
            return Err(Error::Checkpoint("optimizer slot count mismatch".into()));
        }
        for (slot, loaded) in self.slots_mut().iter_mut().zip(&snap.slots) {
            match (slot, loaded) {
                (Slot::Sgd, SlotSnapshot::Sgd) => {}
                (Slot::Adam(a), SlotSnapshot::Adam { m, v }) => {
                    if m.len() != a.m.len() || v.len() != a.v.len() {
                        return Err(Error::Checkpoint("adamw state length mismatch".into()));
                    }
                    a.m.copy_from_slice(m);
                    a.v.copy_from_slice(v);
                    a.t = snap.adam_t;
                }
                (Slot::Muon(s), SlotSnapshot::Muon { m }) => {
                    if m.len() != s.m.len() {
                        return Err(Error::Checkpoint("muon state length mismatch".into()));
                    }
                    s.m = Array2::from_shape_vec(s.m.raw_dim(), m.clone())
                        .map_err(|e| Error::Checkpoint(e.to_string()))?;
                }
                _ => return Err(Error::Checkpoint("optimizer kind mismatch on load".into())),
            }
        }
        self.step_count = step_count;
        Ok(())
    }
}
