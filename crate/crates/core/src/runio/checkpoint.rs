//! Versioned binary checkpoints. Layout: 8-byte magic, u32 version, u32
//! section count, then sections of `tag[4] | u64 length | payload | u32 crc32`.
//! All integers and floats are little-endian.

use std::path::Path;

use petri_grad::{Adam, AdamConfig, Tensor};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use super::config::RunConfig;
use crate::descriptor::BehaviorDescriptor;
use crate::novelty::Archive;
use crate::substrate::{AgentNet, HyperParams, World};

pub const MAGIC: &[u8; 8] = b"PETRICKP";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file")]
    BadMagic,
    #[error("checkpoint version {found}, this build reads {VERSION}")]
    Version { found: u32 },
    #[error("checkpoint is truncated")]
    Truncated,
    #[error("section {tag} failed its checksum")]
    Checksum { tag: String },
    #[error("expected section {expected}, found {found}")]
    Section { expected: String, found: String },
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

/// Everything needed to continue a run exactly where it stopped.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: RunConfig,
    /// Meta-iterations completed.
    pub iteration: u64,
    pub meta_rng: ChaCha8Rng,
    /// Byte lengths of the metrics and summary logs when this was written.
    pub metrics_cursor: u64,
    pub summary_cursor: u64,
    pub archive: Archive,
    pub worlds: Vec<World>,
}

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u128(&mut self, v: u128) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f32(&mut self, v: f32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn tensor(&mut self, t: &Tensor) {
        self.u32(t.rank() as u32);
        for &d in t.shape() {
            self.u64(d as u64);
        }
        for &v in t.data() {
            self.f32(v);
        }
    }
    fn rng(&mut self, r: &ChaCha8Rng) {
        self.0.extend_from_slice(&r.get_seed());
        self.u64(r.get_stream());
        self.u128(r.get_word_pos());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).ok_or(CheckpointError::Truncated)?;
        let s = self
            .buf
            .get(self.pos..end)
            .ok_or(CheckpointError::Truncated)?;
        self.pos = end;
        Ok(s)
    }
    fn array<const N: usize>(&mut self) -> Result<[u8; N], CheckpointError> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }
    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.array()?))
    }
    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.array()?))
    }
    fn u128(&mut self) -> Result<u128, CheckpointError> {
        Ok(u128::from_le_bytes(self.array()?))
    }
    fn f32(&mut self) -> Result<f32, CheckpointError> {
        Ok(f32::from_le_bytes(self.array()?))
    }
    fn f64(&mut self) -> Result<f64, CheckpointError> {
        Ok(f64::from_le_bytes(self.array()?))
    }
    fn len(&mut self) -> Result<usize, CheckpointError> {
        let n = self.u64()?;
        let n = usize::try_from(n).map_err(|_| CheckpointError::Truncated)?;
        if n > self.buf.len() - self.pos {
            return Err(CheckpointError::Truncated);
        }
        Ok(n)
    }
    fn bytes(&mut self) -> Result<&'a [u8], CheckpointError> {
        let n = self.len()?;
        self.take(n)
    }
    fn tensor(&mut self) -> Result<Tensor, CheckpointError> {
        let rank = self.u32()? as usize;
        if rank > 8 {
            return Err(CheckpointError::Malformed(format!("tensor rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        let mut numel: usize = 1;
        for _ in 0..rank {
            let d = usize::try_from(self.u64()?).map_err(|_| CheckpointError::Truncated)?;
            numel = numel.checked_mul(d).ok_or(CheckpointError::Truncated)?;
            shape.push(d);
        }
        let raw = self.take(numel.checked_mul(4).ok_or(CheckpointError::Truncated)?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Tensor::new(shape, data).map_err(|e| CheckpointError::Malformed(e.to_string()))
    }
    fn rng(&mut self) -> Result<ChaCha8Rng, CheckpointError> {
        use rand::SeedableRng;
        let seed: [u8; 32] = self.array()?;
        let stream = self.u64()?;
        let word_pos = self.u128()?;
        let mut r = ChaCha8Rng::from_seed(seed);
        r.set_stream(stream);
        r.set_word_pos(word_pos);
        Ok(r)
    }
    fn done(&self) -> Result<(), CheckpointError> {
        if self.pos == self.buf.len() {
            Ok(())
        } else {
            Err(CheckpointError::Malformed(format!(
                "{} trailing bytes in section",
                self.buf.len() - self.pos
            )))
        }
    }
}

fn section(out: &mut Vec<u8>, tag: &[u8; 4], payload: &[u8]) {
    out.extend_from_slice(tag);
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(payload);
    out.extend_from_slice(&crc32fast::hash(payload).to_le_bytes());
}

fn write_hparams(w: &mut Writer, hp: &HyperParams) {
    w.f64(hp.learning_rate);
    w.u32(hp.batch_size);
    w.u32(hp.steps_per_update);
    w.f64(hp.softmax_temp);
    w.f64(hp.per_hid_upd);
}

fn read_hparams(r: &mut Reader) -> Result<HyperParams, CheckpointError> {
    Ok(HyperParams {
        learning_rate: r.f64()?,
        batch_size: r.u32()?,
        steps_per_update: r.u32()?,
        softmax_temp: r.f64()?,
        per_hid_upd: r.f64()?,
    })
}

fn write_world(w: &mut Writer, world: &World) {
    write_hparams(w, world.hparams());
    w.u64(world.steps());
    w.u8(world.is_healthy() as u8);
    w.rng(world.rng());
    w.tensor(world.grid());
    w.tensor(world.alive());
    w.u32(world.nets().len() as u32);
    for (net, opt) in world.nets().iter().zip(world.optims()) {
        for t in net.tensors() {
            w.tensor(t);
        }
        let c = opt.config();
        w.f32(c.beta1);
        w.f32(c.beta2);
        w.f32(c.eps);
        w.u64(opt.step_count());
        for t in opt.first_moments().iter().chain(opt.second_moments()) {
            w.tensor(t);
        }
    }
}

fn read_world(r: &mut Reader, config: &RunConfig) -> Result<World, CheckpointError> {
    let malformed = |e: &dyn std::fmt::Display| CheckpointError::Malformed(e.to_string());
    let hparams = read_hparams(r)?;
    let steps = r.u64()?;
    let healthy = r.u8()? != 0;
    let rng = r.rng()?;
    let grid = r.tensor()?;
    let alive = r.tensor()?;
    let agents = r.u32()? as usize;
    let mut nets = Vec::with_capacity(agents.min(1024));
    let mut optims = Vec::with_capacity(agents.min(1024));
    for _ in 0..agents {
        let t = [r.tensor()?, r.tensor()?, r.tensor()?, r.tensor()?];
        nets.push(AgentNet::from_tensors(t));
        let cfg = AdamConfig {
            beta1: r.f32()?,
            beta2: r.f32()?,
            eps: r.f32()?,
        };
        let step = r.u64()?;
        let m = (0..4).map(|_| r.tensor()).collect::<Result<Vec<_>, _>>()?;
        let v = (0..4).map(|_| r.tensor()).collect::<Result<Vec<_>, _>>()?;
        optims.push(Adam::from_parts(cfg, step, m, v).map_err(|e| malformed(&e))?);
    }
    let mut world = World::from_parts(config.world, hparams, grid, alive, nets, rng)
        .map_err(|e| malformed(&e))?;
    // from_parts derives the batch size from the grid; the saved value wins.
    let mut hp = *world.hparams();
    hp.batch_size = hparams.batch_size;
    world.set_hparams(hp);
    world
        .restore_progress(optims, steps, healthy)
        .map_err(|e| malformed(&e))?;
    Ok(world)
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(3 + self.worlds.len() as u32).to_le_bytes());

        section(&mut out, b"CONF", self.config.to_json().as_bytes());

        let mut w = Writer::default();
        w.u64(self.iteration);
        w.rng(&self.meta_rng);
        w.u64(self.metrics_cursor);
        w.u64(self.summary_cursor);
        w.u64(self.worlds.len() as u64);
        section(&mut out, b"META", &w.0);

        let mut w = Writer::default();
        w.u64(self.archive.inserted());
        w.u64(self.archive.len() as u64);
        for d in self.archive.entries() {
            w.u64(d.len() as u64);
            for &v in d.as_slice() {
                w.f64(v);
            }
        }
        section(&mut out, b"ARCH", &w.0);

        for world in &self.worlds {
            let mut w = Writer::default();
            write_world(&mut w, world);
            section(&mut out, b"WRLD", &w.0);
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(MAGIC.len()).map_err(|_| CheckpointError::BadMagic)? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(CheckpointError::Version { found: version });
        }
        let count = r.u32()? as usize;
        // Verify every checksum before interpreting anything.
        let mut sections = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let tag: [u8; 4] = r.array()?;
            let payload = r.bytes()?;
            let crc = r.u32()?;
            let tag = String::from_utf8_lossy(&tag).into_owned();
            if crc32fast::hash(payload) != crc {
                return Err(CheckpointError::Checksum { tag });
            }
            sections.push((tag, payload));
        }
        r.done()?;
        let mut it = sections.into_iter();
        let mut next = |expected: &str| {
            let (tag, payload) = it.next().ok_or(CheckpointError::Truncated)?;
            if tag != expected {
                return Err(CheckpointError::Section {
                    expected: expected.into(),
                    found: tag,
                });
            }
            Ok(Reader {
                buf: payload,
                pos: 0,
            })
        };

        let conf = next("CONF")?;
        let config: RunConfig = serde_json::from_slice(conf.buf)
            .map_err(|e| CheckpointError::Malformed(e.to_string()))?;

        let mut m = next("META")?;
        let iteration = m.u64()?;
        let meta_rng = m.rng()?;
        let metrics_cursor = m.u64()?;
        let summary_cursor = m.u64()?;
        let n_worlds = m.u64()? as usize;
        m.done()?;
        if n_worlds + 3 != count {
            return Err(CheckpointError::Malformed(format!(
                "{n_worlds} worlds announced, {} sections present",
                count
            )));
        }

        let mut a = next("ARCH")?;
        let inserted = a.u64()?;
        let len = a.u64()? as usize;
        let mut entries = Vec::with_capacity(len.min(1 << 16));
        for _ in 0..len {
            let n = a.u64()? as usize;
            let v = (0..n).map(|_| a.f64()).collect::<Result<Vec<_>, _>>()?;
            entries.push(BehaviorDescriptor(v));
        }
        a.done()?;
        let archive = Archive::from_parts(config.meta.archive, entries, inserted);

        let mut worlds = Vec::with_capacity(n_worlds);
        for _ in 0..n_worlds {
            let mut w = next("WRLD")?;
            worlds.push(read_world(&mut w, &config)?);
            w.done()?;
        }
        Ok(Self {
            config,
            iteration,
            meta_rng,
            metrics_cursor,
            summary_cursor,
            archive,
            worlds,
        })
    }

    /// Write atomically: a temporary sibling, then a rename.
    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes())?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
