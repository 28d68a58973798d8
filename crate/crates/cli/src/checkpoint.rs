//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//! magic `MMTL`, version u32, config digest (32 bytes), iteration u64,
//! seed u64, embedded config (u32 length + UTF-8), tensor table (u32 count,
//! then name, rank u32, extents u64 each, f64 values), optimizer table
//! (u32 count, then name, lr f64, step u64, u32 moment count, moment pairs
//! as unnamed tensors).

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use mmtl_core::meta::Learner;
use mmtl_core::tensor::{OptimState, StepRule};
use mmtl_core::Tensor;

pub const MAGIC: &[u8; 4] = b"MMTL";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum CheckpointError {
    Io(String),
    BadMagic([u8; 4]),
    UnsupportedVersion(u32),
    Truncated(&'static str),
    Malformed(String),
}

impl fmt::Display for CheckpointError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CheckpointError::Io(m) => write!(f, "checkpoint i/o: {m}"),
            CheckpointError::BadMagic(m) => write!(f, "not a checkpoint: bad magic {m:?}"),
            CheckpointError::UnsupportedVersion(v) => write!(f, "unsupported checkpoint version {v} (expected {VERSION})"),
            CheckpointError::Truncated(what) => write!(f, "truncated checkpoint: missing {what}"),
            CheckpointError::Malformed(m) => write!(f, "malformed checkpoint: {m}"),
        }
    }
}

impl std::error::Error for CheckpointError {}

/// Adam state of one parameter group.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimRecord {
    pub name: String,
    pub lr: f64,
    pub step: u64,
    pub moments: Vec<(Tensor, Tensor)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub digest: [u8; 32],
    pub iteration: u64,
    pub seed: u64,
    pub config: String,
    pub tensors: Vec<(String, Tensor)>,
    pub optim: Vec<OptimRecord>,
}

fn optim_names(learner: &Learner) -> Vec<String> {
    let tasks = &learner.model.config.tasks;
    let mut names = vec!["backbone".to_string()];
    names.extend(tasks.iter().map(|t| format!("head.{}", t.id)));
    if learner.model.has_attention() {
        names.extend(tasks.iter().map(|t| format!("attention.{}", t.id)));
    }
    names
}

fn optim_states(learner: &mut Learner) -> Vec<&mut OptimState> {
    let o = &mut learner.optim;
    let mut out = vec![&mut o.backbone];
    out.extend(o.heads.iter_mut());
    out.extend(o.attention.iter_mut());
    out
}

impl Checkpoint {
    /// Snapshot of a learner and the config text that produced it.
    pub fn capture(learner: &mut Learner, config: &str, digest: [u8; 32]) -> Checkpoint {
        let names = optim_names(learner);
        let optim = names
            .into_iter()
            .zip(optim_states(learner))
            .map(|(name, s)| OptimRecord {
                name,
                lr: s.lr,
                step: s.step,
                moments: s.moments.clone(),
            })
            .collect();
        Checkpoint {
            digest,
            iteration: learner.iteration,
            seed: learner.hp.seed,
            config: config.to_string(),
            tensors: learner.model.named_tensors(),
            optim,
        }
    }

    /// Loads parameters, optimizer state and step counter into `learner`.
    pub fn restore(&self, learner: &mut Learner) -> Result<(), String> {
        learner.model.load_named(&self.tensors).map_err(|e| e.to_string())?;
        let names = optim_names(learner);
        if names.len() != self.optim.len() || names.iter().zip(&self.optim).any(|(n, r)| *n != r.name) {
            let have: Vec<&str> = self.optim.iter().map(|r| r.name.as_str()).collect();
            return Err(format!("optimizer groups {have:?} do not match model groups {names:?}"));
        }
        for (state, rec) in optim_states(learner).into_iter().zip(&self.optim) {
            *state = OptimState {
                lr: state.lr,
                rule: StepRule::adam(),
                step: rec.step,
                moments: rec.moments.clone(),
            };
        }
        learner.iteration = self.iteration;
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(MAGIC);
        b.extend_from_slice(&VERSION.to_le_bytes());
        b.extend_from_slice(&self.digest);
        b.extend_from_slice(&self.iteration.to_le_bytes());
        b.extend_from_slice(&self.seed.to_le_bytes());
        put_str(&mut b, &self.config);
        b.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            put_str(&mut b, name);
            put_tensor(&mut b, t);
        }
        b.extend_from_slice(&(self.optim.len() as u32).to_le_bytes());
        for r in &self.optim {
            put_str(&mut b, &r.name);
            b.extend_from_slice(&r.lr.to_le_bytes());
            b.extend_from_slice(&r.step.to_le_bytes());
            b.extend_from_slice(&(r.moments.len() as u32).to_le_bytes());
            for (m, v) in &r.moments {
                put_tensor(&mut b, m);
                put_tensor(&mut b, v);
            }
        }
        b
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4, "magic")?.try_into().expect("4 bytes");
        if &magic != MAGIC {
            return Err(CheckpointError::BadMagic(magic));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(CheckpointError::UnsupportedVersion(version));
        }
        let digest: [u8; 32] = r.take(32, "config digest")?.try_into().expect("32 bytes");
        let iteration = r.u64("iteration")?;
        let seed = r.u64("seed")?;
        let config = r.string("embedded config")?;
        let n = r.u32("tensor count")?;
        let mut tensors = Vec::new();
        for _ in 0..n {
            let name = r.string("tensor name")?;
            tensors.push((name, r.tensor()?));
        }
        let n = r.u32("optimizer count")?;
        let mut optim = Vec::new();
        for _ in 0..n {
            let name = r.string("optimizer name")?;
            let lr = f64::from_le_bytes(r.take(8, "optimizer rate")?.try_into().expect("8 bytes"));
            let step = r.u64("optimizer step")?;
            let k = r.u32("moment count")?;
            let mut moments = Vec::new();
            for _ in 0..k {
                moments.push((r.tensor()?, r.tensor()?));
            }
            optim.push(OptimRecord { name, lr, step, moments });
        }
        if r.pos != bytes.len() {
            return Err(CheckpointError::Malformed(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint {
            digest,
            iteration,
            seed,
            config,
            tensors,
            optim,
        })
    }

    /// Writes to a temporary sibling, then renames over `path`.
    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let tmp = path.with_extension("tmp");
        let io = |e: std::io::Error| CheckpointError::Io(format!("{}: {e}", path.display()));
        let mut f = fs::File::create(&tmp).map_err(io)?;
        f.write_all(&self.to_bytes()).map_err(io)?;
        f.sync_all().map_err(io)?;
        fs::rename(&tmp, path).map_err(io)
    }

    pub fn load(path: &Path) -> Result<Checkpoint, CheckpointError> {
        let bytes = fs::read(path).map_err(|e| CheckpointError::Io(format!("{}: {e}", path.display())))?;
        Checkpoint::from_bytes(&bytes)
    }
}

fn put_str(b: &mut Vec<u8>, s: &str) {
    b.extend_from_slice(&(s.len() as u32).to_le_bytes());
    b.extend_from_slice(s.as_bytes());
}

fn put_tensor(b: &mut Vec<u8>, t: &Tensor) {
    b.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for d in t.shape() {
        b.extend_from_slice(&(*d as u64).to_le_bytes());
    }
    for v in t.data() {
        b.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], CheckpointError> {
        if self.bytes.len() - self.pos < n {
            return Err(CheckpointError::Truncated(what));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self, what: &'static str) -> Result<String, CheckpointError> {
        let n = self.u32(what)? as usize;
        let raw = self.take(n, what)?;
        String::from_utf8(raw.to_vec()).map_err(|_| CheckpointError::Malformed(format!("{what} is not UTF-8")))
    }

    fn tensor(&mut self) -> Result<Tensor, CheckpointError> {
        let rank = self.u32("tensor rank")? as usize;
        if rank > 8 {
            return Err(CheckpointError::Malformed(format!("tensor rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u64("tensor extent")? as usize);
        }
        let len = shape
            .iter()
            .try_fold(1usize, |a, d| a.checked_mul(*d))
            .filter(|n| n.checked_mul(8).is_some_and(|b| b <= self.bytes.len() - self.pos))
            .ok_or(CheckpointError::Truncated("tensor values"))?;
        let raw = self.take(len * 8, "tensor values")?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        Tensor::new(shape, data).map_err(|e| CheckpointError::Malformed(e.to_string()))
    }
}
