//! Versioned binary checkpoints: config echo, vocabulary, frozen table,
//! parameters, optimizer state, and the position in the schedule.
//! Round trips are byte-identical.

use super::adam::AdamState;
use crate::autodiff::Tensor;
use crate::config::Config;
use crate::error::{Error, Result};
use crate::io::{read_file, write_file, BinReader, BinWriter};
use crate::model::{ModelBundle, ParamSet};
use crate::text::{TextEncoder, Vocabulary};
use indexmap::IndexMap;
use std::path::Path;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SMCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Pretrain,
    Train,
}

impl Phase {
    fn code(self) -> u8 {
        match self {
            Phase::Pretrain => 0,
            Phase::Train => 1,
        }
    }
    fn from_code(c: u8) -> Result<Phase> {
        match c {
            0 => Ok(Phase::Pretrain),
            1 => Ok(Phase::Train),
            other => Err(Error::CorruptHeader(format!("bad phase code {other}"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: Config,
    pub phase: Phase,
    /// The next epoch the schedule would run (== epochs when finished).
    pub next_epoch: usize,
    pub vocab_words: Vec<String>,
    pub frozen_table: Tensor,
    pub params: ParamSet,
    pub adam: AdamState,
    pub master_seed: u64,
}

impl Checkpoint {
    /// Reassemble a model bundle from the stored parameters.
    pub fn bundle(&self) -> Result<ModelBundle> {
        let vocab = Vocabulary::from_words(self.vocab_words.clone())?;
        let text = TextEncoder {
            vocab,
            table: self.frozen_table.clone(),
            frozen: true,
        };
        let config = self.config.model_config();
        config.validate()?;
        Ok(ModelBundle {
            config,
            params: self.params.clone(),
            text,
        })
    }
}

fn write_tensor(w: &mut BinWriter, t: &Tensor) {
    w.u32(t.rank() as u32);
    for &d in t.shape() {
        w.u32(d as u32);
    }
    w.f64s(t.data());
}

fn read_tensor(r: &mut BinReader) -> Result<Tensor> {
    let rank = r.u32()? as usize;
    if rank > 8 {
        return Err(Error::CorruptHeader(format!("tensor rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(r.u32()? as usize);
    }
    let numel: usize = shape.iter().product();
    Ok(Tensor::from_raw(r.f64s(numel)?, shape))
}

pub fn encode(ck: &Checkpoint) -> Vec<u8> {
    let mut w = BinWriter::new();
    w.magic(CHECKPOINT_MAGIC);
    w.u32(CHECKPOINT_VERSION);
    w.str(&ck.config.serialize());
    w.u8(ck.phase.code());
    w.u32(ck.next_epoch as u32);
    w.u64(ck.master_seed);
    w.u32(ck.vocab_words.len() as u32);
    for word in &ck.vocab_words {
        w.str(word);
    }
    write_tensor(&mut w, &ck.frozen_table);
    w.u32(ck.params.len() as u32);
    for (name, t) in ck.params.iter() {
        w.str(name);
        write_tensor(&mut w, t);
    }
    w.u64(ck.adam.step);
    w.f64(ck.adam.beta1);
    w.f64(ck.adam.beta2);
    w.f64(ck.adam.eps);
    w.u32(ck.adam.m.len() as u32);
    for (name, m) in &ck.adam.m {
        w.str(name);
        write_tensor(&mut w, m);
        write_tensor(&mut w, ck.adam.v.get(name).expect("m/v aligned"));
    }
    w.magic(b"KCMS");
    w.bytes()
}

pub fn decode(bytes: &[u8], what: &str) -> Result<Checkpoint> {
    let mut r = BinReader::new(bytes, what);
    r.magic(CHECKPOINT_MAGIC)?;
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let config = Config::parse(&r.str()?)?;
    let phase = Phase::from_code(r.u8()?)?;
    let next_epoch = r.u32()? as usize;
    let master_seed = r.u64()?;
    let n_words = r.u32()? as usize;
    let mut vocab_words = Vec::with_capacity(n_words);
    for _ in 0..n_words {
        vocab_words.push(r.str()?);
    }
    let frozen_table = read_tensor(&mut r)?;
    let n_params = r.u32()? as usize;
    let mut params = ParamSet::new();
    for _ in 0..n_params {
        let name = r.str()?;
        params.insert(name, read_tensor(&mut r)?);
    }
    let step = r.u64()?;
    let beta1 = r.f64()?;
    let beta2 = r.f64()?;
    let eps = r.f64()?;
    let n_adam = r.u32()? as usize;
    let mut m = IndexMap::new();
    let mut v = IndexMap::new();
    for _ in 0..n_adam {
        let name = r.str()?;
        m.insert(name.clone(), read_tensor(&mut r)?);
        v.insert(name, read_tensor(&mut r)?);
    }
    r.magic(b"KCMS")?;
    r.expect_end()?;
    Ok(Checkpoint {
        config,
        phase,
        next_epoch,
        vocab_words,
        frozen_table,
        params,
        adam: AdamState {
            step,
            beta1,
            beta2,
            eps,
            m,
            v,
        },
        master_seed,
    })
}

pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    write_file(path, &encode(ck))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode(&read_file(path)?, &path.display().to_string())
}
