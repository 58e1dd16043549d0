//! "FFCK" checkpoints: all five networks plus the architecture they were
//! built for.
//!
//! Layout (little-endian):
//! magic `FFCK`, version u16, profile (image_size u32, channel count u16,
//! channels u32…, code_dim u32, decoder_seed_hw u32, class_count u16),
//! seed u64, epoch u32, block count u32, then per block: name (u16 length +
//! UTF-8), rank u8, dims u32…, payload byte length u64, f32 payload.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::dataset::{put_string, Reader};
use crate::error::{Error, Result};
use crate::models::{build_models, ArchProfile, ModelSet};
use crate::rng;
use crate::tensor::Tensor;

pub const FFCK_MAGIC: &[u8; 4] = b"FFCK";
pub const FFCK_VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub seed: u64,
    pub epoch: u32,
    pub models: ModelSet<f32>,
}

impl Checkpoint {
    pub fn profile(&self) -> &ArchProfile {
        &self.models.profile
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize, what: &str) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::invalid(format!("{what} {v} exceeds u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Result<Vec<u8>> {
    let p = ck.profile();
    let mut out = Vec::new();
    out.extend_from_slice(FFCK_MAGIC);
    out.extend_from_slice(&FFCK_VERSION.to_le_bytes());
    put_u32(&mut out, p.image_size, "image_size")?;
    out.extend_from_slice(&(p.channels.len() as u16).to_le_bytes());
    for &c in &p.channels {
        put_u32(&mut out, c, "channel width")?;
    }
    put_u32(&mut out, p.code_dim, "code_dim")?;
    put_u32(&mut out, p.decoder_seed_hw, "decoder_seed_hw")?;
    out.extend_from_slice(&(p.class_count as u16).to_le_bytes());
    out.extend_from_slice(&ck.seed.to_le_bytes());
    out.extend_from_slice(&ck.epoch.to_le_bytes());
    let blocks = ck.models.state_dict();
    put_u32(&mut out, blocks.len(), "block count")?;
    for (name, t) in &blocks {
        put_string(&mut out, name)?;
        out.push(t.rank() as u8);
        for &d in t.shape() {
            put_u32(&mut out, d, "dimension")?;
        }
        out.extend_from_slice(&((t.len() * 4) as u64).to_le_bytes());
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn read_profile(r: &mut Reader) -> Result<ArchProfile> {
    let image_size = r.u32("image_size")? as usize;
    let n = r.u16("channel count")? as usize;
    let mut channels = Vec::with_capacity(n);
    for _ in 0..n {
        channels.push(r.u32("channel width")? as usize);
    }
    Ok(ArchProfile {
        image_size,
        channels,
        code_dim: r.u32("code_dim")? as usize,
        decoder_seed_hw: r.u32("decoder_seed_hw")? as usize,
        class_count: r.u16("class_count")? as usize,
    })
}

pub fn decode_checkpoint(buf: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader::new(buf);
    if r.bytes(4, "magic")? != FFCK_MAGIC {
        return Err(Error::Parse {
            offset: 0,
            message: "bad magic, expected FFCK".into(),
        });
    }
    let version = r.u16("version")?;
    if version != FFCK_VERSION {
        return Err(Error::Version {
            kind: "checkpoint",
            found: version,
            expected: FFCK_VERSION,
        });
    }
    let profile = read_profile(&mut r)?;
    profile
        .validate()
        .map_err(|e| r.fail(format!("stored profile is invalid: {e}")))?;
    let seed = r.u64("seed")?;
    let epoch = r.u32("epoch")?;
    let count = r.u32("block count")? as usize;
    let mut blocks = BTreeMap::new();
    for _ in 0..count {
        let name = r.string("block name")?;
        let rank = r.u8(&format!("rank of block '{name}'"))? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32(&format!("shape of block '{name}'"))? as usize);
        }
        let bytes = r.u64(&format!("payload length of block '{name}'"))?;
        let expected: usize = shape.iter().product::<usize>() * 4;
        if bytes != expected as u64 {
            return Err(r.fail(format!(
                "block '{name}' payload length {bytes} does not match shape {shape:?} ({expected} bytes)"
            )));
        }
        let data = r.f32s(expected / 4, &format!("payload of block '{name}'"))?;
        let t = Tensor::new(shape, data).map_err(|e| r.fail(format!("block '{name}': {e}")))?;
        if blocks.insert(name.clone(), t).is_some() {
            return Err(r.fail(format!("duplicate block '{name}'")));
        }
    }
    r.finish()?;
    // The init stream is irrelevant: every tensor is overwritten below.
    let mut models = build_models::<f32, _>(&profile, &mut rng::stream(0, &[]))?;
    let expected: Vec<String> = models.state_dict().into_iter().map(|(n, _)| n).collect();
    if let Some(extra) = blocks.keys().find(|k| !expected.contains(k)) {
        return Err(Error::Parse {
            offset: r.offset(),
            message: format!("unexpected block '{extra}'"),
        });
    }
    models.load_state_dict(&blocks)?;
    Ok(Checkpoint { seed, epoch, models })
}

pub fn save_checkpoint(ck: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_checkpoint(ck)?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    decode_checkpoint(&fs::read(path)?)
}

/// Loads a checkpoint and rejects it unless it was built for `expected`.
pub fn load_checkpoint_for(path: impl AsRef<Path>, expected: &ArchProfile) -> Result<Checkpoint> {
    let ck = load_checkpoint(path)?;
    if ck.profile() != expected {
        return Err(Error::ProfileMismatch(ck.profile().diff(expected)));
    }
    Ok(ck)
}
