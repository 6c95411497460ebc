//! Checkpoint archive: `CMEMSCKP`, a little-endian `u32` version, a `u64`
//! metadata length, JSON metadata, then raw little-endian `f32` values for
//! network 1 (parameters, batch-norm statistics), network 2, and the Adam
//! first and second moments.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{TrainConfig, TrainState};
use crate::error::{Error, Result};
use crate::tensor::Real;

const MAGIC: &[u8; 8] = b"CMEMSCKP";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub version: u32,
    pub config_hash: u64,
    pub iteration: u64,
    pub seed: u64,
    pub dtype: String,
    pub num_classes: usize,
    pub values: usize,
    pub config: TrainConfig,
}

fn collect(state: &mut TrainState) -> Vec<f32> {
    let mut out = Vec::new();
    for net in state.nets.iter_mut() {
        net.visit_params(&mut |p| out.extend_from_slice(&p.value));
        net.visit_stats_mut(&mut |s| out.extend_from_slice(s));
    }
    for m in state.adam.m.iter().chain(&state.adam.v) {
        out.extend_from_slice(m);
    }
    out
}

fn restore(state: &mut TrainState, values: &[f32]) {
    let mut at = 0;
    let mut take = |dst: &mut [f32]| {
        dst.copy_from_slice(&values[at..at + dst.len()]);
        at += dst.len();
    };
    for net in state.nets.iter_mut() {
        net.visit_params_mut(&mut |p| take(&mut p.value));
        net.visit_stats_mut(&mut |s| take(s));
    }
    for m in state.adam.m.iter_mut().chain(state.adam.v.iter_mut()) {
        take(m);
    }
}

/// Writes atomically through a sibling temporary file.
pub fn save(path: &Path, state: &TrainState, cfg: &TrainConfig) -> Result<()> {
    let mut copy = state.clone();
    let values = collect(&mut copy);
    let meta = CheckpointMeta {
        version: VERSION,
        config_hash: cfg.config_hash(),
        iteration: state.iteration,
        seed: cfg.seed,
        dtype: f32::DTYPE.to_string(),
        num_classes: state.nets[0].num_classes(),
        values: values.len(),
        config: cfg.clone(),
    };
    let json = serde_json::to_vec(&meta)?;
    let tmp = path.with_extension("ckpt.tmp");
    {
        let mut f = BufWriter::new(File::create(&tmp)?);
        f.write_all(MAGIC)?;
        f.write_all(&VERSION.to_le_bytes())?;
        f.write_all(&(json.len() as u64).to_le_bytes())?;
        f.write_all(&json)?;
        let mut buf = Vec::with_capacity(values.len() * 4);
        for v in &values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        f.write_all(&buf)?;
        f.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Reads a checkpoint and rebuilds the state it was saved from.
pub fn load(path: &Path) -> Result<(CheckpointMeta, TrainState)> {
    let bad = |m: String| Error::Checkpoint(format!("{}: {m}", path.display()));
    let f = File::open(path).map_err(|e| Error::ingestion(path, e))?;
    let mut r = BufReader::new(f);
    let mut head = [0u8; 20];
    r.read_exact(&mut head).map_err(|_| bad("truncated header".into()))?;
    if &head[..8] != MAGIC {
        return Err(bad("not a checkpoint file".into()));
    }
    let version = u32::from_le_bytes(head[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let len = u64::from_le_bytes(head[12..20].try_into().unwrap()) as usize;
    let mut json = vec![0u8; len];
    r.read_exact(&mut json).map_err(|_| bad("truncated metadata".into()))?;
    let meta: CheckpointMeta = serde_json::from_slice(&json).map_err(|e| bad(format!("bad metadata: {e}")))?;
    if meta.dtype != f32::DTYPE {
        return Err(bad(format!("unsupported dtype {}", meta.dtype)));
    }
    let mut state = TrainState::new(&meta.config, meta.num_classes)?;
    let expected = collect(&mut state.clone()).len();
    if meta.values != expected {
        return Err(bad(format!("holds {} values, architecture needs {expected}", meta.values)));
    }
    let mut raw = Vec::with_capacity(expected * 4);
    r.read_to_end(&mut raw)?;
    if raw.len() != expected * 4 {
        return Err(bad(format!("payload is {} bytes, expected {}", raw.len(), expected * 4)));
    }
    let values: Vec<f32> = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
    restore(&mut state, &values);
    state.iteration = meta.iteration;
    state.adam.step = meta.iteration;
    Ok((meta, state))
}

/// Loads a checkpoint for continuing a run under `cfg`.
pub fn resume(path: &Path, cfg: &TrainConfig) -> Result<TrainState> {
    let (meta, state) = load(path)?;
    if meta.config_hash != cfg.config_hash() {
        return Err(Error::Checkpoint(format!(
            "{} was written under a different configuration",
            path.display()
        )));
    }
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_rejections() {
        let cfg = TrainConfig { base_channels: 2, ..TrainConfig::default() };
        let mut state = TrainState::new(&cfg, 3).unwrap();
        state.iteration = 7;
        state.adam.step = 7;
        state.adam.m[0][0] = 0.25;
        state.nets[1].visit_stats_mut(&mut |s| s[0] = 3.5);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.ckpt");
        save(&p, &state, &cfg).unwrap();
        let (meta, back) = load(&p).unwrap();
        assert_eq!(meta.iteration, 7);
        assert_eq!(back, state);
        assert!(resume(&p, &TrainConfig { seed: 9, ..cfg.clone() }).is_err());
        std::fs::write(&p, b"garbage").unwrap();
        assert!(matches!(load(&p), Err(Error::Checkpoint(_))));
    }
}
