//! Checkpoints: `ckpt-<step>/manifest.json` plus `ckpt-<step>/arrays.bin`.
//!
//! `arrays.bin` is a flat list of named little-endian arrays:
//! magic `SIFAARR1`, a u32 count, then per array a u16 name length, the
//! UTF-8 name, a u8 dtype (0 = f32, 1 = u64), a u64 element count and the
//! data. It holds every parameter and buffer, the Adam moments and step
//! counts of each optimizer group, the global step and the version counters.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};
use crate::train::{TrainConfig, TrainState};

pub const ARRAYS_MAGIC: &[u8; 8] = b"SIFAARR1";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const ARRAYS_FILE: &str = "arrays.bin";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub spec_hash: String,
    pub step: u64,
    pub rng_seed: u64,
    /// Seconds since the Unix epoch.
    pub created_at: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Array {
    F32(Vec<f32>),
    U64(Vec<u64>),
}

impl Array {
    fn len(&self) -> usize {
        match self {
            Array::F32(v) => v.len(),
            Array::U64(v) => v.len(),
        }
    }
}

pub fn encode_arrays(arrays: &[(String, Array)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(ARRAYS_MAGIC);
    out.extend_from_slice(&(arrays.len() as u32).to_le_bytes());
    for (name, a) in arrays {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        match a {
            Array::F32(v) => {
                out.push(0);
                out.extend_from_slice(&(v.len() as u64).to_le_bytes());
                v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
            }
            Array::U64(v) => {
                out.push(1);
                out.extend_from_slice(&(v.len() as u64).to_le_bytes());
                v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
            }
        }
    }
    out
}

/// Parses `arrays.bin`; errors carry the byte offset of the problem.
pub fn decode_arrays(bytes: &[u8]) -> sifa_core::Result<Vec<(String, Array)>> {
    use sifa_core::Error as E;
    let mut pos = 0usize;
    let mut take = |n: usize, what: &str| -> sifa_core::Result<(usize, &[u8])> {
        if bytes.len() - pos < n {
            return Err(E::format(pos, format!("truncated {what}")));
        }
        let at = pos;
        pos += n;
        Ok((at, &bytes[at..at + n]))
    };
    let (_, magic) = take(8, "magic")?;
    if magic != ARRAYS_MAGIC {
        return Err(E::format(0, "bad magic"));
    }
    let count = u32::from_le_bytes(take(4, "count")?.1.try_into().unwrap()) as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let name_len = u16::from_le_bytes(take(2, "name length")?.1.try_into().unwrap()) as usize;
        let (at, name) = take(name_len, "name")?;
        let name = std::str::from_utf8(name).map_err(|_| E::format(at, "name is not UTF-8"))?.to_string();
        let (at, dtype) = take(1, "dtype")?;
        let dtype = dtype[0];
        let len = u64::from_le_bytes(take(8, "length")?.1.try_into().unwrap());
        let width = match dtype {
            0 => 4,
            1 => 8,
            d => return Err(E::format(at, format!("unknown dtype {d}"))),
        };
        let n_bytes = usize::try_from(len).ok().and_then(|l| l.checked_mul(width));
        let n_bytes = n_bytes.ok_or_else(|| E::format(at + 1, "array length overflows"))?;
        let (_, data) = take(n_bytes, "array data")?;
        let array = if dtype == 0 {
            Array::F32(data.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
        } else {
            Array::U64(data.chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().unwrap())).collect())
        };
        out.push((name, array));
    }
    if pos != bytes.len() {
        return Err(E::format(pos, "trailing bytes"));
    }
    Ok(out)
}

fn state_arrays(state: &TrainState) -> Vec<(String, Array)> {
    let mut out = Vec::new();
    for net in &state.nets.nets {
        for p in &net.params {
            out.push((format!("param/{}", p.name), Array::F32(p.data.clone())));
        }
        for b in &net.buffers {
            out.push((format!("buffer/{}", b.name), Array::F32(b.data.clone())));
        }
    }
    for (group, adam) in state.opts.named() {
        for (i, (m, v)) in adam.m.iter().zip(&adam.v).enumerate() {
            out.push((format!("adam/{group}/m/{i}"), Array::F32(m.clone())));
            out.push((format!("adam/{group}/v/{i}"), Array::F32(v.clone())));
        }
        out.push((format!("adam/{group}/t"), Array::U64(vec![adam.t])));
    }
    out.push(("step".into(), Array::U64(vec![state.step])));
    out.push(("versions".into(), Array::U64(state.versions.to_vec())));
    out
}

pub fn checkpoint_dir(run_dir: &Path, step: u64) -> PathBuf {
    run_dir.join(format!("ckpt-{step}"))
}

/// Writes `ckpt-<step>` under `run_dir` through a temporary directory and a
/// rename, so a crash never leaves a half-written checkpoint behind.
pub fn save_checkpoint(run_dir: &Path, state: &TrainState) -> Result<PathBuf> {
    let dest = checkpoint_dir(run_dir, state.step);
    let tmp = run_dir.join(format!(".ckpt-{}.tmp", state.step));
    if tmp.exists() {
        fs::remove_dir_all(&tmp).at(&tmp)?;
    }
    fs::create_dir_all(&tmp).at(&tmp)?;
    let created_at = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    let manifest =
        Manifest { spec_hash: state.nets.spec_hash(), step: state.step, rng_seed: state.config.seed, created_at };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(tmp.join(MANIFEST_FILE), json).at(tmp.join(MANIFEST_FILE))?;
    fs::write(tmp.join(ARRAYS_FILE), encode_arrays(&state_arrays(state))).at(tmp.join(ARRAYS_FILE))?;
    if dest.exists() {
        fs::remove_dir_all(&dest).at(&dest)?;
    }
    fs::rename(&tmp, &dest).at(&dest)?;
    Ok(dest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).at(&path)?;
    serde_json::from_str(&text).map_err(|e| Error::parse(&path, e.to_string()))
}

/// Rebuilds a training state from a checkpoint written with the same
/// architecture. The manifest's spec hash and seed must match `config`.
pub fn load_checkpoint(dir: &Path, config: TrainConfig) -> Result<TrainState> {
    let manifest = read_manifest(dir)?;
    let mut state = TrainState::new(config)?;
    let hash = state.nets.spec_hash();
    if manifest.spec_hash != hash {
        return Err(Error::checkpoint(dir, format!("spec hash {} does not match {hash}", manifest.spec_hash)));
    }
    if manifest.rng_seed != config.seed {
        return Err(Error::checkpoint(dir, format!("seed {} does not match {}", manifest.rng_seed, config.seed)));
    }
    let path = dir.join(ARRAYS_FILE);
    let bytes = fs::read(&path).at(&path)?;
    let mut arrays: BTreeMap<String, Array> = decode_arrays(&bytes)?.into_iter().collect();
    let bad = |reason: String| Error::checkpoint(dir, reason);
    let mut f32s = |name: String, want: usize| -> Result<Vec<f32>> {
        match arrays.remove(&name) {
            Some(Array::F32(v)) if v.len() == want => Ok(v),
            Some(a) => Err(bad(format!("`{name}` has {} elements of the wrong kind or count, expected {want}", a.len()))),
            None => Err(bad(format!("missing `{name}`"))),
        }
    };
    for net in &mut state.nets.nets {
        for p in &mut net.params {
            p.data = f32s(format!("param/{}", p.name), p.data.len())?;
        }
        for b in &mut net.buffers {
            b.data = f32s(format!("buffer/{}", b.name), b.data.len())?;
        }
    }
    for (group, adam) in state.opts.named_mut() {
        for i in 0..adam.m.len() {
            adam.m[i] = f32s(format!("adam/{group}/m/{i}"), adam.m[i].len())?;
            adam.v[i] = f32s(format!("adam/{group}/v/{i}"), adam.v[i].len())?;
        }
    }
    let mut u64s = |name: String, want: usize| -> Result<Vec<u64>> {
        match arrays.remove(&name) {
            Some(Array::U64(v)) if v.len() == want => Ok(v),
            Some(_) => Err(Error::checkpoint(dir, format!("`{name}` has the wrong kind or count"))),
            None => Err(Error::checkpoint(dir, format!("missing `{name}`"))),
        }
    };
    for (group, adam) in state.opts.named_mut() {
        adam.t = u64s(format!("adam/{group}/t"), 1)?[0];
    }
    state.step = u64s("step".into(), 1)?[0];
    state.versions.copy_from_slice(&u64s("versions".into(), 7)?);
    if state.step != manifest.step {
        return Err(Error::checkpoint(dir, format!("manifest step {} but arrays step {}", manifest.step, state.step)));
    }
    if let Some(extra) = arrays.keys().next() {
        return Err(Error::checkpoint(dir, format!("unexpected array `{extra}`")));
    }
    Ok(state)
}

/// The checkpoint with the highest step under `run_dir`, if any.
pub fn latest_checkpoint(run_dir: &Path) -> Result<Option<PathBuf>> {
    let entries = match fs::read_dir(run_dir) {
        Ok(e) => e,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
        Err(e) => return Err(Error::io(run_dir, e)),
    };
    let mut best: Option<(u64, PathBuf)> = None;
    for entry in entries {
        let entry = entry.at(run_dir)?;
        let name = entry.file_name();
        let Some(step) = name.to_str().and_then(|n| n.strip_prefix("ckpt-")).and_then(|s| s.parse::<u64>().ok()) else {
            continue;
        };
        if best.as_ref().is_none_or(|(b, _)| step > *b) {
            best = Some((step, entry.path()));
        }
    }
    Ok(best.map(|(_, p)| p))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn arrays_round_trip() {
        let arrays = vec![
            ("a".to_string(), Array::F32(vec![1.0, -2.5, f32::MIN_POSITIVE])),
            ("b/c".to_string(), Array::U64(vec![7, u64::MAX])),
            ("empty".to_string(), Array::F32(vec![])),
        ];
        let bytes = encode_arrays(&arrays);
        assert_eq!(&bytes[..8], ARRAYS_MAGIC);
        assert_eq!(decode_arrays(&bytes).unwrap(), arrays);
    }

    #[test]
    fn truncation_reports_offset() {
        let bytes = encode_arrays(&[("x".to_string(), Array::U64(vec![1, 2]))]);
        let err = decode_arrays(&bytes[..bytes.len() - 3]).unwrap_err();
        // 8 magic + 4 count + 2 name length + 1 name + 1 dtype + 8 length
        assert_eq!(err, sifa_core::Error::format(24, "truncated array data"));
        let mut bad = bytes.clone();
        bad[15] = 9;
        assert!(matches!(decode_arrays(&bad), Err(sifa_core::Error::Format { offset: 15, .. })));
    }
}
