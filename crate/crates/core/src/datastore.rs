//! On-disk container for raw and relabeled datasets, plus CSV metrics.
//!
//! Layout: `b"DDS1"`, `u64` LE header length, `u32` LE CRC-32 of the header,
//! the UTF-8 JSON header, then the payload. Every array lives at a declared
//! offset within the payload; all numbers are little-endian.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{Episode, NormStats, OfflineDataset};
use crate::env::EnvSpec;
use crate::error::{data_err, DdsError, Result};
use crate::relabel::{RelabeledDataset, RelabeledTransition};

pub const MAGIC: &[u8; 4] = b"DDS1";
const PREFIX_LEN: usize = 4 + 8 + 4;
/// Upper bound on the JSON header size accepted by the reader.
const MAX_HEADER: u64 = 1 << 30;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Raw,
    Relabeled,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
    U8,
    U32,
}

impl Dtype {
    fn size(self) -> u64 {
        match self {
            Dtype::U8 => 1,
            Dtype::F32 | Dtype::U32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub nbytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMeta {
    pub seed: u64,
    pub script: String,
    pub length: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelabelMeta {
    pub horizon: usize,
    pub gamma: f64,
    pub num_skills: usize,
    pub fingerprint: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub kind: DatasetKind,
    pub env: EnvSpec,
    pub dim_s: usize,
    pub dim_a: usize,
    pub episode_count: usize,
    pub creation_seed: u64,
    pub normalization: Option<NormStats>,
    pub arrays: Vec<ArrayEntry>,
    #[serde(default)]
    pub episodes: Vec<EpisodeMeta>,
    pub relabel: Option<RelabelMeta>,
    pub payload_crc32: u32,
}

#[derive(Default)]
struct PayloadWriter {
    bytes: Vec<u8>,
    arrays: Vec<ArrayEntry>,
}

impl PayloadWriter {
    fn push(&mut self, name: String, dtype: Dtype, shape: Vec<usize>, write: impl FnOnce(&mut Vec<u8>)) {
        let offset = self.bytes.len() as u64;
        write(&mut self.bytes);
        let nbytes = self.bytes.len() as u64 - offset;
        self.arrays.push(ArrayEntry { name, dtype, shape, offset, nbytes });
    }

    fn f32s(&mut self, name: String, shape: Vec<usize>, values: &[f64]) {
        self.push(name, Dtype::F32, shape, |b| values.iter().for_each(|v| b.extend_from_slice(&(*v as f32).to_le_bytes())));
    }

    fn f64s(&mut self, name: String, shape: Vec<usize>, values: &[f64]) {
        self.push(name, Dtype::F64, shape, |b| values.iter().for_each(|v| b.extend_from_slice(&v.to_le_bytes())));
    }

    fn u8s(&mut self, name: String, shape: Vec<usize>, values: &[bool]) {
        self.push(name, Dtype::U8, shape, |b| b.extend(values.iter().map(|&t| t as u8)));
    }

    fn u32s(&mut self, name: String, shape: Vec<usize>, values: &[u32]) {
        self.push(name, Dtype::U32, shape, |b| values.iter().for_each(|v| b.extend_from_slice(&v.to_le_bytes())));
    }
}

fn assemble(mut header: Header, payload: PayloadWriter) -> Result<Vec<u8>> {
    header.arrays = payload.arrays;
    header.payload_crc32 = crc32fast::hash(&payload.bytes);
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(PREFIX_LEN + json.len() + payload.bytes.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&crc32fast::hash(&json).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload.bytes);
    Ok(out)
}

/// Parsed container with validated array spans.
struct Container<'a> {
    header: Header,
    payload: &'a [u8],
    next: usize,
}

fn parse(bytes: &[u8]) -> Result<Container<'_>> {
    if bytes.len() < PREFIX_LEN {
        return Err(data_err("file too short for a DDS1 header"));
    }
    if &bytes[..4] != MAGIC {
        return Err(data_err(format!("bad magic {:?}, expected DDS1", &bytes[..4])));
    }
    let header_len = u64::from_le_bytes(bytes[4..12].try_into().unwrap());
    let crc = u32::from_le_bytes(bytes[12..16].try_into().unwrap());
    if header_len > MAX_HEADER || header_len > (bytes.len() - PREFIX_LEN) as u64 {
        return Err(data_err(format!("header length {header_len} exceeds file size {}", bytes.len())));
    }
    let header_bytes = &bytes[PREFIX_LEN..PREFIX_LEN + header_len as usize];
    if crc32fast::hash(header_bytes) != crc {
        return Err(data_err("header checksum mismatch"));
    }
    let header: Header = serde_json::from_slice(header_bytes).map_err(|e| data_err(format!("header parse error: {e}")))?;
    let payload = &bytes[PREFIX_LEN + header_len as usize..];
    if crc32fast::hash(payload) != header.payload_crc32 {
        return Err(data_err("payload checksum mismatch or truncated payload"));
    }
    let mut spans = Vec::with_capacity(header.arrays.len());
    for a in &header.arrays {
        let count = a
            .shape
            .iter()
            .try_fold(1u64, |acc, &d| acc.checked_mul(d as u64))
            .and_then(|c| c.checked_mul(a.dtype.size()))
            .ok_or_else(|| data_err(format!("array `{}`: shape overflows", a.name)))?;
        if count != a.nbytes {
            return Err(data_err(format!("array `{}`: {} bytes declared, shape needs {count}", a.name, a.nbytes)));
        }
        let end = a.offset.checked_add(a.nbytes).filter(|&e| e <= payload.len() as u64);
        let end = end.ok_or_else(|| data_err(format!("array `{}` extends past the payload", a.name)))?;
        spans.push((a.offset, end, a.name.as_str()));
    }
    spans.sort();
    for w in spans.windows(2) {
        if w[1].0 < w[0].1 {
            return Err(data_err(format!("arrays `{}` and `{}` overlap", w[0].2, w[1].2)));
        }
    }
    Ok(Container { header, payload, next: 0 })
}

impl Container<'_> {
    /// Returns the bytes of the next array after checking its name, dtype and shape.
    fn take(&mut self, name: &str, dtype: Dtype, shape: &[usize]) -> Result<&[u8]> {
        let a = self.header.arrays.get(self.next).ok_or_else(|| data_err(format!("missing array `{name}`")))?;
        if a.name != name || a.dtype != dtype || a.shape != shape {
            return Err(data_err(format!(
                "expected array `{name}` {dtype:?} {shape:?}, found `{}` {:?} {:?}",
                a.name, a.dtype, a.shape
            )));
        }
        self.next += 1;
        Ok(&self.payload[a.offset as usize..(a.offset + a.nbytes) as usize])
    }

    fn f32s(&mut self, name: &str, shape: &[usize]) -> Result<Vec<f64>> {
        Ok(self.take(name, Dtype::F32, shape)?.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect())
    }

    fn f64s(&mut self, name: &str, shape: &[usize]) -> Result<Vec<f64>> {
        Ok(self.take(name, Dtype::F64, shape)?.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }

    fn u32s(&mut self, name: &str, shape: &[usize]) -> Result<Vec<u32>> {
        Ok(self.take(name, Dtype::U32, shape)?.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect())
    }

    fn flags(&mut self, name: &str, shape: &[usize]) -> Result<Vec<bool>> {
        self.take(name, Dtype::U8, shape)?
            .iter()
            .map(|&b| match b {
                0 => Ok(false),
                1 => Ok(true),
                other => Err(data_err(format!("array `{name}`: flag byte {other} is not 0 or 1"))),
            })
            .collect()
    }

    fn finish(&self) -> Result<()> {
        if self.next != self.header.arrays.len() {
            return Err(data_err(format!("{} unexpected trailing arrays", self.header.arrays.len() - self.next)));
        }
        Ok(())
    }
}

fn base_header(kind: DatasetKind, env: &EnvSpec, episode_count: usize, creation_seed: u64) -> Header {
    Header {
        kind,
        env: env.clone(),
        dim_s: env.dim_s,
        dim_a: env.dim_a,
        episode_count,
        creation_seed,
        normalization: None,
        arrays: Vec::new(),
        episodes: Vec::new(),
        relabel: None,
        payload_crc32: 0,
    }
}

/// Serializes a raw dataset. States, actions and rewards are stored as `f32`.
pub fn encode_dataset(dataset: &OfflineDataset) -> Result<Vec<u8>> {
    dataset.validate()?;
    let (ds, da) = (dataset.env.dim_s, dataset.env.dim_a);
    let mut header = base_header(DatasetKind::Raw, &dataset.env, dataset.episodes.len(), dataset.creation_seed);
    header.normalization = Some(dataset.norm_stats());
    let mut payload = PayloadWriter::default();
    for (i, e) in dataset.episodes.iter().enumerate() {
        let n = e.len();
        header.episodes.push(EpisodeMeta { seed: e.seed, script: e.script.clone(), length: n });
        payload.f32s(format!("ep{i}.states"), vec![n, ds], &e.states);
        payload.f32s(format!("ep{i}.actions"), vec![n, da], &e.actions);
        payload.f32s(format!("ep{i}.rewards"), vec![n], &e.rewards);
        payload.u8s(format!("ep{i}.terminals"), vec![n], &e.terminals);
        payload.f32s(format!("ep{i}.final_state"), vec![ds], &e.final_state);
    }
    assemble(header, payload)
}

pub fn decode_dataset(bytes: &[u8]) -> Result<(OfflineDataset, Header)> {
    let mut c = parse(bytes)?;
    let h = c.header.clone();
    if h.kind != DatasetKind::Raw {
        return Err(data_err("expected a raw dataset, found a relabeled one"));
    }
    check_dims(&h)?;
    if h.episodes.len() != h.episode_count {
        return Err(data_err(format!("header lists {} episodes, declares {}", h.episodes.len(), h.episode_count)));
    }
    let (ds, da) = (h.dim_s, h.dim_a);
    let mut episodes = Vec::with_capacity(h.episode_count.min(h.arrays.len()));
    for (i, meta) in h.episodes.iter().enumerate() {
        let n = meta.length;
        episodes.push(Episode {
            dim_s: ds,
            dim_a: da,
            states: c.f32s(&format!("ep{i}.states"), &[n, ds])?,
            actions: c.f32s(&format!("ep{i}.actions"), &[n, da])?,
            rewards: c.f32s(&format!("ep{i}.rewards"), &[n])?,
            terminals: c.flags(&format!("ep{i}.terminals"), &[n])?,
            final_state: c.f32s(&format!("ep{i}.final_state"), &[ds])?,
            seed: meta.seed,
            script: meta.script.clone(),
        });
    }
    c.finish()?;
    let dataset = OfflineDataset { env: h.env.clone(), episodes, creation_seed: h.creation_seed };
    dataset.validate()?;
    Ok((dataset, h))
}

fn check_dims(h: &Header) -> Result<()> {
    if h.dim_s == 0 || h.dim_a == 0 || h.dim_s != h.env.dim_s || h.dim_a != h.env.dim_a {
        return Err(data_err("header dimensions are inconsistent with its env spec"));
    }
    Ok(())
}

/// Serializes a relabeled dataset. States are stored as `f32`, rewards as `f64`.
pub fn encode_relabeled(data: &RelabeledDataset) -> Result<Vec<u8>> {
    data.validate()?;
    let n = data.transitions.len();
    let ds = data.dim_s();
    let mut header = base_header(DatasetKind::Relabeled, &data.env, 0, 0);
    header.relabel = Some(RelabelMeta {
        horizon: data.horizon,
        gamma: data.gamma,
        num_skills: data.num_skills,
        fingerprint: data.fingerprint.clone(),
    });
    let flat = |f: fn(&RelabeledTransition) -> &[f64]| data.transitions.iter().flat_map(f).copied().collect::<Vec<_>>();
    let mut payload = PayloadWriter::default();
    payload.f32s("states".into(), vec![n, ds], &flat(|t| &t.state));
    let skills: Vec<u32> = data.transitions.iter().map(|t| t.skill_index as u32).collect();
    payload.u32s("skills".into(), vec![n], &skills);
    let rewards: Vec<f64> = data.transitions.iter().map(|t| t.reward).collect();
    payload.f64s("rewards".into(), vec![n], &rewards);
    payload.f32s("next_states".into(), vec![n, ds], &flat(|t| &t.next_state));
    let terminals: Vec<bool> = data.transitions.iter().map(|t| t.terminal).collect();
    payload.u8s("terminals".into(), vec![n], &terminals);
    assemble(header, payload)
}

pub fn decode_relabeled(bytes: &[u8]) -> Result<RelabeledDataset> {
    let mut c = parse(bytes)?;
    let h = c.header.clone();
    if h.kind != DatasetKind::Relabeled {
        return Err(data_err("expected a relabeled dataset, found a raw one"));
    }
    check_dims(&h)?;
    let meta = h.relabel.clone().ok_or_else(|| data_err("relabeled dataset lacks relabel metadata"))?;
    let first = c.header.arrays.first().ok_or_else(|| data_err("relabeled dataset has no arrays"))?;
    let n = *first.shape.first().ok_or_else(|| data_err("states array has no rows"))?;
    let ds = h.dim_s;
    let states = c.f32s("states", &[n, ds])?;
    let skills = c.u32s("skills", &[n])?;
    let rewards = c.f64s("rewards", &[n])?;
    let next_states = c.f32s("next_states", &[n, ds])?;
    let terminals = c.flags("terminals", &[n])?;
    c.finish()?;
    let transitions = (0..n)
        .map(|i| RelabeledTransition {
            state: states[i * ds..(i + 1) * ds].to_vec(),
            skill_index: skills[i] as usize,
            reward: rewards[i],
            next_state: next_states[i * ds..(i + 1) * ds].to_vec(),
            terminal: terminals[i],
            gamma_used: meta.gamma,
        })
        .collect();
    let data = RelabeledDataset {
        env: h.env,
        horizon: meta.horizon,
        gamma: meta.gamma,
        num_skills: meta.num_skills,
        fingerprint: meta.fingerprint,
        transitions,
    };
    data.validate()?;
    Ok(data)
}

pub fn write_dataset(path: &Path, dataset: &OfflineDataset) -> Result<()> {
    fs::write(path, encode_dataset(dataset)?).map_err(DdsError::from)
}

pub fn read_dataset(path: &Path) -> Result<OfflineDataset> {
    Ok(decode_dataset(&fs::read(path)?)?.0)
}

pub fn write_relabeled(path: &Path, data: &RelabeledDataset) -> Result<()> {
    fs::write(path, encode_relabeled(data)?).map_err(DdsError::from)
}

pub fn read_relabeled(path: &Path) -> Result<RelabeledDataset> {
    decode_relabeled(&fs::read(path)?)
}

/// Writes `rows` as RFC-4180 CSV; columns follow the field order of `T`.
pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(DdsError::from)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::Env;
    use crate::scripts::{generate_dataset, DataGenConfig, Script};

    fn small() -> OfflineDataset {
        let env = Env::by_name("medium-maze").unwrap();
        let cfg = DataGenConfig { episodes: 3, episode_len: 12, ..DataGenConfig::default() };
        generate_dataset(&env, &[Script::Wander, Script::Destination], &cfg, 5).unwrap()
    }

    #[test]
    fn raw_roundtrip_is_bit_exact() {
        let d = small();
        let (back, header) = decode_dataset(&encode_dataset(&d).unwrap()).unwrap();
        assert_eq!(back, d);
        assert_eq!(header.episode_count, 3);
        assert_eq!(header.normalization, Some(d.norm_stats()));
    }

    #[test]
    fn every_header_byte_corruption_is_an_error() {
        let bytes = encode_dataset(&small()).unwrap();
        let header_len = u64::from_le_bytes(bytes[4..12].try_into().unwrap()) as usize;
        for i in (0..PREFIX_LEN + header_len).step_by(7) {
            let mut b = bytes.clone();
            b[i] ^= 0x5a;
            assert!(decode_dataset(&b).is_err(), "corruption at byte {i} was accepted");
        }
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let mut d = small();
        d.episodes.clear();
        assert!(matches!(encode_dataset(&d), Err(DdsError::Data(_))));
    }

    #[test]
    fn truncation_is_an_error() {
        let bytes = encode_dataset(&small()).unwrap();
        for cut in [0, 3, 10, PREFIX_LEN + 5, bytes.len() - 1] {
            assert!(decode_dataset(&bytes[..cut]).is_err(), "cut at {cut}");
        }
    }

    #[test]
    fn kind_mismatch_is_reported() {
        let bytes = encode_dataset(&small()).unwrap();
        assert!(decode_relabeled(&bytes).unwrap_err().to_string().contains("raw"));
    }
}
