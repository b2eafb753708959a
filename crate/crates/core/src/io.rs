//! On-disk formats: datasets, checkpoints, run configs, and the metrics
//! stream.
//!
//! Dataset (`SNDS`, little-endian): magic, `u32` version 1, `u32` samples,
//! `u32` dim, `u32` classes, `samples·dim` `f32` values row-major, then one
//! `u8` label per sample.
//!
//! Checkpoint (`SNCK`, little-endian): magic, `u32` version, `u32` array
//! count, then per array `u32` name length, name bytes, `u8` dtype tag,
//! `u32` rank, `u32` dims, payload; a trailing `u64` FNV-1a digest covers
//! every preceding byte.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelState, ParamSet, StackConfig};
use crate::neighbor_store::StoreSnapshot;
use crate::numerics::Tensor;
use crate::pipeline::{AugmentConfig, StepRecord, TrainConfig, TrainState};

pub const DATASET_MAGIC: &[u8; 4] = b"SNDS";
pub const DATASET_VERSION: u32 = 1;
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SNCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// 64-bit FNV-1a.
#[derive(Clone, Copy, Debug)]
pub struct Fnv64(u64);

impl Default for Fnv64 {
    fn default() -> Self {
        Self::new()
    }
}

impl Fnv64 {
    pub const fn new() -> Self {
        Self(0xcbf2_9ce4_8422_2325)
    }

    pub fn write(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= u64::from(b);
            self.0 = self.0.wrapping_mul(0x0100_0000_01b3);
        }
    }

    pub fn finish(&self) -> u64 {
        self.0
    }
}

/// Writes `bytes` to a sibling temp file, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path
        .file_name()
        .ok_or_else(|| Error::Config(format!("not a file path: {}", path.display())))?;
    let mut tmp_name = name.to_os_string();
    tmp_name.push(format!(".tmp-{}", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path).inspect_err(|_| {
        let _ = fs::remove_file(&tmp);
    })?;
    Ok(())
}

// ---- datasets ------------------------------------------------------------

/// Labeled samples held in memory as `f64`; stored as `f32`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `n × dim`
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub n_classes: usize,
}

impl Dataset {
    pub fn new(features: Tensor, labels: Vec<usize>, n_classes: usize) -> Result<Self> {
        if features.shape().len() != 2 || features.rows() != labels.len() {
            return Err(crate::error::contract(format!(
                "{} labels for features of shape {:?}",
                labels.len(),
                features.shape()
            )));
        }
        if n_classes > 256 {
            return Err(crate::error::contract(format!(
                "at most 256 classes fit the label byte, got {n_classes}"
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
            return Err(crate::error::contract(format!(
                "label {bad} out of range for {n_classes} classes"
            )));
        }
        Ok(Self {
            features,
            labels,
            n_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            n_classes: self.n_classes,
        }
    }

    /// Every `every`-th sample goes to the second part.
    pub fn split_every(&self, every: usize) -> (Dataset, Dataset) {
        let every = every.max(1);
        let (test, train): (Vec<usize>, Vec<usize>) =
            (0..self.len()).partition(|i| i % every == every - 1);
        (self.subset(&train), self.subset(&test))
    }
}

pub fn encode_dataset(ds: &Dataset) -> Vec<u8> {
    let mut out = Vec::with_capacity(20 + ds.features.len() * 4 + ds.len());
    out.extend_from_slice(DATASET_MAGIC);
    for v in [DATASET_VERSION, ds.len() as u32, ds.dim() as u32, ds.n_classes as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for &x in ds.features.data() {
        out.extend_from_slice(&(x as f32).to_le_bytes());
    }
    out.extend(ds.labels.iter().map(|&l| l as u8));
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8], what: &'static str) -> Self {
        Self { buf, pos: 0, what }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Corrupt(format!("{} truncated", self.what)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn magic(&mut self, want: &[u8; 4]) -> Result<()> {
        if self.take(4)? != want {
            return Err(Error::Corrupt(format!("{}: bad magic", self.what)));
        }
        Ok(())
    }

    fn done(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Corrupt(format!(
                "{}: {} trailing bytes",
                self.what,
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset> {
    let mut r = Reader::new(bytes, "dataset");
    r.magic(DATASET_MAGIC)?;
    let version = r.u32()?;
    if version != DATASET_VERSION {
        return Err(Error::Corrupt(format!("unsupported dataset version {version}")));
    }
    let n = r.u32()? as usize;
    let dim = r.u32()? as usize;
    let classes = r.u32()? as usize;
    let count = n
        .checked_mul(dim)
        .ok_or_else(|| Error::Corrupt("dataset size overflows".into()))?;
    let raw = r.take(count.checked_mul(4).ok_or_else(|| Error::Corrupt("dataset size overflows".into()))?)?;
    let data: Vec<f64> = raw
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
        .collect();
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Corrupt("dataset holds non-finite values".into()));
    }
    let labels: Vec<usize> = r.take(n)?.iter().map(|&l| usize::from(l)).collect();
    r.done()?;
    let features = Tensor::new(&[n, dim], data).map_err(|e| Error::Corrupt(e.to_string()))?;
    Dataset::new(features, labels, classes).map_err(|e| Error::Corrupt(e.to_string()))
}

pub fn write_dataset(path: &Path, ds: &Dataset) -> Result<()> {
    write_atomic(path, &encode_dataset(ds))
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    decode_dataset(&fs::read(path)?)
}

// ---- run config ----------------------------------------------------------

/// Everything a `pretrain` run reads from its config file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dataset: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    pub model: StackConfig,
    pub train: TrainConfig,
    pub augment: AugmentConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// A missing or unreadable file is a config error, not an I/O one.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.augment.validate()?;
        if self.train.seed > i64::MAX as u64 {
            return Err(Error::Config(format!(
                "train.seed must be at most {}, got {}",
                i64::MAX,
                self.train.seed
            )));
        }
        Ok(())
    }
}

// ---- checkpoints ---------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
enum Payload {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U64(Vec<u64>),
    Bytes(Vec<u8>),
}

impl Payload {
    fn tag(&self) -> u8 {
        match self {
            Payload::F32(_) => 0,
            Payload::F64(_) => 1,
            Payload::U64(_) => 2,
            Payload::Bytes(_) => 3,
        }
    }

    fn len(&self) -> usize {
        match self {
            Payload::F32(v) => v.len(),
            Payload::F64(v) => v.len(),
            Payload::U64(v) => v.len(),
            Payload::Bytes(v) => v.len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct NamedArray {
    dims: Vec<usize>,
    payload: Payload,
}

/// A resumable snapshot of a run.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub state: TrainState,
}

fn put_tensors(out: &mut BTreeMap<String, NamedArray>, prefix: &str, map: &BTreeMap<String, Tensor>) {
    for (k, t) in map {
        out.insert(
            format!("{prefix}{k}"),
            NamedArray {
                dims: t.shape().to_vec(),
                payload: Payload::F64(t.data().to_vec()),
            },
        );
    }
}

fn take_tensors(arrays: &mut BTreeMap<String, NamedArray>, prefix: &str) -> Result<BTreeMap<String, Tensor>> {
    let keys: Vec<String> = arrays.keys().filter(|k| k.starts_with(prefix)).cloned().collect();
    let mut out = BTreeMap::new();
    for k in keys {
        let a = arrays.remove(&k).expect("listed key");
        let data = match a.payload {
            Payload::F64(v) => v,
            Payload::F32(v) => v.into_iter().map(f64::from).collect(),
            _ => return Err(Error::Corrupt(format!("{k}: expected float payload"))),
        };
        let t = Tensor::new(&a.dims, data).map_err(|e| Error::Corrupt(format!("{k}: {e}")))?;
        out.insert(k[prefix.len()..].to_string(), t);
    }
    Ok(out)
}

fn take_u64(arrays: &mut BTreeMap<String, NamedArray>, name: &str) -> Result<Vec<u64>> {
    match arrays.remove(name).map(|a| a.payload) {
        Some(Payload::U64(v)) => Ok(v),
        Some(_) => Err(Error::Corrupt(format!("{name}: expected u64 payload"))),
        None => Err(Error::Corrupt(format!("checkpoint lacks {name}"))),
    }
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Result<Vec<u8>> {
    let mut arrays = BTreeMap::new();
    let config = ck.config.to_toml()?.into_bytes();
    arrays.insert(
        "config".to_string(),
        NamedArray {
            dims: vec![config.len()],
            payload: Payload::Bytes(config),
        },
    );
    let m = &ck.state.model;
    put_tensors(&mut arrays, "online.param.", &m.online.params);
    put_tensors(&mut arrays, "online.buffer.", &m.online.buffers);
    put_tensors(&mut arrays, "momentum.param.", &m.momentum.params);
    put_tensors(&mut arrays, "momentum.buffer.", &m.momentum.buffers);
    put_tensors(&mut arrays, "velocity.", &ck.state.velocity);
    let s = &ck.state.store;
    arrays.insert(
        "store.entries".into(),
        NamedArray {
            dims: vec![s.ages.len(), s.dim],
            payload: Payload::F64(s.entries.clone()),
        },
    );
    arrays.insert(
        "store.ages".into(),
        NamedArray {
            dims: vec![s.ages.len()],
            payload: Payload::U64(s.ages.clone()),
        },
    );
    arrays.insert(
        "store.ring".into(),
        NamedArray {
            dims: vec![4],
            payload: Payload::U64(vec![s.capacity as u64, s.dim as u64, s.head as u64, s.next_age]),
        },
    );
    arrays.insert(
        "state.step".into(),
        NamedArray {
            dims: vec![1],
            payload: Payload::U64(vec![ck.state.step as u64]),
        },
    );
    arrays.insert(
        "state.ema_coeff".into(),
        NamedArray {
            dims: vec![1],
            payload: Payload::F64(vec![m.ema_coeff]),
        },
    );

    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(arrays.len() as u32).to_le_bytes());
    for (name, a) in &arrays {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(a.payload.tag());
        out.extend_from_slice(&(a.dims.len() as u32).to_le_bytes());
        for &d in &a.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        match &a.payload {
            Payload::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Payload::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Payload::U64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Payload::Bytes(v) => out.extend_from_slice(v),
        }
    }
    let mut h = Fnv64::new();
    h.write(&out);
    out.extend_from_slice(&h.finish().to_le_bytes());
    Ok(out)
}

fn read_array(r: &mut Reader<'_>) -> Result<(String, NamedArray)> {
    let name_len = r.u32()? as usize;
    let name = String::from_utf8(r.take(name_len)?.to_vec())
        .map_err(|_| Error::Corrupt("array name is not UTF-8".into()))?;
    let tag = r.u8()?;
    let rank = r.u32()? as usize;
    let mut dims = Vec::with_capacity(rank.min(8));
    for _ in 0..rank {
        dims.push(r.u32()? as usize);
    }
    let count = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Corrupt(format!("{name}: size overflows")))?;
    let width = match tag {
        0 => 4,
        1 | 2 => 8,
        3 => 1,
        t => return Err(Error::Corrupt(format!("{name}: unknown dtype tag {t}"))),
    };
    let raw = r.take(
        count
            .checked_mul(width)
            .ok_or_else(|| Error::Corrupt(format!("{name}: size overflows")))?,
    )?;
    let payload = match tag {
        0 => Payload::F32(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4"))).collect()),
        1 => Payload::F64(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8"))).collect()),
        2 => Payload::U64(raw.chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().expect("8"))).collect()),
        _ => Payload::Bytes(raw.to_vec()),
    };
    debug_assert_eq!(payload.len(), count);
    Ok((name, NamedArray { dims, payload }))
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 4 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::Corrupt("checkpoint: bad magic".into()));
    }
    if bytes.len() < 20 {
        return Err(Error::Corrupt("checkpoint truncated".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    let mut h = Fnv64::new();
    h.write(body);
    if h.finish().to_le_bytes() != tail {
        return Err(Error::Corrupt("checkpoint checksum mismatch".into()));
    }
    let mut r = Reader::new(body, "checkpoint");
    r.magic(CHECKPOINT_MAGIC)?;
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Corrupt(format!("unsupported checkpoint version {version}")));
    }
    let count = r.u32()? as usize;
    let mut arrays = BTreeMap::new();
    for _ in 0..count {
        let (name, a) = read_array(&mut r)?;
        arrays.insert(name, a);
    }
    r.done()?;

    let config = match arrays.remove("config").map(|a| a.payload) {
        Some(Payload::Bytes(b)) => {
            let text = String::from_utf8(b).map_err(|_| Error::Corrupt("config is not UTF-8".into()))?;
            RunConfig::from_toml(&text).map_err(|e| Error::Corrupt(format!("embedded config: {e}")))?
        }
        _ => return Err(Error::Corrupt("checkpoint lacks its config".into())),
    };
    let online = ParamSet {
        params: take_tensors(&mut arrays, "online.param.")?,
        buffers: take_tensors(&mut arrays, "online.buffer.")?,
    };
    let momentum = ParamSet {
        params: take_tensors(&mut arrays, "momentum.param.")?,
        buffers: take_tensors(&mut arrays, "momentum.buffer.")?,
    };
    let velocity = take_tensors(&mut arrays, "velocity.")?;
    let ring = take_u64(&mut arrays, "store.ring")?;
    let ages = take_u64(&mut arrays, "store.ages")?;
    let entries = match arrays.remove("store.entries").map(|a| a.payload) {
        Some(Payload::F64(v)) => v,
        _ => return Err(Error::Corrupt("checkpoint lacks store entries".into())),
    };
    let step = take_u64(&mut arrays, "state.step")?;
    let ema = match arrays.remove("state.ema_coeff").map(|a| a.payload) {
        Some(Payload::F64(v)) if v.len() == 1 => v[0],
        _ => return Err(Error::Corrupt("checkpoint lacks ema coefficient".into())),
    };
    if ring.len() != 4 || step.len() != 1 {
        return Err(Error::Corrupt("malformed checkpoint state".into()));
    }
    if let Some(extra) = arrays.keys().next() {
        return Err(Error::Corrupt(format!("unexpected checkpoint array {extra}")));
    }
    let model = ModelState {
        config: config.model.clone(),
        online,
        momentum,
        ema_coeff: ema,
    };
    let store = StoreSnapshot {
        capacity: ring[0] as usize,
        dim: ring[1] as usize,
        entries,
        ages,
        head: ring[2] as usize,
        next_age: ring[3],
    };
    Ok(Checkpoint {
        config,
        state: TrainState {
            model,
            velocity,
            store,
            step: step[0] as usize,
        },
    })
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    write_atomic(path, &encode_checkpoint(ck)?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&fs::read(path)?)
}

// ---- metrics -------------------------------------------------------------

/// One JSON document per line.
pub fn to_jsonl<T: Serialize>(records: &[T]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).map_err(|e| Error::Corrupt(e.to_string()))?);
        out.push('\n');
    }
    Ok(out)
}

pub fn from_jsonl<T: DeserializeOwned>(text: &str) -> Result<Vec<T>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Corrupt(format!("metrics line {}: {e}", i + 1)))
        })
        .collect()
}

pub fn read_metrics(path: &Path) -> Result<Vec<StepRecord>> {
    from_jsonl(&fs::read_to_string(path)?)
}

/// Appends one JSON line to `path`, creating it if needed.
pub fn append_jsonl<T: Serialize>(path: &Path, record: &T) -> Result<()> {
    let mut f = fs::OpenOptions::new().create(true).append(true).open(path)?;
    let line = serde_json::to_string(record).map_err(|e| Error::Corrupt(e.to_string()))?;
    writeln!(f, "{line}")?;
    Ok(())
}
