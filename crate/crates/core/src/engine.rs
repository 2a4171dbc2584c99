//! Local MapReduce executor: one Map stage, a deterministic sort-based
//! shuffle, and R Reduce rounds with one on-disk checkpoint per round.
//!
//! Determinism contract: records are globally sorted by (key, value bytes),
//! part boundaries are derived from the data alone (never from the worker
//! count), and key groups are never split across parts or reducer calls, so
//! the bytes of every checkpoint are identical for any number of workers.
//! A `_SUCCESS` marker completes each round; `run_job` resumes after the
//! last complete round it finds, which makes a killed run reproduce the
//! uninterrupted output exactly.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::graph::NodeId;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("map task failed on record {index}: {msg}")]
    MapError { index: usize, msg: String },
    #[error("reduce task failed on key {key}: {msg}")]
    ReduceError { key: ShuffleKey, msg: String },
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Shuffle key: a node id plus an optional re-index suffix. Ordering is id
/// ascending, then unsuffixed before suffixed, then suffix ascending.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ShuffleKey {
    pub id: NodeId,
    pub suffix: Option<u32>,
}

impl ShuffleKey {
    pub fn node(id: NodeId) -> Self {
        ShuffleKey { id, suffix: None }
    }

    pub fn with_suffix(id: NodeId, suffix: u32) -> Self {
        ShuffleKey {
            id,
            suffix: Some(suffix),
        }
    }

    /// Order-preserving byte encoding: big-endian id, then a suffix flag,
    /// then the big-endian suffix when present.
    pub fn encode(&self) -> Vec<u8> {
        let mut b = Vec::with_capacity(13);
        b.extend_from_slice(&self.id.to_be_bytes());
        match self.suffix {
            None => b.push(0),
            Some(s) => {
                b.push(1);
                b.extend_from_slice(&s.to_be_bytes());
            }
        }
        b
    }

    pub fn decode(b: &[u8]) -> Option<Self> {
        let id = NodeId::from_be_bytes(b.get(..8)?.try_into().ok()?);
        match (b.get(8)?, b.len()) {
            (0, 9) => Some(ShuffleKey::node(id)),
            (1, 13) => {
                let s = u32::from_be_bytes(b[9..13].try_into().ok()?);
                Some(ShuffleKey::with_suffix(id, s))
            }
            _ => None,
        }
    }
}

impl std::fmt::Display for ShuffleKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.suffix {
            None => write!(f, "{}", self.id),
            Some(s) => write!(f, "{}#{}", self.id, s),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeyedRecord {
    pub key: ShuffleKey,
    pub value: Vec<u8>,
}

impl KeyedRecord {
    pub fn new(key: ShuffleKey, value: Vec<u8>) -> Self {
        KeyedRecord { key, value }
    }
}

#[derive(Debug, Clone)]
pub struct RoundCheckpoint {
    pub round: usize,
    pub path: PathBuf,
    pub record_count: u64,
    pub parts: usize,
}

#[derive(Debug, Clone)]
pub struct EngineConfig {
    pub workers: usize,
    pub parts: usize,
    pub root: PathBuf,
}

impl EngineConfig {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        EngineConfig {
            workers: 1,
            parts: 8,
            root: root.into(),
        }
    }

    pub fn with_workers(mut self, workers: usize) -> Self {
        self.workers = workers.max(1);
        self
    }

    fn round_dir(&self, round: usize) -> PathBuf {
        self.root.join(format!("round_{round}"))
    }
}

fn pool(workers: usize) -> rayon::ThreadPool {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .expect("thread pool construction")
}

// ====== Checkpoint I/O ======

fn write_round(
    cfg: &EngineConfig,
    round: usize,
    mut records: Vec<KeyedRecord>,
) -> Result<RoundCheckpoint, EngineError> {
    records.sort_by(|a, b| a.key.cmp(&b.key).then_with(|| a.value.cmp(&b.value)));

    // Group sizes drive part boundaries; groups are never split.
    let mut groups: Vec<usize> = Vec::new();
    let mut i = 0;
    while i < records.len() {
        let mut j = i + 1;
        while j < records.len() && records[j].key == records[i].key {
            j += 1;
        }
        groups.push(j - i);
        i = j;
    }
    let total = records.len();
    let parts = cfg.parts.max(1);
    let target = total.div_ceil(parts).max(1);

    let dir = cfg.round_dir(round);
    if dir.exists() {
        std::fs::remove_dir_all(&dir)?;
    }
    std::fs::create_dir_all(&dir)?;

    let mut part_sizes = vec![0usize; parts];
    let mut p = 0;
    for g in groups {
        if part_sizes[p] >= target && p + 1 < parts {
            p += 1;
        }
        part_sizes[p] += g;
    }

    let mut offset = 0;
    for (p, &size) in part_sizes.iter().enumerate() {
        let mut f = std::io::BufWriter::new(std::fs::File::create(
            dir.join(format!("part_{p}.krc")),
        )?);
        for rec in &records[offset..offset + size] {
            let key = rec.key.encode();
            f.write_all(&(key.len() as u32).to_le_bytes())?;
            f.write_all(&key)?;
            f.write_all(&(rec.value.len() as u32).to_le_bytes())?;
            f.write_all(&rec.value)?;
        }
        f.flush()?;
        offset += size;
    }
    std::fs::write(
        dir.join("_SUCCESS"),
        format!("records={total} parts={parts}\n"),
    )?;
    Ok(RoundCheckpoint {
        round,
        path: dir,
        record_count: total as u64,
        parts,
    })
}

fn read_part(path: &Path) -> Result<Vec<KeyedRecord>, EngineError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut records = Vec::new();
    let mut pos = 0;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8], EngineError> {
        let end = *pos + n;
        let s = bytes.get(*pos..end).ok_or_else(|| {
            EngineError::CorruptCheckpoint(format!("{}: truncated record", path.display()))
        })?;
        *pos = end;
        Ok(s)
    };
    while pos < bytes.len() {
        let klen = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let key = ShuffleKey::decode(take(&mut pos, klen)?).ok_or_else(|| {
            EngineError::CorruptCheckpoint(format!("{}: bad key encoding", path.display()))
        })?;
        let vlen = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let value = take(&mut pos, vlen)?.to_vec();
        records.push(KeyedRecord { key, value });
    }
    Ok(records)
}

/// Opens a completed round directory, validating the `_SUCCESS` metadata.
pub fn open_round(cfg: &EngineConfig, round: usize) -> Result<RoundCheckpoint, EngineError> {
    let dir = cfg.round_dir(round);
    let meta = std::fs::read_to_string(dir.join("_SUCCESS")).map_err(|_| {
        EngineError::CorruptCheckpoint(format!("round {round} has no _SUCCESS marker"))
    })?;
    let mut records = None;
    let mut parts = None;
    for field in meta.trim().split(' ') {
        if let Some(v) = field.strip_prefix("records=") {
            records = v.parse::<u64>().ok();
        } else if let Some(v) = field.strip_prefix("parts=") {
            parts = v.parse::<usize>().ok();
        }
    }
    match (records, parts) {
        (Some(record_count), Some(parts)) => Ok(RoundCheckpoint {
            round,
            path: dir,
            record_count,
            parts,
        }),
        _ => Err(EngineError::CorruptCheckpoint(format!(
            "round {round}: bad _SUCCESS metadata {meta:?}"
        ))),
    }
}

/// Reads a checkpoint back as one globally sorted record list, verifying
/// the sort order, the group-split invariant, and the record count.
pub fn read_round(ckpt: &RoundCheckpoint) -> Result<Vec<KeyedRecord>, EngineError> {
    let mut all = Vec::new();
    for p in 0..ckpt.parts {
        let part = read_part(&ckpt.path.join(format!("part_{p}.krc")))?;
        if let (Some(last), Some(first)) = (all.last(), part.first()) {
            let last: &KeyedRecord = last;
            if last.key >= first.key {
                return Err(EngineError::CorruptCheckpoint(format!(
                    "round {}: key group split across parts at {}",
                    ckpt.round, first.key
                )));
            }
        }
        all.extend(part);
    }
    for w in all.windows(2) {
        if (&w[0].key, &w[0].value) > (&w[1].key, &w[1].value) {
            return Err(EngineError::CorruptCheckpoint(format!(
                "round {}: records out of order at key {}",
                ckpt.round, w[1].key
            )));
        }
    }
    if all.len() as u64 != ckpt.record_count {
        return Err(EngineError::CorruptCheckpoint(format!(
            "round {}: expected {} records, found {}",
            ckpt.round,
            ckpt.record_count,
            all.len()
        )));
    }
    Ok(all)
}

// ====== Stages ======

/// Runs the Map stage over `input` on `workers` threads and writes the
/// round-0 checkpoint. Output order is independent of the worker count.
pub fn run_map<I, M>(
    input: &[I],
    mapper: M,
    cfg: &EngineConfig,
) -> Result<RoundCheckpoint, EngineError>
where
    I: Sync,
    M: Fn(&I) -> Result<Vec<KeyedRecord>, String> + Sync,
{
    use rayon::prelude::*;
    let results: Vec<Result<Vec<KeyedRecord>, String>> =
        pool(cfg.workers).install(|| input.par_iter().map(|item| mapper(item)).collect());
    let mut records = Vec::new();
    for (index, r) in results.into_iter().enumerate() {
        match r {
            Ok(out) => records.extend(out),
            Err(msg) => return Err(EngineError::MapError { index, msg }),
        }
    }
    write_round(cfg, 0, records)
}

/// Runs one Reduce round: groups the checkpoint by key, applies the reducer
/// to every group on `workers` threads, and writes round r+1. Values are
/// presented sorted by value bytes; each group is processed exactly once.
pub fn run_reduce_round<R>(
    ckpt: &RoundCheckpoint,
    reducer: R,
    cfg: &EngineConfig,
) -> Result<RoundCheckpoint, EngineError>
where
    R: Fn(&ShuffleKey, &[Vec<u8>]) -> Result<Vec<KeyedRecord>, String> + Sync,
{
    use rayon::prelude::*;
    let records = read_round(ckpt)?;
    let mut groups: Vec<(ShuffleKey, Vec<Vec<u8>>)> = Vec::new();
    for rec in records {
        match groups.last_mut() {
            Some((key, values)) if *key == rec.key => values.push(rec.value),
            _ => groups.push((rec.key, vec![rec.value])),
        }
    }
    let results: Vec<Result<Vec<KeyedRecord>, (ShuffleKey, String)>> =
        pool(cfg.workers).install(|| {
            groups
                .par_iter()
                .map(|(key, values)| reducer(key, values).map_err(|msg| (*key, msg)))
                .collect()
        });
    let mut out = Vec::new();
    for r in results {
        match r {
            Ok(recs) => out.extend(recs),
            Err((key, msg)) => return Err(EngineError::ReduceError { key, msg }),
        }
    }
    write_round(cfg, ckpt.round + 1, out)
}

/// Runs Map plus `rounds` Reduce rounds, resuming after the last round whose
/// checkpoint is already complete on disk. `rounds = 0` returns the Map
/// checkpoint itself.
pub fn run_job<I, M, R>(
    input: &[I],
    mapper: M,
    reducer: R,
    rounds: usize,
    cfg: &EngineConfig,
) -> Result<RoundCheckpoint, EngineError>
where
    I: Sync,
    M: Fn(&I) -> Result<Vec<KeyedRecord>, String> + Sync,
    R: Fn(&ShuffleKey, &[Vec<u8>]) -> Result<Vec<KeyedRecord>, String> + Sync,
{
    let mut done = None;
    for r in (0..=rounds).rev() {
        if let Ok(ckpt) = open_round(cfg, r) {
            done = Some(ckpt);
            break;
        }
    }
    let mut ckpt = match done {
        Some(ckpt) => ckpt,
        None => run_map(input, mapper, cfg)?,
    };
    while ckpt.round < rounds {
        ckpt = run_reduce_round(&ckpt, &reducer, cfg)?;
    }
    Ok(ckpt)
}
