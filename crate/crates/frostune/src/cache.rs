//! Activation cache for the frozen prefix of a network.
//!
//! Once the first `L` layers are frozen, their forward output for a given
//! sample never changes, so it can be stored once and replayed instead of
//! recomputed. This module provides that store: a memory-first tier that
//! spills to one binary file per sample on disk, an epoch-indexed shuffle
//! map that translates shuffled batch positions back to stable original
//! indices, and a cost rule ([`should_cache`]) plus a pipeline timing model
//! ([`step_time`]) for deciding whether any of it pays off.
//!
//! Capacity is denominated in bytes per tier and is never exceeded: when
//! both tiers are full a new write is simply dropped (drop-newest), because
//! evicting a still-useful record to admit an equally useful one gains
//! nothing. When the frozen boundary deepens, stale shallower records are
//! evicted as they are read; the caller recomputes the missing layers and
//! rewrites, so the number of writes in a deepening epoch never exceeds the
//! number of reads.
//!
//! All operations go through one internal lock, so a reader and a writer
//! stage may run concurrently with the training loop.

use crate::error::{Error, Result};
use std::collections::{BTreeMap, HashMap};
use std::io::{Read as _, Write as _};
use std::path::PathBuf;
use std::sync::Mutex;

/// Leading bytes of every serialized record.
pub const RECORD_MAGIC: [u8; 4] = *b"AFCR";
/// Format version written into every record header.
pub const RECORD_VERSION: u16 = 1;
/// Header: magic (4) + version (2) + original_index (8) + depth (2) + dim (4).
pub const RECORD_HEADER_LEN: usize = 20;
/// Multiplier on the training stage accounting for device-to-host copies.
pub const TRAINER_OVERHEAD: f64 = 1.07;

/// One sample's activations after the first `depth` layers.
#[derive(Debug, Clone, PartialEq)]
pub struct CacheRecord {
    /// Stable dataset index, independent of per-epoch shuffling.
    pub original_index: u64,
    /// How many leading layers the stored activations already account for.
    pub depth: u16,
    /// Activation row at layer `depth`'s output.
    pub values: Vec<f64>,
}

impl CacheRecord {
    /// Serialized size in bytes, used for capacity accounting in both tiers.
    pub fn encoded_len(&self) -> u64 {
        (RECORD_HEADER_LEN + 8 * self.values.len()) as u64
    }

    /// Little-endian binary form: header then the raw activation floats.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len() as usize);
        out.extend_from_slice(&RECORD_MAGIC);
        out.extend_from_slice(&RECORD_VERSION.to_le_bytes());
        out.extend_from_slice(&self.original_index.to_le_bytes());
        out.extend_from_slice(&self.depth.to_le_bytes());
        out.extend_from_slice(&(self.values.len() as u32).to_le_bytes());
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Parses one record, rejecting wrong magic, unknown versions, truncated
    /// payloads, and trailing bytes.
    pub fn decode(bytes: &[u8]) -> Result<CacheRecord> {
        let take = |range: std::ops::Range<usize>| -> Result<&[u8]> {
            bytes
                .get(range)
                .ok_or_else(|| Error::invalid("activation record truncated"))
        };
        if take(0..4)? != RECORD_MAGIC {
            return Err(Error::invalid("activation record has wrong magic bytes"));
        }
        let version = u16::from_le_bytes(take(4..6)?.try_into().unwrap());
        if version != RECORD_VERSION {
            return Err(Error::invalid(format!(
                "activation record version {version} unsupported (expected {RECORD_VERSION})"
            )));
        }
        let original_index = u64::from_le_bytes(take(6..14)?.try_into().unwrap());
        let depth = u16::from_le_bytes(take(14..16)?.try_into().unwrap());
        let dim = u32::from_le_bytes(take(16..20)?.try_into().unwrap()) as usize;
        let expected = RECORD_HEADER_LEN + 8 * dim;
        if bytes.len() != expected {
            return Err(Error::invalid(format!(
                "activation record length {} does not match header (dim {dim} needs {expected})",
                bytes.len()
            )));
        }
        let mut values = Vec::with_capacity(dim);
        for i in 0..dim {
            let start = RECORD_HEADER_LEN + 8 * i;
            values.push(f64::from_le_bytes(take(start..start + 8)?.try_into().unwrap()));
        }
        Ok(CacheRecord { original_index, depth, values })
    }
}

/// True when replaying `frozen_layers` cached layers beats re-reading the
/// batch from storage: caching pays off once the skipped forward time
/// exceeds the read time.
pub fn should_cache(frozen_layers: usize, per_layer_forward_time: f64, batch_read_time: f64) -> bool {
    debug_assert!(per_layer_forward_time >= 0.0 && batch_read_time >= 0.0);
    frozen_layers as f64 * per_layer_forward_time > batch_read_time
}

/// Wall-clock charge for one pipelined step: reader, trainer, and writer run
/// concurrently, so the step costs the slowest stage. The trainer stage
/// carries a fixed 7% overhead for device-to-host copies.
pub fn step_time(
    train_seconds: f64,
    disk_read_bytes: u64,
    disk_write_bytes: u64,
    read_bw: f64,
    write_bw: f64,
) -> f64 {
    let trainer = TRAINER_OVERHEAD * train_seconds;
    let reader = disk_read_bytes as f64 / read_bw;
    let writer = disk_write_bytes as f64 / write_bw;
    trainer.max(reader).max(writer)
}

/// Capacities and disk parameters for a [`CacheManager`].
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct CacheConfig {
    /// Byte budget for records held in process memory.
    pub memory_capacity: u64,
    /// Byte budget for records spilled to `directory`.
    pub disk_capacity: u64,
    /// Disk read bandwidth in bytes/second (timing model only).
    pub disk_read_bw: f64,
    /// Disk write bandwidth in bytes/second (timing model only).
    pub disk_write_bw: f64,
    /// Where spilled records live, one `rec_<index>.bin` file each.
    pub directory: PathBuf,
}

/// Where a completed write landed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WriteOutcome {
    Memory,
    Disk,
    /// Both tiers were full; the record was not stored. Not an error.
    Dropped,
}

/// Cumulative counters, readable at any time via [`CacheManager::stats`].
#[derive(Debug, Clone, Copy, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CacheStats {
    pub hits: u64,
    pub misses: u64,
    pub writes_memory: u64,
    pub writes_disk: u64,
    pub dropped_writes: u64,
    pub evictions: u64,
    pub memory_records: u64,
    pub disk_records: u64,
    pub memory_bytes: u64,
    pub disk_bytes: u64,
    /// Bytes that crossed the disk boundary, for the step timing model.
    pub disk_bytes_read: u64,
    pub disk_bytes_written: u64,
}

struct Inner {
    shuffles: BTreeMap<u64, Vec<usize>>,
    dataset_size: Option<usize>,
    boundary: usize,
    memory: HashMap<u64, CacheRecord>,
    disk: HashMap<u64, u64>, // original index -> encoded size on disk
    stats: CacheStats,
}

/// Memory-first, disk-spill store of frozen-prefix activations.
pub struct CacheManager {
    config: CacheConfig,
    /// Output width of each hidden layer; validates record payloads.
    layer_widths: Vec<usize>,
    inner: Mutex<Inner>,
}

impl CacheManager {
    /// `layer_widths[i]` is the output width of hidden layer `i`, so a
    /// record at depth `d` must carry exactly `layer_widths[d - 1]` floats.
    pub fn new(config: CacheConfig, layer_widths: &[usize]) -> Result<Self> {
        if layer_widths.is_empty() {
            return Err(Error::invalid("cache needs at least one freezable layer"));
        }
        if config.disk_capacity > 0 {
            std::fs::create_dir_all(&config.directory)?;
        }
        Ok(CacheManager {
            config,
            layer_widths: layer_widths.to_vec(),
            inner: Mutex::new(Inner {
                shuffles: BTreeMap::new(),
                dataset_size: None,
                boundary: 0,
                memory: HashMap::new(),
                disk: HashMap::new(),
                stats: CacheStats::default(),
            }),
        })
    }

    /// Registers epoch `epoch`'s permutation: `permutation[k]` is the
    /// original index of the sample at shuffled position `k`. Only the two
    /// most recent epochs are retained.
    pub fn register_shuffle(&self, epoch: u64, permutation: Vec<usize>) -> Result<()> {
        let mut seen = vec![false; permutation.len()];
        for &idx in &permutation {
            if idx >= permutation.len() || seen[idx] {
                return Err(Error::invalid(format!(
                    "shuffle for epoch {epoch} is not a bijection (index {idx})"
                )));
            }
            seen[idx] = true;
        }
        let mut inner = self.inner.lock().unwrap();
        match inner.dataset_size {
            None => inner.dataset_size = Some(permutation.len()),
            Some(n) if n != permutation.len() => {
                return Err(Error::shape("register_shuffle dataset size", n, permutation.len()));
            }
            Some(_) => {}
        }
        inner.shuffles.insert(epoch, permutation);
        while inner.shuffles.len() > 2 {
            let oldest = *inner.shuffles.keys().next().unwrap();
            inner.shuffles.remove(&oldest);
        }
        Ok(())
    }

    /// Original dataset index of shuffled position `k` in `epoch`.
    pub fn resolve(&self, epoch: u64, shuffled_pos: usize) -> Result<u64> {
        let inner = self.inner.lock().unwrap();
        Self::resolve_locked(&inner, epoch, shuffled_pos)
    }

    fn resolve_locked(inner: &Inner, epoch: u64, shuffled_pos: usize) -> Result<u64> {
        let map = inner.shuffles.get(&epoch).ok_or_else(|| {
            Error::invalid(format!("no shuffle registered for epoch {epoch}"))
        })?;
        map.get(shuffled_pos)
            .map(|&idx| idx as u64)
            .ok_or_else(|| Error::invalid(format!("shuffled position {shuffled_pos} out of range")))
    }

    /// Moves the frozen boundary forward. Already-stored shallower records
    /// stay valid and are deepened lazily when next read.
    pub fn advance_boundary(&self, boundary: usize) -> Result<()> {
        let mut inner = self.inner.lock().unwrap();
        if boundary < inner.boundary {
            return Err(Error::invalid(format!(
                "frozen boundary cannot retreat from {} to {boundary}",
                inner.boundary
            )));
        }
        if boundary > self.layer_widths.len() {
            return Err(Error::invalid(format!(
                "frozen boundary {boundary} exceeds the {} freezable layers",
                self.layer_widths.len()
            )));
        }
        inner.boundary = boundary;
        Ok(())
    }

    pub fn boundary(&self) -> usize {
        self.inner.lock().unwrap().boundary
    }

    /// Stores `values` (the activations after the current frozen prefix)
    /// for the sample at shuffled position `shuffled_pos` of `epoch`. The
    /// record lands in memory if it fits, else on disk, else it is dropped.
    pub fn write(&self, epoch: u64, shuffled_pos: usize, values: Vec<f64>) -> Result<WriteOutcome> {
        let mut inner = self.inner.lock().unwrap();
        let depth = inner.boundary;
        if depth == 0 {
            return Err(Error::invalid("cannot cache activations with no layers frozen"));
        }
        let expected = self.layer_widths[depth - 1];
        if values.len() != expected {
            return Err(Error::shape("cache write payload width", expected, values.len()));
        }
        let original_index = Self::resolve_locked(&inner, epoch, shuffled_pos)?;
        let record = CacheRecord { original_index, depth: depth as u16, values };
        self.remove_locked(&mut inner, original_index)?;
        self.admit_locked(&mut inner, record)
    }

    /// Fetches the record for shuffled position `shuffled_pos` of `epoch`.
    /// A record shallower than the current boundary is still returned but is
    /// evicted in the same call: the caller recomputes the remaining layers
    /// and writes the deepened record back.
    pub fn read(&self, epoch: u64, shuffled_pos: usize) -> Result<Option<CacheRecord>> {
        let mut inner = self.inner.lock().unwrap();
        let original_index = Self::resolve_locked(&inner, epoch, shuffled_pos)?;
        let record = if let Some(record) = inner.memory.get(&original_index) {
            record.clone()
        } else if inner.disk.contains_key(&original_index) {
            let bytes = std::fs::read(self.record_path(original_index)).map_err(|e| Error::Record {
                path: self.record_path(original_index),
                message: e.to_string(),
            })?;
            let record = CacheRecord::decode(&bytes)?;
            inner.stats.disk_bytes_read += record.encoded_len();
            record
        } else {
            inner.stats.misses += 1;
            return Ok(None);
        };
        inner.stats.hits += 1;
        if (record.depth as usize) < inner.boundary {
            self.remove_locked(&mut inner, original_index)?;
            inner.stats.evictions += 1;
        }
        Ok(Some(record))
    }

    /// True when a record for this original index currently exists.
    pub fn contains(&self, original_index: u64) -> bool {
        let inner = self.inner.lock().unwrap();
        inner.memory.contains_key(&original_index) || inner.disk.contains_key(&original_index)
    }

    pub fn stats(&self) -> CacheStats {
        self.inner.lock().unwrap().stats
    }

    fn record_path(&self, original_index: u64) -> PathBuf {
        self.config.directory.join(format!("rec_{original_index}.bin"))
    }

    fn remove_locked(&self, inner: &mut Inner, original_index: u64) -> Result<()> {
        if let Some(old) = inner.memory.remove(&original_index) {
            let len = old.encoded_len();
            inner.stats.memory_bytes -= len;
            inner.stats.memory_records -= 1;
        }
        if let Some(size) = inner.disk.remove(&original_index) {
            inner.stats.disk_bytes -= size;
            inner.stats.disk_records -= 1;
            std::fs::remove_file(self.record_path(original_index))?;
        }
        Ok(())
    }

    fn admit_locked(&self, inner: &mut Inner, record: CacheRecord) -> Result<WriteOutcome> {
        let size = record.encoded_len();
        let outcome = if inner.stats.memory_bytes + size <= self.config.memory_capacity {
            inner.stats.memory_bytes += size;
            inner.stats.memory_records += 1;
            inner.stats.writes_memory += 1;
            inner.memory.insert(record.original_index, record);
            WriteOutcome::Memory
        } else if inner.stats.disk_bytes + size <= self.config.disk_capacity {
            let path = self.record_path(record.original_index);
            let mut file = std::fs::File::create(&path).map_err(|e| Error::Record {
                path: path.clone(),
                message: e.to_string(),
            })?;
            file.write_all(&record.encode())?;
            inner.stats.disk_bytes += size;
            inner.stats.disk_records += 1;
            inner.stats.writes_disk += 1;
            inner.stats.disk_bytes_written += size;
            inner.disk.insert(record.original_index, size);
            WriteOutcome::Disk
        } else {
            inner.stats.dropped_writes += 1;
            WriteOutcome::Dropped
        };
        debug_assert!(inner.stats.memory_bytes <= self.config.memory_capacity);
        debug_assert!(inner.stats.disk_bytes <= self.config.disk_capacity);
        Ok(outcome)
    }
}

/// Reads every record out of a multi-record dump written by
/// [`write_record_dump`], in file order.
pub fn read_record_dump(path: &std::path::Path) -> Result<Vec<CacheRecord>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| Error::Record { path: path.to_path_buf(), message: e.to_string() })?
        .read_to_end(&mut bytes)?;
    let mut records = Vec::new();
    let mut offset = 0;
    while offset < bytes.len() {
        if offset + RECORD_HEADER_LEN > bytes.len() {
            return Err(Error::Record {
                path: path.to_path_buf(),
                message: format!("truncated header at byte {offset}"),
            });
        }
        let dim =
            u32::from_le_bytes(bytes[offset + 16..offset + 20].try_into().unwrap()) as usize;
        let end = offset + RECORD_HEADER_LEN + 8 * dim;
        if end > bytes.len() {
            return Err(Error::Record {
                path: path.to_path_buf(),
                message: format!("truncated payload at byte {offset}"),
            });
        }
        records.push(CacheRecord::decode(&bytes[offset..end])?);
        offset = end;
    }
    Ok(records)
}

/// Appends records back to back into one file: the checkpoint activation
/// dump format (same per-record encoding as the cache files).
pub fn write_record_dump(path: &std::path::Path, records: &[CacheRecord]) -> Result<()> {
    let mut file = std::fs::File::create(path).map_err(|e| Error::Record {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    for record in records {
        file.write_all(&record.encode())?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_record() -> CacheRecord {
        CacheRecord {
            original_index: 42,
            depth: 3,
            values: vec![1.5, -2.25, 0.0, f64::MIN_POSITIVE, 1e300],
        }
    }

    #[test]
    fn record_round_trips_bit_for_bit() {
        let record = sample_record();
        let decoded = CacheRecord::decode(&record.encode()).unwrap();
        assert_eq!(decoded, record);
        assert_eq!(record.encode().len() as u64, record.encoded_len());
    }

    #[test]
    fn decode_rejects_corruption() {
        let good = sample_record().encode();

        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        assert!(CacheRecord::decode(&bad_magic).is_err());

        let mut bad_version = good.clone();
        bad_version[4] = 0xFF;
        assert!(CacheRecord::decode(&bad_version).is_err());

        assert!(CacheRecord::decode(&good[..good.len() - 1]).is_err(), "truncated payload");
        assert!(CacheRecord::decode(&good[..10]).is_err(), "truncated header");

        let mut trailing = good.clone();
        trailing.push(0);
        assert!(CacheRecord::decode(&trailing).is_err(), "trailing bytes");
    }

    #[test]
    fn caching_pays_off_only_past_the_break_even_depth() {
        assert!(!should_cache(2, 0.011, 0.025), "22 ms of skipped compute < 25 ms read");
        assert!(should_cache(3, 0.011, 0.025), "33 ms of skipped compute > 25 ms read");
        assert!(!should_cache(0, 1.0, 0.0), "nothing frozen, nothing to skip");
    }

    #[test]
    fn step_charges_the_slowest_pipeline_stage() {
        // Trainer-bound: 1.07 * 1.0 s dominates tiny transfers.
        assert_eq!(step_time(1.0, 1000, 1000, 1e9, 1e9), 1.07);
        // Reader-bound: 3 GB at 1 GB/s dominates a 1 s trainer stage.
        assert_eq!(step_time(1.0, 3_000_000_000, 0, 1e9, 1e9), 3.0);
        // Writer-bound.
        assert_eq!(step_time(0.1, 0, 500_000_000, 1e9, 0.25e9), 2.0);
    }
}
