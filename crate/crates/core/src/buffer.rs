//! Append-only replay buffer for rated reflections.
//!
//! On disk the buffer is a JSONL file whose first line is a bare schema tag;
//! every following line is one reflection record. Appends validate the
//! record, serialize it, and flush, under a mutex so concurrent workers can
//! share one writer without interleaving lines. Reads re-validate every
//! record, so a buffer that loads is internally consistent.
//!
//! Records written during collection arrive in sampled pairs that answered
//! the same failed trial; `build_preferences` regroups them by
//! (environment, task, trial) and turns each strictly ordered pair into a
//! preference example, skipping and counting ties.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::{CoreError, PreferencePair, ReflectionRecord};

/// Schema tag on the first line of every buffer file.
pub const BUFFER_SCHEMA: &str = "reflection-replay-v1";

#[derive(Debug, Error)]
pub enum BufferError {
    #[error("buffer schema mismatch: found {found:?}")]
    SchemaMismatch { found: String },
    #[error("no records match the requested filter")]
    EmptyBuffer,
    #[error("preference group {key} has {size} records instead of 2")]
    MalformedGroup { key: String, size: usize },
    #[error(transparent)]
    Record(#[from] CoreError),
    #[error("bad record line {line}: {detail}")]
    Format { line: usize, detail: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Shared-writer handle to one buffer file.
pub struct ReplayBuffer {
    path: PathBuf,
    writer: Mutex<BufWriter<File>>,
}

impl ReplayBuffer {
    /// Creates (or truncates) a buffer file and writes the schema header.
    pub fn create(path: &Path) -> Result<Self, BufferError> {
        let mut file = File::create(path)?;
        writeln!(file, "{BUFFER_SCHEMA}")?;
        file.flush()?;
        Ok(Self {
            path: path.to_path_buf(),
            writer: Mutex::new(BufWriter::new(OpenOptions::new().append(true).open(path)?)),
        })
    }

    /// Opens an existing buffer for appending after checking its header.
    pub fn open_append(path: &Path) -> Result<Self, BufferError> {
        let mut header = String::new();
        BufReader::new(File::open(path)?).read_line(&mut header)?;
        let found = header.trim_end_matches('\n');
        if found != BUFFER_SCHEMA {
            return Err(BufferError::SchemaMismatch { found: found.to_string() });
        }
        Ok(Self {
            path: path.to_path_buf(),
            writer: Mutex::new(BufWriter::new(OpenOptions::new().append(true).open(path)?)),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Validates and appends one record, flushing so that readers and other
    /// processes always see whole lines.
    pub fn append(&self, record: &ReflectionRecord) -> Result<(), BufferError> {
        record.validate()?;
        let line = serde_json::to_string(record)
            .map_err(|e| BufferError::Format { line: 0, detail: e.to_string() })?;
        let mut writer = self.writer.lock().expect("buffer writer poisoned");
        writeln!(writer, "{line}")?;
        writer.flush()?;
        Ok(())
    }

    /// Reads and validates every record in a buffer file.
    pub fn read_all(path: &Path) -> Result<Vec<ReflectionRecord>, BufferError> {
        let reader = BufReader::new(File::open(path)?);
        let mut records = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if i == 0 {
                if line != BUFFER_SCHEMA {
                    return Err(BufferError::SchemaMismatch { found: line });
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let record: ReflectionRecord = serde_json::from_str(&line)
                .map_err(|e| BufferError::Format { line: i + 1, detail: e.to_string() })?;
            record.validate()?;
            records.push(record);
        }
        Ok(records)
    }
}

/// Rating predicate used when drawing training batches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RatingFilter {
    All,
    /// Strictly positive ratings: the retry improved the return.
    Positive,
    /// Strictly negative ratings: the retry regressed.
    Negative,
}

impl RatingFilter {
    pub fn matches(&self, rating: f64) -> bool {
        match self {
            RatingFilter::All => true,
            RatingFilter::Positive => rating > 0.0,
            RatingFilter::Negative => rating < 0.0,
        }
    }
}

/// Draws a deterministic batch from the filtered records: without
/// replacement when enough records exist, with replacement otherwise.
pub fn sample_batch(
    records: &[ReflectionRecord],
    filter: RatingFilter,
    batch_size: usize,
    seed: u64,
) -> Result<Vec<ReflectionRecord>, BufferError> {
    let pool: Vec<&ReflectionRecord> =
        records.iter().filter(|r| filter.matches(r.rating)).collect();
    if pool.is_empty() || batch_size == 0 {
        return Err(BufferError::EmptyBuffer);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let batch = if pool.len() >= batch_size {
        rand::seq::index::sample(&mut rng, pool.len(), batch_size)
            .iter()
            .map(|i| pool[i].clone())
            .collect()
    } else {
        (0..batch_size)
            .map(|_| pool[rng.random_range(0..pool.len())].clone())
            .collect()
    };
    Ok(batch)
}

/// Result of pairing a buffer into preference examples.
#[derive(Debug, Clone, PartialEq)]
pub struct PreferenceBuild {
    pub pairs: Vec<PreferencePair>,
    /// Groups whose two ratings were equal and carried no signal.
    pub ties_skipped: usize,
}

/// Groups records by (environment, task, trial) and builds one preference
/// pair per strictly ordered group. Every group must hold exactly the two
/// responses sampled for that trial; anything else is a malformed buffer.
pub fn build_preferences(records: &[ReflectionRecord]) -> Result<PreferenceBuild, BufferError> {
    let mut groups: BTreeMap<String, Vec<&ReflectionRecord>> = BTreeMap::new();
    for record in records {
        let key = format!("{}/{}/{}", record.env_id, record.task_id, record.trial_index);
        groups.entry(key).or_default().push(record);
    }
    let mut pairs = Vec::new();
    let mut ties_skipped = 0;
    for (key, group) in groups {
        if group.len() != 2 {
            return Err(BufferError::MalformedGroup { key, size: group.len() });
        }
        match PreferencePair::from_records(group[0], group[1]) {
            Ok(pair) => pairs.push(pair),
            Err(CoreError::NotStrictlyOrdered { .. }) => ties_skipped += 1,
            Err(e) => return Err(BufferError::Record(e)),
        }
    }
    Ok(PreferenceBuild { pairs, ties_skipped })
}
