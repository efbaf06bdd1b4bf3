//! Text example parsing, feature hashing and dataset sharding.
//!
//! The example format is newline-delimited UTF-8 text:
//!
//! ```text
//! label [importance] | name[:value] name[:value] ...
//! ```
//!
//! Feature names are hashed with 64-bit FNV-1a and masked to the low `bits`
//! bits, so any implementation in any language lands on the same indices.
//! A name of the form `@123` bypasses hashing and addresses index 123
//! directly; parsed examples serialize back to this form, which makes the
//! parse/serialize round trip exact.

use std::cell::Cell;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const FNV_OFFSET: u64 = 0xcbf29ce484222325;
pub const FNV_PRIME: u64 = 0x100000001b3;

/// 64-bit FNV-1a over `bytes`.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = FNV_OFFSET;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

/// Hash a feature name into `[0, 2^bits)`.
///
/// `bits` must lie in `1..=31`.
pub fn hash_feature(name: &[u8], bits: u32) -> Result<u32> {
    check_bits(bits)?;
    Ok((fnv1a64(name) & ((1u64 << bits) - 1)) as u32)
}

pub fn check_bits(bits: u32) -> Result<()> {
    if !(1..=31).contains(&bits) {
        return Err(Error::Argument(format!(
            "hash bits must be in 1..=31, got {bits}"
        )));
    }
    Ok(())
}

/// One training row: a label, an importance weight and a sparse feature
/// vector with unique, strictly increasing indices.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseExample {
    pub label: f64,
    pub importance: f64,
    /// `(index, value)` pairs, sorted by index, duplicates merged by summing.
    pub features: Vec<(u32, f64)>,
}

impl SparseExample {
    /// Parse one line of the text format, hashing names into `2^bits` indices.
    pub fn parse(line: &str, bits: u32) -> Result<Self> {
        check_bits(bits)?;
        let (head, tail) = line
            .split_once('|')
            .ok_or_else(|| Error::Parse("missing '|' separator".into()))?;

        let mut head_tokens = head.split_whitespace();
        let label_tok = head_tokens
            .next()
            .ok_or_else(|| Error::Parse("missing label".into()))?;
        let label: f64 = label_tok
            .parse()
            .map_err(|_| Error::Parse(format!("malformed label {label_tok:?}")))?;
        if !label.is_finite() {
            return Err(Error::Parse(format!("non-finite label {label_tok:?}")));
        }

        let importance = match head_tokens.next() {
            None => 1.0,
            Some(tok) => {
                let imp: f64 = tok
                    .parse()
                    .map_err(|_| Error::Parse(format!("malformed importance {tok:?}")))?;
                if !(imp.is_finite() && imp > 0.0) {
                    return Err(Error::Parse(format!(
                        "importance must be a positive finite number, got {tok:?}"
                    )));
                }
                imp
            }
        };
        if let Some(extra) = head_tokens.next() {
            return Err(Error::Parse(format!(
                "unexpected token {extra:?} before '|'"
            )));
        }

        let mut features: Vec<(u32, f64)> = Vec::new();
        for tok in tail.split_whitespace() {
            let (name, value) = match tok.split_once(':') {
                None => (tok, 1.0),
                Some((name, val)) => {
                    let v: f64 = val
                        .parse()
                        .map_err(|_| Error::Parse(format!("non-numeric value in {tok:?}")))?;
                    if !v.is_finite() {
                        return Err(Error::Parse(format!("non-finite value in {tok:?}")));
                    }
                    (name, v)
                }
            };
            if name.is_empty() {
                return Err(Error::Parse(format!("empty feature name in {tok:?}")));
            }
            let index = match name.strip_prefix('@') {
                Some(digits) => {
                    let raw: u32 = digits.parse().map_err(|_| {
                        Error::Parse(format!("malformed literal index {name:?}"))
                    })?;
                    if u64::from(raw) >= (1u64 << bits) {
                        return Err(Error::Parse(format!(
                            "literal index {raw} outside 2^{bits} space"
                        )));
                    }
                    raw
                }
                None => hash_feature(name.as_bytes(), bits)?,
            };
            features.push((index, value));
        }

        features.sort_unstable_by_key(|&(i, _)| i);
        features.dedup_by(|b, a| {
            if a.0 == b.0 {
                a.1 += b.1;
                true
            } else {
                false
            }
        });

        Ok(SparseExample {
            label,
            importance,
            features,
        })
    }

    /// Serialize in the literal-index form, `label [imp] | @i:v ...`.
    pub fn to_line(&self) -> String {
        let mut out = String::new();
        if self.importance == 1.0 {
            out.push_str(&format!("{} |", self.label));
        } else {
            out.push_str(&format!("{} {} |", self.label, self.importance));
        }
        for &(i, v) in &self.features {
            out.push_str(&format!(" @{i}:{v}"));
        }
        out
    }

    pub fn max_index(&self) -> Option<u32> {
        self.features.last().map(|&(i, _)| i)
    }
}

/// Read a whole file of examples; errors carry 1-based line numbers.
pub fn load_examples(path: &Path, bits: u32) -> Result<Vec<SparseExample>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut examples = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let ex = SparseExample::parse(&line, bits)
            .map_err(|e| Error::parse_at(idx + 1, e))?;
        examples.push(ex);
    }
    Ok(examples)
}

const THROTTLE_BLOCK: u32 = 64;

/// Emulates a slow node: while iterating a shard, sleeps
/// `(factor - 1) x` the measured compute time, spread across the example
/// loop in blocks.
struct Throttle {
    factor: f64,
    count: Cell<u32>,
    mark: Cell<Instant>,
}

impl Throttle {
    fn new(factor: f64) -> Self {
        Throttle {
            factor,
            count: Cell::new(0),
            mark: Cell::new(Instant::now()),
        }
    }

    fn reset(&self) {
        self.count.set(0);
        self.mark.set(Instant::now());
    }

    fn tick(&self) {
        let c = self.count.get() + 1;
        self.count.set(c);
        if c % THROTTLE_BLOCK == 0 {
            let elapsed = self.mark.get().elapsed();
            let extra = elapsed.as_secs_f64() * (self.factor - 1.0);
            if extra > 0.0 {
                std::thread::sleep(Duration::from_secs_f64(extra));
            }
            self.mark.set(Instant::now());
        }
    }
}

/// An in-memory shard of training examples.
///
/// All passes iterate shards through [`Shard::iter`], which is where the
/// slow-node delay factor (if any) is applied.
pub struct Shard {
    examples: Vec<SparseExample>,
    throttle: Option<Throttle>,
}

impl Shard {
    pub fn from_examples(examples: Vec<SparseExample>) -> Self {
        Shard {
            examples,
            throttle: None,
        }
    }

    /// Load a shard file. `slow_factor > 1` turns on delay emulation.
    pub fn load(path: &Path, bits: u32, slow_factor: f64) -> Result<Self> {
        if slow_factor < 1.0 {
            return Err(Error::Argument(format!(
                "slow factor must be >= 1, got {slow_factor}"
            )));
        }
        let mut shard = Shard::from_examples(load_examples(path, bits)?);
        if slow_factor > 1.0 {
            shard.throttle = Some(Throttle::new(slow_factor));
        }
        Ok(shard)
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn examples(&self) -> &[SparseExample] {
        &self.examples
    }

    /// Iterate the shard in order, applying the delay factor if configured.
    pub fn iter(&self) -> impl Iterator<Item = &SparseExample> + '_ {
        self.iter_slice(0..self.examples.len())
    }

    /// Iterate a sub-range (clamped to the shard), with the same delay
    /// emulation as [`Shard::iter`].
    pub fn iter_slice(
        &self,
        range: std::ops::Range<usize>,
    ) -> impl Iterator<Item = &SparseExample> + '_ {
        let lo = range.start.min(self.examples.len());
        let hi = range.end.min(self.examples.len());
        if let Some(t) = &self.throttle {
            t.reset();
        }
        self.examples[lo..hi].iter().inspect(move |_| {
            if let Some(t) = &self.throttle {
                t.tick();
            }
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShardPolicy {
    RoundRobin,
}

/// Record of a sharding run: shard count, per-shard example counts and an
/// FNV-1a digest of the lines that were distributed.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ShardManifest {
    pub shards: u32,
    pub counts: Vec<u64>,
    pub source_digest: String,
}

fn shard_paths(input: &Path, out_dir: &Path, m: u32) -> Vec<PathBuf> {
    let stem = input
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "data".to_string());
    (0..m)
        .map(|k| out_dir.join(format!("{stem}.shard{k}")))
        .collect()
}

/// Split `input` into `m` shard files, line `i` going to shard `i mod m`.
///
/// Lines are copied verbatim (blank lines are dropped), so the concatenation
/// of the shards is a permutation of the input. Shard sizes differ by at
/// most one. A `manifest.json` is written next to the shards.
pub fn shard_dataset(
    input: &Path,
    out_dir: &Path,
    m: u32,
    policy: ShardPolicy,
) -> Result<(ShardManifest, Vec<PathBuf>)> {
    let ShardPolicy::RoundRobin = policy;
    if m == 0 {
        return Err(Error::Argument("shard count must be >= 1".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let paths = shard_paths(input, out_dir, m);
    let mut writers: Vec<BufWriter<File>> = paths
        .iter()
        .map(|p| File::create(p).map(BufWriter::new).map_err(|e| Error::io(p, e)))
        .collect::<Result<_>>()?;

    let file = File::open(input).map_err(|e| Error::io(input, e))?;
    let mut counts = vec![0u64; m as usize];
    let mut digest = FNV_OFFSET;
    let mut i = 0u64;
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(input, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let k = (i % m as u64) as usize;
        for &b in line.as_bytes() {
            digest ^= b as u64;
            digest = digest.wrapping_mul(FNV_PRIME);
        }
        digest ^= b'\n' as u64;
        digest = digest.wrapping_mul(FNV_PRIME);
        writeln!(writers[k], "{line}").map_err(|e| Error::io(&paths[k], e))?;
        counts[k] += 1;
        i += 1;
    }
    for (w, p) in writers.iter_mut().zip(&paths) {
        w.flush().map_err(|e| Error::io(p, e))?;
    }

    let manifest = ShardManifest {
        shards: m,
        counts,
        source_digest: format!("{digest:016x}"),
    };
    let manifest_path = out_dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Argument(format!("manifest serialization: {e}")))?;
    std::fs::write(&manifest_path, json).map_err(|e| Error::io(&manifest_path, e))?;
    Ok((manifest, paths))
}

/// Overcomplete partition: node `k` receives the round-robin residue classes
/// `k, k+1, ..., k+replication-1 (mod m)`, i.e. `replication/m` of the data.
pub fn shard_overcomplete(
    input: &Path,
    out_dir: &Path,
    m: u32,
    replication: u32,
) -> Result<Vec<PathBuf>> {
    if m == 0 {
        return Err(Error::Argument("shard count must be >= 1".into()));
    }
    if !(1..=m).contains(&replication) {
        return Err(Error::Argument(format!(
            "replication must be in 1..={m}, got {replication}"
        )));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let paths = shard_paths(input, out_dir, m);
    let mut writers: Vec<BufWriter<File>> = paths
        .iter()
        .map(|p| File::create(p).map(BufWriter::new).map_err(|e| Error::io(p, e)))
        .collect::<Result<_>>()?;

    let file = File::open(input).map_err(|e| Error::io(input, e))?;
    let mut i = 0u64;
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(input, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let residue = (i % m as u64) as u32;
        for j in 0..replication {
            let k = ((residue + m - j % m) % m) as usize;
            writeln!(writers[k], "{line}").map_err(|e| Error::io(&paths[k], e))?;
        }
        i += 1;
    }
    for (w, p) in writers.iter_mut().zip(&paths) {
        w.flush().map_err(|e| Error::io(p, e))?;
    }
    Ok(paths)
}
