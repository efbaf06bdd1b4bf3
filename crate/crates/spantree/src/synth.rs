//! Synthetic logistic datasets for the examples and the test suite.
//!
//! Examples are sparse binary token vectors in the style of hashed
//! clickthrough data: a fixed vocabulary of token names, a ground-truth
//! weight vector over the hash space, labels sampled from the implied
//! logistic probabilities. Everything is seeded and reproducible.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::data::hash_feature;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct SynthConfig {
    pub examples: usize,
    /// Hash space is `2^bits`.
    pub bits: u32,
    /// Token vocabulary size; tokens are named `f000000..`.
    pub vocab: usize,
    /// Active tokens per example.
    pub nnz: usize,
    /// Standard deviation of the ground-truth margin; larger separates the
    /// classes more cleanly.
    pub margin_scale: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            examples: 10_000,
            bits: 12,
            vocab: 4096,
            nnz: 20,
            margin_scale: 2.0,
            seed: 7,
        }
    }
}

/// Generate text-format example lines.
pub fn generate_lines(cfg: &SynthConfig) -> Result<Vec<String>> {
    if cfg.vocab == 0 || cfg.nnz == 0 || cfg.nnz > cfg.vocab {
        return Err(Error::Argument(format!(
            "need 0 < nnz <= vocab, got nnz={} vocab={}",
            cfg.nnz, cfg.vocab
        )));
    }
    let dim = 1usize << cfg.bits;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let names: Vec<String> = (0..cfg.vocab).map(|t| format!("f{t:06}")).collect();
    let hashed: Vec<u32> = names
        .iter()
        .map(|n| hash_feature(n.as_bytes(), cfg.bits))
        .collect::<Result<_>>()?;

    // Ground-truth weights over the hash space, scaled so the margin of an
    // example with nnz active tokens has the requested deviation.
    let per_coord = Normal::new(0.0, cfg.margin_scale / (cfg.nnz as f64).sqrt())
        .map_err(|e| Error::Argument(format!("margin scale: {e}")))?;
    let truth: Vec<f64> = (0..dim).map(|_| per_coord.sample(&mut rng)).collect();

    let mut lines = Vec::with_capacity(cfg.examples);
    let mut active = Vec::with_capacity(cfg.nnz);
    for _ in 0..cfg.examples {
        active.clear();
        while active.len() < cfg.nnz {
            let t = rng.gen_range(0..cfg.vocab);
            if !active.contains(&t) {
                active.push(t);
            }
        }
        let margin: f64 = active.iter().map(|&t| truth[hashed[t] as usize]).sum();
        let p = crate::loss::sigmoid(margin);
        let label = u8::from(rng.gen::<f64>() < p);
        let mut line = format!("{label} |");
        for &t in &active {
            line.push(' ');
            line.push_str(&names[t]);
        }
        lines.push(line);
    }
    Ok(lines)
}

/// Generate and write a dataset file; returns the number of lines written.
pub fn write_dataset(cfg: &SynthConfig, path: &Path) -> Result<usize> {
    let lines = generate_lines(cfg)?;
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for line in &lines {
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(lines.len())
}
