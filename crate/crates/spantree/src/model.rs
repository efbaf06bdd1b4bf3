//! Model state shared by the learning phases, and the binary model file.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::loss::LossKind;
use crate::{Error, Result};

/// Per-coordinate accumulated squared gradients (the diagonal scaling matrix
/// of the adaptive update). Initialized to the identity, entries only grow.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalingDiag(Vec<f64>);

impl ScalingDiag {
    pub fn identity(dim: usize) -> Self {
        ScalingDiag(vec![1.0; dim])
    }

    /// Wrap precomputed entries; every entry must be >= 1.
    pub fn from_values(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|&v| !(v >= 1.0)) {
            return Err(Error::Argument(
                "scaling entries must all be >= 1".into(),
            ));
        }
        Ok(ScalingDiag(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Which phase of a strategy last produced the state.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Init,
    Online,
    Averaged,
    Batch,
}

/// Weights plus adaptive scaling, a pass counter and the phase tag.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub weights: Vec<f64>,
    pub scaling: ScalingDiag,
    pub passes: u32,
    pub phase: Phase,
}

impl ModelState {
    pub fn new(dim: usize) -> Self {
        ModelState {
            weights: vec![0.0; dim],
            scaling: ScalingDiag::identity(dim),
            passes: 0,
            phase: Phase::Init,
        }
    }

    pub fn dim(&self) -> usize {
        self.weights.len()
    }
}

const MODEL_MAGIC: &[u8; 8] = b"SPTRMDL1";

/// A trained model as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelFile {
    pub bits: u32,
    pub loss: LossKind,
    pub lambda: f64,
    pub weights: Vec<f64>,
}

/// Write `magic, bits(u32), dim(u64), loss(u8), lambda(f64)` followed by the
/// dense weights, everything little-endian. Reloading is bit-exact.
pub fn save_model(
    path: &Path,
    bits: u32,
    loss: LossKind,
    lambda: f64,
    weights: &[f64],
) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let put = |w: &mut BufWriter<File>, bytes: &[u8]| {
        w.write_all(bytes).map_err(|e| Error::io(path, e))
    };
    put(&mut w, MODEL_MAGIC)?;
    put(&mut w, &bits.to_le_bytes())?;
    put(&mut w, &(weights.len() as u64).to_le_bytes())?;
    put(
        &mut w,
        &[match loss {
            LossKind::Logistic => 0u8,
            LossKind::Squared => 1u8,
        }],
    )?;
    put(&mut w, &lambda.to_le_bytes())?;
    for v in weights {
        put(&mut w, &v.to_le_bytes())?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_model(path: &Path) -> Result<ModelFile> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut read_exact = |buf: &mut [u8]| -> Result<()> {
        r.read_exact(buf).map_err(|e| Error::io(path, e))
    };

    let mut magic = [0u8; 8];
    read_exact(&mut magic)?;
    if &magic != MODEL_MAGIC {
        return Err(Error::Parse(format!(
            "{} is not a model file (bad magic)",
            path.display()
        )));
    }
    let mut b4 = [0u8; 4];
    read_exact(&mut b4)?;
    let bits = u32::from_le_bytes(b4);
    let mut b8 = [0u8; 8];
    read_exact(&mut b8)?;
    let dim = u64::from_le_bytes(b8) as usize;
    let mut b1 = [0u8; 1];
    read_exact(&mut b1)?;
    let loss = match b1[0] {
        0 => LossKind::Logistic,
        1 => LossKind::Squared,
        k => return Err(Error::Parse(format!("unknown loss code {k}"))),
    };
    read_exact(&mut b8)?;
    let lambda = f64::from_le_bytes(b8);
    if bits > 31 || dim != 1usize << bits {
        return Err(Error::Parse(format!(
            "model header inconsistent: bits={bits} dim={dim}"
        )));
    }
    let mut weights = vec![0.0f64; dim];
    for v in weights.iter_mut() {
        read_exact(&mut b8)?;
        *v = f64::from_le_bytes(b8);
    }
    Ok(ModelFile {
        bits,
        loss,
        lambda,
        weights,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SparseExample;
    use crate::loss::Objective;

    #[test]
    fn model_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        let weights: Vec<f64> = (0..16).map(|i| (i as f64 * 0.7).sin() / 3.0).collect();
        save_model(&path, 4, LossKind::Logistic, 1e-4, &weights).unwrap();
        let loaded = load_model(&path).unwrap();
        assert_eq!(loaded.bits, 4);
        assert_eq!(loaded.loss, LossKind::Logistic);
        assert_eq!(loaded.lambda, 1e-4);
        assert_eq!(loaded.weights, weights);

        // Reloaded predictions are identical to in-memory ones.
        let obj = Objective::new(LossKind::Logistic, 1e-4, 16).unwrap();
        let x = SparseExample::parse("1 | @3:1.5 @7 @11:-2", 4).unwrap();
        let before = obj.predict(&weights, &x).unwrap();
        let after = obj.predict(&loaded.weights, &x).unwrap();
        assert_eq!(before.margin.to_bits(), after.margin.to_bits());
    }

    #[test]
    fn load_rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.bin");
        std::fs::write(&path, b"definitely not a model").unwrap();
        assert!(load_model(&path).is_err());
    }

    #[test]
    fn scaling_rejects_entries_below_one() {
        assert!(ScalingDiag::from_values(vec![1.0, 0.5]).is_err());
        assert!(ScalingDiag::from_values(vec![1.0, 2.0]).is_ok());
    }
}
