use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::LearnerError;

pub const ADAPTER_FORMAT_VERSION: u32 = 1;

/// Trainable rank-`r` factor pair. The effective update added to the frozen
/// base weights is `(alpha / r) * B * A`.
#[derive(Debug, Clone, PartialEq)]
pub struct LowRankAdapter {
    /// `r x d`
    pub a: DMatrix<f64>,
    /// `d x r`
    pub b: DMatrix<f64>,
    pub alpha: f64,
}

impl LowRankAdapter {
    pub fn zeros(dim: usize, rank: usize, alpha: f64) -> Self {
        Self {
            a: DMatrix::zeros(rank, dim),
            b: DMatrix::zeros(dim, rank),
            alpha,
        }
    }

    pub fn rank(&self) -> usize {
        self.a.nrows()
    }

    pub fn dim(&self) -> usize {
        self.a.ncols()
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank() as f64
    }

    /// Number of trainable parameters, `2 * r * d`.
    pub fn param_count(&self) -> usize {
        self.a.len() + self.b.len()
    }

    pub fn effective_update(&self) -> DMatrix<f64> {
        (&self.b * &self.a) * self.scale()
    }

    pub fn apply(&mut self, delta: &AdapterDelta) -> Result<(), LearnerError> {
        delta.check_shape(self)?;
        self.a += &delta.a;
        self.b += &delta.b;
        Ok(())
    }

    pub fn to_checkpoint(&self) -> AdapterCheckpoint {
        AdapterCheckpoint {
            format_version: ADAPTER_FORMAT_VERSION,
            rank: self.rank(),
            dim: self.dim(),
            alpha: self.alpha,
            a: MatrixData::from(&self.a),
            b: MatrixData::from(&self.b),
        }
    }

    pub fn from_checkpoint(ckpt: AdapterCheckpoint) -> Result<Self, LearnerError> {
        if ckpt.format_version != ADAPTER_FORMAT_VERSION {
            return Err(LearnerError::Format(format!(
                "unsupported adapter format_version {}",
                ckpt.format_version
            )));
        }
        if ckpt.rank == 0 {
            return Err(LearnerError::Format(
                "adapter rank must be at least 1".into(),
            ));
        }
        let a = ckpt.a.into_matrix()?;
        let b = ckpt.b.into_matrix()?;
        if a.shape() != (ckpt.rank, ckpt.dim) || b.shape() != (ckpt.dim, ckpt.rank) {
            return Err(LearnerError::ShapeMismatch(format!(
                "header says rank {} dim {}, got A {:?} and B {:?}",
                ckpt.rank,
                ckpt.dim,
                a.shape(),
                b.shape()
            )));
        }
        Ok(Self {
            a,
            b,
            alpha: ckpt.alpha,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdapterConfig {
    pub rank: usize,
    pub alpha: f64,
    /// Standard deviation of the gaussian used for `A`.
    pub init_std: f64,
    pub seed: u64,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            rank: 16,
            alpha: 64.0,
            init_std: 0.25,
            seed: 0,
        }
    }
}

/// `A` gaussian, `B` zero: the initial update is exactly zero, so a fresh
/// adapter scores like the frozen base.
pub fn init_adapter<R: Rng + ?Sized>(
    dim: usize,
    cfg: &AdapterConfig,
    rng: &mut R,
) -> Result<LowRankAdapter, LearnerError> {
    if cfg.rank == 0 {
        return Err(LearnerError::Config(
            "adapter.rank must be at least 1".into(),
        ));
    }
    let normal = Normal::new(0.0, cfg.init_std)
        .map_err(|e| LearnerError::Config(format!("adapter.init_std: {e}")))?;
    let mut adapter = LowRankAdapter::zeros(dim, cfg.rank, cfg.alpha);
    for v in adapter.a.iter_mut() {
        *v = normal.sample(rng);
    }
    Ok(adapter)
}

/// Parameter change produced by one local training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterDelta {
    #[serde(with = "matrix_serde")]
    pub a: DMatrix<f64>,
    #[serde(with = "matrix_serde")]
    pub b: DMatrix<f64>,
    /// Usable local examples; the FedAvg weight.
    pub example_count: usize,
}

impl AdapterDelta {
    pub fn zeros_like(adapter: &LowRankAdapter) -> Self {
        Self {
            a: DMatrix::zeros(adapter.a.nrows(), adapter.a.ncols()),
            b: DMatrix::zeros(adapter.b.nrows(), adapter.b.ncols()),
            example_count: 0,
        }
    }

    pub fn zeros_like_delta(other: &AdapterDelta) -> Self {
        Self {
            a: DMatrix::zeros(other.a.nrows(), other.a.ncols()),
            b: DMatrix::zeros(other.b.nrows(), other.b.ncols()),
            example_count: 0,
        }
    }

    pub fn between(
        initial: &LowRankAdapter,
        trained: &LowRankAdapter,
        example_count: usize,
    ) -> Self {
        Self {
            a: &trained.a - &initial.a,
            b: &trained.b - &initial.b,
            example_count,
        }
    }

    pub fn check_shape(&self, adapter: &LowRankAdapter) -> Result<(), LearnerError> {
        if self.a.shape() != adapter.a.shape() || self.b.shape() != adapter.b.shape() {
            return Err(LearnerError::ShapeMismatch(format!(
                "delta A {:?} B {:?} vs adapter A {:?} B {:?}",
                self.a.shape(),
                self.b.shape(),
                adapter.a.shape(),
                adapter.b.shape()
            )));
        }
        Ok(())
    }

    pub fn same_shape(&self, other: &AdapterDelta) -> bool {
        self.a.shape() == other.a.shape() && self.b.shape() == other.b.shape()
    }

    pub fn is_zero(&self) -> bool {
        self.a.iter().chain(self.b.iter()).all(|v| *v == 0.0)
    }
}

/// Row-major matrix with explicit shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatrixData {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl From<&DMatrix<f64>> for MatrixData {
    fn from(m: &DMatrix<f64>) -> Self {
        Self {
            rows: m.nrows(),
            cols: m.ncols(),
            data: m.transpose().iter().copied().collect(),
        }
    }
}

impl MatrixData {
    pub fn into_matrix(self) -> Result<DMatrix<f64>, LearnerError> {
        if self.rows * self.cols != self.data.len() {
            return Err(LearnerError::ShapeMismatch(format!(
                "{}x{} matrix with {} values",
                self.rows,
                self.cols,
                self.data.len()
            )));
        }
        Ok(DMatrix::from_row_slice(self.rows, self.cols, &self.data))
    }
}

mod matrix_serde {
    use super::*;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        MatrixData::from(m).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
        MatrixData::deserialize(d)?
            .into_matrix()
            .map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterCheckpoint {
    pub format_version: u32,
    pub rank: usize,
    pub dim: usize,
    pub alpha: f64,
    pub a: MatrixData,
    pub b: MatrixData,
}
