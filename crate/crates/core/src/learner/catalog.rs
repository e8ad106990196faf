use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::LearnerError;
use crate::pkg::EntityRef;
use crate::prompt::normalize_label;

pub const CATALOG_FORMAT_VERSION: u32 = 1;

/// Indexed entities with frozen unit-norm embeddings regenerated from a seed.
#[derive(Debug, Clone, PartialEq)]
pub struct Catalog {
    entities: Vec<EntityRef>,
    seed: u64,
    embeddings: DMatrix<f64>,
    by_iri: HashMap<String, usize>,
    by_label: HashMap<String, usize>,
}

/// On-disk form; embeddings are not stored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CatalogFile {
    pub format_version: u32,
    pub embedding_dim: usize,
    pub seed: u64,
    pub entities: Vec<EntityRef>,
}

impl Catalog {
    pub fn new(
        entities: Vec<EntityRef>,
        embedding_dim: usize,
        seed: u64,
    ) -> Result<Self, LearnerError> {
        let embeddings = Self::generate_embeddings(entities.len(), embedding_dim, seed);
        Self::with_embeddings(entities, embeddings, seed)
    }

    /// Explicit embeddings; rows are normalized.
    pub fn with_embeddings(
        entities: Vec<EntityRef>,
        mut embeddings: DMatrix<f64>,
        seed: u64,
    ) -> Result<Self, LearnerError> {
        if embeddings.nrows() != entities.len() || embeddings.ncols() == 0 {
            return Err(LearnerError::ShapeMismatch(format!(
                "{} entities but a {}x{} embedding matrix",
                entities.len(),
                embeddings.nrows(),
                embeddings.ncols()
            )));
        }
        for mut row in embeddings.row_iter_mut() {
            let norm = row.norm();
            if norm > 0.0 {
                row /= norm;
            }
        }
        let mut by_iri = HashMap::with_capacity(entities.len());
        let mut by_label = HashMap::with_capacity(entities.len());
        for (i, e) in entities.iter().enumerate() {
            if e.iri.is_empty() || e.label.is_empty() {
                return Err(LearnerError::InvalidEntity(e.iri.clone()));
            }
            if by_iri.insert(e.iri.clone(), i).is_some() {
                return Err(LearnerError::DuplicateIri(e.iri.clone()));
            }
            // first entity wins on a label collision
            by_label.entry(normalize_label(&e.label)).or_insert(i);
        }
        Ok(Self {
            entities,
            seed,
            embeddings,
            by_iri,
            by_label,
        })
    }

    fn generate_embeddings(n: usize, dim: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = DMatrix::zeros(n, dim);
        for i in 0..n {
            for j in 0..dim {
                m[(i, j)] = rng.sample(StandardNormal);
            }
        }
        m
    }

    pub fn len(&self) -> usize {
        self.entities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entities.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.ncols()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn entities(&self) -> &[EntityRef] {
        &self.entities
    }

    pub fn entity(&self, index: usize) -> Option<&EntityRef> {
        self.entities.get(index)
    }

    pub fn index_of_iri(&self, iri: &str) -> Option<usize> {
        self.by_iri.get(iri).copied()
    }

    /// Lookup by [`normalize_label`] key.
    pub fn index_of_label(&self, label: &str) -> Option<usize> {
        self.by_label.get(&normalize_label(label)).copied()
    }

    /// `len() x dim()` matrix, one unit row per entity.
    pub fn embeddings(&self) -> &DMatrix<f64> {
        &self.embeddings
    }

    pub fn embedding(&self, index: usize) -> DVector<f64> {
        self.embeddings.row(index).transpose()
    }

    pub fn to_file(&self) -> CatalogFile {
        CatalogFile {
            format_version: CATALOG_FORMAT_VERSION,
            embedding_dim: self.dim(),
            seed: self.seed,
            entities: self.entities.clone(),
        }
    }

    pub fn from_file(file: CatalogFile) -> Result<Self, LearnerError> {
        if file.format_version != CATALOG_FORMAT_VERSION {
            return Err(LearnerError::Format(format!(
                "unsupported catalog format_version {}",
                file.format_version
            )));
        }
        Self::new(file.entities, file.embedding_dim, file.seed)
    }
}
