//! A desk-scale preference model with a low-rank adapter, trained with the
//! Kahneman-Tversky objective.
//!
//! The model scores catalog item `j` for a context vector `c` as
//!
//! ```text
//! s_j = c^T (W + (alpha / r) B A) e_j
//! ```
//!
//! where `W` is frozen, `e_j` is the item's frozen unit embedding and `B A`
//! is the trainable low-rank update. A completion listing items
//! `y_1..y_m` has log-likelihood `sum_i log softmax(s)[y_i]`, the items
//! being treated as independent draws from the catalog.
//!
//! The reference policy of the objective is the same model with the adapter
//! switched off, so no second copy of the weights is kept.

mod adapter;
mod catalog;
mod kto;

use std::collections::HashSet;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use adapter::{
    init_adapter, AdapterCheckpoint, AdapterConfig, AdapterDelta, LowRankAdapter, MatrixData,
    ADAPTER_FORMAT_VERSION,
};
pub use catalog::{Catalog, CatalogFile, CATALOG_FORMAT_VERSION};
pub use kto::{kto_loss, kto_loss_with_reference_point, reference_point, sigmoid, KtoOutput};

use crate::dataset::{Label, PreferenceExample};
use crate::pkg::{Relation, SubPkg};
use crate::prompt::{parse_completion, parse_prompt_pkg};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum LearnerError {
    #[error("item index {index} is outside a catalog of {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("a completion needs at least one item")]
    EmptyItems,
    #[error("a batch needs at least one example")]
    EmptyBatch,
    #[error("duplicate entity iri `{0}` in catalog")]
    DuplicateIri(String),
    #[error("entity `{0}` needs a non-empty iri and label")]
    InvalidEntity(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("unsupported file: {0}")]
    Format(String),
    #[error("k must be at least 1")]
    InvalidK,
}

/// Frozen part of the model: catalog embeddings and the base interaction
/// matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct BaseModel {
    catalog: Catalog,
    weights: DMatrix<f64>,
}

impl BaseModel {
    /// Identity base weights: untrained scores are context/item cosine
    /// similarities.
    pub fn new(catalog: Catalog) -> Self {
        let d = catalog.dim();
        Self {
            catalog,
            weights: DMatrix::identity(d, d),
        }
    }

    pub fn with_weights(catalog: Catalog, weights: DMatrix<f64>) -> Result<Self, LearnerError> {
        let d = catalog.dim();
        if weights.shape() != (d, d) {
            return Err(LearnerError::ShapeMismatch(format!(
                "base weights {:?} for embedding dim {d}",
                weights.shape()
            )));
        }
        Ok(Self { catalog, weights })
    }

    pub fn catalog(&self) -> &Catalog {
        &self.catalog
    }

    pub fn weights(&self) -> &DMatrix<f64> {
        &self.weights
    }

    pub fn dim(&self) -> usize {
        self.catalog.dim()
    }

    fn check_adapter(&self, adapter: &LowRankAdapter) -> Result<(), LearnerError> {
        if adapter.dim() != self.dim() || adapter.b.shape() != (self.dim(), adapter.rank()) {
            return Err(LearnerError::ShapeMismatch(format!(
                "adapter A {:?} B {:?} for embedding dim {}",
                adapter.a.shape(),
                adapter.b.shape(),
                self.dim()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Temperature on the policy/reference log-ratio.
    pub beta: f64,
    pub lambda_desirable: f64,
    pub lambda_undesirable: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub rng_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            beta: 0.1,
            lambda_desirable: 4.0 / 3.0,
            lambda_undesirable: 1.0,
            learning_rate: 0.05,
            epochs: 1,
            batch_size: 8,
            rng_seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), LearnerError> {
        let bad = |msg: String| Err(LearnerError::Config(msg));
        if !(self.beta > 0.0) {
            return bad(format!("train.beta must be positive, got {}", self.beta));
        }
        if !(self.lambda_desirable > 0.0 && self.lambda_undesirable > 0.0) {
            return bad(
                "train.lambda_desirable and train.lambda_undesirable must be positive".into(),
            );
        }
        let ratio = self.lambda_desirable / self.lambda_undesirable;
        // small slack so 4/3 and 3/4 written as decimals are accepted
        if !(0.75 - 1e-9..=4.0 / 3.0 + 1e-9).contains(&ratio) {
            return bad(format!(
                "train.lambda_desirable / train.lambda_undesirable must lie in [3/4, 4/3], got {ratio}"
            ));
        }
        if !(self.learning_rate >= 0.0) {
            return bad("train.learning_rate must be non-negative".into());
        }
        if self.batch_size == 0 {
            return bad("train.batch_size must be at least 1".into());
        }
        Ok(())
    }

    pub fn lambda(&self, label: Label) -> f64 {
        match label {
            Label::Desirable => self.lambda_desirable,
            Label::Undesirable => self.lambda_undesirable,
        }
    }
}

/// Mean embedding of liked entities minus mean embedding of disliked ones.
pub fn context_from_indices(
    model: &BaseModel,
    liked: &[usize],
    disliked: &[usize],
) -> DVector<f64> {
    let mut ctx = DVector::zeros(model.dim());
    for (indices, sign) in [(liked, 1.0), (disliked, -1.0)] {
        if indices.is_empty() {
            continue;
        }
        let mut sum = DVector::zeros(model.dim());
        for &i in indices {
            sum += model.catalog.embeddings().row(i).transpose();
        }
        ctx += sum * (sign / indices.len() as f64);
    }
    ctx
}

/// Context vector for a sub-graph. Entities missing from the catalog are
/// ignored; an empty sub-graph gives the zero vector.
pub fn context_embedding(model: &BaseModel, subpkg: &SubPkg) -> DVector<f64> {
    let mut liked = Vec::new();
    let mut disliked = Vec::new();
    for t in &subpkg.triples {
        if let Some(i) = model.catalog.index_of_iri(&t.object.iri) {
            match t.relation {
                Relation::Liked => liked.push(i),
                Relation::Disliked => disliked.push(i),
            }
        }
    }
    context_from_indices(model, &liked, &disliked)
}

/// Scores of every catalog item; `None` scores with the base weights only.
pub fn scores(
    model: &BaseModel,
    adapter: Option<&LowRankAdapter>,
    context: &DVector<f64>,
) -> DVector<f64> {
    let mut v = model.weights.tr_mul(context);
    if let Some(ad) = adapter {
        let bc = ad.b.tr_mul(context);
        v += ad.a.tr_mul(&bc) * ad.scale();
    }
    model.catalog.embeddings() * v
}

pub fn score(
    model: &BaseModel,
    adapter: &LowRankAdapter,
    context: &DVector<f64>,
    item: usize,
) -> Result<f64, LearnerError> {
    model.check_adapter(adapter)?;
    if item >= model.catalog.len() {
        return Err(LearnerError::IndexOutOfRange {
            index: item,
            len: model.catalog.len(),
        });
    }
    let w = model.weights() + adapter.effective_update();
    Ok(context.dot(&(w * model.catalog.embedding(item))))
}

pub fn log_softmax(scores: &DVector<f64>) -> DVector<f64> {
    let max = scores.max();
    let lse = max + scores.iter().map(|s| (s - max).exp()).sum::<f64>().ln();
    scores.map(|s| s - lse)
}

fn check_items(model: &BaseModel, items: &[usize]) -> Result<(), LearnerError> {
    if items.is_empty() {
        return Err(LearnerError::EmptyItems);
    }
    let len = model.catalog.len();
    match items.iter().find(|&&i| i >= len) {
        Some(&index) => Err(LearnerError::IndexOutOfRange { index, len }),
        None => Ok(()),
    }
}

fn logprob_of(
    model: &BaseModel,
    adapter: Option<&LowRankAdapter>,
    context: &DVector<f64>,
    items: &[usize],
) -> f64 {
    let lp = log_softmax(&scores(model, adapter, context));
    items.iter().map(|&i| lp[i]).sum()
}

/// `sum_i log softmax(scores)[item_i]` under the adapted model.
pub fn policy_logprob(
    model: &BaseModel,
    adapter: &LowRankAdapter,
    context: &DVector<f64>,
    items: &[usize],
) -> Result<f64, LearnerError> {
    model.check_adapter(adapter)?;
    check_items(model, items)?;
    Ok(logprob_of(model, Some(adapter), context, items))
}

/// Same as [`policy_logprob`] with the adapter switched off.
pub fn reference_logprob(
    model: &BaseModel,
    context: &DVector<f64>,
    items: &[usize],
) -> Result<f64, LearnerError> {
    check_items(model, items)?;
    Ok(logprob_of(model, None, context, items))
}

/// An example resolved against the catalog.
#[derive(Debug, Clone, PartialEq)]
pub struct KtoExample {
    pub context: DVector<f64>,
    pub items: Vec<usize>,
    pub label: Label,
}

/// Resolves the prompt's embedded graph and the completion's items against
/// the catalog by normalized label. Unknown labels are dropped; `None` when
/// no completion item is known.
pub fn prepare_example(model: &BaseModel, example: &PreferenceExample) -> Option<KtoExample> {
    let catalog = model.catalog();
    let items: Vec<usize> = parse_completion(&example.completion)
        .iter()
        .filter_map(|l| catalog.index_of_label(l))
        .collect();
    if items.is_empty() {
        return None;
    }
    let pkg = parse_prompt_pkg(&example.prompt).unwrap_or_default();
    let resolve = |labels: &[String]| -> Vec<usize> {
        labels
            .iter()
            .filter_map(|l| catalog.index_of_label(l))
            .collect()
    };
    Some(KtoExample {
        context: context_from_indices(model, &resolve(&pkg.liked), &resolve(&pkg.disliked)),
        items,
        label: example.label,
    })
}

pub fn prepare_examples(model: &BaseModel, examples: &[PreferenceExample]) -> Vec<KtoExample> {
    examples
        .iter()
        .filter_map(|e| prepare_example(model, e))
        .collect()
}

/// Local fine-tuning from the received adapter; returns the parameter change
/// and the number of usable examples.
pub fn train_local(
    examples: &[PreferenceExample],
    model: &BaseModel,
    adapter: &LowRankAdapter,
    cfg: &TrainConfig,
) -> Result<AdapterDelta, LearnerError> {
    train_prepared(&prepare_examples(model, examples), model, adapter, cfg)
}

/// Mini-batch gradient descent on [`kto_loss`], `cfg.epochs` passes over a
/// seed-shuffled order.
pub fn train_prepared(
    examples: &[KtoExample],
    model: &BaseModel,
    adapter: &LowRankAdapter,
    cfg: &TrainConfig,
) -> Result<AdapterDelta, LearnerError> {
    cfg.validate()?;
    model.check_adapter(adapter)?;
    if examples.is_empty() {
        return Ok(AdapterDelta::zeros_like(adapter));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let mut current = adapter.clone();
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut batch: Vec<KtoExample> = Vec::with_capacity(cfg.batch_size);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| examples[i].clone()));
            let out = kto_loss(&batch, model, &current, cfg)?;
            current.a -= &out.grad_a * cfg.learning_rate;
            current.b -= &out.grad_b * cfg.learning_rate;
        }
    }
    Ok(AdapterDelta::between(adapter, &current, examples.len()))
}

/// Top-`k` item indices by score, skipping `exclude`; ties go to the lower
/// index.
pub fn recommend_indices(
    model: &BaseModel,
    adapter: &LowRankAdapter,
    context: &DVector<f64>,
    exclude: &HashSet<usize>,
    k: usize,
) -> Result<Vec<usize>, LearnerError> {
    if k == 0 {
        return Err(LearnerError::InvalidK);
    }
    model.check_adapter(adapter)?;
    let s = scores(model, Some(adapter), context);
    let mut candidates: Vec<usize> = (0..s.len()).filter(|i| !exclude.contains(i)).collect();
    candidates.sort_by(|&x, &y| s[y].total_cmp(&s[x]).then(x.cmp(&y)));
    candidates.truncate(k);
    Ok(candidates)
}

/// Labels of the top-`k` entities not already in the sub-graph. Fewer than
/// `k` when the catalog runs out.
pub fn recommend(
    model: &BaseModel,
    adapter: &LowRankAdapter,
    subpkg: &SubPkg,
    k: usize,
) -> Result<Vec<String>, LearnerError> {
    let exclude: HashSet<usize> = subpkg
        .triples
        .iter()
        .filter_map(|t| model.catalog.index_of_iri(&t.object.iri))
        .collect();
    let ctx = context_embedding(model, subpkg);
    Ok(recommend_indices(model, adapter, &ctx, &exclude, k)?
        .into_iter()
        .map(|i| model.catalog.entities()[i].label.clone())
        .collect())
}
