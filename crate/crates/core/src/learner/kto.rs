//! Kahneman-Tversky objective over a batch of labelled completions.
//!
//! For example `i` with context `c_i` and items `y_i`:
//!
//! ```text
//! r_i  = beta * (log pi(y_i | c_i) - log pi_ref(y_i | c_i))
//! z    = max(0, mean_i beta * (log pi(y_{i+1} | c_i) - log pi_ref(y_{i+1} | c_i)))
//! v_i  = lambda_D * sigmoid(r_i - z)   if desirable
//!        lambda_U * sigmoid(z - r_i)   if undesirable
//! loss = mean_i (lambda_{y_i} - v_i)
//! ```
//!
//! `z` pairs every context with the next example's completion (cyclically)
//! and is held constant when differentiating. Single-example batches use
//! `z = 0`.
//!
//! With `p = softmax(s)` and `g_j = count_j(y) - |y| p_j`, the log-likelihood
//! gradients are
//!
//! ```text
//! d/dA log pi(y | c) = (alpha / r) (B^T c) (E^T g)^T
//! d/dB log pi(y | c) = (alpha / r) c (A E^T g)^T
//! ```

use nalgebra::{DMatrix, DVector};

use super::{
    check_items, log_softmax, scores, BaseModel, KtoExample, LearnerError, LowRankAdapter,
    TrainConfig,
};
use crate::dataset::Label;

#[derive(Debug, Clone, PartialEq)]
pub struct KtoOutput {
    pub loss: f64,
    pub grad_a: DMatrix<f64>,
    pub grad_b: DMatrix<f64>,
    pub rewards: Vec<f64>,
    pub reference_point: f64,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn log_ratio(
    model: &BaseModel,
    adapter: &LowRankAdapter,
    context: &DVector<f64>,
    items: &[usize],
) -> f64 {
    let policy = log_softmax(&scores(model, Some(adapter), context));
    let reference = log_softmax(&scores(model, None, context));
    items.iter().map(|&i| policy[i] - reference[i]).sum()
}

/// KL reference point from mismatched (context, completion) pairs.
pub fn reference_point(
    batch: &[KtoExample],
    model: &BaseModel,
    adapter: &LowRankAdapter,
    cfg: &TrainConfig,
) -> f64 {
    let n = batch.len();
    if n < 2 {
        return 0.0;
    }
    let total: f64 = (0..n)
        .map(|i| cfg.beta * log_ratio(model, adapter, &batch[i].context, &batch[(i + 1) % n].items))
        .sum();
    (total / n as f64).max(0.0)
}

pub fn kto_loss(
    batch: &[KtoExample],
    model: &BaseModel,
    adapter: &LowRankAdapter,
    cfg: &TrainConfig,
) -> Result<KtoOutput, LearnerError> {
    if batch.is_empty() {
        return Err(LearnerError::EmptyBatch);
    }
    model.check_adapter(adapter)?;
    for ex in batch {
        check_items(model, &ex.items)?;
    }
    let z = reference_point(batch, model, adapter, cfg);
    kto_loss_with_reference_point(batch, model, adapter, cfg, z)
}

/// Loss and gradients at a given reference point.
pub fn kto_loss_with_reference_point(
    batch: &[KtoExample],
    model: &BaseModel,
    adapter: &LowRankAdapter,
    cfg: &TrainConfig,
    z: f64,
) -> Result<KtoOutput, LearnerError> {
    if batch.is_empty() {
        return Err(LearnerError::EmptyBatch);
    }
    model.check_adapter(adapter)?;
    let n = batch.len() as f64;
    let scale = adapter.scale();
    let embeddings = model.catalog().embeddings();

    let mut loss = 0.0;
    let mut rewards = Vec::with_capacity(batch.len());
    let mut grad_a = DMatrix::zeros(adapter.a.nrows(), adapter.a.ncols());
    let mut grad_b = DMatrix::zeros(adapter.b.nrows(), adapter.b.ncols());

    for ex in batch {
        check_items(model, &ex.items)?;
        let policy = log_softmax(&scores(model, Some(adapter), &ex.context));
        let reference = log_softmax(&scores(model, None, &ex.context));
        let reward = cfg.beta
            * ex.items
                .iter()
                .map(|&i| policy[i] - reference[i])
                .sum::<f64>();
        rewards.push(reward);

        let lambda = cfg.lambda(ex.label);
        let (value, dloss_dreward) = match ex.label {
            Label::Desirable => {
                let s = sigmoid(reward - z);
                (lambda * s, -lambda * s * (1.0 - s) / n)
            }
            Label::Undesirable => {
                let s = sigmoid(z - reward);
                (lambda * s, lambda * s * (1.0 - s) / n)
            }
        };
        loss += (lambda - value) / n;

        // d logpi / d scores
        let m = ex.items.len() as f64;
        let mut g = policy.map(|lp| -m * lp.exp());
        for &i in &ex.items {
            g[i] += 1.0;
        }
        let q = embeddings.tr_mul(&g);
        let bc = adapter.b.tr_mul(&ex.context);
        let aq = &adapter.a * &q;
        let coeff = dloss_dreward * cfg.beta * scale;
        grad_a += (&bc * q.transpose()) * coeff;
        grad_b += (&ex.context * aq.transpose()) * coeff;
    }

    Ok(KtoOutput {
        loss,
        grad_a,
        grad_b,
        rewards,
        reference_point: z,
    })
}
