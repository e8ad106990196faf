//! Offline recommendation metrics and the centralized / federated /
//! local-only ablation grid.
//!
//! Classification metrics pool TP/FP/FN over all cases (micro averaging)
//! unless [`Averaging::Macro`] is requested. Ranking metrics use the rank of
//! the first correct prediction; a case with no correct prediction counts as
//! reciprocal rank 0. Means are accumulated in exact rational arithmetic so
//! reports do not depend on case order.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt::Write as _;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{ToPrimitive, Zero};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Label, PreferenceExample};
use crate::federation::{
    run_centralized, run_local_only, run_training, FederationConfig, FederationError,
};
use crate::learner::{
    context_from_indices, recommend_indices, BaseModel, LearnerError, LowRankAdapter, TrainConfig,
};
use crate::prompt::{normalize_label, parse_completion, parse_prompt_pkg};

/// Cutoffs reported by [`ranking_metrics`].
pub const HITS_KS: [usize; 3] = [1, 3, 10];

pub const DEFAULT_K_PREDICT: usize = 10;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum EvalError {
    #[error("no evaluation cases")]
    Empty,
    #[error(transparent)]
    Learner(#[from] LearnerError),
    #[error(transparent)]
    Federation(#[from] FederationError),
}

/// A held-out positive: the graph the prompt showed and the normalized
/// labels of the reference completion.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalCase {
    pub client_id: String,
    pub liked: Vec<String>,
    pub disliked: Vec<String>,
    pub gold_items: BTreeSet<String>,
}

impl EvalCase {
    /// `None` for undesirable examples and for completions without items.
    pub fn from_example(example: &PreferenceExample) -> Option<Self> {
        if example.label != Label::Desirable {
            return None;
        }
        let gold_items: BTreeSet<String> = parse_completion(&example.completion)
            .iter()
            .map(|l| normalize_label(l))
            .collect();
        if gold_items.is_empty() {
            return None;
        }
        let pkg = parse_prompt_pkg(&example.prompt).unwrap_or_default();
        Some(Self {
            client_id: example.client_id.clone(),
            liked: pkg.liked,
            disliked: pkg.disliked,
            gold_items,
        })
    }
}

pub fn cases_from_examples(examples: &[PreferenceExample]) -> Vec<EvalCase> {
    examples.iter().filter_map(EvalCase::from_example).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub client_id: String,
    /// Normalized, deduplicated, best first.
    pub predicted_items: Vec<String>,
    pub gold_items: BTreeSet<String>,
}

impl PredictionRecord {
    /// Normalizes both sides and drops repeated predictions.
    pub fn new<S: AsRef<str>>(client_id: impl Into<String>, predicted: &[S], gold: &[S]) -> Self {
        let mut seen = HashSet::new();
        let predicted_items = predicted
            .iter()
            .map(|p| normalize_label(p.as_ref()))
            .filter(|p| seen.insert(p.clone()))
            .collect();
        Self {
            client_id: client_id.into(),
            predicted_items,
            gold_items: gold.iter().map(|g| normalize_label(g.as_ref())).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ItemMatch {
    pub tp: BTreeSet<String>,
    pub fp: BTreeSet<String>,
    pub fn_: BTreeSet<String>,
}

pub fn match_items(predicted: &[String], gold: &BTreeSet<String>) -> ItemMatch {
    let predicted: BTreeSet<String> = predicted.iter().cloned().collect();
    ItemMatch {
        tp: predicted.intersection(gold).cloned().collect(),
        fp: predicted.difference(gold).cloned().collect(),
        fn_: gold.difference(&predicted).cloned().collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Averaging {
    #[default]
    Micro,
    Macro,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Classification {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn ratio(num: usize, den: usize) -> BigRational {
    if den == 0 {
        BigRational::zero()
    } else {
        BigRational::new(BigInt::from(num), BigInt::from(den))
    }
}

fn to_f64(r: &BigRational) -> f64 {
    r.to_f64().unwrap_or(0.0)
}

/// `(P, R, F1)` as exact rationals from pooled counts. F1 uses
/// `2TP / (2TP + FP + FN)`, the harmonic mean of P and R written over counts.
fn prf(tp: usize, fp: usize, fn_: usize) -> [BigRational; 3] {
    [
        ratio(tp, tp + fp),
        ratio(tp, tp + fn_),
        ratio(2 * tp, 2 * tp + fp + fn_),
    ]
}

pub fn classification_metrics(
    records: &[PredictionRecord],
    averaging: Averaging,
) -> Result<Classification, EvalError> {
    if records.is_empty() {
        return Err(EvalError::Empty);
    }
    let counts: Vec<(usize, usize, usize)> = records
        .iter()
        .map(|r| {
            let m = match_items(&r.predicted_items, &r.gold_items);
            (m.tp.len(), m.fp.len(), m.fn_.len())
        })
        .collect();
    let [p, r, f] = match averaging {
        Averaging::Micro => {
            let (tp, fp, fn_) = counts
                .iter()
                .fold((0, 0, 0), |acc, c| (acc.0 + c.0, acc.1 + c.1, acc.2 + c.2));
            prf(tp, fp, fn_)
        }
        Averaging::Macro => {
            let mut sums = [
                BigRational::zero(),
                BigRational::zero(),
                BigRational::zero(),
            ];
            for &(tp, fp, fn_) in &counts {
                for (s, v) in sums.iter_mut().zip(prf(tp, fp, fn_)) {
                    *s += v;
                }
            }
            let n = BigRational::from_integer(BigInt::from(records.len()));
            sums.map(|s| s / &n)
        }
    };
    Ok(Classification {
        precision: to_f64(&p),
        recall: to_f64(&r),
        f1: to_f64(&f),
    })
}

/// 1-based position of the first prediction found in the gold set.
pub fn first_correct_rank(record: &PredictionRecord) -> Option<usize> {
    record
        .predicted_items
        .iter()
        .position(|p| record.gold_items.contains(p))
        .map(|i| i + 1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ranking {
    pub mrr: f64,
    pub hits_at: BTreeMap<usize, f64>,
}

pub fn ranking_metrics(records: &[PredictionRecord]) -> Result<Ranking, EvalError> {
    if records.is_empty() {
        return Err(EvalError::Empty);
    }
    let ranks: Vec<Option<usize>> = records.iter().map(first_correct_rank).collect();
    let mut rr = BigRational::zero();
    for r in ranks.iter().flatten() {
        rr += ratio(1, *r);
    }
    let n = records.len();
    let mrr = to_f64(&(rr / BigRational::from_integer(BigInt::from(n))));
    let hits_at = HITS_KS
        .iter()
        .map(|&k| {
            let hits = ranks
                .iter()
                .filter(|r| matches!(r, Some(x) if *x <= k))
                .count();
            (k, to_f64(&ratio(hits, n)))
        })
        .collect();
    Ok(Ranking { mrr, hits_at })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub mrr: f64,
    pub hits_at: BTreeMap<usize, f64>,
    pub n_cases: usize,
}

impl MetricsReport {
    pub fn from_records(
        records: &[PredictionRecord],
        averaging: Averaging,
    ) -> Result<Self, EvalError> {
        let c = classification_metrics(records, averaging)?;
        let r = ranking_metrics(records)?;
        Ok(Self {
            precision: c.precision,
            recall: c.recall,
            f1: c.f1,
            mrr: r.mrr,
            hits_at: r.hits_at,
            n_cases: records.len(),
        })
    }

    pub fn hits(&self, k: usize) -> f64 {
        self.hits_at.get(&k).copied().unwrap_or(0.0)
    }

    /// Field-wise mean of several reports; `n_cases` is the total.
    pub fn mean(reports: &[MetricsReport]) -> Result<Self, EvalError> {
        if reports.is_empty() {
            return Err(EvalError::Empty);
        }
        let n = reports.len() as f64;
        let avg = |f: &dyn Fn(&MetricsReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        Ok(Self {
            precision: avg(&|r| r.precision),
            recall: avg(&|r| r.recall),
            f1: avg(&|r| r.f1),
            mrr: avg(&|r| r.mrr),
            hits_at: HITS_KS.iter().map(|&k| (k, avg(&|r| r.hits(k)))).collect(),
            n_cases: reports.iter().map(|r| r.n_cases).sum(),
        })
    }
}

/// Top-`k` predictions for one case, as normalized labels.
pub fn predict(
    model: &BaseModel,
    adapter: &LowRankAdapter,
    case: &EvalCase,
    k: usize,
) -> Result<PredictionRecord, EvalError> {
    let catalog = model.catalog();
    let resolve = |labels: &[String]| -> Vec<usize> {
        labels
            .iter()
            .filter_map(|l| catalog.index_of_label(l))
            .collect()
    };
    let liked = resolve(&case.liked);
    let disliked = resolve(&case.disliked);
    let context = context_from_indices(model, &liked, &disliked);
    let exclude: HashSet<usize> = liked.iter().chain(&disliked).copied().collect();
    let labels: Vec<String> = recommend_indices(model, adapter, &context, &exclude, k)?
        .into_iter()
        .map(|i| catalog.entities()[i].label.clone())
        .collect();
    let mut record = PredictionRecord::new(case.client_id.clone(), &labels, &[]);
    record.gold_items = case.gold_items.clone();
    Ok(record)
}

pub fn predict_all(
    model: &BaseModel,
    adapter: &LowRankAdapter,
    cases: &[EvalCase],
    k_predict: usize,
) -> Result<Vec<PredictionRecord>, EvalError> {
    cases
        .par_iter()
        .map(|c| predict(model, adapter, c, k_predict))
        .collect()
}

pub fn evaluate(
    model: &BaseModel,
    adapter: &LowRankAdapter,
    cases: &[EvalCase],
    k_predict: usize,
    averaging: Averaging,
) -> Result<MetricsReport, EvalError> {
    if cases.is_empty() {
        return Err(EvalError::Empty);
    }
    MetricsReport::from_records(&predict_all(model, adapter, cases, k_predict)?, averaging)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Setting {
    Centralized,
    Federated,
    LocalOnly,
}

impl Setting {
    pub fn display(self) -> &'static str {
        match self {
            Setting::Centralized => "Centralized",
            Setting::Federated => "Federated",
            Setting::LocalOnly => "Local-only",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub setting: Setting,
    pub synthetic: bool,
    pub report: MetricsReport,
    /// Clients behind a local-only row.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub local_clients: Vec<String>,
}

impl AblationRow {
    pub fn name(&self) -> String {
        if self.synthetic {
            format!("{} +Syn", self.setting.display())
        } else {
            self.setting.display().to_string()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LocalOnlyConfig {
    pub n_users: usize,
    pub min_examples: usize,
    pub rng_seed: u64,
}

impl Default for LocalOnlyConfig {
    fn default() -> Self {
        Self {
            n_users: 10,
            min_examples: 10,
            rng_seed: 0,
        }
    }
}

pub struct AblationInputs<'a> {
    pub real: &'a BTreeMap<String, Vec<PreferenceExample>>,
    pub augmented: &'a BTreeMap<String, Vec<PreferenceExample>>,
    pub test: &'a [EvalCase],
    pub model: &'a BaseModel,
    pub initial: &'a LowRankAdapter,
    pub federation: &'a FederationConfig,
    pub train: &'a TrainConfig,
    pub local: &'a LocalOnlyConfig,
    pub k_predict: usize,
    pub averaging: Averaging,
}

/// The six rows of the comparison table, in its order: centralized,
/// federated and local-only, each without and with synthetic examples.
///
/// Local-only users are sampled among clients that have test cases; each
/// user's adapter is scored on that user's own cases and the row is the mean
/// over users.
pub fn ablation_grid(inputs: &AblationInputs) -> Result<Vec<AblationRow>, EvalError> {
    if inputs.test.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut by_client: BTreeMap<&str, Vec<EvalCase>> = BTreeMap::new();
    for case in inputs.test {
        by_client
            .entry(case.client_id.as_str())
            .or_default()
            .push(case.clone());
    }
    let mut rows = Vec::with_capacity(6);
    for setting in [Setting::Centralized, Setting::Federated, Setting::LocalOnly] {
        for synthetic in [false, true] {
            let data = if synthetic {
                inputs.augmented
            } else {
                inputs.real
            };
            let eval = |ad: &LowRankAdapter, cases: &[EvalCase]| {
                evaluate(inputs.model, ad, cases, inputs.k_predict, inputs.averaging)
            };
            let row = match setting {
                Setting::Centralized => {
                    let ad = run_centralized(data, inputs.model, inputs.initial, inputs.train)?;
                    AblationRow {
                        setting,
                        synthetic,
                        report: eval(&ad, inputs.test)?,
                        local_clients: vec![],
                    }
                }
                Setting::Federated => {
                    let run = run_training(
                        data,
                        inputs.model,
                        inputs.initial,
                        inputs.federation,
                        inputs.train,
                    )?;
                    AblationRow {
                        setting,
                        synthetic,
                        report: eval(&run.adapter, inputs.test)?,
                        local_clients: vec![],
                    }
                }
                Setting::LocalOnly => {
                    let with_tests: BTreeMap<String, Vec<PreferenceExample>> = data
                        .iter()
                        .filter(|(id, _)| by_client.contains_key(id.as_str()))
                        .map(|(id, ex)| (id.clone(), ex.clone()))
                        .collect();
                    let local = inputs.local;
                    let adapters = run_local_only(
                        &with_tests,
                        inputs.model,
                        inputs.initial,
                        inputs.train,
                        local.n_users,
                        local.min_examples,
                        local.rng_seed,
                    )?;
                    let reports = adapters
                        .iter()
                        .map(|(id, ad)| eval(ad, &by_client[id.as_str()]))
                        .collect::<Result<Vec<_>, _>>()?;
                    AblationRow {
                        setting,
                        synthetic,
                        report: MetricsReport::mean(&reports)?,
                        local_clients: adapters.into_iter().map(|(id, _)| id).collect(),
                    }
                }
            };
            rows.push(row);
        }
    }
    Ok(rows)
}

pub const TABLE_HEADER: &str = "Setting,Precision,Recall,F1-score,MRR,Hits@1,Hits@3,Hits@10";

/// CSV with the comparison table's columns, values to 6 decimals.
pub fn rows_to_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from(TABLE_HEADER);
    out.push('\n');
    for row in rows {
        out.push_str(&report_csv_line(&row.name(), &row.report));
        out.push('\n');
    }
    out
}

pub fn report_csv_line(name: &str, r: &MetricsReport) -> String {
    let mut line = name.to_string();
    for v in [
        r.precision,
        r.recall,
        r.f1,
        r.mrr,
        r.hits(1),
        r.hits(3),
        r.hits(10),
    ] {
        let _ = write!(line, ",{v:.6}");
    }
    line
}
