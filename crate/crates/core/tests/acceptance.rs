//! End-to-end acceptance checks, one line of output per criterion.
//!
//! Runs as a plain binary (`harness = false`) so the summary is printed even
//! when everything passes. Exits non-zero if any criterion fails.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use fedpkg::bench::{run_trials, BenchConfig};
use fedpkg::dataset::{
    partition_examples, ConversationLog, Label, PreferenceExample, Sentiment, SpeakerRole,
};
use fedpkg::eval::{
    classification_metrics, first_correct_rank, ranking_metrics, Averaging, PredictionRecord,
};
use fedpkg::federation::{
    aggregate, aggregation_weights, comm_cost_report, run_training, Aggregation, FederationConfig,
    ModelPreset,
};
use fedpkg::io::read_jsonl;
use fedpkg::learner::{
    kto_loss, AdapterDelta, BaseModel, Catalog, KtoExample, LowRankAdapter, TrainConfig,
};
use fedpkg::pipeline::{
    evaluate_files, initial_adapter, load_model, train, EvalOptions, EvalPaths, TrainMode,
    TrainPaths,
};
use fedpkg::pkg::{EntityRef, PersonalKnowledgeGraph, PreferenceTriple, Relation};
use fedpkg::prompt::{format_completion, normalize_label, parse_completion};
use nalgebra::{DMatrix, DVector};
use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{ToPrimitive, Zero};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

// 1 -----------------------------------------------------------------------

fn comm_cost_table() -> Outcome {
    let expected = [
        (ModelPreset::Small, "38.50 MB", "38.5 GB"),
        (ModelPreset::Medium, "66.50 MB", "66.5 GB"),
        (ModelPreset::Large, "126.00 MB", "126.0 GB"),
    ];
    let cfg = FederationConfig::default();
    ensure!(
        cfg.total_rounds == 128 && cfg.clients_per_round == 4 && cfg.bytes_per_param == 4,
        "defaults differ from 128 rounds x 4 clients x 4 bytes"
    );
    let mut shown = Vec::new();
    for (preset, mb, gb) in expected {
        let report =
            comm_cost_report(preset.trainable_params(), &cfg).map_err(|e| e.to_string())?;
        let got = report.summary();
        ensure!(
            got == format!("{mb} / {gb}"),
            "{}: got {got}, expected {mb} / {gb}",
            preset.name()
        );
        // independent arithmetic straight from the parameter count
        let bytes = preset.trainable_params() as f64 * 4.0;
        let mib = format!("{:.2} MB", bytes / 1024f64.powi(2));
        let gib = format!("{:.1} GB", bytes * 2.0 * 4.0 * 128.0 / 1024f64.powi(3));
        ensure!(
            mib == mb && gib == gb,
            "{}: oracle gives {mib} / {gib}",
            preset.name()
        );
        shown.push(got);
    }
    Ok(shown.join(", "))
}

// 2 -----------------------------------------------------------------------

fn ledger_matches_report() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let paths = common::movie_dataset(dir.path());
    let model = load_model(&paths.catalog).map_err(|e| e.to_string())?;
    let cfg = common::run_config(dir.path(), "");
    let initial = initial_adapter(&model, &cfg).map_err(|e| e.to_string())?;
    let examples: Vec<PreferenceExample> = read_jsonl(&paths.train).map_err(|e| e.to_string())?;
    let clients = partition_examples(&examples);
    let params = ModelPreset::Small.trainable_params();
    let fed = FederationConfig {
        padded_param_count: Some(params),
        ..FederationConfig::default()
    };
    let run =
        run_training(&clients, &model, &initial, &fed, &cfg.train).map_err(|e| e.to_string())?;
    ensure!(
        run.rounds.len() == 128,
        "{} rounds recorded",
        run.rounds.len()
    );
    let expected = comm_cost_report(params, &fed)
        .map_err(|e| e.to_string())?
        .total_server_bytes;
    let got = run.ledger.total_bytes;
    let rel = (got as f64 - expected as f64).abs() / expected as f64;
    ensure!(
        rel <= 1e-4,
        "ledger {got} vs report {expected} (rel {rel:e})"
    );
    Ok(format!(
        "ledger {got} B over {} entries, report {expected} B, rel diff {rel:e}",
        run.ledger.entries.len()
    ))
}

// 3 -----------------------------------------------------------------------

// Scalar re-derivation of the model and loss, written without nalgebra
// products so it shares no code path with the library.

fn oracle_scores(
    w: &DMatrix<f64>,
    e: &DMatrix<f64>,
    ad: Option<&LowRankAdapter>,
    c: &[f64],
) -> Vec<f64> {
    let d = w.nrows();
    let mut m = vec![vec![0.0; d]; d];
    for (i, row) in m.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = w[(i, j)];
            if let Some(ad) = ad {
                let r = ad.a.nrows();
                let ba: f64 = (0..r).map(|k| ad.b[(i, k)] * ad.a[(k, j)]).sum();
                *v += ad.alpha / r as f64 * ba;
            }
        }
    }
    (0..e.nrows())
        .map(|item| {
            let mut s = 0.0;
            for i in 0..d {
                for j in 0..d {
                    s += c[i] * m[i][j] * e[(item, j)];
                }
            }
            s
        })
        .collect()
}

fn oracle_logprob(
    model: &BaseModel,
    ad: Option<&LowRankAdapter>,
    c: &[f64],
    items: &[usize],
) -> f64 {
    let s = oracle_scores(model.weights(), model.catalog().embeddings(), ad, c);
    let lse = s.iter().map(|v| v.exp()).sum::<f64>().ln();
    items.iter().map(|&i| s[i] - lse).sum()
}

fn oracle_reward(
    model: &BaseModel,
    ad: &LowRankAdapter,
    beta: f64,
    c: &DVector<f64>,
    items: &[usize],
) -> f64 {
    let c: Vec<f64> = c.iter().copied().collect();
    beta * (oracle_logprob(model, Some(ad), &c, items) - oracle_logprob(model, None, &c, items))
}

fn oracle_z(
    batch: &[KtoExample],
    model: &BaseModel,
    ad: &LowRankAdapter,
    cfg: &TrainConfig,
) -> f64 {
    let n = batch.len();
    if n < 2 {
        return 0.0;
    }
    let total: f64 = (0..n)
        .map(|i| {
            oracle_reward(
                model,
                ad,
                cfg.beta,
                &batch[i].context,
                &batch[(i + 1) % n].items,
            )
        })
        .sum();
    (total / n as f64).max(0.0)
}

fn oracle_loss(
    batch: &[KtoExample],
    model: &BaseModel,
    ad: &LowRankAdapter,
    cfg: &TrainConfig,
    z: f64,
) -> f64 {
    let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
    batch
        .iter()
        .map(|ex| {
            let r = oracle_reward(model, ad, cfg.beta, &ex.context, &ex.items);
            match ex.label {
                Label::Desirable => cfg.lambda_desirable * (1.0 - sig(r - z)),
                Label::Undesirable => cfg.lambda_undesirable * (1.0 - sig(z - r)),
            }
        })
        .sum::<f64>()
        / batch.len() as f64
}

fn gaussian(rng: &mut ChaCha8Rng, r: usize, c: usize, s: f64) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| s * rng.sample::<f64, _>(StandardNormal))
}

fn random_instance(seed: u64) -> (BaseModel, LowRankAdapter, Vec<KtoExample>, TrainConfig) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = rng.random_range(2..=8);
    let r = rng.random_range(1..=4);
    let n = rng.random_range(3..=20);
    let entities = (0..n)
        .map(|i| EntityRef::new(format!("e{i}"), format!("Item {i}"), "Movie"))
        .collect();
    let catalog = Catalog::new(entities, d, rng.random()).unwrap();
    let model = BaseModel::with_weights(catalog, gaussian(&mut rng, d, d, 0.5)).unwrap();
    let adapter = LowRankAdapter {
        a: gaussian(&mut rng, r, d, 0.3),
        b: gaussian(&mut rng, d, r, 0.3),
        alpha: rng.random_range(0.5..8.0),
    };
    let size = rng.random_range(2..=6);
    let batch = (0..size)
        .map(|i| KtoExample {
            context: DVector::from_fn(d, |_, _| rng.sample(StandardNormal)),
            items: (0..rng.random_range(1..=3))
                .map(|_| rng.random_range(0..n))
                .collect(),
            // alternate so every batch mixes both labels
            label: if i % 2 == 0 {
                Label::Desirable
            } else {
                Label::Undesirable
            },
        })
        .collect();
    let cfg = TrainConfig {
        beta: rng.random_range(0.1..2.0),
        ..TrainConfig::default()
    };
    (model, adapter, batch, cfg)
}

fn rel_err(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale < 1e-8 {
        (a - b).abs()
    } else {
        (a - b).abs() / scale
    }
}

fn gradient_check() -> Outcome {
    let instances = 200;
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for seed in 0..instances {
        let (model, adapter, batch, cfg) = random_instance(seed);
        let out = kto_loss(&batch, &model, &adapter, &cfg).map_err(|e| e.to_string())?;
        let z = oracle_z(&batch, &model, &adapter, &cfg);
        ensure!(
            (out.reference_point - z).abs() < 1e-12,
            "seed {seed}: reference point {} vs {z}",
            out.reference_point
        );
        let loss = oracle_loss(&batch, &model, &adapter, &cfg, z);
        ensure!(
            (out.loss - loss).abs() < 1e-12,
            "seed {seed}: loss {} vs {loss}",
            out.loss
        );
        for on_a in [true, false] {
            let (rows, cols) = if on_a {
                adapter.a.shape()
            } else {
                adapter.b.shape()
            };
            for i in 0..rows {
                for j in 0..cols {
                    let mut plus = adapter.clone();
                    let mut minus = adapter.clone();
                    let (p, m, analytic) = if on_a {
                        (&mut plus.a, &mut minus.a, out.grad_a[(i, j)])
                    } else {
                        (&mut plus.b, &mut minus.b, out.grad_b[(i, j)])
                    };
                    p[(i, j)] += h;
                    m[(i, j)] -= h;
                    // the reference point is a constant of the gradient
                    let numeric = (oracle_loss(&batch, &model, &plus, &cfg, z)
                        - oracle_loss(&batch, &model, &minus, &cfg, z))
                        / (2.0 * h);
                    worst = worst.max(rel_err(analytic, numeric));
                }
            }
        }
    }
    ensure!(
        worst < 1e-4,
        "max relative error {worst:e} over {instances} instances"
    );
    Ok(format!(
        "{instances} instances, max relative error {worst:.2e}"
    ))
}

// 4 -----------------------------------------------------------------------

fn initial_loss() -> Outcome {
    let mut worst: f64 = 0.0;
    for seed in 0..20u64 {
        let (model, mut adapter, mut batch, _) = random_instance(1000 + seed);
        adapter.b.fill(0.0);
        if batch.len() % 2 == 1 {
            batch.pop();
        }
        let cfg = TrainConfig::default();
        let out = kto_loss(&batch, &model, &adapter, &cfg).map_err(|e| e.to_string())?;
        worst = worst.max((out.loss - 7.0 / 12.0).abs());
    }
    ensure!(worst <= 1e-12, "loss deviates from 7/12 by {worst:e}");
    Ok(format!(
        "20 balanced batches, max |loss - 7/12| = {worst:.1e}"
    ))
}

// 5 -----------------------------------------------------------------------

fn ratio(n: usize, d: usize) -> BigRational {
    if d == 0 {
        BigRational::zero()
    } else {
        BigRational::new(BigInt::from(n), BigInt::from(d))
    }
}

fn close(a: f64, b: &BigRational) -> bool {
    (a - b.to_f64().unwrap()).abs() < 1e-12
}

/// Pools counts with explicit membership loops and applies the formulas.
fn brute_force(
    records: &[PredictionRecord],
) -> (
    BigRational,
    BigRational,
    BigRational,
    BigRational,
    [BigRational; 3],
) {
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    let mut rr = BigRational::zero();
    let mut hits = [0usize; 3];
    for rec in records {
        for p in &rec.predicted_items {
            if rec.gold_items.iter().any(|g| g == p) {
                tp += 1;
            } else {
                fp += 1;
            }
        }
        for g in &rec.gold_items {
            if !rec.predicted_items.iter().any(|p| p == g) {
                fn_ += 1;
            }
        }
        let mut rank = None;
        for (i, p) in rec.predicted_items.iter().enumerate() {
            if rec.gold_items.contains(p) {
                rank = Some(i + 1);
                break;
            }
        }
        if let Some(r) = rank {
            rr += ratio(1, r);
            for (slot, k) in [1, 3, 10].iter().enumerate() {
                if r <= *k {
                    hits[slot] += 1;
                }
            }
        }
    }
    let p = ratio(tp, tp + fp);
    let r = ratio(tp, tp + fn_);
    let f1 = if (&p + &r).is_zero() {
        BigRational::zero()
    } else {
        BigRational::from_integer(2.into()) * &p * &r / (&p + &r)
    };
    let n = records.len();
    (
        p,
        r,
        f1,
        rr / BigRational::from_integer(n.into()),
        hits.map(|h| ratio(h, n)),
    )
}

fn random_records(rng: &mut ChaCha8Rng) -> Vec<PredictionRecord> {
    let pool: Vec<String> = (0..15).map(|i| format!("Film {i}")).collect();
    (0..rng.random_range(1..=20))
        .map(|i| {
            let pred_len = rng.random_range(0..=12);
            let pred: Vec<&String> = pool.choose_multiple(rng, pred_len).collect();
            let gold_len = rng.random_range(1..=4);
            let gold: Vec<&String> = pool.choose_multiple(rng, gold_len).collect();
            PredictionRecord::new(format!("c{i}"), &pred, &gold)
        })
        .collect()
}

fn metric_oracle() -> Outcome {
    let hand = PredictionRecord::new("c", &["A", "B", "C"], &["B", "D"]);
    let cls = classification_metrics(std::slice::from_ref(&hand), Averaging::Micro)
        .map_err(|e| e.to_string())?;
    ensure!(
        cls.precision == 1.0 / 3.0 && cls.recall == 0.5 && (cls.f1 - 0.4).abs() < 1e-15,
        "hand case gave {cls:?}"
    );
    ensure!(
        first_correct_rank(&hand) == Some(2),
        "hand case rank {:?}",
        first_correct_rank(&hand)
    );

    let fixtures = 200;
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    for f in 0..fixtures {
        let records = random_records(&mut rng);
        let cls = classification_metrics(&records, Averaging::Micro).map_err(|e| e.to_string())?;
        let rank = ranking_metrics(&records).map_err(|e| e.to_string())?;
        let (p, r, f1, mrr, hits) = brute_force(&records);
        ensure!(
            close(cls.precision, &p),
            "fixture {f}: precision {} vs {p}",
            cls.precision
        );
        ensure!(
            close(cls.recall, &r),
            "fixture {f}: recall {} vs {r}",
            cls.recall
        );
        ensure!(close(cls.f1, &f1), "fixture {f}: f1 {} vs {f1}", cls.f1);
        ensure!(
            close(rank.mrr, &mrr),
            "fixture {f}: mrr {} vs {mrr}",
            rank.mrr
        );
        for (k, h) in [1, 3, 10].iter().zip(&hits) {
            ensure!(
                close(rank.hits_at[k], h),
                "fixture {f}: hits@{k} {} vs {h}",
                rank.hits_at[k]
            );
        }
    }
    Ok(format!(
        "hand case P 1/3 R 1/2 F1 0.4 rank 2; {fixtures} random fixtures agree"
    ))
}

// 6 -----------------------------------------------------------------------

fn exact(x: f64) -> BigRational {
    BigRational::from_float(x).expect("finite")
}

fn random_delta(rng: &mut ChaCha8Rng, r: usize, d: usize, count: usize) -> AdapterDelta {
    AdapterDelta {
        a: DMatrix::from_fn(r, d, |_, _| {
            rng.sample::<f64, _>(StandardNormal) * 10f64.powi(rng.random_range(-3..3))
        }),
        b: DMatrix::from_fn(d, r, |_, _| rng.sample::<f64, _>(StandardNormal)),
        example_count: count,
    }
}

fn components(d: &AdapterDelta) -> Vec<f64> {
    d.a.iter().chain(d.b.iter()).copied().collect()
}

fn aggregation_properties() -> Outcome {
    let sets = 1000;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let w31 = aggregation_weights(&[3, 1], Aggregation::FedavgWeighted);
    ensure!(w31 == vec![0.75, 0.25], "(3,1) weights {w31:?}");
    for s in 0..sets {
        let (r, d) = (rng.random_range(1..=3), rng.random_range(1..=5));
        let n = rng.random_range(2..=6);
        let deltas: Vec<AdapterDelta> = (0..n)
            .map(|_| {
                let count = rng.random_range(1..=30);
                random_delta(&mut rng, r, d, count)
            })
            .collect();
        let agg = components(
            &aggregate(&deltas, Aggregation::FedavgWeighted).map_err(|e| e.to_string())?,
        );

        // identical inputs are a fixed point whatever the counts
        let same: Vec<AdapterDelta> = deltas
            .iter()
            .map(|x| AdapterDelta {
                example_count: x.example_count,
                ..deltas[0].clone()
            })
            .collect();
        let fixed = aggregate(&same, Aggregation::FedavgWeighted).map_err(|e| e.to_string())?;
        ensure!(
            fixed.a == deltas[0].a && fixed.b == deltas[0].b,
            "set {s}: identical deltas moved"
        );

        let mut shuffled = deltas.clone();
        shuffled.shuffle(&mut rng);
        let permuted = components(
            &aggregate(&shuffled, Aggregation::FedavgWeighted).map_err(|e| e.to_string())?,
        );
        ensure!(permuted == agg, "set {s}: order changed the result");

        let inputs: Vec<Vec<f64>> = deltas.iter().map(components).collect();
        for (i, v) in agg.iter().enumerate() {
            let lo = inputs.iter().map(|c| c[i]).fold(f64::INFINITY, f64::min);
            let hi = inputs
                .iter()
                .map(|c| c[i])
                .fold(f64::NEG_INFINITY, f64::max);
            ensure!(
                lo <= *v && *v <= hi,
                "set {s}: component {i} = {v} outside [{lo}, {hi}]"
            );
        }

        // the two-client example with counts 3 and 1
        let pair = vec![
            AdapterDelta {
                example_count: 3,
                ..deltas[0].clone()
            },
            AdapterDelta {
                example_count: 1,
                ..deltas[1].clone()
            },
        ];
        let got =
            components(&aggregate(&pair, Aggregation::FedavgWeighted).map_err(|e| e.to_string())?);
        let (x, y) = (components(&pair[0]), components(&pair[1]));
        for i in 0..got.len() {
            let want = (exact(x[i]) * BigRational::from_integer(3.into()) + exact(y[i]))
                / BigRational::from_integer(4.into());
            ensure!(
                got[i] == want.to_f64().unwrap(),
                "set {s}: (3,1) component {i} = {} vs {want}",
                got[i]
            );
        }
    }
    Ok(format!(
        "{sets} random delta sets: fixed point, permutation, bounds, (3,1) exact"
    ))
}

// 7 -----------------------------------------------------------------------

/// Expected label of every (extraction point, entity) pair, re-derived rule
/// by rule: a recommended entity the user already mentioned with a known
/// sentiment is redundant, a disliked one is undesirable, the rest are
/// desirable; unknown sentiment yields nothing.
fn expected_labels(corpus: &[ConversationLog]) -> BTreeMap<(String, String), Label> {
    let mut out = BTreeMap::new();
    let mut by_client: BTreeMap<&str, Vec<&ConversationLog>> = BTreeMap::new();
    for c in corpus {
        by_client.entry(&c.initiator_id).or_default().push(c);
    }
    for convs in by_client.values() {
        let mut known: BTreeSet<&str> = BTreeSet::new();
        for conv in convs {
            for (m, msg) in conv.messages.iter().enumerate() {
                let point = format!("{}#{m}", conv.conversation_id);
                if msg.role == SpeakerRole::Respondent {
                    for mention in msg.mentions.iter().filter(|x| x.is_recommendation) {
                        let key = (point.clone(), mention.entity.iri.clone());
                        if mention.sentiment == Sentiment::Unknown || out.contains_key(&key) {
                            continue;
                        }
                        let redundant = known.contains(mention.entity.iri.as_str());
                        let label = if redundant || mention.sentiment == Sentiment::Disliked {
                            Label::Undesirable
                        } else {
                            Label::Desirable
                        };
                        out.insert(key, label);
                    }
                }
                for mention in &msg.mentions {
                    if mention.sentiment != Sentiment::Unknown {
                        known.insert(&mention.entity.iri);
                    }
                }
            }
        }
    }
    out
}

fn dataset_rules() -> Outcome {
    let corpus: Vec<ConversationLog> =
        read_jsonl(&common::movie_convs()).map_err(|e| e.to_string())?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let paths = common::movie_dataset(dir.path());
    let mut examples: Vec<PreferenceExample> =
        read_jsonl(&paths.train).map_err(|e| e.to_string())?;
    examples.extend(read_jsonl::<PreferenceExample>(&paths.test).map_err(|e| e.to_string())?);

    let expected = expected_labels(&corpus);
    let mut actual = BTreeMap::new();
    let mut per_point: BTreeMap<String, BTreeSet<Label>> = BTreeMap::new();
    let mut mismatches = 0;
    for ex in &examples {
        let point = ex.source_ids[0].clone();
        ensure!(
            per_point.entry(point.clone()).or_default().insert(ex.label),
            "{point}: two examples with the same label"
        );
        let labels = parse_completion(&ex.completion);
        ensure!(
            labels.len() + 1 == ex.source_ids.len(),
            "{point}: completion and provenance disagree"
        );
        for iri in &ex.source_ids[1..] {
            if actual
                .insert((point.clone(), iri.clone()), ex.label)
                .is_some()
            {
                mismatches += 1;
            }
        }
    }
    for (key, label) in &expected {
        if actual.get(key) != Some(label) {
            mismatches += 1;
        }
    }
    mismatches += actual.keys().filter(|k| !expected.contains_key(*k)).count();
    ensure!(
        mismatches == 0,
        "{mismatches} mismatches between extraction and rules"
    );

    // every point whose entities carry both labels was split in two
    let mut mixed = 0;
    for (point, labels) in &per_point {
        let want: BTreeSet<Label> = expected
            .iter()
            .filter(|((p, _), _)| p == point)
            .map(|(_, l)| *l)
            .collect();
        ensure!(
            &want == labels,
            "{point}: labels {labels:?}, rules give {want:?}"
        );
        mixed += usize::from(labels.len() == 2);
    }
    let redundant = expected
        .values()
        .filter(|l| **l == Label::Undesirable)
        .count();
    Ok(format!(
        "{} examples, {} labelled entities, {redundant} undesirable, {mixed} mixed points split, 0 mismatches",
        examples.len(),
        expected.len()
    ))
}

// 8 -----------------------------------------------------------------------

fn federated_beats_local() -> Outcome {
    let trials = run_trials(&BenchConfig::default(), 0, 10).map_err(|e| e.to_string())?;
    let wins = trials
        .iter()
        .filter(|t| t.federated_hits > t.local_hits)
        .count();
    let n = trials.len() as f64;
    let fed = trials.iter().map(|t| t.federated_hits).sum::<f64>() / n;
    let local = trials.iter().map(|t| t.local_hits).sum::<f64>() / n;
    let random = trials.iter().map(|t| t.random_hits).sum::<f64>() / n;
    ensure!(wins >= 9, "federated ahead in only {wins}/10 trials");
    ensure!(
        (local - random).abs() <= 0.1,
        "local-only Hits@10 {local:.3} is not near the random baseline {random:.3}"
    );
    Ok(format!(
        "federated ahead in {wins}/10 trials; mean Hits@10 federated {fed:.3}, local {local:.3}, random {random:.3}"
    ))
}

// 9 -----------------------------------------------------------------------

fn pipeline_outputs(dir: &std::path::Path) -> Result<Vec<(String, Vec<u8>)>, String> {
    let paths = common::movie_dataset(dir);
    let cfg = common::run_config(dir, "[federation]\ntotal_rounds = 8\n");
    let train_dir = dir.join("train");
    train(TrainMode::Federated, &cfg, &train_dir, None).map_err(|e| e.to_string())?;
    let eval_dir = dir.join("eval");
    evaluate_files(&EvalOptions {
        adapter: Some(TrainPaths::in_dir(&train_dir).adapter),
        testset: paths.test.clone(),
        catalog: paths.catalog.clone(),
        k: 10,
        averaging: Averaging::Micro,
        out_dir: eval_dir.clone(),
    })
    .map_err(|e| e.to_string())?;
    let files = [
        ("train.examples.jsonl", paths.train.clone()),
        ("test.examples.jsonl", paths.test.clone()),
        ("augmented.examples.jsonl", common::augmented_path(dir)),
        ("train.rounds.jsonl", TrainPaths::in_dir(&train_dir).rounds),
        ("eval.metrics.json", EvalPaths::in_dir(&eval_dir).metrics),
    ];
    files
        .into_iter()
        .map(|(name, p)| {
            std::fs::read(&p)
                .map(|b| (name.to_string(), b))
                .map_err(|e| format!("{}: {e}", p.display()))
        })
        .collect()
}

fn determinism() -> Outcome {
    let first = tempfile::tempdir().map_err(|e| e.to_string())?;
    let second = tempfile::tempdir().map_err(|e| e.to_string())?;
    let a = pipeline_outputs(first.path())?;
    let b = pipeline_outputs(second.path())?;
    for ((name, x), (_, y)) in a.iter().zip(&b) {
        ensure!(!x.is_empty(), "{name} is empty");
        ensure!(x == y, "{name} differs between runs");
    }
    let names: Vec<&str> = a.iter().map(|(n, _)| n.as_str()).collect();
    Ok(format!("byte-identical: {}", names.join(", ")))
}

// 10 ----------------------------------------------------------------------

const LABEL_CHARS: &[char] = &[
    'a', 'b', 'Z', 'é', 'ß', '0', '7', ' ', ' ', '(', ')', ':', '\'', '"', '&', ',', '.', '-', '/',
    '\\', '{', '}', '#', '@', '日',
];

fn random_label(rng: &mut ChaCha8Rng) -> String {
    loop {
        let len = rng.random_range(1..=24);
        let s: String = (0..len)
            .map(|_| *LABEL_CHARS.choose(rng).unwrap())
            .collect();
        // labels are stored trimmed and single-spaced
        let s = s.split_whitespace().collect::<Vec<_>>().join(" ");
        if !s.is_empty() {
            return s;
        }
    }
}

fn random_pkg(rng: &mut ChaCha8Rng, i: usize) -> PersonalKnowledgeGraph {
    let user = format!("user-{i}-{}", random_label(rng));
    let entities: Vec<EntityRef> = (0..rng.random_range(1..=12))
        .map(|j| {
            let class = if rng.random_bool(0.7) {
                "Movie"
            } else {
                "Recipe"
            };
            EntityRef::new(
                format!("https://example.org/e/{i}/{j}"),
                random_label(rng),
                class,
            )
        })
        .collect();
    let mut pkg = PersonalKnowledgeGraph::new(user.clone());
    for _ in 0..rng.random_range(0..=25) {
        let relation = if rng.random_bool(0.5) {
            Relation::Liked
        } else {
            Relation::Disliked
        };
        let object = entities.choose(rng).unwrap().clone();
        let order = rng.random_range(0..10);
        pkg = pkg
            .add_preference(PreferenceTriple::new(user.clone(), relation, object, order))
            .unwrap()
            .0;
    }
    pkg
}

fn round_trips() -> Outcome {
    let n = 1000;
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for i in 0..n {
        let pkg = random_pkg(&mut rng, i);
        let text = serde_json::to_string(&pkg.to_jsonld()).map_err(|e| e.to_string())?;
        let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| e.to_string())?;
        let back =
            PersonalKnowledgeGraph::from_jsonld(&value).map_err(|e| format!("graph {i}: {e}"))?;
        ensure!(back == pkg, "graph {i} changed in a JSON-LD round trip");
    }
    for i in 0..n {
        let mut labels: Vec<String> = Vec::new();
        let mut keys = BTreeSet::new();
        for _ in 0..rng.random_range(1..=8) {
            let l = random_label(&mut rng);
            if keys.insert(normalize_label(&l)) {
                labels.push(l);
            }
        }
        let text = format_completion(&labels).map_err(|e| format!("completion {i}: {e}"))?;
        ensure!(
            parse_completion(&text) == labels,
            "completion {i} changed in a round trip: {labels:?}"
        );
    }
    Ok(format!("{n} graphs and {n} completions"))
}

// -------------------------------------------------------------------------

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("communication cost table", comm_cost_table),
        ("ledger matches 128-round report", ledger_matches_report),
        ("KTO gradient check", gradient_check),
        ("KTO initial loss 7/12", initial_loss),
        ("metric oracle equivalence", metric_oracle),
        ("aggregation properties", aggregation_properties),
        ("dataset rule conformance", dataset_rules),
        (
            "federated beats local-only on unseen items",
            federated_beats_local,
        ),
        ("pipeline determinism", determinism),
        ("round-trip properties", round_trips),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into());
            Err(msg)
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {:>2} PASS {name} ({secs:.1}s): {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {:>2} FAIL {name} ({secs:.1}s): {detail}", i + 1);
            }
        }
    }
    println!(
        "acceptance: {} passed, {failed} failed",
        criteria.len() - failed
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
