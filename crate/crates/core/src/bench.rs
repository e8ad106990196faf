//! Synthetic cluster benchmark for comparing federated and local-only
//! training on entities a client has never seen.
//!
//! Items fall into latent clusters and every client prefers one cluster. A
//! client's graph reveals a few liked members of its cluster and a few
//! disliked items from other clusters; its held-out answer is a set of
//! cluster members it never mentioned. Item embeddings are random, so the
//! cluster structure is invisible to the frozen base model and can only be
//! learned from other clients' graphs.
//!
//! Training data is produced by the masking generator, exactly as for the
//! real corpora.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::DatasetError;
use crate::dataset::PreferenceExample;
use crate::eval::{evaluate, Averaging, EvalCase, EvalError};
use crate::federation::{run_training, FederationConfig, FederationError};
use crate::learner::{
    init_adapter, train_local, AdapterConfig, BaseModel, Catalog, LearnerError, LowRankAdapter,
    TrainConfig,
};
use crate::pkg::{EntityRef, PersonalKnowledgeGraph, PkgError, PreferenceTriple, Relation};
use crate::prompt::{normalize_label, Domain};
use crate::synth::{generate_for_clients, SynthConfig};

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error("invalid benchmark configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Learner(#[from] LearnerError),
    #[error(transparent)]
    Pkg(#[from] PkgError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Federation(#[from] FederationError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub clusters: usize,
    pub items_per_cluster: usize,
    pub clients: usize,
    pub liked_per_client: usize,
    pub disliked_per_client: usize,
    pub gold_per_client: usize,
    pub embedding_dim: usize,
    pub k: usize,
    pub adapter: AdapterConfig,
    pub train: TrainConfig,
    pub federation: FederationConfig,
    pub synth: SynthConfig,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            clusters: 4,
            items_per_cluster: 25,
            clients: 40,
            liked_per_client: 6,
            disliked_per_client: 2,
            gold_per_client: 2,
            embedding_dim: 48,
            k: 10,
            adapter: AdapterConfig {
                rank: 8,
                alpha: 32.0,
                ..AdapterConfig::default()
            },
            train: TrainConfig {
                beta: 1.0,
                learning_rate: 0.5,
                epochs: 4,
                batch_size: 4,
                ..TrainConfig::default()
            },
            federation: FederationConfig {
                total_rounds: 128,
                ..FederationConfig::default()
            },
            synth: SynthConfig {
                mask_count_per_client: 12,
                redundancy_count_per_client: 2,
                mask_fraction: 0.3,
                rng_seed: 0,
            },
        }
    }
}

impl BenchConfig {
    fn check(&self) -> Result<(), BenchError> {
        let bad = |m: String| Err(BenchError::Config(m));
        if self.clusters < 2 || self.clients < self.clusters {
            return bad(format!(
                "need at least two clusters and one client per cluster, got {} and {}",
                self.clusters, self.clients
            ));
        }
        if self.liked_per_client < 2 || self.gold_per_client == 0 {
            return bad("each client needs two liked items and one gold item".into());
        }
        if self.liked_per_client + self.gold_per_client > self.items_per_cluster {
            return bad(format!(
                "{} liked plus {} gold items do not fit a cluster of {}",
                self.liked_per_client, self.gold_per_client, self.items_per_cluster
            ));
        }
        if self.disliked_per_client > (self.clusters - 1) * self.items_per_cluster {
            return bad("more disliked items than items outside a cluster".into());
        }
        Ok(())
    }
}

/// One generated benchmark instance.
#[derive(Debug, Clone)]
pub struct BenchData {
    pub model: BaseModel,
    pub cluster_of: Vec<usize>,
    pub pkgs: BTreeMap<String, PersonalKnowledgeGraph>,
    pub train: BTreeMap<String, Vec<PreferenceExample>>,
    pub cases: Vec<EvalCase>,
}

fn item(cluster: usize, i: usize) -> EntityRef {
    EntityRef::new(
        format!("urn:bench:{cluster}:{i}"),
        format!("Item {cluster}-{i}"),
        "Movie",
    )
}

pub fn generate(cfg: &BenchConfig, seed: u64) -> Result<BenchData, BenchError> {
    cfg.check()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = cfg.clusters * cfg.items_per_cluster;
    let entities: Vec<EntityRef> = (0..n)
        .map(|j| item(j / cfg.items_per_cluster, j % cfg.items_per_cluster))
        .collect();
    let cluster_of: Vec<usize> = (0..n).map(|j| j / cfg.items_per_cluster).collect();
    let model = BaseModel::new(Catalog::new(
        entities.clone(),
        cfg.embedding_dim,
        rng.random(),
    )?);

    let mut pkgs = BTreeMap::new();
    let mut cases = Vec::new();
    for c in 0..cfg.clients {
        let client = format!("b{c:03}");
        let cluster = c % cfg.clusters;
        let base = cluster * cfg.items_per_cluster;
        let own = index::sample(
            &mut rng,
            cfg.items_per_cluster,
            cfg.liked_per_client + cfg.gold_per_client,
        )
        .into_vec();
        let (liked, gold) = own.split_at(cfg.liked_per_client);
        let outside = n - cfg.items_per_cluster;
        let disliked: Vec<usize> = index::sample(&mut rng, outside, cfg.disliked_per_client)
            .into_iter()
            .map(|j| {
                if j >= base {
                    j + cfg.items_per_cluster
                } else {
                    j
                }
            })
            .collect();

        let mut pkg = PersonalKnowledgeGraph::new(client.clone());
        let events = liked
            .iter()
            .map(|&i| (Relation::Liked, base + i))
            .chain(disliked.iter().map(|&j| (Relation::Disliked, j)));
        for (order, (relation, j)) in events.enumerate() {
            pkg = pkg
                .add_preference(PreferenceTriple::new(
                    client.clone(),
                    relation,
                    entities[j].clone(),
                    order as u64,
                ))?
                .0;
        }
        pkgs.insert(client.clone(), pkg);
        cases.push(EvalCase {
            client_id: client,
            liked: liked
                .iter()
                .map(|&i| entities[base + i].label.clone())
                .collect(),
            disliked: disliked
                .iter()
                .map(|&j| entities[j].label.clone())
                .collect(),
            gold_items: gold
                .iter()
                .map(|&i| normalize_label(&entities[base + i].label))
                .collect(),
        });
    }

    let synth = SynthConfig {
        rng_seed: seed,
        ..cfg.synth.clone()
    };
    let mut train: BTreeMap<String, Vec<PreferenceExample>> = BTreeMap::new();
    for ex in generate_for_clients(&pkgs, &Domain::movie(), &synth)? {
        train.entry(ex.client_id.clone()).or_default().push(ex);
    }
    Ok(BenchData {
        model,
        cluster_of,
        pkgs,
        train,
        cases,
    })
}

/// Probability that `k` uniform draws without replacement from `candidates`
/// items hit at least one of `gold`.
pub fn random_hit_probability(candidates: usize, gold: usize, k: usize) -> f64 {
    if gold == 0 {
        return 0.0;
    }
    let k = k.min(candidates);
    // C(n - g, k) / C(n, k) as a running product
    let mut miss = 1.0;
    for i in 0..k {
        let num = candidates.saturating_sub(gold + i) as f64;
        miss *= num / (candidates - i) as f64;
    }
    1.0 - miss
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub seed: u64,
    pub federated_hits: f64,
    /// Mean over clients of each client's own local model.
    pub local_hits: f64,
    /// Expected Hits@k of uniform random recommendation.
    pub random_hits: f64,
}

fn initial_adapter(cfg: &BenchConfig, seed: u64) -> Result<LowRankAdapter, BenchError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ cfg.adapter.seed);
    Ok(init_adapter(cfg.embedding_dim, &cfg.adapter, &mut rng)?)
}

pub fn run_trial(cfg: &BenchConfig, seed: u64) -> Result<TrialResult, BenchError> {
    let data = generate(cfg, seed)?;
    let initial = initial_adapter(cfg, seed)?;
    let fed_cfg = FederationConfig {
        rng_seed: seed,
        ..cfg.federation.clone()
    };
    let train_cfg = TrainConfig {
        rng_seed: seed,
        ..cfg.train.clone()
    };
    let fed = run_training(&data.train, &data.model, &initial, &fed_cfg, &train_cfg)?;
    let federated = evaluate(
        &data.model,
        &fed.adapter,
        &data.cases,
        cfg.k,
        Averaging::Micro,
    )?;

    let local: Vec<f64> = data
        .cases
        .par_iter()
        .map(|case| {
            let examples = data
                .train
                .get(&case.client_id)
                .map(Vec::as_slice)
                .unwrap_or(&[]);
            let delta = train_local(examples, &data.model, &initial, &train_cfg)?;
            let mut adapter = initial.clone();
            adapter.apply(&delta)?;
            Ok(evaluate(
                &data.model,
                &adapter,
                std::slice::from_ref(case),
                cfg.k,
                Averaging::Micro,
            )?
            .hits(cfg.k))
        })
        .collect::<Result<_, BenchError>>()?;

    let n = data.model.catalog().len();
    let random: f64 = data
        .cases
        .iter()
        .map(|c| {
            random_hit_probability(
                n - c.liked.len() - c.disliked.len(),
                c.gold_items.len(),
                cfg.k,
            )
        })
        .sum::<f64>()
        / data.cases.len() as f64;

    Ok(TrialResult {
        seed,
        federated_hits: federated.hits(cfg.k),
        local_hits: local.iter().sum::<f64>() / local.len() as f64,
        random_hits: random,
    })
}

/// Trials for seeds `first_seed..first_seed + trials`, in seed order.
pub fn run_trials(
    cfg: &BenchConfig,
    first_seed: u64,
    trials: usize,
) -> Result<Vec<TrialResult>, BenchError> {
    (0..trials as u64)
        .into_par_iter()
        .map(|i| run_trial(cfg, first_seed + i))
        .collect()
}

/// Clusters touched by a client's liked entities; one per client by
/// construction.
pub fn liked_clusters(data: &BenchData, client: &str) -> BTreeSet<usize> {
    let catalog = data.model.catalog();
    data.pkgs
        .get(client)
        .map(|pkg| {
            pkg.triples()
                .iter()
                .filter(|t| t.relation == Relation::Liked)
                .filter_map(|t| catalog.index_of_iri(&t.object.iri))
                .map(|j| data.cluster_of[j])
                .collect()
        })
        .unwrap_or_default()
}
