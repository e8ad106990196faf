//! File-level commands: each reads its inputs, writes its outputs and a
//! manifest, and returns a summary. The command-line tool is a thin layer
//! over these.
//!
//! Every output except the manifest is a pure function of the inputs and the
//! recorded configuration.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{domain_by_name, ConfigError, RunConfig};
use crate::dataset::{
    build_conversation_examples, build_recipe_examples, count_report, partition_examples,
    split_train_test, split_train_test_any_origin, ConversationLog, CountReport, DatasetError,
    PreferenceExample, RatingRecord,
};
use crate::eval::{
    ablation_grid, cases_from_examples, predict_all, rows_to_csv, AblationInputs, AblationRow,
    Averaging, EvalError, MetricsReport,
};
use crate::federation::{
    comm_cost_report, run_centralized, run_local_only, run_training_with, CommCostReport,
    CommLedger, FederationConfig, FederationError, ModelPreset,
};
use crate::io::{self, IoError};
use crate::learner::{init_adapter, BaseModel, Catalog, CatalogFile, LearnerError, LowRankAdapter};
use crate::manifest::RunManifest;
use crate::pkg::{EntityRef, PersonalKnowledgeGraph, PkgError};
use crate::prompt::Domain;
use crate::synth::{augment, SynthConfig};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Io(#[from] IoError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Pkg(#[from] PkgError),
    #[error(transparent)]
    Learner(#[from] LearnerError),
    #[error(transparent)]
    Federation(#[from] FederationError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("{0}")]
    Input(String),
}

pub type Result<T> = std::result::Result<T, PipelineError>;

pub const DEFAULT_EMBEDDING_DIM: usize = 16;

/// `x.examples.jsonl` -> `x.manifest.json`; any other name gets
/// `.manifest.json` appended to its stem.
pub fn manifest_path_for(output: &Path) -> PathBuf {
    let name = output
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let stem = name
        .strip_suffix(".examples.jsonl")
        .or_else(|| name.strip_suffix(".jsonl"))
        .or_else(|| name.strip_suffix(".json"))
        .unwrap_or(&name);
    output.with_file_name(format!("{stem}.manifest.json"))
}

/// File name for a client's graph; characters outside `[A-Za-z0-9._-]` are
/// percent-encoded so distinct ids never collide.
pub fn pkg_file_name(client_id: &str) -> String {
    let mut out = String::new();
    for b in client_id.bytes() {
        if b.is_ascii_alphanumeric() || b == b'-' || b == b'_' || (b == b'.' && !out.is_empty()) {
            out.push(b as char);
        } else {
            out.push_str(&format!("%{b:02X}"));
        }
    }
    format!("{out}.pkg.jsonld")
}

pub fn write_pkgs(
    dir: &Path,
    pkgs: &BTreeMap<String, PersonalKnowledgeGraph>,
) -> Result<Vec<PathBuf>> {
    io::ensure_dir(dir)?;
    let mut paths = Vec::with_capacity(pkgs.len());
    for (client, pkg) in pkgs {
        let path = dir.join(pkg_file_name(client));
        io::write_json(&path, &pkg.to_jsonld())?;
        paths.push(path);
    }
    Ok(paths)
}

/// Every `*.pkg.jsonld` in `dir`, keyed by the user id inside the document.
pub fn read_pkgs(dir: &Path) -> Result<BTreeMap<String, PersonalKnowledgeGraph>> {
    let mut out = BTreeMap::new();
    for path in read_pkg_paths(dir)? {
        let doc: serde_json::Value = io::read_json(&path)?;
        let pkg = PersonalKnowledgeGraph::from_jsonld(&doc)?;
        out.insert(pkg.user_id().to_string(), pkg);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetSource {
    Conversations(PathBuf),
    Ratings(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuildDatasetOptions {
    pub source: DatasetSource,
    pub out_dir: PathBuf,
    pub seed: u64,
    pub holdout: f64,
    pub embedding_dim: usize,
    /// Used for rating data only, whose examples are all synthetic.
    pub synth: SynthConfig,
}

impl BuildDatasetOptions {
    pub fn new(source: DatasetSource, out_dir: impl Into<PathBuf>) -> Self {
        Self {
            source,
            out_dir: out_dir.into(),
            seed: 0,
            holdout: 0.1,
            embedding_dim: DEFAULT_EMBEDDING_DIM,
            synth: SynthConfig::default(),
        }
    }
}

/// Output locations of `build-dataset` inside its output folder.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetPaths {
    pub train: PathBuf,
    pub test: PathBuf,
    pub catalog: PathBuf,
    pub pkgs: PathBuf,
    pub manifest: PathBuf,
}

impl DatasetPaths {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            train: dir.join("train.examples.jsonl"),
            test: dir.join("test.examples.jsonl"),
            catalog: dir.join("catalog.json"),
            pkgs: dir.join("pkgs"),
            manifest: dir.join("dataset.manifest.json"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub domain: String,
    pub counts: CountReport,
    pub train_examples: usize,
    pub test_examples: usize,
    pub catalog_entities: usize,
    pub pkg_clients: usize,
}

fn read_conversations(path: &Path) -> Result<Vec<ConversationLog>> {
    let convs: Vec<ConversationLog> = io::read_jsonl(path)?;
    for c in &convs {
        if c.messages.is_empty() {
            return Err(PipelineError::Input(format!(
                "{}: conversation `{}` has no messages",
                path.display(),
                c.conversation_id
            )));
        }
    }
    Ok(convs)
}

fn read_ratings(path: &Path) -> Result<Vec<RatingRecord>> {
    let ratings: Vec<RatingRecord> = io::read_jsonl(path)?;
    if let Some(bad) = ratings.iter().find(|r| r.stars > 5) {
        return Err(PipelineError::Input(format!(
            "{}: rating of `{}` by `{}` has {} stars, expected 0..=5",
            path.display(),
            bad.recipe.iri,
            bad.user_id,
            bad.stars
        )));
    }
    Ok(ratings)
}

/// Distinct entities by IRI, first label wins, sorted by IRI.
fn catalog_entities<'a>(entities: impl Iterator<Item = &'a EntityRef>) -> Vec<EntityRef> {
    let mut by_iri: BTreeMap<&str, &EntityRef> = BTreeMap::new();
    for e in entities {
        by_iri.entry(e.iri.as_str()).or_insert(e);
    }
    by_iri.into_values().cloned().collect()
}

/// Graph each client exposes to training: its final graph minus every entity
/// that appears in one of its held-out completions, so synthetic examples
/// cannot turn test answers into training targets.
fn train_visible_pkgs(
    pkgs: &BTreeMap<String, PersonalKnowledgeGraph>,
    test: &[PreferenceExample],
) -> BTreeMap<String, PersonalKnowledgeGraph> {
    let mut hidden: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
    for ex in test {
        hidden
            .entry(ex.client_id.as_str())
            .or_default()
            .extend(ex.source_ids.iter().skip(1).map(String::as_str));
    }
    pkgs.iter()
        .map(|(client, pkg)| {
            let drop = hidden.get(client.as_str());
            let kept = pkg.filtered(|e| drop.is_none_or(|d| !d.contains(e.iri.as_str())));
            (client.clone(), kept)
        })
        .collect()
}

pub fn build_dataset(opts: &BuildDatasetOptions) -> Result<DatasetSummary> {
    let paths = DatasetPaths::in_dir(&opts.out_dir);
    let (domain, input, data, entities, split) = match &opts.source {
        DatasetSource::Conversations(path) => {
            let convs = read_conversations(path)?;
            let domain = Domain::movie();
            let data = build_conversation_examples(&convs, &domain)?;
            let entities = catalog_entities(
                convs
                    .iter()
                    .flat_map(|c| &c.messages)
                    .flat_map(|m| &m.mentions)
                    .map(|m| &m.entity),
            );
            let split = split_train_test(&data.examples, opts.holdout, opts.seed)?;
            (domain, path, data, entities, split)
        }
        DatasetSource::Ratings(path) => {
            let ratings = read_ratings(path)?;
            let domain = Domain::recipe();
            let data = build_recipe_examples(&ratings, &domain, &opts.synth)?;
            let entities = catalog_entities(ratings.iter().map(|r| &r.recipe));
            let split = split_train_test_any_origin(&data.examples, opts.holdout, opts.seed)?;
            (domain, path, data, entities, split)
        }
    };
    let (train, test) = split;
    let catalog = Catalog::new(entities, opts.embedding_dim, opts.seed)?;

    io::ensure_dir(&opts.out_dir)?;
    io::write_jsonl(&paths.train, &train)?;
    io::write_jsonl(&paths.test, &test)?;
    io::write_json(&paths.catalog, &catalog.to_file())?;
    let pkg_paths = write_pkgs(&paths.pkgs, &train_visible_pkgs(&data.pkgs, &test))?;

    let summary = DatasetSummary {
        domain: domain.recommendation_domain.clone(),
        counts: count_report(&train, &test),
        train_examples: train.len(),
        test_examples: test.len(),
        catalog_entities: catalog.len(),
        pkg_clients: data.pkgs.len(),
    };
    let mut manifest = RunManifest::new(
        "build-dataset",
        serde_json::to_value(opts).expect("serializable"),
    )
    .seed("split", opts.seed)
    .seed("catalog", opts.seed);
    manifest.add_input(input)?;
    for p in [&paths.train, &paths.test, &paths.catalog]
        .into_iter()
        .chain(&pkg_paths)
    {
        manifest.add_output(p)?;
    }
    manifest.summary = serde_json::to_value(&summary).expect("serializable");
    manifest.write(&paths.manifest)?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthOptions {
    pub input: PathBuf,
    pub pkgs: PathBuf,
    pub out: PathBuf,
    pub domain: String,
    pub synth: SynthConfig,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthSummary {
    pub real: usize,
    pub synthetic: usize,
    pub total: usize,
}

pub fn synthesize(opts: &SynthOptions) -> Result<SynthSummary> {
    opts.synth
        .validate()
        .map_err(|message| ConfigError::Invalid {
            field: "synth.mask_fraction".into(),
            message,
        })?;
    let domain = domain_by_name(&opts.domain).ok_or_else(|| ConfigError::Invalid {
        field: "domain".into(),
        message: format!("expected `movie` or `recipe`, got `{}`", opts.domain),
    })?;
    let examples: Vec<PreferenceExample> = io::read_jsonl(&opts.input)?;
    let pkgs = read_pkgs(&opts.pkgs)?;
    let out = augment(&examples, &pkgs, &domain, &opts.synth)?;
    io::write_jsonl(&opts.out, &out)?;

    let synthetic = out.iter().filter(|e| e.origin.is_synthetic()).count();
    let summary = SynthSummary {
        real: out.len() - synthetic,
        synthetic,
        total: out.len(),
    };
    let mut manifest = RunManifest::new("synth", serde_json::to_value(opts).expect("serializable"))
        .seed("synth", opts.synth.rng_seed);
    manifest.add_input(&opts.input)?;
    for path in read_pkg_paths(&opts.pkgs)? {
        manifest.add_input(&path)?;
    }
    manifest.add_output(&opts.out)?;
    manifest.summary = serde_json::to_value(&summary).expect("serializable");
    manifest.write(&manifest_path_for(&opts.out))?;
    Ok(summary)
}

fn read_pkg_paths(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|source| IoError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.to_string_lossy().ends_with(".pkg.jsonld"))
        .collect();
    paths.sort();
    Ok(paths)
}

pub fn load_model(catalog_path: &Path) -> Result<BaseModel> {
    let file: CatalogFile = io::read_json(catalog_path)?;
    Ok(BaseModel::new(Catalog::from_file(file)?))
}

pub fn initial_adapter(model: &BaseModel, cfg: &RunConfig) -> Result<LowRankAdapter> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.adapter.seed);
    Ok(init_adapter(model.dim(), &cfg.adapter, &mut rng)?)
}

pub fn read_adapter(path: &Path) -> Result<LowRankAdapter> {
    Ok(LowRankAdapter::from_checkpoint(io::read_json(path)?)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    Federated,
    Centralized,
    Local,
}

impl TrainMode {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "federated" => Some(TrainMode::Federated),
            "centralized" => Some(TrainMode::Centralized),
            "local" => Some(TrainMode::Local),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainPaths {
    pub adapter: PathBuf,
    pub rounds: PathBuf,
    pub comm: PathBuf,
    pub checkpoints: PathBuf,
    pub local: PathBuf,
    pub manifest: PathBuf,
}

impl TrainPaths {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            adapter: dir.join("adapter.json"),
            rounds: dir.join("train.rounds.jsonl"),
            comm: dir.join("train.comm.json"),
            checkpoints: dir.join("checkpoints"),
            local: dir.join("local"),
            manifest: dir.join("train.manifest.json"),
        }
    }
}

/// Ledger file: the per-client byte entries with the wire sizes behind them.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommFile {
    pub payload_params: u64,
    pub bytes_per_param: u64,
    pub ledger: CommLedger,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub mode: TrainMode,
    pub clients: usize,
    pub rounds: usize,
    pub total_bytes: Option<u64>,
    pub local_clients: Vec<String>,
}

pub fn train(
    mode: TrainMode,
    cfg: &RunConfig,
    out_dir: &Path,
    checkpoint_every: Option<usize>,
) -> Result<TrainSummary> {
    let train_path = cfg.data.require("train", &cfg.data.train)?;
    let catalog_path = cfg.data.require("catalog", &cfg.data.catalog)?;
    if checkpoint_every == Some(0) {
        return Err(ConfigError::Invalid {
            field: "checkpoint-every".into(),
            message: "must be at least 1".into(),
        }
        .into());
    }
    let model = load_model(catalog_path)?;
    let examples: Vec<PreferenceExample> = io::read_jsonl(train_path)?;
    let clients = partition_examples(&examples);
    let initial = initial_adapter(&model, cfg)?;
    let paths = TrainPaths::in_dir(out_dir);
    io::ensure_dir(out_dir)?;

    let mut manifest = RunManifest::new(
        "train",
        serde_json::json!({ "mode": mode, "checkpoint_every": checkpoint_every, "config": cfg }),
    )
    .seed("adapter", cfg.adapter.seed)
    .seed("train", cfg.train.rng_seed);
    manifest.add_input(train_path)?;
    manifest.add_input(catalog_path)?;

    let mut summary = TrainSummary {
        mode,
        clients: clients.len(),
        rounds: 0,
        total_bytes: None,
        local_clients: vec![],
    };
    match mode {
        TrainMode::Federated => {
            manifest
                .seeds
                .insert("federation".into(), cfg.federation.rng_seed);
            let mut checkpoint_paths = Vec::new();
            let mut write_error = None;
            let run = run_training_with(
                &clients,
                &model,
                &initial,
                &cfg.federation,
                &cfg.train,
                |record, adapter| {
                    let due = checkpoint_every.is_some_and(|n| (record.round_index + 1) % n == 0);
                    if due && write_error.is_none() {
                        let path = paths
                            .checkpoints
                            .join(format!("round-{:04}.adapter.json", record.round_index + 1));
                        match io::write_json(&path, &adapter.to_checkpoint()) {
                            Ok(()) => checkpoint_paths.push(path),
                            Err(e) => write_error = Some(e),
                        }
                    }
                },
            )?;
            if let Some(e) = write_error {
                return Err(e.into());
            }
            io::write_json(&paths.adapter, &run.adapter.to_checkpoint())?;
            io::write_jsonl(&paths.rounds, &run.rounds)?;
            let payload_params = cfg
                .federation
                .padded_param_count
                .unwrap_or(initial.param_count() as u64);
            io::write_json(
                &paths.comm,
                &CommFile {
                    payload_params,
                    bytes_per_param: cfg.federation.bytes_per_param,
                    ledger: run.ledger.clone(),
                },
            )?;
            for p in [&paths.adapter, &paths.rounds, &paths.comm]
                .into_iter()
                .chain(&checkpoint_paths)
            {
                manifest.add_output(p)?;
            }
            summary.rounds = run.rounds.len();
            summary.total_bytes = Some(run.ledger.total_bytes);
        }
        TrainMode::Centralized => {
            let adapter = run_centralized(&clients, &model, &initial, &cfg.train)?;
            io::write_json(&paths.adapter, &adapter.to_checkpoint())?;
            manifest.add_output(&paths.adapter)?;
        }
        TrainMode::Local => {
            manifest.seeds.insert("local".into(), cfg.local.rng_seed);
            let adapters = run_local_only(
                &clients,
                &model,
                &initial,
                &cfg.train,
                cfg.local.n_users,
                cfg.local.min_examples,
                cfg.local.rng_seed,
            )?;
            for (client, adapter) in &adapters {
                let path = paths.local.join(format!(
                    "{}.adapter.json",
                    pkg_file_name(client).trim_end_matches(".pkg.jsonld")
                ));
                io::write_json(&path, &adapter.to_checkpoint())?;
                manifest.add_output(&path)?;
            }
            summary.local_clients = adapters.into_iter().map(|(c, _)| c).collect();
        }
    }
    manifest.summary = serde_json::to_value(&summary).expect("serializable");
    manifest.write(&paths.manifest)?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    /// `None` scores with the untrained base model.
    pub adapter: Option<PathBuf>,
    pub testset: PathBuf,
    pub catalog: PathBuf,
    pub k: usize,
    pub averaging: Averaging,
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvalPaths {
    pub metrics: PathBuf,
    pub predictions: PathBuf,
    pub manifest: PathBuf,
}

impl EvalPaths {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            metrics: dir.join("eval.metrics.json"),
            predictions: dir.join("eval.predictions.jsonl"),
            manifest: dir.join("eval.manifest.json"),
        }
    }
}

pub fn evaluate_files(opts: &EvalOptions) -> Result<MetricsReport> {
    if opts.k == 0 {
        return Err(ConfigError::Invalid {
            field: "k".into(),
            message: "must be at least 1".into(),
        }
        .into());
    }
    let model = load_model(&opts.catalog)?;
    let adapter = match &opts.adapter {
        Some(p) => read_adapter(p)?,
        None => LowRankAdapter::zeros(model.dim(), 1, 1.0),
    };
    let examples: Vec<PreferenceExample> = io::read_jsonl(&opts.testset)?;
    let cases = cases_from_examples(&examples);
    if cases.is_empty() {
        return Err(PipelineError::Input(format!(
            "{}: no desirable test examples",
            opts.testset.display()
        )));
    }
    let records = predict_all(&model, &adapter, &cases, opts.k)?;
    let report = MetricsReport::from_records(&records, opts.averaging)?;

    let paths = EvalPaths::in_dir(&opts.out_dir);
    io::write_json(&paths.metrics, &report)?;
    io::write_jsonl(&paths.predictions, &records)?;
    let mut manifest = RunManifest::new("eval", serde_json::to_value(opts).expect("serializable"));
    if let Some(p) = &opts.adapter {
        manifest.add_input(p)?;
    }
    manifest.add_input(&opts.testset)?;
    manifest.add_input(&opts.catalog)?;
    manifest.add_output(&paths.metrics)?;
    manifest.add_output(&paths.predictions)?;
    manifest.write(&paths.manifest)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AblationPaths {
    pub csv: PathBuf,
    pub metrics: PathBuf,
    pub manifest: PathBuf,
}

impl AblationPaths {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            csv: dir.join("ablation.csv"),
            metrics: dir.join("ablation.metrics.json"),
            manifest: dir.join("ablation.manifest.json"),
        }
    }
}

pub fn ablate(cfg: &RunConfig, out_dir: &Path) -> Result<Vec<AblationRow>> {
    let d = &cfg.data;
    let train_path = d.require("train", &d.train)?;
    let augmented_path = d.require("augmented", &d.augmented)?;
    let test_path = d.require("test", &d.test)?;
    let catalog_path = d.require("catalog", &d.catalog)?;

    let model = load_model(catalog_path)?;
    let real = partition_examples(&io::read_jsonl::<PreferenceExample>(train_path)?);
    let augmented = partition_examples(&io::read_jsonl::<PreferenceExample>(augmented_path)?);
    let test = cases_from_examples(&io::read_jsonl::<PreferenceExample>(test_path)?);
    let initial = initial_adapter(&model, cfg)?;
    let rows = ablation_grid(&AblationInputs {
        real: &real,
        augmented: &augmented,
        test: &test,
        model: &model,
        initial: &initial,
        federation: &cfg.federation,
        train: &cfg.train,
        local: &cfg.local,
        k_predict: cfg.eval.k_predict,
        averaging: cfg.eval.averaging,
    })?;

    let paths = AblationPaths::in_dir(out_dir);
    io::write_text(&paths.csv, &rows_to_csv(&rows))?;
    io::write_json(&paths.metrics, &rows)?;
    let mut manifest = RunManifest::new("ablate", serde_json::to_value(cfg).expect("serializable"))
        .seed("adapter", cfg.adapter.seed)
        .seed("train", cfg.train.rng_seed)
        .seed("federation", cfg.federation.rng_seed)
        .seed("local", cfg.local.rng_seed);
    for p in [train_path, augmented_path, test_path, catalog_path] {
        manifest.add_input(p)?;
    }
    manifest.add_output(&paths.csv)?;
    manifest.add_output(&paths.metrics)?;
    manifest.write(&paths.manifest)?;
    Ok(rows)
}

/// Cost reports for a parameter count or for every preset.
pub fn comm_costs(
    params: Option<u64>,
    preset: Option<ModelPreset>,
    cfg: &FederationConfig,
) -> Result<Vec<(String, CommCostReport)>> {
    let targets: Vec<(String, u64)> = match (params, preset) {
        (Some(p), _) => vec![(format!("{p} params"), p)],
        (None, Some(m)) => vec![(m.name().to_string(), m.trainable_params())],
        (None, None) => ModelPreset::ALL
            .iter()
            .map(|m| (m.name().to_string(), m.trainable_params()))
            .collect(),
    };
    targets
        .into_iter()
        .map(|(name, p)| Ok((name, comm_cost_report(p, cfg)?)))
        .collect()
}
