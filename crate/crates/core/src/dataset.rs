//! Turns annotated conversation logs and rating tables into per-client
//! prompt/completion/label examples.
//!
//! Movie data: each conversation belongs to its initiator. A respondent
//! message that recommends entities is an extraction point; the prompt is the
//! system prompt over the initiator's graph as it stood before that message,
//! followed by the conversation so far. Recommended entities the initiator
//! liked and had not seen yet form the desirable completion; those disliked or
//! already in the graph form the undesirable one.
//!
//! Recipe data has no conversations, so examples come exclusively from the
//! synthetic generators run over graphs built from star ratings.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::pkg::{EntityRef, PersonalKnowledgeGraph, PreferenceTriple, Relation, NO_CUTOFF};
use crate::prompt::{self, Domain, PromptSpec, Role, Turn};
use crate::synth::{self, SynthConfig};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum DatasetError {
    #[error("holdout fraction must lie strictly between 0 and 1, got {0}")]
    HoldoutFraction(f64),
    #[error("no desirable real examples are available for the test split")]
    NoEligiblePositives,
    #[error(transparent)]
    Prompt(#[from] prompt::PromptError),
    #[error(transparent)]
    Pkg(#[from] crate::pkg::PkgError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpeakerRole {
    Initiator,
    Respondent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sentiment {
    Liked,
    Disliked,
    Unknown,
}

impl Sentiment {
    pub fn relation(self) -> Option<Relation> {
        match self {
            Sentiment::Liked => Some(Relation::Liked),
            Sentiment::Disliked => Some(Relation::Disliked),
            Sentiment::Unknown => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mention {
    pub entity: EntityRef,
    pub is_recommendation: bool,
    pub sentiment: Sentiment,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: SpeakerRole,
    pub text: String,
    #[serde(default)]
    pub mentions: Vec<Mention>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConversationLog {
    pub conversation_id: String,
    pub initiator_id: String,
    pub respondent_id: String,
    pub messages: Vec<Message>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Desirable,
    Undesirable,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Real,
    SyntheticMask,
    SyntheticRedundancy,
}

impl Origin {
    pub fn is_synthetic(self) -> bool {
        !matches!(self, Origin::Real)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferenceExample {
    pub client_id: String,
    pub prompt: String,
    pub completion: String,
    pub label: Label,
    pub origin: Origin,
    /// Provenance: the source event first, then the IRIs in the completion.
    pub source_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RatingRecord {
    pub user_id: String,
    pub recipe: EntityRef,
    pub stars: u8,
    #[serde(default)]
    pub recipe_attrs: Vec<(String, String)>,
}

/// Groups conversations under their initiator, keeping corpus order.
pub fn partition_by_client(corpus: &[ConversationLog]) -> BTreeMap<String, Vec<ConversationLog>> {
    let mut out: BTreeMap<String, Vec<ConversationLog>> = BTreeMap::new();
    for conv in corpus {
        out.entry(conv.initiator_id.clone())
            .or_default()
            .push(conv.clone());
    }
    out
}

/// The initiator's graph just before one message.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChronologyPoint {
    pub conversation_id: String,
    pub message_index: usize,
    /// Position of the message across all of the client's conversations.
    pub event_index: u64,
    pub snapshot: PersonalKnowledgeGraph,
}

/// Replays a client's conversations in order. The snapshot at each message
/// holds every liked/disliked mention from strictly earlier messages; triples
/// carry the event index of the message that stated them.
pub fn build_pkg_chronology(client_convs: &[ConversationLog]) -> Vec<ChronologyPoint> {
    let Some(first) = client_convs.first() else {
        return Vec::new();
    };
    let mut pkg = PersonalKnowledgeGraph::new(first.initiator_id.clone());
    let mut points = Vec::new();
    let mut event_index = 0u64;
    for conv in client_convs {
        for (message_index, message) in conv.messages.iter().enumerate() {
            points.push(ChronologyPoint {
                conversation_id: conv.conversation_id.clone(),
                message_index,
                event_index,
                snapshot: pkg.clone(),
            });
            for mention in &message.mentions {
                if let Some(relation) = mention.sentiment.relation() {
                    let triple = PreferenceTriple::new(
                        pkg.user_id(),
                        relation,
                        mention.entity.clone(),
                        event_index,
                    );
                    // Subjects come from `pkg` itself, so this cannot fail.
                    pkg.insert(triple).expect("subject matches");
                }
            }
            event_index += 1;
        }
    }
    points
}

/// Final graph after replaying every message of the client.
pub fn final_pkg(client_convs: &[ConversationLog]) -> Option<PersonalKnowledgeGraph> {
    let first = client_convs.first()?;
    let mut pkg = PersonalKnowledgeGraph::new(first.initiator_id.clone());
    let mut event_index = 0u64;
    for conv in client_convs {
        for message in &conv.messages {
            for mention in &message.mentions {
                if let Some(relation) = mention.sentiment.relation() {
                    let triple = PreferenceTriple::new(
                        pkg.user_id(),
                        relation,
                        mention.entity.clone(),
                        event_index,
                    );
                    pkg.insert(triple).expect("subject matches");
                }
            }
            event_index += 1;
        }
    }
    Some(pkg)
}

fn dialogue_turn(message: &Message) -> Turn {
    let role = match message.role {
        SpeakerRole::Initiator => Role::User,
        SpeakerRole::Respondent => Role::Assistant,
    };
    Turn::new(role, message.text.clone())
}

/// One extraction per recommending respondent message; see the module docs
/// for the labelling rules. Redundancy takes precedence over sentiment, and
/// mentions with unknown sentiment are skipped.
pub fn extract_examples(
    conv: &ConversationLog,
    points: &[ChronologyPoint],
    domain: &Domain,
) -> Result<Vec<PreferenceExample>, DatasetError> {
    let snapshots: HashMap<usize, &PersonalKnowledgeGraph> = points
        .iter()
        .filter(|p| p.conversation_id == conv.conversation_id)
        .map(|p| (p.message_index, &p.snapshot))
        .collect();

    let mut out = Vec::new();
    for (m, message) in conv.messages.iter().enumerate() {
        if message.role != SpeakerRole::Respondent
            || !message.mentions.iter().any(|x| x.is_recommendation)
        {
            continue;
        }
        let snapshot = snapshots
            .get(&m)
            .expect("chronology covers every message of the conversation");

        let mut seen = BTreeSet::new();
        let mut desirable: Vec<&EntityRef> = Vec::new();
        let mut undesirable: Vec<&EntityRef> = Vec::new();
        for mention in message.mentions.iter().filter(|x| x.is_recommendation) {
            if mention.sentiment == Sentiment::Unknown || !seen.insert(&mention.entity.iri) {
                continue;
            }
            if snapshot.contains_entity(&mention.entity) || mention.sentiment == Sentiment::Disliked
            {
                undesirable.push(&mention.entity);
            } else {
                desirable.push(&mention.entity);
            }
        }
        if desirable.is_empty() && undesirable.is_empty() {
            continue;
        }

        let subpkg = snapshot.query_subpkg(&domain.entity_type, NO_CUTOFF);
        let dialogue = conv.messages[..m].iter().map(dialogue_turn).collect();
        let prompt = prompt::render_prompt(&PromptSpec::new(domain, subpkg, dialogue))?;
        for (group, label) in [
            (desirable, Label::Desirable),
            (undesirable, Label::Undesirable),
        ] {
            if group.is_empty() {
                continue;
            }
            let labels: Vec<&str> = group.iter().map(|e| e.label.as_str()).collect();
            let mut source_ids = vec![format!("{}#{m}", conv.conversation_id)];
            source_ids.extend(group.iter().map(|e| e.iri.clone()));
            out.push(PreferenceExample {
                client_id: conv.initiator_id.clone(),
                prompt: prompt.clone(),
                completion: prompt::format_completion(&labels)?,
                label,
                origin: Origin::Real,
                source_ids,
            });
        }
    }
    Ok(out)
}

/// Examples and final graphs for a whole client-partitioned corpus.
#[derive(Debug, Clone, Default)]
pub struct ClientData {
    pub examples: Vec<PreferenceExample>,
    pub pkgs: BTreeMap<String, PersonalKnowledgeGraph>,
}

/// Runs chronology and extraction for every client, ordered by client id and
/// then corpus order.
pub fn build_conversation_examples(
    corpus: &[ConversationLog],
    domain: &Domain,
) -> Result<ClientData, DatasetError> {
    let mut data = ClientData::default();
    for (client, convs) in partition_by_client(corpus) {
        let points = build_pkg_chronology(&convs);
        for conv in &convs {
            data.examples
                .extend(extract_examples(conv, &points, domain)?);
        }
        if let Some(pkg) = final_pkg(&convs) {
            data.pkgs.insert(client, pkg);
        }
    }
    Ok(data)
}

/// Stars at or above this become `liked`.
pub const LIKED_MIN_STARS: u8 = 4;
/// Stars at or below this become `disliked`; anything in between is dropped.
pub const DISLIKED_MAX_STARS: u8 = 2;

/// Per-user graphs from star ratings, in record order.
pub fn rating_pkgs(ratings: &[RatingRecord]) -> BTreeMap<String, PersonalKnowledgeGraph> {
    let mut pkgs: BTreeMap<String, PersonalKnowledgeGraph> = BTreeMap::new();
    let mut counters: BTreeMap<String, u64> = BTreeMap::new();
    for r in ratings {
        let idx = counters.entry(r.user_id.clone()).or_default();
        let order_index = *idx;
        *idx += 1;
        let pkg = pkgs
            .entry(r.user_id.clone())
            .or_insert_with(|| PersonalKnowledgeGraph::new(r.user_id.clone()));
        let relation = if r.stars >= LIKED_MIN_STARS {
            Relation::Liked
        } else if r.stars <= DISLIKED_MAX_STARS {
            Relation::Disliked
        } else {
            continue;
        };
        pkg.insert(PreferenceTriple::new(
            r.user_id.clone(),
            relation,
            r.recipe.clone(),
            order_index,
        ))
        .expect("subject matches");
    }
    pkgs
}

/// Recipe examples: rating graphs fed through the synthetic generators.
pub fn build_recipe_examples(
    ratings: &[RatingRecord],
    domain: &Domain,
    cfg: &SynthConfig,
) -> Result<ClientData, DatasetError> {
    let pkgs = rating_pkgs(ratings);
    let examples = synth::generate_for_clients(&pkgs, domain, cfg)?;
    Ok(ClientData { examples, pkgs })
}

/// Holds out a fraction of the desirable real examples for testing.
///
/// Examples sharing the same prompt and completion move together, so no test
/// pair also appears in train. Both halves keep input order.
pub fn split_train_test(
    examples: &[PreferenceExample],
    holdout_fraction: f64,
    rng_seed: u64,
) -> Result<(Vec<PreferenceExample>, Vec<PreferenceExample>), DatasetError> {
    split_with(examples, holdout_fraction, rng_seed, false)
}

/// Like [`split_train_test`] but synthetic desirable examples are eligible
/// too. Rating-derived data has no real examples, so this is the only way to
/// hold out a test set for it.
pub fn split_train_test_any_origin(
    examples: &[PreferenceExample],
    holdout_fraction: f64,
    rng_seed: u64,
) -> Result<(Vec<PreferenceExample>, Vec<PreferenceExample>), DatasetError> {
    split_with(examples, holdout_fraction, rng_seed, true)
}

fn split_with(
    examples: &[PreferenceExample],
    holdout_fraction: f64,
    rng_seed: u64,
    any_origin: bool,
) -> Result<(Vec<PreferenceExample>, Vec<PreferenceExample>), DatasetError> {
    if !(holdout_fraction > 0.0 && holdout_fraction < 1.0) {
        return Err(DatasetError::HoldoutFraction(holdout_fraction));
    }
    let mut groups: BTreeMap<(&str, &str), Vec<usize>> = BTreeMap::new();
    for (i, ex) in examples.iter().enumerate() {
        groups
            .entry((&ex.prompt, &ex.completion))
            .or_default()
            .push(i);
    }
    let eligible_ok = |i: &usize| {
        let ex = &examples[*i];
        ex.label == Label::Desirable && (any_origin || ex.origin == Origin::Real)
    };
    let mut eligible: Vec<&Vec<usize>> = groups
        .values()
        .filter(|g| g.iter().all(eligible_ok))
        .collect();
    let n_eligible: usize = eligible.iter().map(|g| g.len()).sum();
    if n_eligible == 0 {
        return Err(DatasetError::NoEligiblePositives);
    }
    let target = ((n_eligible as f64 * holdout_fraction).round() as usize).max(1);

    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    eligible.shuffle(&mut rng);
    let mut in_test = vec![false; examples.len()];
    let mut taken = 0;
    for group in eligible {
        if taken >= target {
            break;
        }
        for &i in group {
            in_test[i] = true;
        }
        taken += group.len();
    }

    let (test, train): (Vec<_>, Vec<_>) =
        examples.iter().cloned().zip(in_test).partition(|(_, t)| *t);
    Ok((
        train.into_iter().map(|(e, _)| e).collect(),
        test.into_iter().map(|(e, _)| e).collect(),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CountReport {
    pub clients: usize,
    pub real: usize,
    pub synthetic: usize,
    pub test: usize,
}

/// Counts in the shape of the dataset statistics: distinct clients across
/// both halves, real and synthetic training examples, and test examples.
pub fn count_report(train: &[PreferenceExample], test: &[PreferenceExample]) -> CountReport {
    let clients: BTreeSet<&str> = train
        .iter()
        .chain(test)
        .map(|e| e.client_id.as_str())
        .collect();
    CountReport {
        clients: clients.len(),
        real: train.iter().filter(|e| e.origin == Origin::Real).count(),
        synthetic: train.iter().filter(|e| e.origin.is_synthetic()).count(),
        test: test.len(),
    }
}

/// Groups examples by client id.
pub fn partition_examples(
    examples: &[PreferenceExample],
) -> BTreeMap<String, Vec<PreferenceExample>> {
    let mut out: BTreeMap<String, Vec<PreferenceExample>> = BTreeMap::new();
    for ex in examples {
        out.entry(ex.client_id.clone())
            .or_default()
            .push(ex.clone());
    }
    out
}
