//! Synthetic examples drawn from a client's own graph.
//!
//! Masking hides a random subset of entities and asks the model to recover
//! the liked ones and avoid the disliked ones. Redundancy negatives ask for
//! entities the graph already holds and label the answer undesirable.
//!
//! Both generators work on entities rather than raw triples: an entity whose
//! preference flipped over time carries its latest relation, and a masked
//! entity is removed from the prompt under every relation.

use std::collections::{BTreeMap, HashSet};

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{DatasetError, Label, Origin, PreferenceExample};
use crate::pkg::{EntityRef, PersonalKnowledgeGraph, Relation, SubPkg, NO_CUTOFF};
use crate::prompt::{self, Domain, PromptSpec, Role, Turn};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub mask_count_per_client: usize,
    pub redundancy_count_per_client: usize,
    pub mask_fraction: f64,
    pub rng_seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            mask_count_per_client: 2,
            redundancy_count_per_client: 1,
            mask_fraction: 0.3,
            rng_seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.mask_fraction > 0.0 && self.mask_fraction < 1.0) {
            return Err(format!(
                "synth.mask_fraction must lie in (0, 1), got {}",
                self.mask_fraction
            ));
        }
        Ok(())
    }
}

/// 64-bit FNV-1a; stable across platforms and releases, used to derive
/// per-client seeds.
pub fn stable_hash(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

pub fn client_seed(seed: u64, client_id: &str) -> u64 {
    seed ^ stable_hash(client_id)
}

fn render(domain: &Domain, subpkg: SubPkg) -> Result<String, DatasetError> {
    let dialogue = vec![Turn::new(Role::User, domain.synthetic_request())];
    Ok(prompt::render_prompt(&PromptSpec::new(
        domain, subpkg, dialogue,
    ))?)
}

fn make_example(
    pkg: &PersonalKnowledgeGraph,
    prompt: String,
    entities: &[&EntityRef],
    label: Label,
    origin: Origin,
    tag: String,
) -> Result<PreferenceExample, DatasetError> {
    let labels: Vec<&str> = entities.iter().map(|e| e.label.as_str()).collect();
    let mut source_ids = vec![tag];
    source_ids.extend(entities.iter().map(|e| e.iri.clone()));
    Ok(PreferenceExample {
        client_id: pkg.user_id().to_string(),
        prompt,
        completion: prompt::format_completion(&labels)?,
        label,
        origin,
        source_ids,
    })
}

/// `cfg.mask_count_per_client` masking draws. Each hides
/// `ceil(mask_fraction * n)` of the `n` domain entities (at least one, and
/// always leaving one visible); a hidden set mixing relations yields one
/// desirable and one undesirable example. Graphs with fewer than two
/// entities produce nothing.
pub fn mask_triples<R: Rng + ?Sized>(
    pkg: &PersonalKnowledgeGraph,
    domain: &Domain,
    cfg: &SynthConfig,
    rng: &mut R,
) -> Result<Vec<PreferenceExample>, DatasetError> {
    let full = pkg.query_subpkg(&domain.entity_type, NO_CUTOFF);
    let entities = full.latest_relations();
    let n = entities.len();
    if n < 2 {
        return Ok(Vec::new());
    }
    let k = ((cfg.mask_fraction * n as f64).ceil() as usize).clamp(1, n - 1);

    let mut out = Vec::new();
    for draw in 0..cfg.mask_count_per_client {
        let mut picked = index::sample(rng, n, k).into_vec();
        picked.sort_unstable();
        let hidden: HashSet<&str> = picked.iter().map(|&i| entities[i].0.iri.as_str()).collect();
        let remainder = SubPkg {
            triples: full
                .triples
                .iter()
                .filter(|t| !hidden.contains(t.object.iri.as_str()))
                .cloned()
                .collect(),
            ..full.clone()
        };
        let prompt = render(domain, remainder)?;
        for (relation, label) in [
            (Relation::Liked, Label::Desirable),
            (Relation::Disliked, Label::Undesirable),
        ] {
            let group: Vec<&EntityRef> = picked
                .iter()
                .map(|&i| &entities[i])
                .filter(|(_, r, _)| *r == relation)
                .map(|(e, _, _)| e)
                .collect();
            if !group.is_empty() {
                out.push(make_example(
                    pkg,
                    prompt.clone(),
                    &group,
                    label,
                    Origin::SyntheticMask,
                    format!("synth:mask:{draw}"),
                )?);
            }
        }
    }
    Ok(out)
}

/// `cfg.redundancy_count_per_client` examples whose completion repeats a
/// random non-empty subset of entities already in the (unmasked) prompt
/// graph. Always undesirable.
pub fn redundancy_negatives<R: Rng + ?Sized>(
    pkg: &PersonalKnowledgeGraph,
    domain: &Domain,
    cfg: &SynthConfig,
    rng: &mut R,
) -> Result<Vec<PreferenceExample>, DatasetError> {
    let full = pkg.query_subpkg(&domain.entity_type, NO_CUTOFF);
    let entities = full.latest_relations();
    let n = entities.len();
    if n == 0 || cfg.redundancy_count_per_client == 0 {
        return Ok(Vec::new());
    }
    let prompt = render(domain, full)?;
    let mut out = Vec::with_capacity(cfg.redundancy_count_per_client);
    for draw in 0..cfg.redundancy_count_per_client {
        let size = rng.random_range(1..=n);
        let mut picked = index::sample(rng, n, size).into_vec();
        picked.sort_unstable();
        let group: Vec<&EntityRef> = picked.iter().map(|&i| &entities[i].0).collect();
        out.push(make_example(
            pkg,
            prompt.clone(),
            &group,
            Label::Undesirable,
            Origin::SyntheticRedundancy,
            format!("synth:redundancy:{draw}"),
        )?);
    }
    Ok(out)
}

/// Both generators for every client, with per-client seeds so each client's
/// output is independent of the others. Ordered by client id.
pub fn generate_for_clients(
    pkgs: &BTreeMap<String, PersonalKnowledgeGraph>,
    domain: &Domain,
    cfg: &SynthConfig,
) -> Result<Vec<PreferenceExample>, DatasetError> {
    let mut out = Vec::new();
    for (client, pkg) in pkgs {
        let mut rng = ChaCha8Rng::seed_from_u64(client_seed(cfg.rng_seed, client));
        out.extend(mask_triples(pkg, domain, cfg, &mut rng)?);
        out.extend(redundancy_negatives(pkg, domain, cfg, &mut rng)?);
    }
    Ok(out)
}

/// The input examples, untouched, followed by synthetic examples for every
/// client graph.
pub fn augment(
    examples: &[PreferenceExample],
    pkgs: &BTreeMap<String, PersonalKnowledgeGraph>,
    domain: &Domain,
    cfg: &SynthConfig,
) -> Result<Vec<PreferenceExample>, DatasetError> {
    let mut out = examples.to_vec();
    out.extend(generate_for_clients(pkgs, domain, cfg)?);
    Ok(out)
}
