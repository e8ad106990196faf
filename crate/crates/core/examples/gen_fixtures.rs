//! Regenerates the bundled mini-corpora in `data/`.
//!
//! ```text
//! cargo run -p fedpkg --example gen_fixtures
//! ```
//!
//! Movies fall into genres and every user has a favourite genre; a
//! recommendation from that genre is usually liked. Some recommendations
//! repeat a film the user already talked about, and a few mentions carry no
//! sentiment. Recipes follow the same scheme with cuisines and star ratings.

use std::collections::BTreeSet;
use std::path::Path;

use fedpkg::dataset::{ConversationLog, Mention, Message, RatingRecord, Sentiment, SpeakerRole};
use fedpkg::io::{write_json, write_jsonl};
use fedpkg::pkg::EntityRef;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

const SEED: u64 = 20_240_601;
const GENRES: [&str; 4] = ["noir", "space", "comedy", "western"];
const TITLE_WORDS: [&str; 12] = [
    "Shadow", "Orbit", "Laugh", "Dust", "Harbor", "Signal", "Riddle", "Canyon", "Velvet", "Comet",
    "Parade", "Frontier",
];
const MOVIES_PER_GENRE: usize = 15;
const CLIENTS: usize = 24;

fn movies() -> Vec<(EntityRef, usize)> {
    let mut out = Vec::new();
    for (g, genre) in GENRES.iter().enumerate() {
        for i in 0..MOVIES_PER_GENRE {
            let word = TITLE_WORDS[(g * 5 + i) % TITLE_WORDS.len()];
            let label = format!(
                "{word} {} {} ({})",
                genre_title(genre),
                i + 1,
                1950 + g * 15 + i
            );
            let iri = format!("https://example.org/movie/{genre}-{:02}", i + 1);
            out.push((EntityRef::new(iri, label, "Movie"), g));
        }
    }
    out
}

fn genre_title(genre: &str) -> String {
    let mut c = genre.chars();
    c.next()
        .map(|f| f.to_ascii_uppercase().to_string() + c.as_str())
        .unwrap_or_default()
}

fn conversations(rng: &mut ChaCha8Rng) -> Vec<ConversationLog> {
    let catalog = movies();
    let mut convs = Vec::new();
    let mut conv_id = 0;
    // round-robin over users keeps each user's conversations interleaved in
    // corpus order, the way a real log would be
    let favourites: Vec<usize> = (0..CLIENTS).map(|c| c % GENRES.len()).collect();
    let per_client: Vec<usize> = (0..CLIENTS).map(|_| rng.random_range(3..=5)).collect();
    let mut seen: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); CLIENTS];
    let max_convs = *per_client.iter().max().unwrap();
    for round in 0..max_convs {
        for client in 0..CLIENTS {
            if round >= per_client[client] {
                continue;
            }
            conv_id += 1;
            let fav = favourites[client];
            let mut messages = Vec::new();
            let turns = rng.random_range(2..=4);
            for _ in 0..turns {
                // the initiator talks about a film from their genre or, less
                // often, one they did not enjoy
                let own: Vec<usize> = (0..catalog.len())
                    .filter(|&i| catalog[i].1 == fav)
                    .collect();
                let other: Vec<usize> = (0..catalog.len())
                    .filter(|&i| catalog[i].1 != fav)
                    .collect();
                let (idx, sentiment) = match rng.random_range(0..10) {
                    0..=5 => (*own.choose(rng).unwrap(), Sentiment::Liked),
                    6..=7 => (*other.choose(rng).unwrap(), Sentiment::Disliked),
                    _ => (*other.choose(rng).unwrap(), Sentiment::Unknown),
                };
                let e = &catalog[idx].0;
                let text = match sentiment {
                    Sentiment::Liked => format!("I really enjoyed {}.", e.label),
                    Sentiment::Disliked => format!("I could not get into {}.", e.label),
                    Sentiment::Unknown => format!("Someone mentioned {} to me.", e.label),
                };
                if sentiment != Sentiment::Unknown {
                    seen[client].insert(idx);
                }
                messages.push(Message {
                    role: SpeakerRole::Initiator,
                    text,
                    mentions: vec![Mention {
                        entity: e.clone(),
                        is_recommendation: false,
                        sentiment,
                    }],
                });

                // the respondent recommends one to three films
                let n_recs = rng.random_range(1..=3);
                let mut recs: Vec<usize> = Vec::new();
                while recs.len() < n_recs {
                    let pick = if !seen[client].is_empty() && rng.random_bool(0.15) {
                        *seen[client]
                            .iter()
                            .collect::<Vec<_>>()
                            .choose(rng)
                            .unwrap()
                            .to_owned()
                    } else if rng.random_bool(0.7) {
                        *own.choose(rng).unwrap()
                    } else {
                        *other.choose(rng).unwrap()
                    };
                    if !recs.contains(&pick) {
                        recs.push(pick);
                    }
                }
                let mentions: Vec<Mention> = recs
                    .iter()
                    .map(|&i| {
                        let in_genre = catalog[i].1 == fav;
                        let roll = rng.random_range(0..20);
                        let sentiment = if roll == 0 {
                            Sentiment::Unknown
                        } else if in_genre == (roll > 3) {
                            Sentiment::Liked
                        } else {
                            Sentiment::Disliked
                        };
                        Mention {
                            entity: catalog[i].0.clone(),
                            is_recommendation: true,
                            sentiment,
                        }
                    })
                    .collect();
                let titles: Vec<&str> = mentions.iter().map(|m| m.entity.label.as_str()).collect();
                messages.push(Message {
                    role: SpeakerRole::Respondent,
                    text: format!("You might like {}.", titles.join(" or ")),
                    mentions: mentions.clone(),
                });
                // the initiator reacts, which is what the sentiment records
                for m in &mentions {
                    if m.sentiment.relation().is_some() {
                        seen[client].insert(
                            catalog
                                .iter()
                                .position(|(e, _)| e.iri == m.entity.iri)
                                .unwrap(),
                        );
                    }
                }
                messages.push(Message {
                    role: SpeakerRole::Initiator,
                    text: "Thanks, noted.".into(),
                    mentions: vec![],
                });
            }
            convs.push(ConversationLog {
                conversation_id: format!("c{conv_id:04}"),
                initiator_id: format!("u{client:02}"),
                respondent_id: format!("r{:02}", rng.random_range(0..8)),
                messages,
            });
        }
    }
    convs
}

const CUISINES: [&str; 4] = ["thai", "italian", "mexican", "nordic"];
const DISHES: [&str; 10] = [
    "Soup", "Stew", "Salad", "Bake", "Noodles", "Pie", "Curry", "Tart", "Skillet", "Bowl",
];

fn ratings(rng: &mut ChaCha8Rng) -> Vec<RatingRecord> {
    let recipes: Vec<(EntityRef, usize)> = CUISINES
        .iter()
        .enumerate()
        .flat_map(|(c, cuisine)| {
            DISHES.iter().map(move |dish| {
                (
                    EntityRef::new(
                        format!(
                            "https://example.org/recipe/{cuisine}-{}",
                            dish.to_lowercase()
                        ),
                        format!("{} {dish}", genre_title(cuisine)),
                        "Recipe",
                    ),
                    c,
                )
            })
        })
        .collect();
    let mut out = Vec::new();
    for user in 0..12 {
        let fav = user % CUISINES.len();
        let n = rng.random_range(8..=14);
        let chosen: Vec<&(EntityRef, usize)> = recipes.choose_multiple(rng, n).collect();
        for (recipe, cuisine) in chosen {
            let base: i32 = if *cuisine == fav { 4 } else { 2 };
            let stars = (base + rng.random_range(-1..=1)).clamp(0, 5) as u8;
            out.push(RatingRecord {
                user_id: format!("f{user:02}"),
                recipe: recipe.clone(),
                stars,
                recipe_attrs: vec![("cuisine".into(), CUISINES[*cuisine].into())],
            });
        }
    }
    out
}

fn main() {
    let data = Path::new(env!("CARGO_MANIFEST_DIR")).join("data");
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let convs = conversations(&mut rng);
    let ratings = ratings(&mut rng);

    write_jsonl(&data.join("movie_mini.convs.jsonl"), &convs).unwrap();
    write_jsonl(&data.join("recipe_mini.ratings.jsonl"), &ratings).unwrap();

    let clients: BTreeSet<&str> = convs.iter().map(|c| c.initiator_id.as_str()).collect();
    let rec_messages = convs
        .iter()
        .flat_map(|c| &c.messages)
        .filter(|m| {
            m.role == SpeakerRole::Respondent && m.mentions.iter().any(|x| x.is_recommendation)
        })
        .count();
    let entities: BTreeSet<&str> = convs
        .iter()
        .flat_map(|c| &c.messages)
        .flat_map(|m| &m.mentions)
        .map(|m| m.entity.iri.as_str())
        .collect();
    let users: BTreeSet<&str> = ratings.iter().map(|r| r.user_id.as_str()).collect();
    write_json(
        &data.join("movie_mini.manifest.json"),
        &json!({
            "generator": "examples/gen_fixtures.rs",
            "seed": SEED,
            "movie": {
                "file": "movie_mini.convs.jsonl",
                "clients": clients.len(),
                "conversations": convs.len(),
                "messages": convs.iter().map(|c| c.messages.len()).sum::<usize>(),
                "recommendation_messages": rec_messages,
                "entities": entities.len(),
            },
            "recipe": {
                "file": "recipe_mini.ratings.jsonl",
                "users": users.len(),
                "ratings": ratings.len(),
            },
        }),
    )
    .unwrap();
    println!(
        "{} conversations from {} clients, {} ratings from {} users",
        convs.len(),
        clients.len(),
        ratings.len(),
        users.len()
    );
}
