//! Textual interface between data and model: the system prompt, the
//! bulleted completion format, and the parsers that read both back.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::pkg::SubPkg;

/// Template version stored alongside generated artifacts.
pub const TEMPLATE_VERSION: &str = "v1";
pub const SYSTEM_PROMPT_TEMPLATE: &str = include_str!("../templates/v1/system_prompt.txt");
pub const COMPLETION_HEADER: &str = include_str!("../templates/v1/completion_header.txt");
pub const SYNTHETIC_REQUEST_TEMPLATE: &str = include_str!("../templates/v1/synthetic_request.txt");

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum PromptError {
    #[error("user id must be non-empty")]
    EmptyUserId,
    #[error("a completion needs at least one item")]
    EmptyCompletion,
    #[error("item label {0:?} is empty or spans several lines")]
    InvalidLabel(String),
    #[error(
        "system turns are rendered from the template and may not appear in the dialogue (turn {0})"
    )]
    SystemTurnInDialogue(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

impl Role {
    fn heading(self) -> &'static str {
        match self {
            Role::System => "System",
            Role::User => "User",
            Role::Assistant => "Assistant",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Turn {
    pub role: Role,
    pub text: String,
}

impl Turn {
    pub fn new(role: Role, text: impl Into<String>) -> Self {
        Self {
            role,
            text: text.into(),
        }
    }
}

/// Names used to fill the templates for one recommendation domain.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Domain {
    /// `{Recommendation_Domain}`, e.g. `movie`.
    pub recommendation_domain: String,
    /// `{Item_Type}`, e.g. `movies`.
    pub item_type: String,
    /// schema.org class of the entities, e.g. `Movie`.
    pub entity_type: String,
}

impl Domain {
    pub fn movie() -> Self {
        Self {
            recommendation_domain: "movie".into(),
            item_type: "movies".into(),
            entity_type: "Movie".into(),
        }
    }

    pub fn recipe() -> Self {
        Self {
            recommendation_domain: "recipe".into(),
            item_type: "recipes".into(),
            entity_type: "Recipe".into(),
        }
    }

    /// The one-turn request used by synthetic examples.
    pub fn synthetic_request(&self) -> String {
        fill(
            SYNTHETIC_REQUEST_TEMPLATE,
            &[("{Item_Type}", &self.item_type)],
        )
    }
}

/// The system prompt is always the first turn; `dialogue` holds the rest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptSpec {
    pub recommendation_domain: String,
    pub item_type: String,
    pub user_id: String,
    pub subpkg: SubPkg,
    pub dialogue: Vec<Turn>,
}

impl PromptSpec {
    pub fn new(domain: &Domain, subpkg: SubPkg, dialogue: Vec<Turn>) -> Self {
        Self {
            recommendation_domain: domain.recommendation_domain.clone(),
            item_type: domain.item_type.clone(),
            user_id: subpkg.user_id.clone(),
            subpkg,
            dialogue,
        }
    }
}

/// Single-pass placeholder substitution: text inserted for one placeholder is
/// never rescanned for another.
fn fill(template: &str, values: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len() + 64);
    let mut rest = template;
    'outer: while !rest.is_empty() {
        if rest.starts_with('{') {
            for (key, value) in values {
                if let Some(after) = rest.strip_prefix(key) {
                    out.push_str(value);
                    rest = after;
                    continue 'outer;
                }
            }
        }
        let ch = rest.chars().next().expect("non-empty");
        out.push(ch);
        rest = &rest[ch.len_utf8()..];
    }
    out
}

pub fn render_system_prompt(spec: &PromptSpec) -> Result<String, PromptError> {
    if spec.user_id.is_empty() {
        return Err(PromptError::EmptyUserId);
    }
    let pkg_json = spec.subpkg.to_prompt_json();
    Ok(fill(
        SYSTEM_PROMPT_TEMPLATE,
        &[
            ("{Recommendation_Domain}", &spec.recommendation_domain),
            ("{Item_Type}", &spec.item_type),
            ("{User_ID}", &spec.user_id),
            ("{User_PKG}", &pkg_json),
        ],
    ))
}

/// Full prompt text: the system prompt followed by the dialogue, one
/// `Role: text` block per turn separated by blank lines.
pub fn render_prompt(spec: &PromptSpec) -> Result<String, PromptError> {
    if let Some(i) = spec.dialogue.iter().position(|t| t.role == Role::System) {
        return Err(PromptError::SystemTurnInDialogue(i));
    }
    let mut out = format!(
        "{}: {}",
        Role::System.heading(),
        render_system_prompt(spec)?
    );
    for turn in &spec.dialogue {
        out.push_str("\n\n");
        out.push_str(turn.role.heading());
        out.push_str(": ");
        out.push_str(&turn.text);
    }
    Ok(out)
}

pub fn format_completion<S: AsRef<str>>(items: &[S]) -> Result<String, PromptError> {
    if items.is_empty() {
        return Err(PromptError::EmptyCompletion);
    }
    let mut out = String::from(COMPLETION_HEADER);
    for item in items {
        let item = item.as_ref();
        if item.trim().is_empty() || item.contains(['\n', '\r']) {
            return Err(PromptError::InvalidLabel(item.to_string()));
        }
        out.push_str("\n- ");
        out.push_str(item);
    }
    Ok(out)
}

/// Extracts dash-bulleted items in order. Items repeated under
/// [`normalize_label`] keep their first occurrence only.
pub fn parse_completion(text: &str) -> Vec<String> {
    let mut seen = HashSet::new();
    text.lines()
        .filter_map(|line| line.trim_start().strip_prefix('-'))
        .map(str::trim)
        .filter(|item| !item.is_empty())
        .filter(|item| seen.insert(normalize_label(item)))
        .map(str::to_string)
        .collect()
}

/// Matching key for item labels: trimmed, internal whitespace collapsed,
/// lower-cased. Parenthesized years are kept.
pub fn normalize_label(label: &str) -> String {
    label
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

/// Labels recovered from the knowledge-graph JSON embedded in a prompt.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PromptPkg {
    pub user_id: String,
    pub liked: Vec<String>,
    pub disliked: Vec<String>,
}

fn pkg_marker() -> &'static str {
    let before = SYSTEM_PROMPT_TEMPLATE
        .split("{User_PKG}")
        .next()
        .expect("template has a User_PKG slot");
    let start = before
        .rfind("{User_ID}")
        .map_or(0, |i| i + "{User_ID}".len());
    &before[start..]
}

/// Reads back the knowledge graph that [`render_system_prompt`] embedded.
pub fn parse_prompt_pkg(prompt: &str) -> Option<PromptPkg> {
    let start = prompt.find(pkg_marker())? + pkg_marker().len();
    let value = serde_json::Deserializer::from_str(&prompt[start..])
        .into_iter::<Value>()
        .next()?
        .ok()?;
    let (user_id, inner) = value.as_object()?.iter().next()?;
    let inner = inner.as_object()?;
    let labels = |key: &str| -> Option<Vec<String>> {
        match inner.get(key) {
            None => Some(Vec::new()),
            Some(v) => v
                .as_array()?
                .iter()
                .map(|s| s.as_str().map(str::to_string))
                .collect(),
        }
    };
    Some(PromptPkg {
        user_id: user_id.clone(),
        liked: labels("liked")?,
        disliked: labels("disliked")?,
    })
}
