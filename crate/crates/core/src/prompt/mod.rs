//! Prompt strategies, template rendering and verdict parsing.

mod parse;

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::connectome::RegionPair;

pub use parse::{parse_classification, Classification, ParseError};
pub(crate) use parse::normalize_apostrophes;

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("reading template {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("unknown prompt strategy `{0}`")]
    UnknownStrategy(String),
    #[error("citation prompts need between 1 and 5 context chunks, got {0}")]
    ContextCount(usize),
    #[error("the rag_citation strategy is rendered with render_rag_citation")]
    NeedsContext,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptBase {
    Minimal,
    Reasoning,
    ChainOfThought,
    RagCitation,
}

/// One of the prompting strategies, optionally with the uncertainty variant
/// that lets the model answer "don't know".
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PromptStrategy {
    pub base: PromptBase,
    pub uncertainty_variant: bool,
}

impl PromptStrategy {
    pub const fn new(base: PromptBase, uncertainty_variant: bool) -> Self {
        Self {
            base,
            uncertainty_variant,
        }
    }

    /// The citation prompt always admits "don't know".
    pub fn allows_dont_know(&self) -> bool {
        self.uncertainty_variant || self.base == PromptBase::RagCitation
    }
}

impl fmt::Display for PromptStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let base = match self.base {
            PromptBase::Minimal => "minimal",
            PromptBase::Reasoning => "reasoning",
            PromptBase::ChainOfThought => "cot",
            PromptBase::RagCitation => "rag_citation",
        };
        if self.uncertainty_variant {
            write!(f, "{base}+upv")
        } else {
            f.write_str(base)
        }
    }
}

impl FromStr for PromptStrategy {
    type Err = PromptError;

    fn from_str(s: &str) -> Result<Self, PromptError> {
        let lower = s.trim().to_ascii_lowercase();
        let (base, upv) = match lower.strip_suffix("+upv") {
            Some(b) => (b, true),
            None => (lower.as_str(), false),
        };
        let base = match base {
            "minimal" => PromptBase::Minimal,
            "reasoning" => PromptBase::Reasoning,
            "cot" | "chain_of_thought" | "chain-of-thought" => PromptBase::ChainOfThought,
            "rag_citation" | "rag" | "citation" => PromptBase::RagCitation,
            _ => return Err(PromptError::UnknownStrategy(s.to_string())),
        };
        Ok(Self::new(base, upv))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ordering {
    Forward,
    Reverse,
}

impl Ordering {
    /// Region names in the order they appear in the prompt text.
    pub fn names<'p>(&self, pair: &'p RegionPair) -> (&'p str, &'p str) {
        match self {
            Ordering::Forward => (&pair.a().name, &pair.b().name),
            Ordering::Reverse => (&pair.b().name, &pair.a().name),
        }
    }
}

impl FromStr for Ordering {
    type Err = PromptError;

    fn from_str(s: &str) -> Result<Self, PromptError> {
        match s.trim().to_ascii_lowercase().as_str() {
            "forward" => Ok(Ordering::Forward),
            "reverse" => Ok(Ordering::Reverse),
            _ => Err(PromptError::UnknownStrategy(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

impl Message {
    pub fn new(role: Role, content: impl Into<String>) -> Self {
        Self {
            role,
            content: content.into(),
        }
    }
}

/// Role-tagged messages. System messages come first and there is at least
/// one user message. Consecutive user messages are conversation stages: each
/// is sent after the model has answered the previous one.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MessageSequence(Vec<Message>);

impl MessageSequence {
    pub fn new(messages: Vec<Message>) -> Option<Self> {
        let first_non_system = messages
            .iter()
            .position(|m| m.role != Role::System)
            .unwrap_or(messages.len());
        let systems_first = messages[first_non_system..]
            .iter()
            .all(|m| m.role != Role::System);
        let has_user = messages.iter().any(|m| m.role == Role::User);
        (systems_first && has_user).then_some(Self(messages))
    }

    pub fn messages(&self) -> &[Message] {
        &self.0
    }

    pub fn user_turns(&self) -> impl Iterator<Item = &Message> {
        self.0.iter().filter(|m| m.role == Role::User)
    }

    pub fn system(&self) -> impl Iterator<Item = &Message> {
        self.0.iter().filter(|m| m.role == Role::System)
    }
}

/// Text of every template, with `{region1}`, `{region2}`, `{region}` and
/// `{context}` placeholders.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Templates {
    pub minimal: String,
    pub reasoning: String,
    pub summary: String,
    pub cot: String,
    pub upv: String,
    pub rag_system: String,
    pub rag_user: String,
    pub region_context: String,
}

impl Default for Templates {
    fn default() -> Self {
        Self {
            minimal: include_str!("templates/minimal.txt").trim_end().to_string(),
            reasoning: include_str!("templates/reasoning.txt").trim_end().to_string(),
            summary: include_str!("templates/summary.txt").trim_end().to_string(),
            cot: include_str!("templates/cot.txt").trim_end().to_string(),
            upv: include_str!("templates/upv.txt").trim_end().to_string(),
            rag_system: include_str!("templates/rag_system.txt").trim_end().to_string(),
            rag_user: include_str!("templates/rag_user.txt").trim_end().to_string(),
            region_context: include_str!("templates/region_context.txt").trim_end().to_string(),
        }
    }
}

impl Templates {
    /// Starts from the embedded defaults and replaces every template that has
    /// a `<name>.txt` file in `dir`.
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self, PromptError> {
        let dir = dir.as_ref();
        let mut t = Self::default();
        let slots: [(&str, &mut String); 8] = [
            ("minimal", &mut t.minimal),
            ("reasoning", &mut t.reasoning),
            ("summary", &mut t.summary),
            ("cot", &mut t.cot),
            ("upv", &mut t.upv),
            ("rag_system", &mut t.rag_system),
            ("rag_user", &mut t.rag_user),
            ("region_context", &mut t.region_context),
        ];
        for (name, slot) in slots {
            let path = dir.join(format!("{name}.txt"));
            match std::fs::read_to_string(&path) {
                Ok(text) => *slot = text.trim_end().to_string(),
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
                Err(source) => {
                    return Err(PromptError::Io {
                        path: path.display().to_string(),
                        source,
                    })
                }
            }
        }
        Ok(t)
    }
}

fn fill(template: &str, first: &str, second: &str) -> String {
    template
        .replace("{region1}", first)
        .replace("{region2}", second)
}

fn with_upv(text: String, templates: &Templates, upv: bool) -> String {
    if upv {
        format!("{text} {}", templates.upv)
    } else {
        text
    }
}

/// Renders one query for `pair` under `strategy`.
pub fn render(
    templates: &Templates,
    strategy: PromptStrategy,
    pair: &RegionPair,
    ordering: Ordering,
    system_context: Option<&str>,
) -> Result<MessageSequence, PromptError> {
    let (first, second) = ordering.names(pair);
    let upv = strategy.uncertainty_variant;
    let mut messages = Vec::new();
    if let Some(ctx) = system_context {
        messages.push(Message::new(Role::System, ctx));
    }
    match strategy.base {
        PromptBase::Minimal => {
            let text = with_upv(fill(&templates.minimal, first, second), templates, upv);
            messages.push(Message::new(Role::User, text));
        }
        PromptBase::Reasoning | PromptBase::ChainOfThought => {
            if strategy.base == PromptBase::ChainOfThought {
                messages.push(Message::new(Role::User, fill(&templates.cot, first, second)));
            }
            messages.push(Message::new(
                Role::User,
                fill(&templates.reasoning, first, second),
            ));
            let summary = with_upv(fill(&templates.summary, first, second), templates, upv);
            messages.push(Message::new(Role::User, summary));
        }
        PromptBase::RagCitation => return Err(PromptError::NeedsContext),
    }
    Ok(MessageSequence(messages))
}

/// A retrieved literature snippet shown to the model.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContextChunk {
    pub text: String,
    pub title: String,
    pub pmcid: String,
}

/// Formats snippets, each wrapped in its own `<context>` tags.
pub fn format_context(chunks: &[ContextChunk]) -> String {
    chunks
        .iter()
        .map(|c| {
            format!(
                "<context> title: {} | pmcid: {} | {} </context>",
                c.title, c.pmcid, c.text
            )
        })
        .collect::<Vec<_>>()
        .join("\n")
}

/// Renders the citation-grounded query: fixed system prompt plus a user
/// message carrying between one and five snippets.
pub fn render_rag_citation(
    templates: &Templates,
    pair: &RegionPair,
    ordering: Ordering,
    chunks: &[ContextChunk],
) -> Result<MessageSequence, PromptError> {
    if chunks.is_empty() || chunks.len() > 5 {
        return Err(PromptError::ContextCount(chunks.len()));
    }
    let (first, second) = ordering.names(pair);
    let user = fill(&templates.rag_user, first, second).replace("{context}", &format_context(chunks));
    Ok(MessageSequence(vec![
        Message::new(Role::System, templates.rag_system.clone()),
        Message::new(Role::User, user),
    ]))
}

/// The summarization request used to build region context.
pub fn render_region_summary(templates: &Templates, region: &str, context: &str) -> MessageSequence {
    let text = templates
        .region_context
        .replace("{region}", region)
        .replace("{context}", context);
    MessageSequence(vec![Message::new(Role::User, text)])
}
