use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// The model's final answer about a region pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Classification {
    True,
    False,
    DontKnow,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("no verdict found in model output: {snippet:?}")]
pub struct ParseError {
    pub snippet: String,
}

fn verdict_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"(?i)\b(true|false|don'?t\s+know|do\s+not\s+know)\b").expect("valid regex")
    })
}

pub(crate) fn normalize_apostrophes(text: &str) -> String {
    text.chars()
        .map(|c| match c {
            '\u{2018}' | '\u{2019}' | '\u{02BC}' | '`' | '\u{00B4}' => '\'',
            c => c,
        })
        .collect()
}

/// Extracts the verdict from model text. The last verdict word wins; a
/// "don't know" only counts when `upv` is set.
pub fn parse_classification(text: &str, upv: bool) -> Result<Classification, ParseError> {
    let text = normalize_apostrophes(text);
    verdict_regex()
        .find_iter(&text)
        .filter_map(|m| {
            let word = m.as_str().to_ascii_lowercase();
            match word.as_str() {
                "true" => Some(Classification::True),
                "false" => Some(Classification::False),
                _ if upv => Some(Classification::DontKnow),
                _ => None,
            }
        })
        .last()
        .ok_or_else(|| ParseError {
            snippet: text.chars().take(80).collect(),
        })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn plain_verdicts() {
        assert_eq!(parse_classification("True", false), Ok(Classification::True));
        assert_eq!(parse_classification("FALSE.", false), Ok(Classification::False));
        assert_eq!(parse_classification("  \"true\"\n", false), Ok(Classification::True));
    }

    #[test]
    fn dont_know_needs_upv() {
        assert_eq!(parse_classification("don't know", true), Ok(Classification::DontKnow));
        assert_eq!(parse_classification("Don\u{2019}t know.", true), Ok(Classification::DontKnow));
        assert_eq!(parse_classification("dont know", true), Ok(Classification::DontKnow));
        assert!(parse_classification("don't know", false).is_err());
    }

    #[test]
    fn last_verdict_wins() {
        let text = "It is not clearly true that they connect... Final answer: False";
        assert_eq!(parse_classification(text, false), Ok(Classification::False));
        let text = "True or False? I don't know";
        assert_eq!(parse_classification(text, true), Ok(Classification::DontKnow));
        assert_eq!(parse_classification(text, false), Ok(Classification::False));
    }

    #[test]
    fn unparseable_is_an_error_not_dont_know() {
        assert!(parse_classification("Perhaps.", true).is_err());
        assert!(parse_classification("", true).is_err());
        assert!(parse_classification("untrue", false).is_err());
    }

    proptest! {
        #[test]
        fn never_panics_and_yields_at_most_one(text in ".{0,200}", upv in any::<bool>()) {
            let _ = parse_classification(&text, upv);
        }

        #[test]
        fn canonical_answer_after_arbitrary_prefix(prefix in "[a-z ,.]{0,80}") {
            let text = format!("{prefix} True");
            prop_assert_eq!(parse_classification(&text, true), Ok(Classification::True));
        }
    }
}
