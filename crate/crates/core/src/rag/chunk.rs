//! Text splitting: recursive character splitting for literature and a
//! sentence-grouping splitter for parcellation documentation.

use std::collections::VecDeque;

use super::embed::{cosine, Embedder};
use super::RagError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Level {
    Paragraph,
    Line,
    Sentence,
    Word,
    Char,
}

impl Level {
    fn finer(self) -> Option<Level> {
        match self {
            Level::Paragraph => Some(Level::Line),
            Level::Line => Some(Level::Sentence),
            Level::Sentence => Some(Level::Word),
            Level::Word => Some(Level::Char),
            Level::Char => None,
        }
    }
}

fn char_len(s: &str) -> usize {
    s.chars().count()
}

/// Cuts `text` after each boundary of the given kind. Separators stay on the
/// preceding piece, so the pieces concatenate back to `text`.
fn cut(text: &str, level: Level) -> Vec<&str> {
    let mut pieces = Vec::new();
    let mut start = 0;
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    for (k, &(i, c)) in chars.iter().enumerate() {
        let next = chars.get(k + 1).map(|&(_, n)| n);
        let end = i + c.len_utf8();
        let boundary = match level {
            // end of a run of two or more newlines
            Level::Paragraph => c == '\n' && next != Some('\n') && k > 0 && chars[k - 1].1 == '\n',
            Level::Line => c == '\n',
            Level::Sentence => {
                matches!(c, ' ' | '\n' | '\t')
                    && k > 0
                    && matches!(chars[k - 1].1, '.' | '?' | '!')
                    && next.is_some_and(|n| !n.is_whitespace())
            }
            Level::Word => c.is_whitespace() && next.is_some_and(|n| !n.is_whitespace()),
            Level::Char => true,
        };
        if boundary {
            pieces.push(&text[start..end]);
            start = end;
        }
    }
    if start < text.len() {
        pieces.push(&text[start..]);
    }
    pieces
}

/// Breaks `text` into pieces no longer than `size`, using the coarsest
/// boundary that works.
fn atoms<'t>(text: &'t str, size: usize, level: Level, out: &mut Vec<&'t str>) {
    if char_len(text) <= size {
        out.push(text);
        return;
    }
    let pieces = cut(text, level);
    let Some(finer) = level.finer() else {
        out.extend(pieces);
        return;
    };
    if pieces.len() <= 1 {
        atoms(text, size, finer, out);
        return;
    }
    for piece in pieces {
        if char_len(piece) <= size {
            out.push(piece);
        } else {
            atoms(piece, size, finer, out);
        }
    }
}

/// Splits on paragraph, then line, sentence, word and character boundaries.
/// No chunk exceeds `chunk_size` characters and consecutive chunks share up
/// to `overlap` characters of whole pieces.
pub fn split_recursive(text: &str, chunk_size: usize, overlap: usize) -> Result<Vec<String>, RagError> {
    if chunk_size == 0 || overlap >= chunk_size {
        return Err(RagError::InvalidChunking { chunk_size, overlap });
    }
    let mut pieces = Vec::new();
    atoms(text, chunk_size, Level::Paragraph, &mut pieces);

    let mut chunks = Vec::new();
    let mut window: VecDeque<(&str, usize)> = VecDeque::new();
    let mut total = 0;
    let emit = |window: &VecDeque<(&str, usize)>, chunks: &mut Vec<String>| {
        let chunk: String = window.iter().map(|(p, _)| *p).collect();
        if !chunk.trim().is_empty() {
            chunks.push(chunk);
        }
    };
    for piece in pieces {
        let len = char_len(piece);
        if total + len > chunk_size && !window.is_empty() {
            emit(&window, &mut chunks);
            while total > overlap || (total > 0 && total + len > chunk_size) {
                let (_, l) = window.pop_front().expect("non-empty window");
                total -= l;
            }
        }
        window.push_back((piece, len));
        total += len;
    }
    if !window.is_empty() {
        emit(&window, &mut chunks);
    }
    Ok(chunks)
}

/// Sentences of `text`, paragraph breaks included as boundaries.
pub fn sentences(text: &str) -> Vec<&str> {
    cut(text, Level::Line)
        .into_iter()
        .flat_map(|line| cut(line, Level::Sentence))
        .filter(|s| !s.trim().is_empty())
        .collect()
}

/// Settings for sentence grouping.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SemanticChunking {
    /// Adjacent sentences stay together while their similarity is at least this.
    pub threshold: f64,
    /// Sentences per chunk when no embedder is available.
    pub window: usize,
    pub max_chars: usize,
}

impl Default for SemanticChunking {
    fn default() -> Self {
        Self {
            threshold: 0.8,
            window: 3,
            max_chars: 2500,
        }
    }
}

/// Groups consecutive sentences. With an embedder a new chunk starts when a
/// sentence's similarity to the previous one drops below the threshold;
/// without one, fixed windows of sentences are used.
pub fn split_semantic(
    text: &str,
    settings: &SemanticChunking,
    embedder: Option<&dyn Embedder>,
) -> Result<Vec<String>, RagError> {
    if settings.window == 0 || settings.max_chars == 0 {
        return Err(RagError::InvalidChunking {
            chunk_size: settings.max_chars,
            overlap: 0,
        });
    }
    let sents = sentences(text);
    if sents.is_empty() {
        return Ok(Vec::new());
    }
    let vectors = match embedder {
        Some(e) => Some(e.embed(&sents.iter().map(|s| s.trim()).collect::<Vec<_>>())?),
        None => None,
    };
    let mut chunks = Vec::new();
    let mut current = String::new();
    let mut count = 0;
    for (k, sentence) in sents.iter().enumerate() {
        let keep_going = match &vectors {
            Some(v) => k > 0 && cosine(&v[k - 1], &v[k]) >= settings.threshold,
            None => count < settings.window,
        };
        if !current.is_empty()
            && (!keep_going || char_len(&current) + char_len(sentence) > settings.max_chars)
        {
            chunks.push(std::mem::take(&mut current).trim().to_string());
            count = 0;
        }
        current.push_str(sentence);
        count += 1;
    }
    if !current.trim().is_empty() {
        chunks.push(current.trim().to_string());
    }
    // oversized single sentences are split further
    let mut out = Vec::new();
    for c in chunks {
        if char_len(&c) > settings.max_chars {
            out.extend(split_recursive(&c, settings.max_chars, 0)?);
        } else {
            out.push(c);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rag::embed::HashEmbedder;
    use proptest::prelude::*;

    /// Fifty numbered sentences of exactly 100 characters each.
    fn synthetic_document() -> (String, Vec<String>) {
        let sents: Vec<String> = (1..=50)
            .map(|i| {
                let head = format!("Sentence {i:02} ");
                let body = "x".repeat(98 - head.len());
                format!("{head}{body}. ")
            })
            .collect();
        (sents.concat(), sents)
    }

    #[test]
    fn five_thousand_chars_make_three_chunks() {
        let (doc, sents) = synthetic_document();
        assert_eq!(doc.len(), 5000);
        let chunks = split_recursive(&doc, 2500, 200).unwrap();
        assert_eq!(chunks.len(), 3);
        // worked by hand: sentences 1-25, 24-48, 47-50
        assert_eq!(chunks[0], sents[0..25].concat());
        assert_eq!(chunks[1], sents[23..48].concat());
        assert_eq!(chunks[2], sents[46..50].concat());
        for pair in chunks.windows(2) {
            let tail = &pair[0][pair[0].len() - 200..];
            assert!(pair[1].starts_with(tail));
        }
    }

    #[test]
    fn short_document_is_one_chunk() {
        let text = "The cingulum runs above the corpus callosum.";
        assert_eq!(split_recursive(text, 2500, 200).unwrap(), vec![text.to_string()]);
    }

    #[test]
    fn overlap_must_be_smaller_than_size() {
        assert!(split_recursive("abc", 100, 100).is_err());
        assert!(split_recursive("abc", 100, 150).is_err());
        assert!(split_recursive("abc", 0, 0).is_err());
    }

    #[test]
    fn paragraphs_are_preferred_over_sentences() {
        let p1 = format!("{}.", "a".repeat(40));
        let p2 = format!("{}.", "b".repeat(40));
        let text = format!("{p1}\n\n{p2}");
        let chunks = split_recursive(&text, 50, 0).unwrap();
        assert_eq!(chunks, vec![format!("{p1}\n\n"), p2]);
    }

    #[test]
    fn unbroken_text_falls_back_to_characters() {
        let text = "y".repeat(250);
        let chunks = split_recursive(&text, 100, 10).unwrap();
        assert!(chunks.iter().all(|c| c.chars().count() <= 100));
        assert_eq!(chunks[0].len(), 100);
        assert_eq!(chunks[1].len(), 100);
    }

    #[test]
    fn sentence_windows_without_embedder() {
        let text = "One. Two. Three. Four. Five.";
        let s = SemanticChunking { window: 2, ..Default::default() };
        let chunks = split_semantic(text, &s, None).unwrap();
        assert_eq!(chunks, vec!["One. Two.", "Three. Four.", "Five."]);
    }

    #[test]
    fn similar_sentences_are_grouped() {
        let text = "The insula lies deep. The insula lies deep indeed. Cats purr loudly.";
        let e = HashEmbedder::default();
        let chunks = split_semantic(text, &SemanticChunking::default(), Some(&e)).unwrap();
        assert_eq!(chunks.len(), 2);
        assert!(chunks[1].starts_with("Cats"));
    }

    proptest! {
        #[test]
        fn chunks_respect_size_and_cover_text(
            words in proptest::collection::vec("[a-z]{1,12}[.]?", 1..300),
            size in 20usize..400,
            frac in 0.0f64..0.9,
        ) {
            let text = words.join(" ");
            let overlap = (size as f64 * frac) as usize;
            let chunks = split_recursive(&text, size, overlap).unwrap();
            for c in &chunks {
                prop_assert!(c.chars().count() <= size);
            }
            // every word shows up somewhere
            for w in &words {
                prop_assert!(chunks.iter().any(|c| c.contains(w.as_str())));
            }
            prop_assert_eq!(split_recursive(&text, size, overlap).unwrap(), chunks);
        }
    }
}
