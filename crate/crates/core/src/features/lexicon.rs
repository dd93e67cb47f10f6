//! Pattern lexicons: named categories of token phrases.
//!
//! File format, one lexicon per file:
//!
//! ```text
//! # comment
//! [category_name]          <- matches anywhere in the utterance
//! [another_name] @start    <- matches only at the first token
//! single
//! a longer phrase
//! ```
//!
//! Patterns are matched on the shared tokenization, so punctuation and case
//! in the source text do not matter.

use crate::text;
use std::collections::HashSet;
use std::path::Path;

use super::FeatureError;

/// Where a category's patterns may match.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Position {
    Anywhere,
    UtteranceStart,
}

/// One named category: a set of token phrases and a positional constraint.
#[derive(Debug, Clone, PartialEq)]
pub struct Category {
    pub name: String,
    pub position: Position,
    /// Tokenized phrases, longest first so matching is greedy.
    pub patterns: Vec<Vec<String>>,
}

impl Category {
    /// Count non-overlapping, leftmost-greedy pattern matches in `tokens`.
    pub fn count_matches(&self, tokens: &[String]) -> usize {
        match self.position {
            Position::UtteranceStart => usize::from(self.match_at(tokens, 0).is_some()),
            Position::Anywhere => {
                let mut count = 0;
                let mut i = 0;
                while i < tokens.len() {
                    match self.match_at(tokens, i) {
                        Some(len) => {
                            count += 1;
                            i += len;
                        }
                        None => i += 1,
                    }
                }
                count
            }
        }
    }

    /// Length of the longest pattern matching at `start`, if any.
    fn match_at(&self, tokens: &[String], start: usize) -> Option<usize> {
        self.patterns
            .iter()
            .find(|p| tokens[start..].len() >= p.len() && tokens[start..start + p.len()] == p[..])
            .map(|p| p.len())
    }
}

/// An ordered set of categories parsed from one lexicon file.
#[derive(Debug, Clone, PartialEq)]
pub struct Lexicon {
    pub name: String,
    pub categories: Vec<Category>,
}

impl Lexicon {
    /// Parse lexicon text. `name` identifies the lexicon in error messages.
    pub fn parse(name: &str, content: &str) -> Result<Lexicon, FeatureError> {
        let mut categories: Vec<Category> = Vec::new();
        let mut seen = HashSet::new();
        for (i, raw) in content.lines().enumerate() {
            let lineno = i + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let (cat, suffix) = rest.split_once(']').ok_or_else(|| FeatureError::LexiconParse {
                    lexicon: name.to_string(),
                    line: lineno,
                    message: "unterminated [category] header".into(),
                })?;
                let cat = cat.trim();
                let position = match suffix.trim() {
                    "" => Position::Anywhere,
                    "@start" => Position::UtteranceStart,
                    other => {
                        return Err(FeatureError::LexiconParse {
                            lexicon: name.to_string(),
                            line: lineno,
                            message: format!("unknown header suffix {other:?}"),
                        })
                    }
                };
                if cat.is_empty() || !seen.insert(cat.to_string()) {
                    return Err(FeatureError::LexiconParse {
                        lexicon: name.to_string(),
                        line: lineno,
                        message: format!("empty or duplicate category name {cat:?}"),
                    });
                }
                categories.push(Category { name: cat.to_string(), position, patterns: Vec::new() });
                continue;
            }
            let Some(current) = categories.last_mut() else {
                return Err(FeatureError::LexiconParse {
                    lexicon: name.to_string(),
                    line: lineno,
                    message: "pattern before any [category] header".into(),
                });
            };
            if line.to_lowercase() != line {
                return Err(FeatureError::LexiconParse {
                    lexicon: name.to_string(),
                    line: lineno,
                    message: format!("pattern {line:?} must be lowercase"),
                });
            }
            let tokens = text::tokenize(line);
            if tokens.is_empty() {
                return Err(FeatureError::LexiconParse {
                    lexicon: name.to_string(),
                    line: lineno,
                    message: format!("pattern {line:?} has no tokens"),
                });
            }
            current.patterns.push(tokens);
        }
        for c in &mut categories {
            // Longest first; lexicographic among equals for determinism.
            c.patterns.sort_by(|a, b| b.len().cmp(&a.len()).then_with(|| a.cmp(b)));
        }
        Ok(Lexicon { name: name.to_string(), categories })
    }

    /// Load a lexicon from a file; the stem becomes the lexicon name.
    pub fn load(path: impl AsRef<Path>) -> Result<Lexicon, FeatureError> {
        let path = path.as_ref();
        let name = path.file_stem().and_then(|s| s.to_str()).unwrap_or("lexicon");
        let content = std::fs::read_to_string(path)?;
        Lexicon::parse(name, &content)
    }

    pub fn category(&self, name: &str) -> Option<&Category> {
        self.categories.iter().find(|c| c.name == name)
    }

    /// Union of all single-token patterns, for word-set lexicons such as the
    /// function-word list.
    pub fn word_set(&self) -> HashSet<&str> {
        self.categories
            .iter()
            .flat_map(|c| c.patterns.iter())
            .filter(|p| p.len() == 1)
            .map(|p| p[0].as_str())
            .collect()
    }
}
