//! Tokenization shared by the corpus filters, feature extraction, and the
//! neural input pipeline.
//!
//! The tokenizer lowercases its input and splits on whitespace and
//! punctuation, with one exception: an apostrophe flanked by alphanumeric
//! characters stays inside its token, so `don't` is a single token. Keeping
//! one tokenizer everywhere makes the token-count filter and the
//! bag-of-words vocabulary consistent.

/// Apostrophe forms accepted inside a word.
fn is_apostrophe(c: char) -> bool {
    c == '\'' || c == '\u{2019}'
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric()
}

/// Split `text` into lowercase tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    let lower = text.to_lowercase();
    let chars: Vec<char> = lower.chars().collect();
    let mut tokens = Vec::new();
    let mut current = String::new();

    for (i, &c) in chars.iter().enumerate() {
        if is_word_char(c) {
            current.push(c);
        } else if is_apostrophe(c)
            && !current.is_empty()
            && chars.get(i + 1).is_some_and(|&n| is_word_char(n))
        {
            current.push('\'');
        } else if !current.is_empty() {
            tokens.push(std::mem::take(&mut current));
        }
    }
    if !current.is_empty() {
        tokens.push(current);
    }
    tokens
}

/// Number of tokens in `text`.
pub fn count_tokens(text: &str) -> usize {
    tokenize(text).len()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splits_on_whitespace() {
        assert_eq!(tokenize("hello world"), vec!["hello", "world"]);
    }

    #[test]
    fn single_token() {
        assert_eq!(tokenize("hi"), vec!["hi"]);
    }

    #[test]
    fn keeps_internal_apostrophe() {
        assert_eq!(tokenize("don't revert"), vec!["don't", "revert"]);
        assert_eq!(count_tokens("don't revert"), 2);
    }

    #[test]
    fn lowercases() {
        assert_eq!(tokenize("Hello WORLD"), vec!["hello", "world"]);
    }

    #[test]
    fn strips_punctuation() {
        assert_eq!(
            tokenize("well, that's (very) wrong!"),
            vec!["well", "that's", "very", "wrong"]
        );
    }

    #[test]
    fn trailing_apostrophe_is_not_kept() {
        assert_eq!(tokenize("editors' notes"), vec!["editors", "notes"]);
        assert_eq!(tokenize("'quoted'"), vec!["quoted"]);
    }

    #[test]
    fn curly_apostrophe() {
        assert_eq!(tokenize("don\u{2019}t"), vec!["don't"]);
    }

    #[test]
    fn empty_and_whitespace() {
        assert!(tokenize("").is_empty());
        assert!(tokenize("  \t\n ").is_empty());
    }

    #[test]
    fn unicode_words() {
        assert_eq!(tokenize("naïve café"), vec!["naïve", "café"]);
    }
}
