/// A token with its character (not byte) offsets in the source text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Token {
    pub text: String,
    pub start: usize,
    pub end: usize,
}

fn is_punct(c: char) -> bool {
    !c.is_alphanumeric() && !c.is_whitespace()
}

/// Lowercases, splits on whitespace, and emits every punctuation character
/// as its own token.
pub fn tokenize(text: &str) -> Vec<Token> {
    tokenize_with_breaks(text, &[])
}

/// Like [`tokenize`], but additionally splits any token that straddles one
/// of the character offsets in `breaks`.
pub fn tokenize_with_breaks(text: &str, breaks: &[usize]) -> Vec<Token> {
    let chars: Vec<char> = text.chars().collect();
    let mut tokens = Vec::new();
    let mut cur_start: Option<usize> = None;
    let flush = |tokens: &mut Vec<Token>, start: usize, end: usize| {
        let s: String = chars[start..end].iter().collect::<String>().to_lowercase();
        tokens.push(Token { text: s, start, end });
    };
    for (i, &c) in chars.iter().enumerate() {
        if let Some(s) = cur_start {
            if c.is_whitespace() || is_punct(c) || breaks.contains(&i) {
                flush(&mut tokens, s, i);
                cur_start = None;
            }
        }
        if c.is_whitespace() {
            continue;
        }
        if is_punct(c) {
            flush(&mut tokens, i, i + 1);
        } else if cur_start.is_none() {
            cur_start = Some(i);
        }
    }
    if let Some(s) = cur_start {
        flush(&mut tokens, s, chars.len());
    }
    tokens
}

/// Plain token strings of [`tokenize`].
pub fn tokenize_words(text: &str) -> Vec<String> {
    tokenize(text).into_iter().map(|t| t.text).collect()
}
