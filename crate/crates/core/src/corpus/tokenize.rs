/// Maximum tokens kept per utterance.
pub const MAX_TOKENS: usize = 50;

/// Placeholder produced for text with no tokens.
pub const EMPTY_TOKEN: &str = "<empty>";

/// Lowercases and splits on whitespace; inside each chunk, runs of
/// alphanumeric characters form one token and every other character is a
/// token of its own. Output is truncated to `max_len`.
pub fn tokenize(text: &str, max_len: usize) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut word = String::new();
    for ch in text.chars().flat_map(char::to_lowercase) {
        if ch.is_alphanumeric() {
            word.push(ch);
            continue;
        }
        if !word.is_empty() {
            tokens.push(std::mem::take(&mut word));
        }
        if !ch.is_whitespace() {
            tokens.push(ch.to_string());
        }
    }
    if !word.is_empty() {
        tokens.push(word);
    }
    tokens.truncate(max_len.max(1));
    if tokens.is_empty() {
        tokens.push(EMPTY_TOKEN.to_string());
    }
    tokens
}
