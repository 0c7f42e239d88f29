/// Lowercases ASCII letters, isolates every ASCII punctuation character as
/// its own token, and splits the rest on whitespace.
///
/// ```
/// use are_core::text::tokenize;
/// assert_eq!(tokenize("Don't stop"), ["don", "'", "t", "stop"]);
/// ```
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut current = String::new();
    for ch in text.chars() {
        if ch.is_whitespace() {
            flush(&mut current, &mut tokens);
        } else if ch.is_ascii_punctuation() {
            flush(&mut current, &mut tokens);
            tokens.push(ch.to_string());
        } else {
            current.push(ch.to_ascii_lowercase());
        }
    }
    flush(&mut current, &mut tokens);
    tokens
}

fn flush(current: &mut String, tokens: &mut Vec<String>) {
    if !current.is_empty() {
        tokens.push(std::mem::take(current));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixtures() {
        assert_eq!(tokenize("I like the idea."), ["i", "like", "the", "idea", "."]);
        assert!(tokenize("").is_empty());
        assert!(tokenize("  \t\n ").is_empty());
        assert_eq!(tokenize("Don't stop"), ["don", "'", "t", "stop"]);
        assert_eq!(tokenize("well-known (AG)"), ["well", "-", "known", "(", "ag", ")"]);
        assert_eq!(tokenize("Café ÉTÉ"), ["café", "ÉtÉ"]);
    }
}
