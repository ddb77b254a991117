//! Word-level tokenizer: lower-cased words, punctuation split into its own token.

const PUNCT: &[char] = &['?', '.', ',', '!', ';', ':', '"', '(', ')'];

pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for word in text.split_whitespace() {
        let mut cur = String::new();
        for ch in word.chars() {
            if PUNCT.contains(&ch) {
                if !cur.is_empty() {
                    out.push(std::mem::take(&mut cur));
                }
                out.push(ch.to_string());
            } else {
                cur.extend(ch.to_lowercase());
            }
        }
        if !cur.is_empty() {
            out.push(cur);
        }
    }
    out
}

/// Joins tokens with single spaces; closing punctuation attaches to the
/// preceding word.
pub fn detokenize<T: AsRef<str>>(tokens: &[T]) -> String {
    let mut s = String::new();
    for (i, t) in tokens.iter().enumerate() {
        let t = t.as_ref();
        let attach = t.len() == 1 && matches!(t, "?" | "." | "," | "!" | ";" | ":" | ")");
        if i > 0 && !attach {
            s.push(' ');
        }
        s.push_str(t);
    }
    s
}
