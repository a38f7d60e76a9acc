/// Lower-cases `raw`, deletes punctuation and splits on whitespace. A question
/// mark is kept and always becomes a token of its own.
pub fn normalize_and_tokenize(raw: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut word = String::new();
    for c in raw.chars().flat_map(char::to_lowercase) {
        if c == '?' {
            if !word.is_empty() {
                tokens.push(std::mem::take(&mut word));
            }
            tokens.push("?".to_string());
        } else if c.is_whitespace() {
            if !word.is_empty() {
                tokens.push(std::mem::take(&mut word));
            }
        } else if c.is_alphanumeric() {
            word.push(c);
        }
    }
    if !word.is_empty() {
        tokens.push(word);
    }
    tokens
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        normalize_and_tokenize(s)
    }

    #[test]
    fn strips_punctuation_and_lowercases() {
        assert_eq!(toks("Hi, long time no see."), ["hi", "long", "time", "no", "see"]);
    }

    #[test]
    fn question_mark_is_its_own_token() {
        assert_eq!(toks("How are you?"), ["how", "are", "you", "?"]);
        assert_eq!(toks("???"), ["?", "?", "?"]);
        assert_eq!(toks("really?no"), ["really", "?", "no"]);
    }

    #[test]
    fn punctuation_inside_words_is_deleted() {
        assert_eq!(toks("Uh-huh, don't."), ["uhhuh", "dont"]);
        assert!(toks("  ... !! ").is_empty());
        assert_eq!(toks("ÉTÉ\tchaud"), ["été", "chaud"]);
    }

    #[test]
    fn normalization_is_idempotent() {
        let once = toks("Well, WHAT do you think?? It's fine.").join(" ");
        assert_eq!(toks(&once).join(" "), once);
    }
}
