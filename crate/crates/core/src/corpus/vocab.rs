//! The fixed token vocabulary shared by captions, queries and the text tower.

use std::collections::HashMap;
use std::sync::OnceLock;

/// (imperative, third person) verb forms. Worlds use the first `num_verbs`.
pub const VERBS: [(&str, &str); 12] = [
    ("cut", "cuts"),
    ("wash", "washes"),
    ("open", "opens"),
    ("close", "closes"),
    ("pick", "picks"),
    ("put", "puts"),
    ("stir", "stirs"),
    ("pour", "pours"),
    ("peel", "peels"),
    ("turn", "turns"),
    ("wipe", "wipes"),
    ("take", "takes"),
];

pub const NOUNS: [&str; 12] =
    ["tomato", "onion", "knife", "pan", "cup", "plate", "door", "tap", "bowl", "spoon", "lid", "sponge"];

pub const FUNCTION_WORDS: [&str; 11] = ["c", "#c", "the", "a", "when", "did", "i", "where", "with", "hand", "then"];

pub const PAD: usize = 0;
pub const UNK: usize = 1;

pub struct Vocabulary {
    tokens: Vec<&'static str>,
    index: HashMap<&'static str, usize>,
}

impl Vocabulary {
    /// `[PAD]`, `[UNK]`, function words, verb forms (base then third person), nouns.
    pub fn global() -> &'static Vocabulary {
        static VOCAB: OnceLock<Vocabulary> = OnceLock::new();
        VOCAB.get_or_init(|| {
            let mut tokens = vec!["[pad]", "[unk]"];
            tokens.extend(FUNCTION_WORDS);
            for (base, third) in VERBS {
                tokens.push(base);
                tokens.push(third);
            }
            tokens.extend(NOUNS);
            let index = tokens.iter().enumerate().map(|(i, &t)| (t, i)).collect();
            Vocabulary { tokens, index }
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn token(&self, id: usize) -> &'static str {
        self.tokens[id]
    }

    /// Id of a lowercase token, excluding the two special tokens.
    pub fn lookup(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied().filter(|&i| i > UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.lookup(token).is_some()
    }

    /// Whitespace tokenization, lowercased; unknown words map to [`UNK`].
    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        split_tokens(text).map(|t| self.lookup(&t).unwrap_or(UNK)).collect()
    }
}

pub fn split_tokens(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split_whitespace().map(str::to_lowercase)
}

pub fn verb_id(token: &str) -> Option<usize> {
    VERBS.iter().position(|&(base, third)| token == base || token == third)
}

pub fn noun_id(token: &str) -> Option<usize> {
    NOUNS.iter().position(|&n| token == n)
}

/// Fills `{verb}` (third person), `{verb_base}` and `{noun}` placeholders.
pub fn render_template(template: &str, verb: usize, noun: usize) -> String {
    template.replace("{verb_base}", VERBS[verb].0).replace("{verb}", VERBS[verb].1).replace("{noun}", NOUNS[noun])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_built_tokenization() {
        // [pad]=0 [unk]=1 c=2 #c=3 the=4 a=5 when=6 did=7 i=8 where=9 with=10 hand=11 then=12
        // cut=13 cuts=14 wash=15 ... take=35 takes=36, tomato=37 onion=38 ...
        let v = Vocabulary::global();
        assert_eq!(v.len(), 2 + 11 + 24 + 12);
        assert_eq!(v.tokenize("C cuts the tomato"), vec![2, 14, 4, 37]);
        assert_eq!(v.tokenize("C zaps the onion"), vec![2, UNK, 4, 38]);
        assert!(v.tokenize("").is_empty());
    }

    #[test]
    fn templates_render() {
        assert_eq!(render_template("C {verb} the {noun}", 1, 3), "C washes the pan");
        assert_eq!(render_template("{verb_base} a {noun}", 0, 0), "cut a tomato");
    }

    #[test]
    fn special_tokens_are_not_words() {
        assert_eq!(Vocabulary::global().lookup("[pad]"), None);
        assert_eq!(verb_id("stirs"), Some(6));
        assert_eq!(noun_id("lid"), Some(10));
    }
}
