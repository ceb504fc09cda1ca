//! Tokenization: a word-level vocabulary for the encoder and hashed
//! character n-grams for the subword embedding baseline.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const MASK: u32 = 2;
pub const CLS: u32 = 3;
pub const SPECIAL_TOKENS: [&str; 4] = ["<pad>", "<unk>", "<mask>", "<cls>"];

/// Default encoder input limit.
pub const DEFAULT_MAX_LEN: usize = 512;

/// Lowercases and splits on anything that is not alphanumeric.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Parse {
                    line: i + 1,
                    message: format!("duplicate token {t:?}"),
                });
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn id_or_unk(&self, token: &str) -> u32 {
        self.id(token).unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// Non-special tokens, in id order.
    pub fn words(&self) -> &[String] {
        &self.tokens[SPECIAL_TOKENS.len()..]
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (i, t) in self.tokens.iter().enumerate() {
            out.push_str(t);
            out.push('\t');
            out.push_str(&i.to_string());
            out.push('\n');
        }
        out
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut tokens = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let (tok, id) = line.rsplit_once('\t').ok_or_else(|| Error::Parse {
                line: i + 1,
                message: "expected token<TAB>id".into(),
            })?;
            let id: usize = id.parse().map_err(|_| Error::Parse {
                line: i + 1,
                message: format!("bad id {id:?}"),
            })?;
            if id != i {
                return Err(Error::Parse {
                    line: i + 1,
                    message: format!("ids must be dense and ordered; expected {i}, got {id}"),
                });
            }
            tokens.push(tok.to_string());
        }
        if tokens.len() < SPECIAL_TOKENS.len()
            || tokens[..SPECIAL_TOKENS.len()]
                .iter()
                .zip(SPECIAL_TOKENS)
                .any(|(a, b)| a != b)
        {
            return Err(Error::Parse {
                line: 1,
                message: "vocabulary must start with the special tokens".into(),
            });
        }
        Self::from_tokens(tokens)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_tsv(&text)
    }
}

/// Keeps the `max_size - 4` most frequent tokens; equal counts are ordered
/// lexicographically.
pub fn build_vocab<'a, I>(texts: I, max_size: usize) -> Result<Vocabulary>
where
    I: IntoIterator<Item = &'a str>,
{
    if max_size < SPECIAL_TOKENS.len() {
        return Err(Error::config(
            "max_size",
            format!("must be at least {} to hold the special tokens", SPECIAL_TOKENS.len()),
        ));
    }
    let mut counts: BTreeMap<String, u64> = BTreeMap::new();
    let mut any = false;
    for text in texts {
        any = true;
        for tok in tokenize(text) {
            *counts.entry(tok).or_default() += 1;
        }
    }
    if !any {
        return Err(Error::config("corpus", "cannot build a vocabulary from no text"));
    }
    let mut ranked: Vec<(String, u64)> = counts
        .into_iter()
        .filter(|(t, _)| !SPECIAL_TOKENS.contains(&t.as_str()))
        .collect();
    // BTreeMap order is lexicographic; a stable sort keeps it within ties.
    ranked.sort_by(|a, b| b.1.cmp(&a.1));
    let tokens = SPECIAL_TOKENS
        .iter()
        .map(|s| s.to_string())
        .chain(
            ranked
                .into_iter()
                .take(max_size - SPECIAL_TOKENS.len())
                .map(|(t, _)| t),
        )
        .collect();
    Vocabulary::from_tokens(tokens)
}

/// A note as encoder input: CLS, token ids, then PAD up to `max_len`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizedNote {
    pub ids: Vec<u32>,
    /// Number of non-PAD positions, including CLS.
    pub len: usize,
}

impl TokenizedNote {
    /// CLS followed by the text ids, without padding.
    pub fn active(&self) -> &[u32] {
        &self.ids[..self.len]
    }

    /// Text ids only (no CLS, no padding).
    pub fn text_ids(&self) -> &[u32] {
        &self.ids[1..self.len]
    }
}

pub fn encode(text: &str, vocab: &Vocabulary, max_len: usize) -> TokenizedNote {
    let max_len = max_len.max(1);
    let mut ids = Vec::with_capacity(max_len);
    ids.push(CLS);
    ids.extend(
        tokenize(text)
            .iter()
            .take(max_len - 1)
            .map(|t| vocab.id_or_unk(t)),
    );
    let len = ids.len();
    ids.resize(max_len, PAD);
    TokenizedNote { ids, len }
}

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Character n-gram settings for the subword model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NgramConfig {
    pub n_min: usize,
    pub n_max: usize,
    pub n_buckets: usize,
}

impl Default for NgramConfig {
    fn default() -> Self {
        NgramConfig {
            n_min: 3,
            n_max: 6,
            n_buckets: 1 << 20,
        }
    }
}

/// Bucket ids of the character n-grams of `<token>`, in order of n then
/// position, followed by the bucket of the whole wrapped token. The n-gram
/// spanning the entire wrapped token is represented only by that final entry.
pub fn char_ngrams(token: &str, n_min: usize, n_max: usize, n_buckets: usize) -> Vec<usize> {
    let wrapped: Vec<char> = std::iter::once('<')
        .chain(token.chars())
        .chain(std::iter::once('>'))
        .collect();
    let bucket = |s: &[char]| {
        let s: String = s.iter().collect();
        (fnv1a64(s.as_bytes()) % n_buckets as u64) as usize
    };
    let mut out = Vec::new();
    for n in n_min.max(1)..=n_max {
        if n >= wrapped.len() {
            break;
        }
        for w in wrapped.windows(n) {
            out.push(bucket(w));
        }
    }
    out.push(bucket(&wrapped));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn vocab_keeps_frequent_tokens_with_specials() {
        let v = build_vocab(["a a b"], 6).unwrap();
        assert_eq!(v.len(), 6);
        assert_eq!(v.words(), ["a", "b"]);
        assert_eq!(v.id("a"), Some(4));
        assert_eq!(v.token(CLS), Some("<cls>"));
    }

    #[test]
    fn vocab_tie_breaks_lexicographically() {
        let v = build_vocab(["y x z z"], 6).unwrap();
        assert_eq!(v.words(), ["z", "x"]);
        let again = build_vocab(["y x z z"], 6).unwrap();
        assert_eq!(v, again);
    }

    #[test]
    fn vocab_errors() {
        assert!(matches!(build_vocab(["a"], 3), Err(Error::Config { .. })));
        assert!(build_vocab(std::iter::empty::<&str>(), 10).is_err());
    }

    #[test]
    fn vocab_tsv_round_trip() {
        let v = build_vocab(["Hoest, koorts; hoest!"], 100).unwrap();
        assert_eq!(Vocabulary::from_tsv(&v.to_tsv()).unwrap(), v);
        assert!(Vocabulary::from_tsv("a\t0\n").is_err());
        assert!(Vocabulary::from_tsv("<pad>\t0\n<unk>\t2\n").is_err());
    }

    #[test]
    fn encode_examples() {
        let v = build_vocab(["hoest koorts"], 10).unwrap();
        let e = encode("", &v, 8);
        assert_eq!(e.ids, vec![CLS, PAD, PAD, PAD, PAD, PAD, PAD, PAD]);
        assert_eq!(e.len, 1);

        let e = encode("Hoest, onbekend", &v, 8);
        assert_eq!(&e.ids[..3], &[CLS, v.id("hoest").unwrap(), UNK]);
        assert_eq!(e.len, 3);

        let long = vec!["hoest"; 600].join(" ");
        let e = encode(&long, &v, 512);
        assert_eq!(e.ids.len(), 512);
        assert_eq!(e.len, 512);
        assert!(e.ids.iter().all(|&i| i != PAD));
    }

    #[test]
    fn ngram_examples() {
        let b = 1 << 20;
        let h = |s: &str| (fnv1a64(s.as_bytes()) % b as u64) as usize;
        assert_eq!(char_ngrams("ab", 3, 3, b), vec![h("<ab"), h("ab>"), h("<ab>")]);
        assert_eq!(char_ngrams("a", 3, 6, b), vec![h("<a>")]);
        assert_eq!(char_ngrams("abc", 5, 5, b), vec![h("<abc>")]);
        assert_eq!(char_ngrams("hoest", 3, 6, b), char_ngrams("hoest", 3, 6, b));
    }

    #[test]
    fn fnv_reference_values() {
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
    }

    proptest! {
        #[test]
        fn ngram_count_formula(token in "[a-zé]{0,12}", a in 1usize..5, span in 0usize..4) {
            let b = a + span;
            let wrapped = token.chars().count() + 2;
            let windows: usize = (a..=b).map(|n| (wrapped + 1).saturating_sub(n)).sum();
            let whole_as_window = usize::from((a..=b).contains(&wrapped));
            let ids = char_ngrams(&token, a, b, 97);
            prop_assert_eq!(ids.len(), windows - whole_as_window + 1);
            prop_assert!(ids.iter().all(|&i| i < 97));
        }

        #[test]
        fn encode_is_total_and_fixed_length(text in ".{0,200}", max_len in 1usize..64) {
            let v = build_vocab(["a b c"], 10).unwrap();
            let e = encode(&text, &v, max_len);
            prop_assert_eq!(e.ids.len(), max_len);
            prop_assert_eq!(e.ids[0], CLS);
            prop_assert!(e.len >= 1 && e.len <= max_len);
            prop_assert!(e.ids[e.len..].iter().all(|&i| i == PAD));
        }
    }
}
