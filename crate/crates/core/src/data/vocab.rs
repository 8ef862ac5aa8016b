use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use crate::encoders::TokenSequence;
use crate::error::{Error, Result};
use crate::io::write_atomic;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
const SPECIALS: [&str; 3] = ["<pad>", "<bos>", "<eos>"];

/// Word-level vocabulary. Ids `0..3` are reserved; the remaining tokens are
/// numbered in sorted order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
}

/// Lowercased whitespace-separated words.
pub fn normalize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

impl Vocab {
    pub fn from_corpus<'a>(texts: impl IntoIterator<Item = &'a str>) -> Result<Self> {
        let words: BTreeSet<String> = texts.into_iter().flat_map(normalize).collect();
        Self::from_tokens(SPECIALS.iter().map(|s| s.to_string()).chain(words).collect())
    }

    fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if ids.insert(t.clone(), i).is_some() {
                return Err(Error::Vocabulary(format!("duplicate token {t:?}")));
            }
        }
        Ok(Self { tokens, ids })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Result<usize> {
        self.ids
            .get(token)
            .copied()
            .ok_or_else(|| Error::Vocabulary(format!("token {token:?} not in vocabulary")))
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Ids of the normalised words of `text`, without EOS.
    pub fn encode_words(&self, text: &str) -> Result<Vec<usize>> {
        normalize(text).iter().map(|w| self.id(w)).collect()
    }

    /// Lowercase, split, map, keep at most `max_len - 1` words, append EOS and
    /// pad with PAD to `max_len`.
    pub fn tokenize(&self, text: &str, max_len: usize) -> Result<TokenSequence> {
        if max_len < 2 {
            return Err(Error::Config(format!("max_len must be >= 2, got {max_len}")));
        }
        let mut ids = self.encode_words(text)?;
        ids.truncate(max_len - 1);
        ids.push(EOS);
        ids.resize(max_len, PAD);
        TokenSequence::new(ids, EOS)
    }

    /// Words before the first EOS, skipping PAD and BOS, joined by spaces.
    pub fn detokenize(&self, ids: &[usize]) -> String {
        ids.iter()
            .take_while(|&&i| i != EOS)
            .filter(|&&i| i != PAD && i != BOS)
            .filter_map(|&i| self.token(i))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// `token<TAB>id` lines in id order.
    pub fn to_tsv(&self) -> String {
        self.tokens
            .iter()
            .enumerate()
            .map(|(i, t)| format!("{t}\t{i}\n"))
            .collect()
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.is_empty()) {
            let (tok, id) = line
                .split_once('\t')
                .ok_or_else(|| Error::format("vocab", format!("line {}: expected token<TAB>id", n + 1)))?;
            let id: usize = id
                .trim()
                .parse()
                .map_err(|_| Error::format("vocab", format!("line {}: bad id {id:?}", n + 1)))?;
            entries.push((id, tok.to_string()));
        }
        entries.sort();
        if entries.iter().enumerate().any(|(i, (id, _))| *id != i) {
            return Err(Error::format("vocab", "ids must be exactly 0..n"));
        }
        let tokens: Vec<String> = entries.into_iter().map(|(_, t)| t).collect();
        if tokens.len() < 3 || tokens[..3] != SPECIALS {
            return Err(Error::format("vocab", "reserved ids 0..3 must be <pad>, <bos>, <eos>"));
        }
        Self::from_tokens(tokens)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_tsv().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_tsv(&text)
    }
}
