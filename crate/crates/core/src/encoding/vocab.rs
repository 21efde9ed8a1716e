use std::collections::HashMap;
use std::sync::OnceLock;

use super::EncodingError;

pub const PAD: &str = "<pad>";
pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const SEP: &str = "<sep>";

/// Longest token sequence the models accept.
pub const MAX_SEQ_LEN: usize = 96;

/// Token id; `PAD` is always 0.
pub type TokenId = u16;

/// Closed word-level vocabulary.
#[derive(Debug)]
pub struct Vocabulary {
    tokens: Vec<&'static str>,
    index: HashMap<&'static str, TokenId>,
}

static DEVICE_NAMES: [&str; 20] = [
    "C0", "C1", "C2", "C3", "C4", "L0", "L1", "L2", "L3", "L4", "Sa0", "Sa1", "Sa2", "Sa3", "Sa4",
    "Sb0", "Sb1", "Sb2", "Sb3", "Sb4",
];

static NET_NAMES: [&str; 14] = [
    "IN", "OUT", "0", "n1", "n2", "n3", "n4", "n5", "n6", "n7", "n8", "n9", "n10", "n11",
];

static WORDS: [&str; 18] = [
    "port",
    "1",
    "2",
    "Net",
    "connects",
    "and",
    "Generate",
    "a",
    "circuit",
    "topology",
    "using",
    "the",
    "following",
    "components",
    ":",
    ",",
    ".",
    ";",
];

impl Vocabulary {
    /// The shared vocabulary instance.
    pub fn get() -> &'static Vocabulary {
        static VOCAB: OnceLock<Vocabulary> = OnceLock::new();
        VOCAB.get_or_init(|| {
            let mut tokens = vec![PAD, BOS, EOS, SEP];
            tokens.extend(DEVICE_NAMES);
            tokens.extend(NET_NAMES);
            tokens.extend(WORDS);
            let index = tokens
                .iter()
                .enumerate()
                .map(|(i, &t)| (t, i as TokenId))
                .collect();
            Vocabulary { tokens, index }
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&'static str> {
        self.tokens.get(id as usize).copied()
    }

    pub fn tokens(&self) -> &[&'static str] {
        &self.tokens
    }

    pub fn pad(&self) -> TokenId {
        0
    }

    pub fn bos(&self) -> TokenId {
        1
    }

    pub fn eos(&self) -> TokenId {
        2
    }

    pub fn sep(&self) -> TokenId {
        3
    }

    /// Splits `text` on single spaces into ids, without BOS/EOS.
    pub fn ids(&self, text: &str) -> Result<Vec<TokenId>, EncodingError> {
        if text.is_empty() {
            return Ok(Vec::new());
        }
        text.split(' ')
            .map(|tok| {
                self.id(tok)
                    .ok_or_else(|| EncodingError::UnknownToken(tok.to_string()))
            })
            .collect()
    }

    /// Wraps `text` as `BOS … EOS`.
    pub fn tokenize(&self, text: &str) -> Result<TokenSequence, EncodingError> {
        let mut ids = vec![self.bos()];
        ids.extend(self.ids(text)?);
        ids.push(self.eos());
        Ok(TokenSequence(ids))
    }

    /// Drops BOS/EOS/PAD and joins the remaining tokens with single spaces.
    pub fn detokenize(&self, seq: &[TokenId]) -> String {
        let special = [self.pad(), self.bos(), self.eos()];
        seq.iter()
            .filter(|id| !special.contains(id))
            .filter_map(|&id| self.token(id))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Token ids over the closed vocabulary.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct TokenSequence(pub Vec<TokenId>);

impl TokenSequence {
    pub fn as_slice(&self) -> &[TokenId] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}
