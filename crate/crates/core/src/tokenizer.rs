//! Word-level vocabularies and text ↔ id conversion.
//!
//! Target-side text is the diacritic-encoded form (`encoded_target`), so the
//! target vocabulary is pure ASCII.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{Dataset, Side};
use crate::error::{Error, Result};

pub const PAD: &str = "<pad>";
pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const UNK: &str = "<unk>";

pub const PAD_ID: u32 = 0;
pub const BOS_ID: u32 = 1;
pub const EOS_ID: u32 = 2;
pub const UNK_ID: u32 = 3;

const RESERVED: [&str; 4] = [PAD, BOS, EOS, UNK];

/// Content-token budget per sequence; `<bos>`/`<eos>` are extra.
pub const MAX_CONTENT_LEN: usize = 16;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    token_to_id: HashMap<String, u32>,
    id_to_token: Vec<String>,
    lowercase: bool,
}

impl Vocab {
    fn reserved_only(lowercase: bool) -> Self {
        let id_to_token: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Self {
            token_to_id,
            id_to_token,
            lowercase,
        }
    }

    /// Build from whitespace tokens of one side of a dataset. Tokens seen
    /// fewer than `min_count` times are left out. Ids after the reserved
    /// symbols follow descending frequency, then lexicographic order.
    pub fn build(dataset: &Dataset, side: Side, case_sensitive: bool, min_count: usize) -> Self {
        let texts = dataset.iter().map(|p| match side {
            Side::Source => p.source.as_str(),
            Side::Target => p.encoded_target.as_str(),
        });
        Self::from_texts(texts, case_sensitive, min_count)
    }

    pub fn from_texts<'a>(
        texts: impl IntoIterator<Item = &'a str>,
        case_sensitive: bool,
        min_count: usize,
    ) -> Self {
        let mut vocab = Self::reserved_only(!case_sensitive);
        let mut counts: HashMap<String, usize> = HashMap::new();
        for text in texts {
            for tok in text.split_whitespace() {
                *counts.entry(vocab.normalize(tok)).or_insert(0) += 1;
            }
        }
        let mut ranked: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(t, c)| *c >= min_count.max(1) && !RESERVED.contains(&t.as_str()))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        for (tok, _) in ranked {
            vocab.push(tok);
        }
        vocab
    }

    fn push(&mut self, tok: String) {
        let id = self.id_to_token.len() as u32;
        self.token_to_id.insert(tok.clone(), id);
        self.id_to_token.push(tok);
    }

    fn normalize(&self, tok: &str) -> String {
        if self.lowercase {
            tok.to_lowercase()
        } else {
            tok.to_owned()
        }
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn lowercase(&self) -> bool {
        self.lowercase
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.id_to_token.get(id as usize).map(String::as_str)
    }

    /// Whitespace-split, case-fold per mode, map unknown words to `<unk>`
    /// and keep at most [`MAX_CONTENT_LEN`] tokens.
    pub fn encode_ids(&self, text: &str, add_specials: bool) -> Vec<u32> {
        self.encode_ids_with_limit(text, add_specials, MAX_CONTENT_LEN)
    }

    pub fn encode_ids_with_limit(&self, text: &str, add_specials: bool, max_len: usize) -> Vec<u32> {
        let mut ids = Vec::with_capacity(max_len + 2);
        if add_specials {
            ids.push(BOS_ID);
        }
        ids.extend(
            text.split_whitespace()
                .take(max_len)
                .map(|t| self.id(&self.normalize(t)).unwrap_or(UNK_ID)),
        );
        if add_specials {
            ids.push(EOS_ID);
        }
        ids
    }

    /// Join content tokens with single spaces, dropping `<pad>`, `<bos>` and
    /// `<eos>`. `<unk>` is emitted literally.
    pub fn decode_ids(&self, ids: &[u32]) -> Result<String> {
        let mut words = Vec::with_capacity(ids.len());
        for &id in ids {
            let tok = self.token(id).ok_or_else(|| {
                Error::InvalidArgument(format!("token id {id} outside vocabulary of {}", self.len()))
            })?;
            if !matches!(id, PAD_ID | BOS_ID | EOS_ID) {
                words.push(tok);
            }
        }
        Ok(words.join(" "))
    }

    /// `token<TAB>id` lines, reserved symbols first.
    pub fn to_file_string(&self) -> String {
        let mut out = String::new();
        for (i, t) in self.id_to_token.iter().enumerate() {
            out.push_str(&format!("{t}\t{i}\n"));
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_file_string()).map_err(|e| Error::io(path, e))
    }

    /// Read a vocab file written by [`Vocab::save`].
    pub fn load(path: impl AsRef<Path>, lowercase: bool) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, lowercase).map_err(|(line, message)| Error::Parse {
            path: path.to_owned(),
            line,
            message,
        })
    }

    /// Parse vocab file contents. Ids must be dense, in order, with the
    /// reserved symbols at 0..4. Errors carry a 1-based line number.
    pub fn parse(text: &str, lowercase: bool) -> Result<Self, (usize, String)> {
        let mut vocab = Self {
            token_to_id: HashMap::new(),
            id_to_token: Vec::new(),
            lowercase,
        };
        for (n, line) in text.lines().enumerate() {
            let err = |message: String| (n + 1, message);
            let (tok, id) = line
                .split_once('\t')
                .ok_or_else(|| err("expected token<TAB>id".into()))?;
            let id: usize = id.trim().parse().map_err(|_| err(format!("bad id {id:?}")))?;
            if id != n {
                return Err(err(format!("id {id} out of sequence, expected {n}")));
            }
            if n < RESERVED.len() && tok != RESERVED[n] {
                return Err(err(format!("expected reserved symbol {}", RESERVED[n])));
            }
            if vocab.token_to_id.contains_key(tok) {
                return Err(err(format!("duplicate token {tok:?}")));
            }
            vocab.push(tok.to_owned());
        }
        if vocab.len() < RESERVED.len() {
            return Err((vocab.len() + 1, "missing reserved symbols".into()));
        }
        Ok(vocab)
    }

    /// SHA-256 of the vocab file contents, hex encoded.
    pub fn digest(&self) -> String {
        let hash = Sha256::digest(self.to_file_string().as_bytes());
        hash.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Which language a sequence belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Role {
    Source,
    Target,
}

/// Id sequence tagged with its role.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub role: Role,
}

impl TokenSequence {
    /// Number of ids that are not `<pad>`, `<bos>` or `<eos>`.
    pub fn content_len(&self) -> usize {
        self.ids
            .iter()
            .filter(|&&id| !matches!(id, PAD_ID | BOS_ID | EOS_ID))
            .count()
    }
}
