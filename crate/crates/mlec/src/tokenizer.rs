//! Rule-based code tokenizer, vocabulary builder, and fixed-length
//! encoding.
//!
//! The vocabulary reserves PAD=0, UNK=1, BOS=2, EOS=3 and is built from the
//! training split only. Encoding produces `[BOS, ids.., EOS]` truncated to
//! `max_len` (EOS forced at the last kept position) and padded with PAD;
//! the attention mask is a prefix of ones over the non-PAD positions.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::dataset::Dataset;

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const BOS_ID: usize = 2;
pub const EOS_ID: usize = 3;
const RESERVED: [&str; 4] = ["<pad>", "<unk>", "<bos>", "<eos>"];

const MULTI_CHAR_OPS: [&str; 10] = ["==", "!=", "<=", ">=", "//", "**", "+=", "-=", "*=", "/="];

#[derive(Debug, thiserror::Error)]
pub enum TokenizerError {
    #[error("cannot access {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("vocab file is malformed: {0}")]
    Malformed(String),
    #[error("vocab format version `{0}` unsupported")]
    Version(String),
}

/// Splits code into tokens: whitespace-separated chunks are further split
/// into identifier/number runs and operator/punctuation characters, keeping
/// the known multi-character operators intact.
pub fn tokenize(code: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    for chunk in code.split_whitespace() {
        let chars: Vec<char> = chunk.chars().collect();
        let mut i = 0;
        while i < chars.len() {
            let c = chars[i];
            if c.is_alphanumeric() || c == '_' {
                let start = i;
                while i < chars.len() && (chars[i].is_alphanumeric() || chars[i] == '_') {
                    i += 1;
                }
                tokens.push(chars[start..i].iter().collect());
            } else {
                if i + 1 < chars.len() {
                    let pair: String = chars[i..i + 2].iter().collect();
                    if MULTI_CHAR_OPS.contains(&pair.as_str()) {
                        tokens.push(pair);
                        i += 2;
                        continue;
                    }
                }
                tokens.push(c.to_string());
                i += 1;
            }
        }
    }
    tokens
}

/// Token-to-id mapping with fixed reserved ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenVocab {
    token_to_id: HashMap<String, usize>,
    id_to_token: Vec<String>,
}

impl TokenVocab {
    fn with_reserved() -> Self {
        let id_to_token: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        TokenVocab {
            token_to_id,
            id_to_token,
        }
    }

    pub fn size(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn id_of(&self, token: &str) -> Option<usize> {
        self.token_to_id.get(token).copied()
    }

    pub fn token_of(&self, id: usize) -> Option<&str> {
        self.id_to_token.get(id).map(String::as_str)
    }

    /// Tokens for a sequence of ids, skipping the reserved ids.
    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .filter(|&&id| id >= RESERVED.len())
            .filter_map(|&id| self.token_of(id).map(str::to_string))
            .collect()
    }

    /// Persists as a versioned text file: a header line, then
    /// `token<TAB>id` lines in id order.
    pub fn save(&self, path: &Path) -> Result<(), TokenizerError> {
        let mut out = format!("mlec-vocab v1 {}\n", self.size());
        for (id, token) in self.id_to_token.iter().enumerate() {
            out.push_str(token);
            out.push('\t');
            out.push_str(&id.to_string());
            out.push('\n');
        }
        fs::write(path, out).map_err(|source| TokenizerError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, TokenizerError> {
        let text = fs::read_to_string(path).map_err(|source| TokenizerError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| TokenizerError::Malformed("empty file".into()))?;
        let mut parts = header.split_whitespace();
        if parts.next() != Some("mlec-vocab") {
            return Err(TokenizerError::Malformed("missing header".into()));
        }
        let version = parts.next().unwrap_or("");
        if version != "v1" {
            return Err(TokenizerError::Version(version.to_string()));
        }
        let size: usize = parts
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| TokenizerError::Malformed("bad size".into()))?;

        let mut id_to_token = vec![String::new(); size];
        let mut filled = 0usize;
        for line in lines {
            if line.is_empty() {
                continue;
            }
            let (token, id) = line
                .rsplit_once('\t')
                .ok_or_else(|| TokenizerError::Malformed(format!("bad line `{line}`")))?;
            let id: usize = id
                .parse()
                .map_err(|_| TokenizerError::Malformed(format!("bad id in `{line}`")))?;
            if id >= size {
                return Err(TokenizerError::Malformed(format!("id {id} out of range")));
            }
            id_to_token[id] = token.to_string();
            filled += 1;
        }
        if filled != size {
            return Err(TokenizerError::Malformed(format!(
                "expected {size} entries, found {filled}"
            )));
        }
        for (i, reserved) in RESERVED.iter().enumerate() {
            if id_to_token[i] != *reserved {
                return Err(TokenizerError::Malformed(format!(
                    "reserved id {i} must be {reserved}"
                )));
            }
        }
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Ok(TokenVocab {
            token_to_id,
            id_to_token,
        })
    }
}

/// Builds a vocabulary from the training split: tokens with frequency at
/// least `min_freq`, most frequent first (ties lexicographic), capped at
/// `max_size` total ids including the 4 reserved ones.
pub fn build_vocab(train: &Dataset, max_size: usize, min_freq: usize) -> TokenVocab {
    assert!(max_size >= 5, "max_size must admit at least one token");
    let mut freq: HashMap<String, usize> = HashMap::new();
    for sample in train.samples() {
        for tok in tokenize(&sample.code) {
            *freq.entry(tok).or_insert(0) += 1;
        }
    }
    let mut ranked: Vec<(String, usize)> = freq
        .into_iter()
        .filter(|(_, c)| *c >= min_freq.max(1))
        .collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));

    let mut vocab = TokenVocab::with_reserved();
    for (token, _) in ranked.into_iter().take(max_size - RESERVED.len()) {
        let id = vocab.id_to_token.len();
        vocab.token_to_id.insert(token.clone(), id);
        vocab.id_to_token.push(token);
    }
    vocab
}

/// Fixed-length id sequence with its attention mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedSample {
    pub input_ids: Vec<usize>,
    pub attention_mask: Vec<u8>,
}

impl EncodedSample {
    pub fn len(&self) -> usize {
        self.input_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.input_ids.is_empty()
    }

    /// Number of non-PAD positions.
    pub fn mask_len(&self) -> usize {
        self.attention_mask.iter().map(|&m| m as usize).sum()
    }
}

/// Encodes code as `[BOS, ids.., EOS]` truncated and PAD-padded to exactly
/// `max_len`.
pub fn encode(code: &str, vocab: &TokenVocab, max_len: usize) -> EncodedSample {
    assert!(max_len >= 3, "max_len must fit BOS, one token, and EOS");
    let tokens = tokenize(code);
    let mut ids = Vec::with_capacity(max_len);
    ids.push(BOS_ID);
    for tok in &tokens {
        if ids.len() == max_len - 1 {
            break;
        }
        ids.push(vocab.id_of(tok).unwrap_or(UNK_ID));
    }
    ids.push(EOS_ID);
    debug_assert!(ids.len() <= max_len);
    let used = ids.len();
    ids.resize(max_len, PAD_ID);
    let mut attention_mask = vec![0u8; max_len];
    for m in attention_mask.iter_mut().take(used) {
        *m = 1;
    }
    EncodedSample {
        input_ids: ids,
        attention_mask,
    }
}
