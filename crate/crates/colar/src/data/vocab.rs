//! Fixed small vocabulary with greedy longest-match tokenization.
//!
//! Numbers are tokenized digit by digit; question surfaces are built from a
//! fixed template lexicon whose phrases are single tokens, so the whole
//! vocabulary stays small and token ids are stable across runs.

use crate::error::{Error, Result};
use sha2::{Digest, Sha256};
use std::collections::HashMap;

pub const BOS: &str = "<bos>";
pub const Q_END: &str = "<q_end>";
pub const THINK_END: &str = "<think_end>";
pub const A_END: &str = "<a_end>";
pub const PAD: &str = "<pad>";

/// Highest compression factor expressible as a prompt control token.
pub const CTRL_C_MAX: usize = 5;

/// Chain surface tokens, matching the `<< a op b = c >>` reasoning format.
pub const CHAIN_TOKENS: [&str; 8] = ["<< ", " >>", " + ", " - ", " * ", " / ", " = ", " "];

/// Question-template phrase lexicon. Each phrase is one token.
pub const PHRASES: [&str; 34] = [
    // running-chain template
    "Start with ",
    ". Then add ",
    ". Then subtract ",
    ". Then multiply by ",
    ". Then divide by ",
    ". What is the result?",
    // spoons
    "A set of ",
    " spoons costs $",
    ". If each spoon would be sold separately, how much would ",
    " spoons cost?",
    // marbles
    "Tom has ",
    " marbles. He finds ",
    " more and then gives away ",
    ". How many marbles does he have now?",
    // pens
    "There are ",
    " boxes with ",
    " pens in each box. Then ",
    " pens are added. How many pens are there?",
    // cookies
    "Anna bakes ",
    " cookies and Ben bakes ",
    " cookies. They share them equally among ",
    " friends. How many cookies does each friend get?",
    // savings
    "Every week Sam saves $",
    " for ",
    " weeks. Then he spends $",
    ". How much money is left?",
    // stickers
    "Mia has ",
    " stickers. She buys ",
    " packs with ",
    " stickers in each pack. How many stickers does she have in total?",
    // candies
    "A jar holds ",
    " candies. After ",
    " candies are eaten, the rest is split into ",
    " equal bags. How many candies are in each bag?",
];

/// Ordered token set; ids are positions in the list.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    tokens: Vec<String>,
    lookup: HashMap<String, u32>,
    /// Token indices sorted by descending string length, for greedy matching.
    by_len: Vec<u32>,
}

impl Vocabulary {
    /// The canonical vocabulary used by every dataset in this artifact.
    pub fn standard() -> Self {
        let mut tokens: Vec<String> = Vec::new();
        for s in [BOS, Q_END, THINK_END, A_END, PAD] {
            tokens.push(s.to_string());
        }
        for c in 1..=CTRL_C_MAX {
            tokens.push(format!("<c={}>", c));
        }
        for d in 0..10 {
            tokens.push(d.to_string());
        }
        for s in CHAIN_TOKENS {
            tokens.push(s.to_string());
        }
        for s in PHRASES {
            tokens.push(s.to_string());
        }
        Self::from_tokens(tokens).expect("standard vocabulary is well-formed")
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut lookup = HashMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if lookup.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Validation(format!("duplicate vocabulary token {:?}", t)));
            }
        }
        let mut by_len: Vec<u32> = (0..tokens.len() as u32).collect();
        by_len.sort_by_key(|&i| std::cmp::Reverse(tokens[i as usize].len()));
        Ok(Vocabulary { tokens, lookup, by_len })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> u32 {
        *self
            .lookup
            .get(token)
            .unwrap_or_else(|| panic!("token {:?} not in vocabulary", token))
    }

    pub fn token(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn bos(&self) -> u32 {
        self.id(BOS)
    }
    pub fn q_end(&self) -> u32 {
        self.id(Q_END)
    }
    pub fn think_end(&self) -> u32 {
        self.id(THINK_END)
    }
    pub fn a_end(&self) -> u32 {
        self.id(A_END)
    }
    pub fn pad(&self) -> u32 {
        self.id(PAD)
    }
    pub fn ctrl(&self, c: usize) -> u32 {
        assert!((1..=CTRL_C_MAX).contains(&c), "no control token for c={}", c);
        self.id(&format!("<c={}>", c))
    }

    /// Greedy longest-match segmentation.
    pub fn tokenize(&self, text: &str) -> Result<Vec<u32>> {
        let mut out = Vec::new();
        let mut pos = 0;
        let bytes = text.as_bytes();
        while pos < bytes.len() {
            let rest = &text[pos..];
            let hit = self
                .by_len
                .iter()
                .find(|&&i| rest.starts_with(self.tokens[i as usize].as_str()));
            match hit {
                Some(&i) => {
                    out.push(i);
                    pos += self.tokens[i as usize].len();
                }
                None => {
                    return Err(Error::Tokenize {
                        offset: pos,
                        snippet: rest.chars().take(12).collect(),
                    })
                }
            }
        }
        Ok(out)
    }

    pub fn detokenize(&self, ids: &[u32]) -> String {
        ids.iter().map(|&i| self.tokens[i as usize].as_str()).collect()
    }

    /// SHA-256 over the serialized ordered token list; stored in checkpoints
    /// to refuse vocabulary/dataset mismatches.
    pub fn hash(&self) -> [u8; 32] {
        let json = serde_json::to_vec(&self.tokens).expect("vocab serializes");
        let mut h = Sha256::new();
        h.update(&json);
        h.finalize().into()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.tokens).expect("vocab serializes")
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let tokens: Vec<String> = serde_json::from_str(json)?;
        Self::from_tokens(tokens)
    }
}
