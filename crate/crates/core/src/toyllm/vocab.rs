use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const SOS: usize = 1;
pub const EOS: usize = 2;
pub const USR: usize = 3;
pub const CMD: usize = 4;
pub const REP: usize = 5;
pub const REV: usize = 6;
pub const CIP: usize = 7;
pub const INT: usize = 8;
/// First intent-label token; labels occupy `LABEL0..LABEL0 + NUM_LABELS`.
pub const LABEL0: usize = 9;
pub const NUM_LABELS: usize = 4;
pub const SPACE: usize = 13;
pub const LETTER_A: usize = 14;
pub const NUM_LETTERS: usize = 26;
pub const VOCAB_SIZE: usize = 40;

const SPECIALS: [&str; 13] = [
    "[pad]", "[sos]", "[eos]", "[usr]", "[cmd]", "[rep]", "[rev]", "[cip]", "[int]", "[l0]", "[l1]", "[l2]", "[l3]",
];

/// Fixed symbol table: special and template tokens, intent labels, space,
/// then the 26 lowercase letters.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    symbols: Vec<String>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::standard()
    }
}

impl Vocabulary {
    pub fn standard() -> Self {
        let mut symbols: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        symbols.push(" ".into());
        symbols.extend(('a'..='z').map(String::from));
        debug_assert_eq!(symbols.len(), VOCAB_SIZE);
        Self { symbols }
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn symbol(&self, id: usize) -> Result<&str> {
        self.symbols.get(id).map(String::as_str).ok_or(Error::UnknownToken(id))
    }

    pub fn id(&self, symbol: &str) -> Result<usize> {
        self.symbols.iter().position(|s| s == symbol).ok_or_else(|| Error::UnknownSymbol(symbol.into()))
    }

    /// Character-level encoding of plain payload text (space and a–z).
    pub fn encode_text(&self, text: &str) -> Result<Vec<usize>> {
        text.chars()
            .map(|c| match c {
                ' ' => Ok(SPACE),
                'a'..='z' => Ok(LETTER_A + (c as usize - 'a' as usize)),
                _ => Err(Error::UnknownSymbol(c.to_string())),
            })
            .collect()
    }

    /// Concatenated symbols; bracketed names for non-payload tokens.
    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        ids.iter().map(|&i| self.symbol(i)).collect()
    }
}

pub fn is_payload(id: usize) -> bool {
    id == SPACE || (LETTER_A..LETTER_A + NUM_LETTERS).contains(&id)
}

pub fn label_token(label: usize) -> usize {
    assert!(label < NUM_LABELS, "intent label {label} out of range");
    LABEL0 + label
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Transcribe,
    Reverse,
    Cipher,
    Intent,
}

impl Task {
    pub const ALL: [Task; 4] = [Task::Transcribe, Task::Reverse, Task::Cipher, Task::Intent];

    pub fn name(self) -> &'static str {
        match self {
            Task::Transcribe => "transcribe",
            Task::Reverse => "reverse",
            Task::Cipher => "cipher",
            Task::Intent => "intent",
        }
    }

    pub fn template(self) -> PromptTemplate {
        let (prefix, postfix) = match self {
            Task::Transcribe => (vec![], vec![REP]),
            Task::Reverse => (vec![USR], vec![REV]),
            Task::Cipher => (vec![], vec![CIP]),
            Task::Intent => (vec![CMD], vec![INT]),
        };
        PromptTemplate { id: self as u8, prefix, postfix }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Task::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown task {s:?} (expected transcribe, reverse, cipher or intent)")))
    }
}

/// Instruction tokens around a payload. Rendering order is
/// `[sos] prefix payload postfix response`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PromptTemplate {
    pub id: u8,
    pub prefix: Vec<usize>,
    pub postfix: Vec<usize>,
}

impl PromptTemplate {
    pub fn from_id(id: u8) -> Result<Self> {
        Task::ALL
            .get(id as usize)
            .map(|t| t.template())
            .ok_or_else(|| Error::Config(format!("unknown template id {id}")))
    }

    /// `[sos]` followed by the prefix.
    pub fn lead(&self) -> Vec<usize> {
        let mut v = Vec::with_capacity(self.prefix.len() + 1);
        v.push(SOS);
        v.extend_from_slice(&self.prefix);
        v
    }

    /// Full token sequence for a text payload, without the response.
    pub fn render(&self, payload: &[usize]) -> Vec<usize> {
        let mut v = self.lead();
        v.extend_from_slice(payload);
        v.extend_from_slice(&self.postfix);
        v
    }
}
