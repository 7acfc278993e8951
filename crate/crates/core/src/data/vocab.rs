use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::domain::UNK_ID;

pub const BOT: &str = "<bot>";
pub const EOT: &str = "<eot>";
pub const UNK: &str = "<unk>";

/// Word list with the three reserved entries at ids 0, 1 and 2.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for Vocabulary {
    fn from(words: Vec<String>) -> Self {
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Self { words, index }
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.words
    }
}

impl Vocabulary {
    /// Reserved entries followed by `words` in order, duplicates dropped.
    pub fn new<S: AsRef<str>>(words: &[S]) -> Self {
        let mut all: Vec<String> = vec![BOT.into(), EOT.into(), UNK.into()];
        for w in words {
            let w = w.as_ref();
            if !all.iter().any(|x| x == w) {
                all.push(w.to_string());
            }
        }
        Self::from(all)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    /// Unknown words map to the UNK id.
    pub fn id(&self, word: &str) -> usize {
        match self.index.get(word) {
            Some(&i) if i > 1 => i,
            _ => UNK_ID,
        }
    }

    pub fn word(&self, id: usize) -> &str {
        self.words.get(id).map(String::as_str).unwrap_or(UNK)
    }
}
