use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Characters the default toy vocabulary assigns single-character tokens to,
/// in id order after the two reserved tokens.
const DEFAULT_CHARSET: &str = "abcdefghijklmnopqrstuvwxyz0123456789 ()+-*/=<>:,.[]{}_";

pub const DEFAULT_MASK: &str = "<unk>";
pub const DEFAULT_STOP: &str = "<eos>";

/// Token id space shared by every backend.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabSpec {
    pub size: usize,
    pub mask_id: u32,
    pub stop_ids: BTreeSet<u32>,
}

impl VocabSpec {
    pub fn new(size: usize, mask_id: u32, stop_ids: impl IntoIterator<Item = u32>) -> Result<Self> {
        let spec = VocabSpec {
            size,
            mask_id,
            stop_ids: stop_ids.into_iter().collect(),
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Reserved layout of the default toy vocabulary: id 0 masks, id 1 stops.
    pub fn toy(size: usize) -> Result<Self> {
        Self::new(size, 0, [1])
    }

    pub fn validate(&self) -> Result<()> {
        if self.size == 0 {
            return Err(Error::arg("vocabulary size must be positive"));
        }
        if self.mask_id as usize >= self.size {
            return Err(Error::arg(format!(
                "mask id {} outside vocabulary of {}",
                self.mask_id, self.size
            )));
        }
        if let Some(bad) = self.stop_ids.iter().find(|&&s| s as usize >= self.size) {
            return Err(Error::arg(format!(
                "stop id {bad} outside vocabulary of {}",
                self.size
            )));
        }
        Ok(())
    }

    pub fn is_stop(&self, token: u32) -> bool {
        self.stop_ids.contains(&token)
    }
}

/// Bijective id <-> surface string map with a greedy longest-match tokenizer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    spec: VocabSpec,
    strings: Vec<String>,
    lookup: HashMap<String, u32>,
    longest: usize,
}

impl Vocabulary {
    pub fn new(spec: VocabSpec, strings: Vec<String>) -> Result<Self> {
        spec.validate()?;
        if strings.len() != spec.size {
            return Err(Error::arg(format!(
                "{} token strings for a vocabulary of {}",
                strings.len(),
                spec.size
            )));
        }
        let mut lookup = HashMap::with_capacity(strings.len());
        for (id, s) in strings.iter().enumerate() {
            if s.is_empty() {
                return Err(Error::arg(format!("token {id} has an empty surface string")));
            }
            if let Some(prev) = lookup.insert(s.clone(), id as u32) {
                return Err(Error::arg(format!(
                    "tokens {prev} and {id} share the surface string {s:?}"
                )));
            }
        }
        let longest = strings.iter().map(|s| s.chars().count()).max().unwrap_or(1);
        Ok(Vocabulary {
            spec,
            strings,
            lookup,
            longest,
        })
    }

    /// The default toy vocabulary: `<unk>` (mask), `<eos>` (stop), then one
    /// token per character of a small code-like charset, then `<tN>` fillers.
    pub fn toy(size: usize) -> Result<Self> {
        if size < 2 {
            return Err(Error::arg("toy vocabulary needs at least 2 tokens"));
        }
        let spec = VocabSpec::toy(size)?;
        let mut strings = vec![DEFAULT_MASK.to_string(), DEFAULT_STOP.to_string()];
        let mut chars = DEFAULT_CHARSET.chars();
        while strings.len() < size {
            match chars.next() {
                Some(c) => strings.push(c.to_string()),
                None => strings.push(format!("<t{}>", strings.len())),
            }
        }
        Self::new(spec, strings)
    }

    pub fn spec(&self) -> &VocabSpec {
        &self.spec
    }

    pub fn len(&self) -> usize {
        self.strings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.strings.is_empty()
    }

    pub fn token_str(&self, id: u32) -> Option<&str> {
        self.strings.get(id as usize).map(String::as_str)
    }

    pub fn id_of(&self, s: &str) -> Option<u32> {
        self.lookup.get(s).copied()
    }

    /// Greedy longest-match tokenization.
    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        let chars: Vec<(usize, char)> = text.char_indices().collect();
        let mut out = Vec::new();
        let mut i = 0;
        while i < chars.len() {
            let start = chars[i].0;
            let mut matched = None;
            for len in (1..=self.longest.min(chars.len() - i)).rev() {
                let end = chars.get(i + len).map_or(text.len(), |c| c.0);
                if let Some(&id) = self.lookup.get(&text[start..end]) {
                    matched = Some((id, len));
                    break;
                }
            }
            match matched {
                Some((id, len)) => {
                    out.push(id);
                    i += len;
                }
                None => {
                    let end = chars.get(i + 1).map_or(text.len(), |c| c.0);
                    return Err(Error::arg(format!(
                        "no token covers {:?} in {text:?}",
                        &text[start..end]
                    )));
                }
            }
        }
        Ok(out)
    }

    /// Concatenate the surface strings of `ids`; unknown ids render as `<?N>`.
    pub fn decode(&self, ids: &[u32]) -> String {
        let mut s = String::new();
        for &id in ids {
            match self.token_str(id) {
                Some(t) => s.push_str(t),
                None => s.push_str(&format!("<?{id}>")),
            }
        }
        s
    }
}
