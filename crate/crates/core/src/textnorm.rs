//! Utterance normalization and entity handling.
//!
//! [`normalize`] lowercases, applies Unicode compatibility normalization,
//! replaces emoji with `<emoji>`, caps repeated characters at two and
//! collapses whitespace. [`EntityLexicon::apply_proxies`] then swaps every
//! synonym of an entity for that entity's proxy token, so utterances that
//! differ only by the synonym used become byte-identical.

use std::collections::{BTreeMap, BTreeSet};
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use unicode_normalization::UnicodeNormalization;

pub const EMOJI_SENTINEL: &str = "<emoji>";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TextError {
    #[error("utterance is empty after normalization")]
    EmptyUtterance,
    #[error("entity lexicon is empty")]
    EmptyLexicon,
    #[error("invalid entity `{entity}`: {reason}")]
    InvalidEntity { entity: String, reason: String },
    #[error("synonym `{synonym}` is claimed by both `{first}` and `{second}`")]
    SynonymConflict {
        synonym: String,
        first: String,
        second: String,
    },
    #[error("proxy token `{0}` is used by more than one entity")]
    DuplicateProxy(String),
    #[error("lexicon file {path}: {message}")]
    LexiconFile { path: String, message: String },
}

/// Raw user text. Guaranteed to contain something other than whitespace.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawUtterance(String);

impl RawUtterance {
    pub fn new(text: impl Into<String>) -> Result<Self, TextError> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(TextError::EmptyUtterance);
        }
        Ok(Self(text))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

/// A proxy substitution: the byte span it replaced in the text it was
/// applied to, and the entity that matched.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Substitution {
    pub span: Range<usize>,
    pub entity: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NormalizedUtterance {
    pub text: String,
    pub applied_substitutions: Vec<Substitution>,
}

impl NormalizedUtterance {
    pub fn as_str(&self) -> &str {
        &self.text
    }
}

pub fn normalize(raw: &RawUtterance) -> Result<NormalizedUtterance, TextError> {
    let text = normalize_str(raw.as_str());
    if text.is_empty() {
        return Err(TextError::EmptyUtterance);
    }
    Ok(NormalizedUtterance {
        text,
        applied_substitutions: Vec::new(),
    })
}

/// Normalizes a string, returning an empty string for whitespace-only input.
pub fn normalize_str(input: &str) -> String {
    let folded: String = input.nfkc().collect::<String>().to_lowercase().nfkc().collect();

    let mut marked = String::with_capacity(folded.len());
    let mut in_emoji = false;
    for ch in folded.chars() {
        if is_emoji(ch) {
            if !in_emoji {
                marked.push(' ');
                marked.push_str(EMOJI_SENTINEL);
                marked.push(' ');
                in_emoji = true;
            }
            continue;
        }
        if is_emoji_joiner(ch) {
            // invisible formatting; belongs to the surrounding emoji if any
            continue;
        }
        in_emoji = false;
        marked.push(ch);
    }

    let mut capped = String::with_capacity(marked.len());
    let mut last = None;
    let mut run = 0usize;
    for ch in marked.chars() {
        if Some(ch) == last {
            run += 1;
        } else {
            last = Some(ch);
            run = 1;
        }
        if run <= 2 {
            capped.push(ch);
        }
    }

    capped.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn is_emoji(ch: char) -> bool {
    matches!(ch as u32,
        0x1F000..=0x1FAFF
        | 0x1FC00..=0x1FFFD
        | 0x2600..=0x27BF
        | 0x2300..=0x23FF
        | 0x2B00..=0x2BFF
        | 0x3030 | 0x303D | 0x3297 | 0x3299)
}

fn is_emoji_joiner(ch: char) -> bool {
    matches!(ch as u32, 0x200D | 0xFE0E | 0xFE0F | 0x20E3 | 0xE0020..=0xE007F)
}

/// Length in bytes of a `<token>` sentinel starting at `text[at..]`, if any.
fn sentinel_len(text: &str, at: usize) -> Option<usize> {
    let rest = &text[at..];
    if !rest.starts_with('<') {
        return None;
    }
    for (i, ch) in rest.char_indices().skip(1) {
        match ch {
            '>' if i > 1 => return Some(i + 1),
            '>' | '<' => return None,
            c if c.is_whitespace() => return None,
            _ => {}
        }
    }
    None
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityDefinition {
    pub name: String,
    pub proxy_token: String,
    pub synonyms: Vec<String>,
}

#[derive(Debug, Clone)]
struct Candidate {
    text: String,
    entity: usize,
    ends_alnum: bool,
}

/// Validated set of entities with a synonym matcher.
///
/// Synonyms are stored normalized. Proxy tokens must be angle-bracketed,
/// already normalized and free of whitespace, and synonyms may not contain
/// angle brackets; together with the matcher skipping `<...>` tokens this
/// keeps proxy substitution idempotent.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(try_from = "LexiconFile", into = "LexiconFile")]
pub struct EntityLexicon {
    entities: Vec<EntityDefinition>,
    by_first_char: BTreeMap<char, Vec<Candidate>>,
}

impl PartialEq for EntityLexicon {
    fn eq(&self, other: &Self) -> bool {
        self.entities == other.entities
    }
}

/// On-disk lexicon layout:
///
/// ```toml
/// [[entity]]
/// name = "cell phone"
/// proxy_token = "<cell_phone>"
/// synonyms = ["iphone 11", "iphone xr", "galaxy", "samsung"]
/// ```
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct LexiconFile {
    #[serde(default, rename = "entity")]
    pub entities: Vec<EntityDefinition>,
}

impl TryFrom<LexiconFile> for EntityLexicon {
    type Error = TextError;
    fn try_from(file: LexiconFile) -> Result<Self, TextError> {
        EntityLexicon::new(file.entities)
    }
}

impl From<EntityLexicon> for LexiconFile {
    fn from(lex: EntityLexicon) -> Self {
        LexiconFile {
            entities: lex.entities,
        }
    }
}

impl EntityLexicon {
    pub fn new(entities: Vec<EntityDefinition>) -> Result<Self, TextError> {
        let mut owner: BTreeMap<String, String> = BTreeMap::new();
        let mut proxies = BTreeSet::new();
        let mut normalized = Vec::with_capacity(entities.len());
        for def in entities {
            let invalid = |reason: &str| TextError::InvalidEntity {
                entity: def.name.clone(),
                reason: reason.to_string(),
            };
            if def.name.trim().is_empty() {
                return Err(invalid("name is empty"));
            }
            let proxy = &def.proxy_token;
            if proxy.chars().any(char::is_whitespace) {
                return Err(invalid("proxy token contains whitespace"));
            }
            if sentinel_len(proxy, 0) != Some(proxy.len()) || normalize_str(proxy) != *proxy {
                return Err(invalid("proxy token must look like `<lowercase_name>`"));
            }
            if !proxies.insert(proxy.clone()) {
                return Err(TextError::DuplicateProxy(proxy.clone()));
            }
            if def.synonyms.is_empty() {
                return Err(invalid("no synonyms"));
            }
            let mut seen = BTreeSet::new();
            let mut synonyms = Vec::with_capacity(def.synonyms.len());
            for syn in &def.synonyms {
                let norm = normalize_str(syn);
                if norm.is_empty() {
                    return Err(invalid("empty synonym"));
                }
                if norm.contains(['<', '>']) {
                    return Err(invalid("synonyms may not contain angle brackets"));
                }
                if !seen.insert(norm.clone()) {
                    return Err(invalid(&format!("duplicate synonym `{norm}`")));
                }
                if let Some(first) = owner.get(&norm) {
                    return Err(TextError::SynonymConflict {
                        synonym: norm,
                        first: first.clone(),
                        second: def.name.clone(),
                    });
                }
                owner.insert(norm.clone(), def.name.clone());
                synonyms.push(norm);
            }
            normalized.push(EntityDefinition {
                name: def.name,
                proxy_token: def.proxy_token,
                synonyms,
            });
        }

        let mut by_first_char: BTreeMap<char, Vec<Candidate>> = BTreeMap::new();
        for (entity, def) in normalized.iter().enumerate() {
            for syn in &def.synonyms {
                let first = syn.chars().next().expect("non-empty synonym");
                let last = syn.chars().next_back().expect("non-empty synonym");
                by_first_char.entry(first).or_default().push(Candidate {
                    text: syn.clone(),
                    entity,
                    ends_alnum: last.is_alphanumeric(),
                });
            }
        }
        for cands in by_first_char.values_mut() {
            cands.sort_by(|a, b| b.text.len().cmp(&a.text.len()).then_with(|| a.text.cmp(&b.text)));
        }
        Ok(Self {
            entities: normalized,
            by_first_char,
        })
    }

    pub fn load(path: &Path) -> Result<Self, TextError> {
        let err = |message: String| TextError::LexiconFile {
            path: path.display().to_string(),
            message,
        };
        let raw = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        let file: LexiconFile = toml::from_str(&raw).map_err(|e| err(e.to_string()))?;
        Self::new(file.entities)
    }

    pub fn entities(&self) -> &[EntityDefinition] {
        &self.entities
    }

    pub fn is_empty(&self) -> bool {
        self.entities.is_empty()
    }

    /// Replaces every synonym occurrence with its entity's proxy token.
    ///
    /// Matches must sit on token boundaries. Scanning is left to right and
    /// the longest synonym wins at a given start, so the result is
    /// leftmost-longest. Existing `<...>` tokens are copied verbatim.
    pub fn apply_proxies(&self, utt: &NormalizedUtterance) -> NormalizedUtterance {
        let text = utt.text.as_str();
        let mut out = String::with_capacity(text.len());
        let mut subs = Vec::new();
        let mut prev: Option<char> = None;
        let mut i = 0;
        while i < text.len() {
            if let Some(len) = sentinel_len(text, i) {
                out.push_str(&text[i..i + len]);
                prev = Some('>');
                i += len;
                continue;
            }
            let ch = text[i..].chars().next().expect("in bounds");
            if let Some(cands) = self.by_first_char.get(&ch) {
                let start_ok = !ch.is_alphanumeric() || !prev.is_some_and(char::is_alphanumeric);
                if start_ok {
                    let rest = &text[i..];
                    let hit = cands.iter().find(|c| {
                        rest.starts_with(c.text.as_str())
                            && (!c.ends_alnum
                                || !rest[c.text.len()..]
                                    .chars()
                                    .next()
                                    .is_some_and(char::is_alphanumeric))
                    });
                    if let Some(c) = hit {
                        let def = &self.entities[c.entity];
                        out.push_str(&def.proxy_token);
                        subs.push(Substitution {
                            span: i..i + c.text.len(),
                            entity: def.name.clone(),
                        });
                        prev = Some('>');
                        i += c.text.len();
                        continue;
                    }
                }
            }
            out.push(ch);
            prev = Some(ch);
            i += ch.len_utf8();
        }
        NormalizedUtterance {
            text: out,
            applied_substitutions: subs,
        }
    }

    /// One utterance made of every synonym, in lexicon then synonym order.
    pub fn synthesize_synonym_example(&self) -> Result<NormalizedUtterance, TextError> {
        if self.entities.is_empty() {
            return Err(TextError::EmptyLexicon);
        }
        let text = self
            .entities
            .iter()
            .flat_map(|e| e.synonyms.iter().map(String::as_str))
            .collect::<Vec<_>>()
            .join(" ");
        Ok(NormalizedUtterance {
            text,
            applied_substitutions: Vec::new(),
        })
    }
}

/// Normalization followed by proxy substitution: the preprocessing every
/// training example and every query goes through.
pub fn preprocess(text: &str, lexicon: &EntityLexicon) -> Result<NormalizedUtterance, TextError> {
    let raw = RawUtterance::new(text)?;
    let norm = normalize(&raw)?;
    Ok(if lexicon.is_empty() {
        norm
    } else {
        lexicon.apply_proxies(&norm)
    })
}
