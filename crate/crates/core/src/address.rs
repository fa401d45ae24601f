//! Address tokenization, hierarchy parsing, serialization and the
//! standardness predicate, all over a closed lexicon derived from the world.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Number of tiers in the simplified address hierarchy.
pub const TIER_COUNT: usize = 6;

/// Separator placed between serialized components.
pub const SEPARATOR: &str = ", ";

/// One level of the address hierarchy, 1 (province) through 6 (room).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct HierarchyTier(u8);

impl HierarchyTier {
    pub const PROVINCE: HierarchyTier = HierarchyTier(1);
    pub const CITY: HierarchyTier = HierarchyTier(2);
    pub const DISTRICT: HierarchyTier = HierarchyTier(3);
    pub const ROAD: HierarchyTier = HierarchyTier(4);
    pub const POI: HierarchyTier = HierarchyTier(5);
    pub const ROOM: HierarchyTier = HierarchyTier(6);

    pub fn new(tier: u8) -> Result<Self> {
        if (1..=TIER_COUNT as u8).contains(&tier) {
            Ok(HierarchyTier(tier))
        } else {
            Err(Error::InvalidArgument(format!("tier {tier} outside 1..=6")))
        }
    }

    pub fn all() -> impl Iterator<Item = HierarchyTier> {
        (1..=TIER_COUNT as u8).map(HierarchyTier)
    }

    pub fn get(self) -> u8 {
        self.0
    }

    /// Zero-based index, handy for per-tier arrays.
    pub fn index(self) -> usize {
        self.0 as usize - 1
    }

    pub fn from_index(index: usize) -> HierarchyTier {
        assert!(index < TIER_COUNT, "tier index {index} out of range");
        HierarchyTier(index as u8 + 1)
    }
}

impl TryFrom<u8> for HierarchyTier {
    type Error = Error;
    fn try_from(value: u8) -> Result<Self> {
        HierarchyTier::new(value)
    }
}

impl From<HierarchyTier> for u8 {
    fn from(tier: HierarchyTier) -> u8 {
        tier.0
    }
}

impl fmt::Display for HierarchyTier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "T{}", self.0)
    }
}

/// Vocabulary token id.
pub type TokenId = u32;

/// Ordered token ids; every id is below the lexicon size.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TokenSeq {
    pub tokens: Vec<TokenId>,
}

/// Control tokens occupy fixed ids at the start of every lexicon.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u32)]
pub enum Control {
    Pad = 0,
    End = 1,
    Unk = 2,
    TaskParse = 3,
    TaskAep = 4,
    TaskRewrite = 5,
    Address = 6,
    Hierarchy = 7,
    Examples = 8,
    Related = 9,
    Item = 10,
    Output = 11,
    Arrow = 12,
}

impl Control {
    pub const ALL: [Control; 13] = [
        Control::Pad,
        Control::End,
        Control::Unk,
        Control::TaskParse,
        Control::TaskAep,
        Control::TaskRewrite,
        Control::Address,
        Control::Hierarchy,
        Control::Examples,
        Control::Related,
        Control::Item,
        Control::Output,
        Control::Arrow,
    ];

    pub fn id(self) -> TokenId {
        self as TokenId
    }

    fn text(self) -> &'static str {
        match self {
            Control::Pad => "<pad>",
            Control::End => "<end>",
            Control::Unk => "<unk>",
            Control::TaskParse => "<task:parse>",
            Control::TaskAep => "<task:aep>",
            Control::TaskRewrite => "<task:rewrite>",
            Control::Address => "<address>",
            Control::Hierarchy => "<hierarchy>",
            Control::Examples => "<examples>",
            Control::Related => "<related>",
            Control::Item => "<item>",
            Control::Output => "<output>",
            Control::Arrow => "<arrow>",
        }
    }
}

/// Label token text for a tier inside component listings, e.g. `[3]`.
pub fn tier_label(tier: HierarchyTier) -> String {
    format!("[{}]", tier.get())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TokenKind {
    Control,
    TierLabel {
        tier: HierarchyTier,
    },
    Separator,
    Name {
        tier: HierarchyTier,
    },
    Alias {
        tier: HierarchyTier,
        canonical: String,
    },
    Filler,
    Char,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LexEntry {
    pub text: String,
    #[serde(flatten)]
    pub kind: TokenKind,
}

/// Closed vocabulary: control tokens, tier labels, the separator, every
/// hierarchy name, aliases, filler phrases and printable ASCII characters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(from = "Vec<LexEntry>", into = "Vec<LexEntry>")]
pub struct Lexicon {
    entries: Vec<LexEntry>,
    /// Matchable entry ids bucketed by first byte, longest first.
    by_first_byte: Vec<Vec<TokenId>>,
    text_to_id: HashMap<String, TokenId>,
}

impl From<Vec<LexEntry>> for Lexicon {
    fn from(entries: Vec<LexEntry>) -> Self {
        let mut by_first_byte = vec![Vec::new(); 256];
        let mut text_to_id = HashMap::with_capacity(entries.len());
        for (id, entry) in entries.iter().enumerate() {
            if entry.kind == TokenKind::Control {
                continue;
            }
            let first = entry.text.as_bytes()[0] as usize;
            by_first_byte[first].push(id as TokenId);
            text_to_id
                .entry(entry.text.clone())
                .or_insert(id as TokenId);
        }
        for bucket in &mut by_first_byte {
            bucket.sort_by(|&a, &b| {
                entries[b as usize]
                    .text
                    .len()
                    .cmp(&entries[a as usize].text.len())
                    .then(a.cmp(&b))
            });
        }
        Lexicon {
            entries,
            by_first_byte,
            text_to_id,
        }
    }
}

impl From<Lexicon> for Vec<LexEntry> {
    fn from(lexicon: Lexicon) -> Self {
        lexicon.entries
    }
}

impl Lexicon {
    /// Builds the lexicon in a fixed order so ids are reproducible.
    pub fn build(
        names: &BTreeMap<HierarchyTier, BTreeSet<String>>,
        aliases: &BTreeMap<String, Vec<String>>,
        fillers: &[&str],
    ) -> Lexicon {
        let mut entries: Vec<LexEntry> = Control::ALL
            .iter()
            .map(|c| LexEntry {
                text: c.text().to_string(),
                kind: TokenKind::Control,
            })
            .collect();
        for tier in HierarchyTier::all() {
            entries.push(LexEntry {
                text: tier_label(tier),
                kind: TokenKind::TierLabel { tier },
            });
        }
        entries.push(LexEntry {
            text: SEPARATOR.to_string(),
            kind: TokenKind::Separator,
        });
        let mut tier_of_name = HashMap::new();
        for (&tier, set) in names {
            for name in set {
                tier_of_name.insert(name.as_str(), tier);
                entries.push(LexEntry {
                    text: name.clone(),
                    kind: TokenKind::Name { tier },
                });
            }
        }
        for (canonical, list) in aliases {
            let tier = tier_of_name[canonical.as_str()];
            for alias in list {
                entries.push(LexEntry {
                    text: alias.clone(),
                    kind: TokenKind::Alias {
                        tier,
                        canonical: canonical.clone(),
                    },
                });
            }
        }
        for filler in fillers {
            entries.push(LexEntry {
                text: filler.to_string(),
                kind: TokenKind::Filler,
            });
        }
        for byte in 0x20u8..=0x7e {
            entries.push(LexEntry {
                text: (byte as char).to_string(),
                kind: TokenKind::Char,
            });
        }
        Lexicon::from(entries)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, id: TokenId) -> Option<&LexEntry> {
        self.entries.get(id as usize)
    }

    pub fn entries(&self) -> &[LexEntry] {
        &self.entries
    }

    /// Hex SHA-256 of the entry list; models record it to detect a lexicon
    /// they were not trained on.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for e in &self.entries {
            h.update(e.text.as_bytes());
            h.update([0u8]);
        }
        hex::encode(h.finalize())
    }

    pub fn id_of(&self, text: &str) -> Option<TokenId> {
        self.text_to_id.get(text).copied()
    }

    pub fn tier_label_id(&self, tier: HierarchyTier) -> TokenId {
        // Tier labels follow the control block directly.
        Control::ALL.len() as TokenId + tier.index() as TokenId
    }

    pub fn separator_id(&self) -> TokenId {
        Control::ALL.len() as TokenId + TIER_COUNT as TokenId
    }

    /// Greedy longest-match tokenization. Characters outside the lexicon map
    /// to `<unk>`, one token per character.
    pub fn tokenize(&self, text: &str) -> TokenSeq {
        let bytes = text.as_bytes();
        let mut tokens = Vec::with_capacity(text.len() / 4 + 1);
        let mut pos = 0;
        while pos < bytes.len() {
            let rest = &bytes[pos..];
            let matched = self.by_first_byte[rest[0] as usize].iter().find(|&&id| {
                let candidate = self.entries[id as usize].text.as_bytes();
                rest.starts_with(candidate)
            });
            match matched {
                Some(&id) => {
                    tokens.push(id);
                    pos += self.entries[id as usize].text.len();
                }
                None => {
                    tokens.push(Control::Unk.id());
                    let ch_len = text[pos..].chars().next().map_or(1, char::len_utf8);
                    pos += ch_len;
                }
            }
        }
        TokenSeq { tokens }
    }

    /// Concatenates entry texts. Lossless for strings made only of lexicon
    /// entries.
    pub fn detokenize(&self, tokens: &[TokenId]) -> Result<String> {
        let mut out = String::new();
        for &id in tokens {
            let entry = self.entry(id).ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "token id {id} outside vocabulary of {}",
                    self.len()
                ))
            })?;
            out.push_str(&entry.text);
        }
        Ok(out)
    }

    /// Detokenizes generated output: stops at `<end>`, drops other control
    /// tokens.
    pub fn render_output(&self, tokens: &[TokenId]) -> String {
        let mut out = String::new();
        for &id in tokens {
            if id == Control::End.id() {
                break;
            }
            match self.entry(id) {
                Some(entry) if entry.kind != TokenKind::Control => out.push_str(&entry.text),
                _ => {}
            }
        }
        out
    }

    /// Parses text into hierarchy assignments plus anomaly flags. Total:
    /// garbage input yields flags, never an error.
    pub fn parse(&self, text: &str) -> ParsedAddress {
        let seq = self.tokenize(text);
        let mut assignments = BTreeMap::new();
        let mut flags = AnomalyFlags::default();
        let mut deepest_seen: Option<HierarchyTier> = None;
        for &id in &seq.tokens {
            let entry = &self.entries[id as usize];
            let (tier, name) = match &entry.kind {
                TokenKind::Name { tier } => (*tier, entry.text.clone()),
                TokenKind::Alias { tier, canonical } => (*tier, canonical.clone()),
                TokenKind::Filler | TokenKind::Char => {
                    flags.unknown_token_count += 1;
                    continue;
                }
                TokenKind::Control => {
                    // Only <unk> can come out of tokenize.
                    flags.unknown_token_count += 1;
                    continue;
                }
                TokenKind::TierLabel { .. } | TokenKind::Separator => continue,
            };
            if let Some(prev) = deepest_seen {
                if tier < prev {
                    flags.out_of_order = true;
                }
            }
            deepest_seen = Some(deepest_seen.map_or(tier, |prev| prev.max(tier)));
            if let std::collections::btree_map::Entry::Vacant(e) = assignments.entry(tier) {
                e.insert(name);
            } else {
                flags.duplicate_tiers.insert(tier);
            }
        }
        for tier in HierarchyTier::all() {
            if !assignments.contains_key(&tier) {
                flags.missing_tiers.insert(tier);
            }
        }
        ParsedAddress { assignments, flags }
    }

    /// True iff the parse has no anomaly flags and tiers 1-3 are assigned.
    pub fn is_standard(&self, text: &str) -> bool {
        let parsed = self.parse(text);
        parsed.flags.is_empty()
            && [
                HierarchyTier::PROVINCE,
                HierarchyTier::CITY,
                HierarchyTier::DISTRICT,
            ]
            .iter()
            .all(|t| parsed.assignments.contains_key(t))
    }
}

/// Anomalies detected while parsing.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnomalyFlags {
    pub duplicate_tiers: BTreeSet<HierarchyTier>,
    pub missing_tiers: BTreeSet<HierarchyTier>,
    pub unknown_token_count: usize,
    pub out_of_order: bool,
}

impl AnomalyFlags {
    pub fn is_empty(&self) -> bool {
        self.duplicate_tiers.is_empty()
            && self.missing_tiers.is_empty()
            && self.unknown_token_count == 0
            && !self.out_of_order
    }

    pub fn has_duplicate_tier(&self) -> bool {
        !self.duplicate_tiers.is_empty()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedAddress {
    pub assignments: BTreeMap<HierarchyTier, String>,
    pub flags: AnomalyFlags,
}

impl ParsedAddress {
    pub fn get(&self, tier: HierarchyTier) -> Option<&str> {
        self.assignments.get(&tier).map(String::as_str)
    }

    /// Emits assigned tiers in ascending order joined by the separator.
    pub fn serialize(&self) -> Result<String> {
        if self.flags.has_duplicate_tier() {
            return Err(Error::InvalidArgument(format!(
                "cannot serialize address with duplicate tiers {:?}",
                self.flags.duplicate_tiers
            )));
        }
        Ok(join_components(
            self.assignments.values().map(String::as_str),
        ))
    }

    /// Component listing used as the parsing-task target: `[1]name[2]name...`.
    pub fn listing(&self) -> String {
        let mut out = String::new();
        for (tier, name) in &self.assignments {
            out.push_str(&tier_label(*tier));
            out.push_str(name);
        }
        out
    }
}

pub fn join_components<'a>(parts: impl IntoIterator<Item = &'a str>) -> String {
    let mut out = String::new();
    for (i, part) in parts.into_iter().enumerate() {
        if i > 0 {
            out.push_str(SEPARATOR);
        }
        out.push_str(part);
    }
    out
}
