//! Synthesizes abnormal addresses from the five-way error taxonomy.

use std::fmt;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::address::{join_components, HierarchyTier, TokenKind, SEPARATOR, TIER_COUNT};
use crate::error::{Error, Result};
use crate::rng::StageRng;
use crate::world::{AddressRecord, World, FILLER_PHRASES};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ErrorType {
    MissingRegion,
    NestedAddress,
    Alias,
    IrrelevantWords,
    Misspelling,
}

impl ErrorType {
    pub const ALL: [ErrorType; 5] = [
        ErrorType::MissingRegion,
        ErrorType::NestedAddress,
        ErrorType::Alias,
        ErrorType::IrrelevantWords,
        ErrorType::Misspelling,
    ];

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for ErrorType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// Observed error shares, in `ErrorType::ALL` order. They sum to 1.001 as
/// published and are normalized before sampling.
pub const DEFAULT_ERROR_WEIGHTS: [f64; 5] = [0.213, 0.232, 0.146, 0.279, 0.131];

/// Categorical sampler over error types.
#[derive(Debug, Clone)]
pub struct ErrorTypeSampler {
    dist: WeightedIndex<f64>,
}

impl ErrorTypeSampler {
    pub fn new(weights: &[f64; 5]) -> Result<Self> {
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config(format!(
                "error weights must be finite and >= 0: {weights:?}"
            )));
        }
        let dist = WeightedIndex::new(weights.iter().copied())
            .map_err(|e| Error::Config(format!("invalid error weights {weights:?}: {e}")))?;
        Ok(ErrorTypeSampler { dist })
    }

    pub fn sample(&self, rng: &mut StageRng) -> ErrorType {
        ErrorType::ALL[self.dist.sample(rng)]
    }
}

pub fn sample_error_type(rng: &mut StageRng, weights: &[f64; 5]) -> Result<ErrorType> {
    Ok(ErrorTypeSampler::new(weights)?.sample(rng))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorruptionRecord {
    pub record_id: usize,
    pub corrupted_text: String,
    /// Type actually applied (an unavailable alias falls back to misspelling).
    pub error_type: ErrorType,
}

/// Applies one error of the requested type to a world record.
pub fn corrupt(
    record: &AddressRecord,
    error_type: ErrorType,
    world: &World,
    rng: &mut StageRng,
) -> Result<CorruptionRecord> {
    if world.records.get(record.id).map(|r| r.node) != Some(record.node) {
        return Err(Error::InvalidArgument(format!(
            "record {} is not a leaf of this world",
            record.id
        )));
    }
    let (text, applied) = match error_type {
        ErrorType::MissingRegion => (missing_region(record, rng), ErrorType::MissingRegion),
        ErrorType::NestedAddress => (
            nested_address(record, world, rng)?,
            ErrorType::NestedAddress,
        ),
        ErrorType::Alias => match alias_substitution(record, world, rng) {
            Some(text) => (text, ErrorType::Alias),
            None => {
                log::debug!(
                    "record {} has no aliased component; misspelling instead",
                    record.id
                );
                (misspelling(record, world, rng), ErrorType::Misspelling)
            }
        },
        ErrorType::IrrelevantWords => (irrelevant_words(record, rng), ErrorType::IrrelevantWords),
        ErrorType::Misspelling => (misspelling(record, world, rng), ErrorType::Misspelling),
    };
    debug_assert_ne!(text, record.canonical_text);
    Ok(CorruptionRecord {
        record_id: record.id,
        corrupted_text: text,
        error_type: applied,
    })
}

/// Deletes one of tiers 1-3, chosen uniformly.
fn missing_region(record: &AddressRecord, rng: &mut StageRng) -> String {
    let dropped = rng.random_range(0..3usize);
    join_components(
        record
            .components
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != dropped)
            .map(|(_, c)| c.as_str()),
    )
}

/// Appends tiers 1-3 of a record from a different tier-1 subtree.
fn nested_address(record: &AddressRecord, world: &World, rng: &mut StageRng) -> Result<String> {
    let others = world.records_outside_province(record);
    let &other = others.choose(rng).ok_or_else(|| {
        Error::Config("nested-address corruption needs at least two tier-1 regions".into())
    })?;
    let spliced = world.record(other).prefix_text(HierarchyTier::DISTRICT);
    Ok(format!("{}{SEPARATOR}{spliced}", record.canonical_text))
}

fn alias_substitution(record: &AddressRecord, world: &World, rng: &mut StageRng) -> Option<String> {
    let candidates: Vec<usize> = (0..TIER_COUNT)
        .filter(|&t| world.aliases.contains_key(&record.components[t]))
        .collect();
    let &tier = candidates.choose(rng)?;
    let alias = world.aliases[&record.components[tier]].choose(rng)?.clone();
    let mut parts = record.components.clone();
    parts[tier] = alias;
    Some(join_components(parts.iter().map(String::as_str)))
}

/// Inserts a parenthesized filler phrase at one of the separators.
fn irrelevant_words(record: &AddressRecord, rng: &mut StageRng) -> String {
    let at = rng.random_range(1..TIER_COUNT);
    let filler = FILLER_PHRASES
        .choose(rng)
        .expect("filler pool is non-empty");
    let mut parts: Vec<&str> = record.components.iter().map(String::as_str).collect();
    parts.insert(at, filler);
    join_components(parts)
}

/// Swaps two adjacent characters of one component, or substitutes one
/// character with a random letter from the lexicon.
fn misspelling(record: &AddressRecord, world: &World, rng: &mut StageRng) -> String {
    let letters: Vec<char> = world
        .lexicon
        .entries()
        .iter()
        .filter(|e| e.kind == TokenKind::Char)
        .filter_map(|e| e.text.chars().next())
        .filter(|c| c.is_ascii_alphabetic())
        .collect();
    let tier = rng.random_range(0..TIER_COUNT);
    let original: Vec<char> = record.components[tier].chars().collect();
    let mut chars = original.clone();
    loop {
        if rng.random_bool(0.5) {
            let i = rng.random_range(0..chars.len() - 1);
            chars.swap(i, i + 1);
        } else {
            let i = rng.random_range(0..chars.len());
            chars[i] = *letters.choose(rng).expect("lexicon has letters");
        }
        if chars != original {
            break;
        }
        chars.clone_from(&original);
    }
    let mut parts = record.components.clone();
    parts[tier] = chars.into_iter().collect();
    join_components(parts.iter().map(String::as_str))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use crate::world::WorldParams;

    fn world() -> World {
        World::generate(&WorldParams {
            branching: vec![3, 2, 2, 2, 2, 2],
            alias_rate: 0.5,
            ..WorldParams::default()
        })
        .unwrap()
    }

    fn levenshtein(a: &str, b: &str) -> usize {
        let a: Vec<char> = a.chars().collect();
        let b: Vec<char> = b.chars().collect();
        let mut prev: Vec<usize> = (0..=b.len()).collect();
        for i in 1..=a.len() {
            let mut cur = vec![i; b.len() + 1];
            for j in 1..=b.len() {
                let sub = prev[j - 1] + usize::from(a[i - 1] != b[j - 1]);
                cur[j] = sub.min(prev[j] + 1).min(cur[j - 1] + 1);
            }
            prev = cur;
        }
        prev[b.len()]
    }

    #[test]
    fn degenerate_weights_always_pick_the_same_type() {
        let mut rng = seeded(3);
        for _ in 0..200 {
            let t = sample_error_type(&mut rng, &[1.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
            assert_eq!(t, ErrorType::MissingRegion);
        }
    }

    #[test]
    fn all_zero_weights_are_a_config_error() {
        let mut rng = seeded(3);
        assert!(matches!(
            sample_error_type(&mut rng, &[0.0; 5]),
            Err(Error::Config(_))
        ));
        assert!(sample_error_type(&mut rng, &[1.0, -1.0, 0.0, 0.0, 0.0]).is_err());
    }

    #[test]
    fn seeded_draws_repeat() {
        let sampler = ErrorTypeSampler::new(&DEFAULT_ERROR_WEIGHTS).unwrap();
        let mut a = seeded(11);
        let mut b = seeded(11);
        let xs: Vec<_> = (0..100).map(|_| sampler.sample(&mut a)).collect();
        let ys: Vec<_> = (0..100).map(|_| sampler.sample(&mut b)).collect();
        assert_eq!(xs, ys);
    }

    #[test]
    fn missing_region_leaves_five_tiers() {
        let world = world();
        let mut rng = seeded(1);
        for r in world.records.iter().take(30) {
            let c = corrupt(r, ErrorType::MissingRegion, &world, &mut rng).unwrap();
            let parsed = world.parse(&c.corrupted_text);
            assert_eq!(parsed.assignments.len(), 5);
            let missing: Vec<u8> = parsed.flags.missing_tiers.iter().map(|t| t.get()).collect();
            assert_eq!(missing.len(), 1);
            assert!(missing[0] <= 3);
            assert!(!world.is_standard(&c.corrupted_text));
        }
    }

    #[test]
    fn nested_address_flags_duplicate_tier() {
        let world = world();
        let mut rng = seeded(2);
        for r in world.records.iter().take(30) {
            let c = corrupt(r, ErrorType::NestedAddress, &world, &mut rng).unwrap();
            let parsed = world.parse(&c.corrupted_text);
            assert!(parsed
                .flags
                .duplicate_tiers
                .contains(&HierarchyTier::PROVINCE));
            assert!(!world.is_standard(&c.corrupted_text));
            assert!(world.geocode(&c.corrupted_text).is_err());
        }
    }

    #[test]
    fn misspelling_is_within_edit_distance_two() {
        let world = world();
        let mut rng = seeded(4);
        for r in &world.records {
            let c = corrupt(r, ErrorType::Misspelling, &world, &mut rng).unwrap();
            let d = levenshtein(&c.corrupted_text, &r.canonical_text);
            assert!((1..=2).contains(&d), "distance {d}: {}", c.corrupted_text);
        }
    }

    #[test]
    fn alias_falls_back_to_misspelling_without_aliases() {
        let world = World::generate(&WorldParams {
            branching: vec![2; 6],
            alias_rate: 0.0,
            ..WorldParams::default()
        })
        .unwrap();
        let mut rng = seeded(5);
        let c = corrupt(&world.records[0], ErrorType::Alias, &world, &mut rng).unwrap();
        assert_eq!(c.error_type, ErrorType::Misspelling);
    }

    #[test]
    fn alias_corruption_still_parses_cleanly() {
        let world = world();
        let mut rng = seeded(6);
        let mut seen = 0;
        for r in &world.records {
            let c = corrupt(r, ErrorType::Alias, &world, &mut rng).unwrap();
            if c.error_type == ErrorType::Alias {
                seen += 1;
                assert!(world.is_standard(&c.corrupted_text));
                assert_eq!(world.geocode(&c.corrupted_text), Ok(r.coordinate));
            }
        }
        assert!(seen > 0);
    }

    #[test]
    fn irrelevant_words_keep_all_components() {
        let world = world();
        let mut rng = seeded(7);
        for r in world.records.iter().take(20) {
            let c = corrupt(r, ErrorType::IrrelevantWords, &world, &mut rng).unwrap();
            let parsed = world.parse(&c.corrupted_text);
            assert_eq!(parsed.assignments.len(), 6);
            assert_eq!(parsed.flags.unknown_token_count, 1);
        }
    }

    #[test]
    fn corruption_never_returns_original() {
        let world = world();
        let mut rng = seeded(8);
        for r in &world.records {
            for t in ErrorType::ALL {
                let c = corrupt(r, t, &world, &mut rng).unwrap();
                assert_ne!(c.corrupted_text, r.canonical_text);
            }
        }
    }
}
