//! Composite rewriting reward: semantic similarity to the input, similarity
//! to the reverse-geocoded delivery address, and geocoding distance.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::world::{Coordinate, World};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardConfig {
    pub theta1_m: f64,
    pub theta2_m: f64,
    /// Weights of the semantic, reverse-geocoding and geocoding scores.
    pub lambda: [f64; 3],
    /// Use `theta2 - theta1` as the middle-branch divisor, which makes the
    /// geocoding score continuous at `theta2`.
    pub continuous_geo: bool,
    pub ngram_buckets: usize,
    pub hash_seed: u64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig {
            theta1_m: 100.0,
            theta2_m: 1000.0,
            lambda: [0.2, 0.2, 0.6],
            continuous_geo: false,
            ngram_buckets: 2048,
            hash_seed: 0x5eed,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.theta1_m > 0.0 && self.theta1_m < self.theta2_m) {
            return Err(Error::Config("need 0 < theta1_m < theta2_m".into()));
        }
        if self.lambda.iter().any(|l| !(*l >= 0.0)) {
            return Err(Error::Config("reward weights must be >= 0".into()));
        }
        if self.ngram_buckets == 0 {
            return Err(Error::Config("ngram_buckets must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub seman: f64,
    pub revgeo: f64,
    pub geo: f64,
    pub total: f64,
}

/// Hashed bag of character 1-, 2- and 3-grams.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticEmbedder {
    buckets: usize,
    hash_seed: u64,
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0100_0000_01b3;

impl SemanticEmbedder {
    pub fn new(buckets: usize, hash_seed: u64) -> Result<Self> {
        if buckets == 0 {
            return Err(Error::Config("ngram_buckets must be >= 1".into()));
        }
        Ok(SemanticEmbedder { buckets, hash_seed })
    }

    pub fn from_config(cfg: &RewardConfig) -> Result<Self> {
        Self::new(cfg.ngram_buckets, cfg.hash_seed)
    }

    fn bucket(&self, gram: &[char]) -> usize {
        let mut h = FNV_OFFSET;
        for b in self.hash_seed.to_le_bytes() {
            h = (h ^ b as u64).wrapping_mul(FNV_PRIME);
        }
        h = (h ^ gram.len() as u64).wrapping_mul(FNV_PRIME);
        let mut buf = [0u8; 4];
        for c in gram {
            for b in c.encode_utf8(&mut buf).bytes() {
                h = (h ^ b as u64).wrapping_mul(FNV_PRIME);
            }
        }
        (h % self.buckets as u64) as usize
    }

    pub fn embed(&self, text: &str) -> Vec<f64> {
        let chars: Vec<char> = text.chars().collect();
        let mut v = vec![0.0; self.buckets];
        for n in 1..=3 {
            for gram in chars.windows(n) {
                v[self.bucket(gram)] += 1.0;
            }
        }
        v
    }

    /// Cosine similarity of the n-gram bags; 0 when either text is empty.
    pub fn similarity(&self, a: &str, b: &str) -> f64 {
        if a.is_empty() || b.is_empty() {
            log::debug!("semantic score against an empty string is 0");
            return 0.0;
        }
        cosine(&self.embed(a), &self.embed(b))
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot / (na * nb)).clamp(0.0, 1.0)
    }
}

pub fn seman_score(x: &str, y: &str, f: &SemanticEmbedder) -> f64 {
    f.similarity(x, y)
}

pub fn revgeo_score(y: &str, c: &Coordinate, world: &World, f: &SemanticEmbedder) -> Result<f64> {
    let reference = world.reverse_geocode(c)?;
    Ok(f.similarity(y, &reference))
}

/// Piecewise geocoding score for a geocoding distance `k` in meters, `None`
/// meaning geocoding failed.
pub fn geo_score_from_distance(k: Option<f64>, cfg: &RewardConfig) -> f64 {
    let Some(k) = k else { return 0.0 };
    let (t1, t2) = (cfg.theta1_m, cfg.theta2_m);
    if k < t1 {
        1.0
    } else if k < t2 {
        let divisor = if cfg.continuous_geo { t2 - t1 } else { t2 };
        1.0 - (k - t1) / divisor
    } else {
        0.0
    }
}

pub fn geo_score(y: &str, c: &Coordinate, world: &World, cfg: &RewardConfig) -> Result<f64> {
    if !world.in_bounds(c) {
        return Err(Error::Domain(format!(
            "coordinate ({}, {}) outside the world",
            c.x, c.y
        )));
    }
    let k = world.geocode(y).ok().map(|g| g.distance(c));
    Ok(geo_score_from_distance(k, cfg))
}

pub fn total_reward(
    x: &str,
    y: &str,
    c: &Coordinate,
    world: &World,
    f: &SemanticEmbedder,
    cfg: &RewardConfig,
) -> Result<RewardBreakdown> {
    let seman = seman_score(x, y, f);
    let revgeo = revgeo_score(y, c, world, f)?;
    let geo = geo_score(y, c, world, cfg)?;
    let [l1, l2, l3] = cfg.lambda;
    Ok(RewardBreakdown {
        seman,
        revgeo,
        geo,
        total: l1 * seman + l2 * revgeo + l3 * geo,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::address::HierarchyTier;
    use crate::world::WorldParams;

    fn world() -> World {
        World::generate(&WorldParams {
            branching: vec![2, 2, 2, 2, 2, 2],
            ..WorldParams::default()
        })
        .unwrap()
    }

    fn f() -> SemanticEmbedder {
        SemanticEmbedder::from_config(&RewardConfig::default()).unwrap()
    }

    #[test]
    fn semantic_score_edges() {
        let f = f();
        assert!((seman_score("Outlets Store", "Outlets Store", &f) - 1.0).abs() < 1e-12);
        let s = seman_score("Outlets Store (Eastern door)", "Outlets Store", &f);
        assert!(s > 0.0 && s < 1.0, "{s}");
        assert_eq!(seman_score("", "abc", &f), 0.0);
        // Single buckets make disjoint alphabets trivially orthogonal.
        let tiny = SemanticEmbedder::new(1 << 20, 1).unwrap();
        assert_eq!(seman_score("aaa", "zzz", &tiny), 0.0);
    }

    #[test]
    fn geocoding_score_branches() {
        let cfg = RewardConfig::default();
        assert_eq!(geo_score_from_distance(Some(50.0), &cfg), 1.0);
        assert!((geo_score_from_distance(Some(550.0), &cfg) - 0.55).abs() < 1e-12);
        assert_eq!(geo_score_from_distance(None, &cfg), 0.0);
        assert_eq!(geo_score_from_distance(Some(1000.0), &cfg), 0.0);
        // The printed formula jumps from 0.1 to 0 at theta2.
        let below = geo_score_from_distance(Some(1000.0 - 1e-9), &cfg);
        assert!((below - 0.1).abs() < 1e-9);
        let cont = RewardConfig {
            continuous_geo: true,
            ..cfg
        };
        assert!(geo_score_from_distance(Some(1000.0 - 1e-9), &cont) < 1e-9);
        assert!((geo_score_from_distance(Some(550.0), &cont) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn geo_score_uses_geocoder_distance() {
        let world = world();
        let cfg = RewardConfig::default();
        let r = &world.records[10];
        let c = Coordinate::new(r.coordinate.x + 30.0, r.coordinate.y + 40.0);
        assert_eq!(geo_score(&r.canonical_text, &c, &world, &cfg).unwrap(), 1.0);
        assert_eq!(geo_score("nowhere at all", &c, &world, &cfg).unwrap(), 0.0);
        assert!(geo_score(&r.canonical_text, &Coordinate::new(-1.0, 0.0), &world, &cfg).is_err());
    }

    #[test]
    fn reverse_geocoding_score() {
        let world = world();
        let f = f();
        let r = &world.records[7];
        let prefix = r.prefix_text(HierarchyTier::POI);
        let rg = world.reverse_geocode(&r.coordinate).unwrap();
        assert!((revgeo_score(&rg, &r.coordinate, &world, &f).unwrap() - 1.0).abs() < 1e-12);
        let expected = seman_score(&r.canonical_text, &prefix, &f);
        assert_eq!(
            revgeo_score(&r.canonical_text, &r.coordinate, &world, &f).unwrap(),
            expected
        );
    }

    #[test]
    fn total_is_the_weighted_sum() {
        let world = world();
        let f = f();
        let r = &world.records[3];
        let t = &r.canonical_text;
        let base = total_reward(t, t, &r.coordinate, &world, &f, &RewardConfig::default()).unwrap();
        assert_eq!(base.seman, 1.0);
        assert_eq!(base.geo, 1.0);
        assert!((base.total - (0.2 + 0.2 * base.revgeo + 0.6)).abs() < 1e-12);
        let only_geo = RewardConfig {
            lambda: [0.0, 0.0, 1.0],
            ..RewardConfig::default()
        };
        let x = "Meili Gdn, Room 3";
        let b = total_reward(x, t, &r.coordinate, &world, &f, &only_geo).unwrap();
        assert_eq!(b.total, b.geo);
        let only_sem = RewardConfig {
            lambda: [1.0, 0.0, 0.0],
            ..RewardConfig::default()
        };
        let b = total_reward(x, t, &r.coordinate, &world, &f, &only_sem).unwrap();
        assert_eq!(b.total, b.seman);
        let fail = total_reward(
            "qqq",
            "zzz",
            &r.coordinate,
            &world,
            &SemanticEmbedder::new(1 << 20, 1).unwrap(),
            &RewardConfig::default(),
        )
        .unwrap();
        assert_eq!(fail.geo, 0.0);
        assert!((fail.total - (0.2 * fail.seman + 0.2 * fail.revgeo)).abs() < 1e-15);
    }

    #[test]
    fn invalid_thresholds_are_rejected() {
        let bad = RewardConfig {
            theta1_m: 1000.0,
            theta2_m: 100.0,
            ..RewardConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }
}
