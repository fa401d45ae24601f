//! Builders for the supervised, alignment, retriever and test datasets, plus
//! their JSON Lines persistence.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::address::join_components;
use crate::corruptor::{corrupt, ErrorType, ErrorTypeSampler, DEFAULT_ERROR_WEIGHTS};
use crate::error::{Error, Result};
use crate::rng::{stage_rng, StageRng};
use crate::world::{AddressRecord, Coordinate, World};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Parsing,
    Aep,
    Rewriting,
}

/// One `(x, y, c)` example. Supervised samples carry a target; alignment
/// samples carry a delivery coordinate and no target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewriteSample {
    pub task: Task,
    pub input_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delivery_coordinate: Option<Coordinate>,
    /// Provenance of the sample; never read by training code.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub record_id: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error_type: Option<ErrorType>,
    /// Groundtruth station (test sets only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub station_id: Option<usize>,
    /// Standard/abnormal tag (test sets only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub abnormal: Option<bool>,
}

impl RewriteSample {
    fn supervised(task: Task, input: String, target: String, record: &AddressRecord) -> Self {
        RewriteSample {
            task,
            input_text: input,
            target_text: Some(target),
            delivery_coordinate: None,
            record_id: Some(record.id),
            error_type: None,
            station_id: None,
            abnormal: None,
        }
    }
}

/// Address text with its true coordinate, for spatial-encoder training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeocodingPair {
    pub text: String,
    pub coordinate: Coordinate,
    pub record_id: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub parsing: usize,
    pub aep: usize,
    pub rewriting: usize,
    pub oa: usize,
    pub oa_heldout: usize,
    pub geocoding: usize,
    pub test: usize,
    pub identity_ratio: f64,
    pub abnormal_fraction: f64,
    pub noise_sigma_m: f64,
    pub error_weights: [f64; 5],
    /// Optional skew of the alignment-set error mix; defaults to `error_weights`.
    #[serde(default)]
    pub oa_error_weights: Option<[f64; 5]>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig::scaled(1000)
    }
}

impl DataConfig {
    /// Sizes derived from the production corpus (20M/20M/20M supervised,
    /// 4M alignment) divided by `scale`.
    pub fn scaled(scale: usize) -> Self {
        let scale = scale.max(1);
        DataConfig {
            parsing: 20_000_000 / scale,
            aep: 20_000_000 / scale,
            rewriting: 20_000_000 / scale,
            oa: 4_000_000 / scale,
            oa_heldout: 400,
            geocoding: 40_000,
            test: 1000,
            identity_ratio: 0.778,
            abnormal_fraction: 0.10,
            noise_sigma_m: 30.0,
            error_weights: DEFAULT_ERROR_WEIGHTS,
            oa_error_weights: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.identity_ratio) {
            return Err(Error::Config("identity_ratio must lie in [0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.abnormal_fraction) {
            return Err(Error::Config("abnormal_fraction must lie in [0, 1]".into()));
        }
        if !(self.noise_sigma_m >= 0.0) {
            return Err(Error::Config("noise_sigma_m must be >= 0".into()));
        }
        ErrorTypeSampler::new(&self.error_weights)?;
        if let Some(w) = &self.oa_error_weights {
            ErrorTypeSampler::new(w)?;
        }
        Ok(())
    }
}

/// Partition of record ids into training and held-out test pools.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordSplit {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

pub fn split_records(world: &World, n_test: usize, rng: &mut StageRng) -> Result<RecordSplit> {
    if n_test >= world.records.len() {
        return Err(Error::Config(format!(
            "test set of {n_test} needs more than {} records to leave a training pool",
            world.records.len()
        )));
    }
    let mut ids: Vec<usize> = (0..world.records.len()).collect();
    ids.shuffle(rng);
    let mut test = ids[..n_test].to_vec();
    let mut train = ids[n_test..].to_vec();
    test.sort_unstable();
    train.sort_unstable();
    Ok(RecordSplit { train, test })
}

fn pick<'w>(world: &'w World, pool: &[usize], rng: &mut StageRng) -> Result<&'w AddressRecord> {
    let &id = pool
        .choose(rng)
        .ok_or_else(|| Error::Config("empty record pool".into()))?;
    Ok(world.record(id))
}

fn check_n(n: usize) -> Result<()> {
    if n == 0 {
        Err(Error::Config("dataset size must be >= 1".into()))
    } else {
        Ok(())
    }
}

/// Replaces each aliased component with its alias with probability 1/2.
fn alias_variant(record: &AddressRecord, world: &World, rng: &mut StageRng) -> String {
    let parts: Vec<String> = record
        .components
        .iter()
        .map(|c| match world.aliases.get(c) {
            Some(list) if rng.random_bool(0.5) => {
                list.choose(rng).cloned().unwrap_or_else(|| c.clone())
            }
            _ => c.clone(),
        })
        .collect();
    join_components(parts.iter().map(String::as_str))
}

/// `<address, component listing>` pairs over canonical and alias-varied text.
pub fn build_parsing_dataset(
    world: &World,
    pool: &[usize],
    n: usize,
    rng: &mut StageRng,
) -> Result<Vec<RewriteSample>> {
    check_n(n)?;
    (0..n)
        .map(|_| {
            let record = pick(world, pool, rng)?;
            let input = alias_variant(record, world, rng);
            let target = world.parse(&record.canonical_text).listing();
            Ok(RewriteSample::supervised(
                Task::Parsing,
                input,
                target,
                record,
            ))
        })
        .collect()
}

/// Inputs with one of tiers 1-3 deleted; targets are the full canonical text.
pub fn build_aep_dataset(
    world: &World,
    pool: &[usize],
    n: usize,
    rng: &mut StageRng,
) -> Result<Vec<RewriteSample>> {
    check_n(n)?;
    (0..n)
        .map(|_| {
            let record = pick(world, pool, rng)?;
            let c = corrupt(record, ErrorType::MissingRegion, world, rng)?;
            let mut sample = RewriteSample::supervised(
                Task::Aep,
                c.corrupted_text,
                record.canonical_text.clone(),
                record,
            );
            sample.error_type = Some(ErrorType::MissingRegion);
            Ok(sample)
        })
        .collect()
}

/// Rewriting pairs: `round(n * identity_ratio)` identity pairs, the rest
/// corrupted inputs with canonical targets. Order is shuffled.
pub fn build_rewriting_dataset(
    world: &World,
    pool: &[usize],
    n: usize,
    identity_ratio: f64,
    weights: &[f64; 5],
    rng: &mut StageRng,
) -> Result<Vec<RewriteSample>> {
    check_n(n)?;
    if !(0.0..=1.0).contains(&identity_ratio) {
        return Err(Error::Config("identity_ratio must lie in [0, 1]".into()));
    }
    let sampler = ErrorTypeSampler::new(weights)?;
    let n_identity = (n as f64 * identity_ratio).round() as usize;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let record = pick(world, pool, rng)?;
        let target = record.canonical_text.clone();
        if i < n_identity {
            out.push(RewriteSample::supervised(
                Task::Rewriting,
                target.clone(),
                target,
                record,
            ));
        } else {
            let c = corrupt(record, sampler.sample(rng), world, rng)?;
            let mut sample =
                RewriteSample::supervised(Task::Rewriting, c.corrupted_text, target, record);
            sample.error_type = Some(c.error_type);
            out.push(sample);
        }
    }
    out.shuffle(rng);
    Ok(out)
}

/// Alignment samples: corrupted input plus a noisy delivery coordinate and
/// no target.
pub fn build_oa_dataset(
    world: &World,
    pool: &[usize],
    n: usize,
    noise_sigma_m: f64,
    weights: &[f64; 5],
    rng: &mut StageRng,
) -> Result<Vec<RewriteSample>> {
    check_n(n)?;
    let sampler = ErrorTypeSampler::new(weights)?;
    (0..n)
        .map(|_| {
            let record = pick(world, pool, rng)?;
            let c = corrupt(record, sampler.sample(rng), world, rng)?;
            let coordinate = world.sample_delivery(record, noise_sigma_m, rng)?;
            Ok(RewriteSample {
                task: Task::Rewriting,
                input_text: c.corrupted_text,
                target_text: None,
                delivery_coordinate: Some(coordinate),
                record_id: Some(record.id),
                error_type: Some(c.error_type),
                station_id: None,
                abnormal: None,
            })
        })
        .collect()
}

/// Spatial-encoder pairs: half canonical text, half corrupted, each with the
/// record's exact coordinate.
pub fn build_geocoding_pairs(
    world: &World,
    pool: &[usize],
    n: usize,
    weights: &[f64; 5],
    rng: &mut StageRng,
) -> Result<Vec<GeocodingPair>> {
    check_n(n)?;
    let sampler = ErrorTypeSampler::new(weights)?;
    (0..n)
        .map(|_| {
            let record = pick(world, pool, rng)?;
            let text = if rng.random_bool(0.5) {
                record.canonical_text.clone()
            } else {
                corrupt(record, sampler.sample(rng), world, rng)?.corrupted_text
            };
            Ok(GeocodingPair {
                text,
                coordinate: record.coordinate,
                record_id: record.id,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TestSets {
    pub aep: Vec<RewriteSample>,
    /// Direct and geocoding evaluation share one address collection.
    pub direct: Vec<RewriteSample>,
    pub geocoding: Vec<RewriteSample>,
}

/// True when the raw text already geocodes into the groundtruth station.
pub fn dispatches_correctly(world: &World, text: &str, station: usize) -> bool {
    match world.geocode(text) {
        Ok(c) => world.station_of(&c).ok() == Some(station),
        Err(_) => false,
    }
}

/// Test sets over held-out records: `round(n * abnormal_fraction)` abnormal
/// samples that the geocoder currently misroutes, the rest canonical.
pub fn build_test_sets(
    world: &World,
    test_pool: &[usize],
    n: usize,
    abnormal_fraction: f64,
    noise_sigma_m: f64,
    weights: &[f64; 5],
    rng: &mut StageRng,
) -> Result<TestSets> {
    check_n(n)?;
    if test_pool.len() < n {
        return Err(Error::Config(format!(
            "test set of {n} needs {n} unseen records, only {} held out",
            test_pool.len()
        )));
    }
    if !(0.0..=1.0).contains(&abnormal_fraction) {
        return Err(Error::Config("abnormal_fraction must lie in [0, 1]".into()));
    }
    let sampler = ErrorTypeSampler::new(weights)?;
    let mut ids = test_pool.to_vec();
    ids.shuffle(rng);
    ids.truncate(n);
    let n_abnormal = (n as f64 * abnormal_fraction).round() as usize;

    let mut direct = Vec::with_capacity(n);
    for (i, &id) in ids.iter().enumerate() {
        let record = world.record(id);
        let delivery = world.sample_delivery(record, noise_sigma_m, rng)?;
        let station = world.station_of(&delivery)?;
        let (input, error_type) = if i < n_abnormal {
            // Keep drawing until the corruption actually breaks dispatching.
            let mut chosen = None;
            for _ in 0..256 {
                let c = corrupt(record, sampler.sample(rng), world, rng)?;
                if !dispatches_correctly(world, &c.corrupted_text, station) {
                    chosen = Some(c);
                    break;
                }
            }
            let c = chosen.ok_or_else(|| {
                Error::Config(format!(
                    "could not find a misrouting corruption for record {id}"
                ))
            })?;
            (c.corrupted_text, Some(c.error_type))
        } else {
            (record.canonical_text.clone(), None)
        };
        direct.push(RewriteSample {
            task: Task::Rewriting,
            input_text: input,
            target_text: Some(record.canonical_text.clone()),
            delivery_coordinate: Some(delivery),
            record_id: Some(id),
            error_type,
            station_id: Some(station),
            abnormal: Some(i < n_abnormal),
        });
    }
    direct.shuffle(rng);
    let geocoding = direct.clone();

    let mut aep = Vec::with_capacity(n);
    for &id in &ids {
        let record = world.record(id);
        let c = corrupt(record, ErrorType::MissingRegion, world, rng)?;
        let delivery = world.sample_delivery(record, noise_sigma_m, rng)?;
        aep.push(RewriteSample {
            task: Task::Aep,
            input_text: c.corrupted_text,
            target_text: Some(record.canonical_text.clone()),
            delivery_coordinate: Some(delivery),
            record_id: Some(id),
            error_type: Some(ErrorType::MissingRegion),
            station_id: Some(world.station_of(&delivery)?),
            abnormal: Some(true),
        });
    }
    Ok(TestSets {
        aep,
        direct,
        geocoding,
    })
}

/// Concatenates the supervised sets and shuffles them with `seed`.
pub fn mix_sft(parts: &[&[RewriteSample]], seed: u64) -> Vec<RewriteSample> {
    let mut all: Vec<RewriteSample> = parts.iter().flat_map(|p| p.iter().cloned()).collect();
    all.shuffle(&mut stage_rng(seed, "sft-mix"));
    all
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub counts: BTreeMap<String, usize>,
    pub identity_ratio: f64,
    pub abnormal_fraction: f64,
    pub seed: u64,
    pub train_records: usize,
    pub test_records: usize,
}

/// Everything `data-gen` produces.
#[derive(Debug, Clone)]
pub struct DatasetBundle {
    pub split: RecordSplit,
    pub parsing: Vec<RewriteSample>,
    pub aep: Vec<RewriteSample>,
    pub rewriting: Vec<RewriteSample>,
    pub oa: Vec<RewriteSample>,
    pub oa_heldout: Vec<RewriteSample>,
    pub geocoding: Vec<GeocodingPair>,
    pub tests: TestSets,
    pub manifest: DatasetManifest,
}

pub const PARSING_FILE: &str = "parsing.jsonl";
pub const AEP_FILE: &str = "aep.jsonl";
pub const REWRITING_FILE: &str = "rewriting.jsonl";
pub const OA_FILE: &str = "oa.jsonl";
pub const OA_HELDOUT_FILE: &str = "oa_heldout.jsonl";
pub const GEOCODING_FILE: &str = "geocoding.jsonl";
pub const TEST_AEP_FILE: &str = "test_aep.jsonl";
pub const TEST_DIRECT_FILE: &str = "test_direct.jsonl";
pub const TEST_GEOCODING_FILE: &str = "test_geocoding.jsonl";
pub const SPLIT_FILE: &str = "split.json";
pub const MANIFEST_FILE: &str = "manifest.json";

impl DatasetBundle {
    pub fn generate(world: &World, cfg: &DataConfig, seed: u64) -> Result<DatasetBundle> {
        cfg.validate()?;
        let split = split_records(world, cfg.test, &mut stage_rng(seed, "split"))?;
        let parsing = build_parsing_dataset(
            world,
            &split.train,
            cfg.parsing,
            &mut stage_rng(seed, "parsing"),
        )?;
        let aep = build_aep_dataset(world, &split.train, cfg.aep, &mut stage_rng(seed, "aep"))?;
        let rewriting = build_rewriting_dataset(
            world,
            &split.train,
            cfg.rewriting,
            cfg.identity_ratio,
            &cfg.error_weights,
            &mut stage_rng(seed, "rewriting"),
        )?;
        let oa_weights = cfg.oa_error_weights.unwrap_or(cfg.error_weights);
        let oa = build_oa_dataset(
            world,
            &split.train,
            cfg.oa,
            cfg.noise_sigma_m,
            &oa_weights,
            &mut stage_rng(seed, "oa"),
        )?;
        let oa_heldout = build_oa_dataset(
            world,
            &split.train,
            cfg.oa_heldout.max(1),
            cfg.noise_sigma_m,
            &oa_weights,
            &mut stage_rng(seed, "oa-heldout"),
        )?;
        let geocoding = build_geocoding_pairs(
            world,
            &split.train,
            cfg.geocoding,
            &cfg.error_weights,
            &mut stage_rng(seed, "geocoding"),
        )?;
        let tests = build_test_sets(
            world,
            &split.test,
            cfg.test,
            cfg.abnormal_fraction,
            cfg.noise_sigma_m,
            &cfg.error_weights,
            &mut stage_rng(seed, "test"),
        )?;
        let mut counts = BTreeMap::new();
        counts.insert(PARSING_FILE.to_string(), parsing.len());
        counts.insert(AEP_FILE.to_string(), aep.len());
        counts.insert(REWRITING_FILE.to_string(), rewriting.len());
        counts.insert(OA_FILE.to_string(), oa.len());
        counts.insert(OA_HELDOUT_FILE.to_string(), oa_heldout.len());
        counts.insert(GEOCODING_FILE.to_string(), geocoding.len());
        counts.insert(TEST_AEP_FILE.to_string(), tests.aep.len());
        counts.insert(TEST_DIRECT_FILE.to_string(), tests.direct.len());
        counts.insert(TEST_GEOCODING_FILE.to_string(), tests.geocoding.len());
        let manifest = DatasetManifest {
            counts,
            identity_ratio: cfg.identity_ratio,
            abnormal_fraction: cfg.abnormal_fraction,
            seed,
            train_records: split.train.len(),
            test_records: split.test.len(),
        };
        Ok(DatasetBundle {
            split,
            parsing,
            aep,
            rewriting,
            oa,
            oa_heldout,
            geocoding,
            tests,
            manifest,
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_jsonl(&dir.join(PARSING_FILE), &self.parsing)?;
        write_jsonl(&dir.join(AEP_FILE), &self.aep)?;
        write_jsonl(&dir.join(REWRITING_FILE), &self.rewriting)?;
        write_jsonl(&dir.join(OA_FILE), &self.oa)?;
        write_jsonl(&dir.join(OA_HELDOUT_FILE), &self.oa_heldout)?;
        write_jsonl(&dir.join(GEOCODING_FILE), &self.geocoding)?;
        write_jsonl(&dir.join(TEST_AEP_FILE), &self.tests.aep)?;
        write_jsonl(&dir.join(TEST_DIRECT_FILE), &self.tests.direct)?;
        write_jsonl(&dir.join(TEST_GEOCODING_FILE), &self.tests.geocoding)?;
        write_json(&dir.join(SPLIT_FILE), &self.split)?;
        write_json(&dir.join(MANIFEST_FILE), &self.manifest)
    }

    pub fn load(dir: &Path) -> Result<DatasetBundle> {
        Ok(DatasetBundle {
            split: read_json(&dir.join(SPLIT_FILE))?,
            parsing: read_jsonl(&dir.join(PARSING_FILE))?,
            aep: read_jsonl(&dir.join(AEP_FILE))?,
            rewriting: read_jsonl(&dir.join(REWRITING_FILE))?,
            oa: read_jsonl(&dir.join(OA_FILE))?,
            oa_heldout: read_jsonl(&dir.join(OA_HELDOUT_FILE))?,
            geocoding: read_jsonl(&dir.join(GEOCODING_FILE))?,
            tests: TestSets {
                aep: read_jsonl(&dir.join(TEST_AEP_FILE))?,
                direct: read_jsonl(&dir.join(TEST_DIRECT_FILE))?,
                geocoding: read_jsonl(&dir.join(TEST_GEOCODING_FILE))?,
            },
            manifest: read_json(&dir.join(MANIFEST_FILE))?,
        })
    }

    /// The shuffled union of the three supervised sets.
    pub fn sft_mixture(&self) -> Vec<RewriteSample> {
        mix_sft(
            &[&self.parsing, &self.aep, &self.rewriting],
            self.manifest.seed,
        )
    }
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for row in rows {
        serde_json::to_writer(&mut out, row)?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let row = serde_json::from_str(&line)
            .map_err(|e| Error::format(path, format!("line {}: {e}", lineno + 1)))?;
        rows.push(row);
    }
    Ok(rows)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}
