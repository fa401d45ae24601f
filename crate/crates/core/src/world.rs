//! Procedural planar geography: a six-tier address hierarchy with nested
//! rectangular regions, a rectangular station tiling, and the geocoding,
//! reverse-geocoding and station-lookup services built on top of it.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::address::{join_components, HierarchyTier, Lexicon, ParsedAddress, TIER_COUNT};
use crate::error::{Error, Result};
use crate::rng::{seeded, StageRng};

pub const WORLD_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Coordinate {
    pub x: f64,
    pub y: f64,
}

impl Coordinate {
    pub fn new(x: f64, y: f64) -> Self {
        Coordinate { x, y }
    }

    pub fn distance(&self, other: &Coordinate) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    fn distance_sq(&self, other: &Coordinate) -> f64 {
        let dx = self.x - other.x;
        let dy = self.y - other.y;
        dx * dx + dy * dy
    }
}

/// Closed axis-aligned rectangle in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub min_x: f64,
    pub min_y: f64,
    pub max_x: f64,
    pub max_y: f64,
}

impl Rect {
    pub fn contains(&self, c: &Coordinate) -> bool {
        c.x >= self.min_x && c.x <= self.max_x && c.y >= self.min_y && c.y <= self.max_y
    }

    pub fn contains_rect(&self, other: &Rect) -> bool {
        other.min_x >= self.min_x
            && other.max_x <= self.max_x
            && other.min_y >= self.min_y
            && other.max_y <= self.max_y
    }

    pub fn center(&self) -> Coordinate {
        Coordinate::new(
            0.5 * (self.min_x + self.max_x),
            0.5 * (self.min_y + self.max_y),
        )
    }

    fn width(&self) -> f64 {
        self.max_x - self.min_x
    }

    fn height(&self) -> f64 {
        self.max_y - self.min_y
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldParams {
    pub world_size_m: f64,
    /// Children per node for tiers 1 through 6.
    pub branching: Vec<usize>,
    /// Probability that a distinct component name receives an alias.
    pub alias_rate: f64,
    pub stations_per_axis: usize,
    pub seed: u64,
}

impl Default for WorldParams {
    fn default() -> Self {
        WorldParams {
            world_size_m: 20_000.0,
            branching: vec![4; TIER_COUNT],
            alias_rate: 0.3,
            stations_per_axis: 8,
            seed: 7,
        }
    }
}

impl WorldParams {
    pub fn validate(&self) -> Result<()> {
        if self.branching.len() != TIER_COUNT {
            return Err(Error::Config(format!(
                "branching needs {TIER_COUNT} entries, got {}",
                self.branching.len()
            )));
        }
        if self.branching.contains(&0) {
            return Err(Error::Config("branching factors must be >= 1".into()));
        }
        if !(self.world_size_m > 0.0) || !self.world_size_m.is_finite() {
            return Err(Error::Config("world_size_m must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.alias_rate) {
            return Err(Error::Config("alias_rate must lie in [0, 1]".into()));
        }
        if self.stations_per_axis == 0 {
            return Err(Error::Config("stations_per_axis must be >= 1".into()));
        }
        Ok(())
    }

    pub fn leaf_count(&self) -> usize {
        self.branching.iter().product()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HierarchyNode {
    pub id: usize,
    /// 0 for the root, 1..=6 otherwise.
    pub tier: u8,
    pub name: String,
    pub parent: Option<usize>,
    pub children: Vec<usize>,
    pub region: Rect,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AddressRecord {
    pub id: usize,
    /// Leaf node in the hierarchy.
    pub node: usize,
    /// Component names for tiers 1..=6, in tier order.
    pub components: Vec<String>,
    pub coordinate: Coordinate,
    pub canonical_text: String,
}

impl AddressRecord {
    pub fn component(&self, tier: HierarchyTier) -> &str {
        &self.components[tier.index()]
    }

    /// Tiers 1..=upto joined with the separator.
    pub fn prefix_text(&self, upto: HierarchyTier) -> String {
        join_components(self.components[..=upto.index()].iter().map(String::as_str))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Station {
    pub id: usize,
    pub region: Rect,
}

/// Grid cut positions of the station tiling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct StationGrid {
    x_cuts: Vec<f64>,
    y_cuts: Vec<f64>,
}

/// Why geocoding gave up. Failure is a value: it feeds the zero branch of
/// the geocoding score.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum GeocodeFailure {
    /// Two different components claim the same tier.
    Contradiction { tier: HierarchyTier },
    /// The hierarchy chain could not be followed down to tier 3.
    Unresolved { depth: u8 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Resolution {
    pub node: usize,
    pub depth: u8,
    pub coordinate: Coordinate,
}

/// Serialized layout of a world file.
#[derive(Serialize, Deserialize)]
struct WorldFile {
    version: u32,
    params: WorldParams,
    hierarchy: Vec<HierarchyNode>,
    records: Vec<AddressRecord>,
    stations: Vec<Station>,
    station_grid: StationGrid,
    aliases: BTreeMap<String, Vec<String>>,
    lexicon: Lexicon,
}

/// Immutable generated world.
#[derive(Debug, Clone)]
pub struct World {
    pub params: WorldParams,
    pub hierarchy: Vec<HierarchyNode>,
    pub records: Vec<AddressRecord>,
    pub stations: Vec<Station>,
    station_grid: StationGrid,
    pub aliases: BTreeMap<String, Vec<String>>,
    pub lexicon: Lexicon,
    nearest: NearestIndex,
    record_of_node: HashMap<usize, usize>,
    record_by_text: HashMap<String, usize>,
}

/// Fixed pool of address-irrelevant phrases.
pub const FILLER_PHRASES: [&str; 20] = [
    "(Previous China Mobile Station)",
    "(near the east gate)",
    "(call before delivery)",
    "(opposite the bank)",
    "(leave at front desk)",
    "(behind the school)",
    "(next to the pharmacy)",
    "(second floor)",
    "(old post office)",
    "(across from the market)",
    "(beside the bus stop)",
    "(north entrance)",
    "(do not ring)",
    "(weekday delivery)",
    "(near the hospital)",
    "(under the bridge)",
    "(corner shop)",
    "(former factory site)",
    "(ask the guard)",
    "(west side parking)",
];

const SYLLABLES: [&str; 48] = [
    "an", "bai", "bao", "bei", "chang", "chen", "da", "dong", "feng", "fu", "gao", "guang", "hai",
    "he", "hong", "hua", "jia", "jin", "jing", "kang", "lan", "li", "lin", "long", "mei", "ming",
    "nan", "ning", "ping", "qing", "rui", "shan", "shui", "tai", "tian", "wan", "wei", "wen", "xi",
    "xin", "ya", "yan", "yang", "yong", "yu", "yun", "ze", "zhou",
];

const TIER_SUFFIX: [&str; TIER_COUNT] = ["Province", "City", "District", "Road", "Garden", "Room"];
const ALIAS_SUFFIX: [&str; TIER_COUNT] = ["Prov", "Shi", "Qu", "Rd", "Gdn", "Rm"];

impl World {
    pub fn generate(params: &WorldParams) -> Result<World> {
        params.validate()?;
        let mut rng = seeded(params.seed);
        let size = params.world_size_m;
        let root_region = Rect {
            min_x: 0.0,
            min_y: 0.0,
            max_x: size,
            max_y: size,
        };

        // Node count per tier, then a name pool per tier sized so that names
        // repeat across parents but stay unique among siblings.
        let mut per_tier = [0usize; TIER_COUNT];
        let mut running = 1usize;
        for t in 0..TIER_COUNT {
            running *= params.branching[t];
            per_tier[t] = running;
        }
        let pools: Vec<Vec<String>> = (0..TIER_COUNT)
            .map(|t| {
                let pool_size = (params.branching[t] * 4)
                    .min(per_tier[t])
                    .max(params.branching[t]);
                name_pool(t, pool_size, &mut rng)
            })
            .collect();

        let mut hierarchy = vec![HierarchyNode {
            id: 0,
            tier: 0,
            name: String::new(),
            parent: None,
            children: Vec::new(),
            region: root_region,
        }];
        let mut frontier = vec![0usize];
        for t in 0..TIER_COUNT {
            let mut next = Vec::with_capacity(frontier.len() * params.branching[t]);
            for &parent in &frontier {
                let b = params.branching[t];
                let regions = split_region(&hierarchy[parent].region, b, &mut rng);
                let names: Vec<String> = pools[t].choose_multiple(&mut rng, b).cloned().collect();
                for (region, name) in regions.into_iter().zip(names) {
                    let id = hierarchy.len();
                    hierarchy.push(HierarchyNode {
                        id,
                        tier: t as u8 + 1,
                        name,
                        parent: Some(parent),
                        children: Vec::new(),
                        region,
                    });
                    hierarchy[parent].children.push(id);
                    next.push(id);
                }
            }
            frontier = next;
        }

        let mut records = Vec::with_capacity(frontier.len());
        for &leaf in &frontier {
            let mut chain = Vec::with_capacity(TIER_COUNT);
            let mut cur = leaf;
            while let Some(parent) = hierarchy[cur].parent {
                chain.push(hierarchy[cur].name.clone());
                cur = parent;
            }
            chain.reverse();
            let r = hierarchy[leaf].region;
            let coordinate = Coordinate::new(
                r.min_x + r.width() * rng.random_range(0.2..0.8),
                r.min_y + r.height() * rng.random_range(0.2..0.8),
            );
            let canonical_text = join_components(chain.iter().map(String::as_str));
            records.push(AddressRecord {
                id: records.len(),
                node: leaf,
                components: chain,
                coordinate,
                canonical_text,
            });
        }

        let mut aliases: BTreeMap<String, Vec<String>> = BTreeMap::new();
        if params.alias_rate > 0.0 {
            for t in 0..TIER_COUNT {
                let used: BTreeSet<&String> = hierarchy
                    .iter()
                    .filter(|n| n.tier as usize == t + 1)
                    .map(|n| &n.name)
                    .collect();
                for name in used {
                    if rng.random_bool(params.alias_rate) {
                        aliases.insert(name.clone(), vec![alias_for(t, name)]);
                    }
                }
            }
        }

        let station_grid = StationGrid {
            x_cuts: jittered_cuts(0.0, size, params.stations_per_axis, &mut rng),
            y_cuts: jittered_cuts(0.0, size, params.stations_per_axis, &mut rng),
        };
        let stations = stations_from_grid(&station_grid);

        let mut names: BTreeMap<HierarchyTier, BTreeSet<String>> = BTreeMap::new();
        for node in hierarchy.iter().skip(1) {
            names
                .entry(HierarchyTier::new(node.tier)?)
                .or_default()
                .insert(node.name.clone());
        }
        let lexicon = Lexicon::build(&names, &aliases, &FILLER_PHRASES);

        Ok(World::assemble(
            params.clone(),
            hierarchy,
            records,
            stations,
            station_grid,
            aliases,
            lexicon,
        ))
    }

    fn assemble(
        params: WorldParams,
        hierarchy: Vec<HierarchyNode>,
        records: Vec<AddressRecord>,
        stations: Vec<Station>,
        station_grid: StationGrid,
        aliases: BTreeMap<String, Vec<String>>,
        lexicon: Lexicon,
    ) -> World {
        let nearest = NearestIndex::build(&records, params.world_size_m);
        let record_of_node = records.iter().map(|r| (r.node, r.id)).collect();
        let record_by_text = records
            .iter()
            .map(|r| (r.canonical_text.clone(), r.id))
            .collect();
        World {
            params,
            hierarchy,
            records,
            stations,
            station_grid,
            aliases,
            lexicon,
            nearest,
            record_of_node,
            record_by_text,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let file = WorldFile {
            version: WORLD_FORMAT_VERSION,
            params: self.params.clone(),
            hierarchy: self.hierarchy.clone(),
            records: self.records.clone(),
            stations: self.stations.clone(),
            station_grid: self.station_grid.clone(),
            aliases: self.aliases.clone(),
            lexicon: self.lexicon.clone(),
        };
        Ok(serde_json::to_string(&file)?)
    }

    pub fn from_json(text: &str) -> Result<World> {
        let file: WorldFile = serde_json::from_str(text)?;
        if file.version != WORLD_FORMAT_VERSION {
            return Err(Error::Config(format!(
                "world format version {} unsupported (expected {WORLD_FORMAT_VERSION})",
                file.version
            )));
        }
        Ok(World::assemble(
            file.params,
            file.hierarchy,
            file.records,
            file.stations,
            file.station_grid,
            file.aliases,
            file.lexicon,
        ))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<World> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        World::from_json(&text).map_err(|e| match e {
            Error::Json(inner) => Error::format(path, inner.to_string()),
            other => other,
        })
    }

    pub fn bounds(&self) -> Rect {
        self.hierarchy[0].region
    }

    pub fn in_bounds(&self, c: &Coordinate) -> bool {
        c.x.is_finite() && c.y.is_finite() && self.bounds().contains(c)
    }

    fn check_bounds(&self, c: &Coordinate) -> Result<()> {
        if self.in_bounds(c) {
            Ok(())
        } else {
            Err(Error::Domain(format!(
                "coordinate ({}, {}) outside world [0, {}]^2",
                c.x, c.y, self.params.world_size_m
            )))
        }
    }

    pub fn record(&self, id: usize) -> &AddressRecord {
        &self.records[id]
    }

    pub fn record_by_text(&self, text: &str) -> Option<&AddressRecord> {
        self.record_by_text.get(text).map(|&id| &self.records[id])
    }

    pub fn record_of_node(&self, node: usize) -> Option<&AddressRecord> {
        self.record_of_node.get(&node).map(|&id| &self.records[id])
    }

    /// Ancestor of a leaf at the given tier (tier-1 node, tier-2 node, ...).
    pub fn ancestor(&self, node: usize, tier: u8) -> usize {
        let mut cur = node;
        while self.hierarchy[cur].tier > tier {
            cur = self.hierarchy[cur]
                .parent
                .expect("non-root node has a parent");
        }
        cur
    }

    pub fn parse(&self, text: &str) -> ParsedAddress {
        self.lexicon.parse(text)
    }

    pub fn is_standard(&self, text: &str) -> bool {
        self.lexicon.is_standard(text)
    }

    /// Follows the parsed components down the hierarchy from the root,
    /// stopping at the first tier that is absent or not a child of the
    /// current node.
    pub fn resolve(&self, text: &str) -> std::result::Result<Resolution, GeocodeFailure> {
        let parsed = self.parse(text);
        if let Some(&tier) = parsed.flags.duplicate_tiers.iter().next() {
            return Err(GeocodeFailure::Contradiction { tier });
        }
        let mut node = 0usize;
        let mut depth = 0u8;
        for tier in HierarchyTier::all() {
            let Some(name) = parsed.get(tier) else { break };
            let child = self.hierarchy[node]
                .children
                .iter()
                .copied()
                .find(|&c| self.hierarchy[c].name == name);
            match child {
                Some(c) => {
                    node = c;
                    depth = tier.get();
                }
                None => break,
            }
        }
        if depth < HierarchyTier::DISTRICT.get() {
            return Err(GeocodeFailure::Unresolved { depth });
        }
        let coordinate = match self.record_of_node(node) {
            Some(record) => record.coordinate,
            None => self.hierarchy[node].region.center(),
        };
        Ok(Resolution {
            node,
            depth,
            coordinate,
        })
    }

    /// Address text to coordinate: the record coordinate for a full match,
    /// otherwise the centroid of the deepest resolved node.
    pub fn geocode(&self, text: &str) -> std::result::Result<Coordinate, GeocodeFailure> {
        self.resolve(text).map(|r| r.coordinate)
    }

    /// Record nearest to `c` (ties to the lower id).
    pub fn nearest_record(&self, c: &Coordinate) -> Result<&AddressRecord> {
        self.check_bounds(c)?;
        Ok(&self.records[self.nearest.nearest(&self.records, c)])
    }

    /// Canonical text of the nearest record truncated to tiers 1-5.
    pub fn reverse_geocode(&self, c: &Coordinate) -> Result<String> {
        Ok(self.nearest_record(c)?.prefix_text(HierarchyTier::POI))
    }

    /// Station whose closed rectangle contains `c`; shared boundaries go to
    /// the smaller id.
    pub fn station_of(&self, c: &Coordinate) -> Result<usize> {
        self.check_bounds(c)?;
        let col = cell_of(&self.station_grid.x_cuts, c.x);
        let row = cell_of(&self.station_grid.y_cuts, c.y);
        Ok(row * (self.station_grid.x_cuts.len() - 1) + col)
    }

    /// Record coordinate plus isotropic Gaussian noise, clamped to bounds.
    pub fn sample_delivery(
        &self,
        record: &AddressRecord,
        noise_sigma_m: f64,
        rng: &mut StageRng,
    ) -> Result<Coordinate> {
        if !(noise_sigma_m >= 0.0) {
            return Err(Error::InvalidArgument("noise_sigma_m must be >= 0".into()));
        }
        if noise_sigma_m == 0.0 {
            return Ok(record.coordinate);
        }
        let normal =
            Normal::new(0.0, noise_sigma_m).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        let size = self.params.world_size_m;
        let x = (record.coordinate.x + normal.sample(rng)).clamp(0.0, size);
        let y = (record.coordinate.y + normal.sample(rng)).clamp(0.0, size);
        Ok(Coordinate::new(x, y))
    }

    /// Records whose tier-1 ancestor differs from the given record's.
    pub fn records_outside_province(&self, record: &AddressRecord) -> Vec<usize> {
        let province = record.component(HierarchyTier::PROVINCE);
        self.records
            .iter()
            .filter(|r| r.component(HierarchyTier::PROVINCE) != province)
            .map(|r| r.id)
            .collect()
    }
}

/// Index of the cell containing `v`; exact interior cuts belong to the lower
/// cell.
fn cell_of(cuts: &[f64], v: f64) -> usize {
    let cells = cuts.len() - 1;
    // First cut strictly >= v among interior cuts.
    let idx = cuts[1..cells].partition_point(|&cut| cut < v);
    idx.min(cells - 1)
}

fn stations_from_grid(grid: &StationGrid) -> Vec<Station> {
    let cols = grid.x_cuts.len() - 1;
    let rows = grid.y_cuts.len() - 1;
    let mut stations = Vec::with_capacity(rows * cols);
    for row in 0..rows {
        for col in 0..cols {
            stations.push(Station {
                id: row * cols + col,
                region: Rect {
                    min_x: grid.x_cuts[col],
                    min_y: grid.y_cuts[row],
                    max_x: grid.x_cuts[col + 1],
                    max_y: grid.y_cuts[row + 1],
                },
            });
        }
    }
    stations
}

fn capitalize(s: &str) -> String {
    let mut chars = s.chars();
    match chars.next() {
        Some(first) => first.to_ascii_uppercase().to_string() + chars.as_str(),
        None => String::new(),
    }
}

fn name_pool(tier: usize, size: usize, rng: &mut StageRng) -> Vec<String> {
    if tier == TIER_COUNT - 1 {
        return (0..size)
            .map(|i| format!("{} {}", TIER_SUFFIX[tier], 101 + i))
            .collect();
    }
    let mut bases: Vec<String> = Vec::with_capacity(SYLLABLES.len() * SYLLABLES.len());
    for a in SYLLABLES {
        for b in SYLLABLES {
            if a != b {
                bases.push(capitalize(&format!("{a}{b}")));
            }
        }
    }
    bases.sort();
    bases.dedup();
    bases.shuffle(rng);
    bases.truncate(size);
    bases
        .into_iter()
        .map(|b| format!("{b} {}", TIER_SUFFIX[tier]))
        .collect()
}

fn alias_for(tier: usize, name: &str) -> String {
    if tier == TIER_COUNT - 1 {
        return name.replacen(TIER_SUFFIX[tier], ALIAS_SUFFIX[tier], 1);
    }
    let base = name
        .strip_suffix(TIER_SUFFIX[tier])
        .expect("names carry their tier suffix");
    format!("{base}{}", ALIAS_SUFFIX[tier])
}

/// `n + 1` increasing cut positions from `lo` to `hi` with jittered spacing.
fn jittered_cuts(lo: f64, hi: f64, n: usize, rng: &mut StageRng) -> Vec<f64> {
    let weights: Vec<f64> = (0..n).map(|_| 1.0 + rng.random_range(-0.3..0.3)).collect();
    let total: f64 = weights.iter().sum();
    let mut cuts = Vec::with_capacity(n + 1);
    cuts.push(lo);
    let mut acc = 0.0;
    for w in &weights[..n - 1] {
        acc += w;
        cuts.push(lo + (hi - lo) * acc / total);
    }
    cuts.push(hi);
    cuts
}

/// Splits a rectangle into `b` tiles arranged in rows of near-equal counts.
fn split_region(parent: &Rect, b: usize, rng: &mut StageRng) -> Vec<Rect> {
    let per_row = (b as f64).sqrt().ceil() as usize;
    let rows = b.div_ceil(per_row);
    let mut counts = vec![per_row; rows];
    counts[rows - 1] = b - per_row * (rows - 1);
    // Bands run across the longer side.
    let horizontal_bands = parent.height() >= parent.width();
    let (band_lo, band_hi, cell_lo, cell_hi) = if horizontal_bands {
        (parent.min_y, parent.max_y, parent.min_x, parent.max_x)
    } else {
        (parent.min_x, parent.max_x, parent.min_y, parent.max_y)
    };
    let band_cuts = jittered_cuts(band_lo, band_hi, rows, rng);
    let mut out = Vec::with_capacity(b);
    for (row, &count) in counts.iter().enumerate() {
        let cell_cuts = jittered_cuts(cell_lo, cell_hi, count, rng);
        for col in 0..count {
            let (b0, b1) = (band_cuts[row], band_cuts[row + 1]);
            let (c0, c1) = (cell_cuts[col], cell_cuts[col + 1]);
            out.push(if horizontal_bands {
                Rect {
                    min_x: c0,
                    min_y: b0,
                    max_x: c1,
                    max_y: b1,
                }
            } else {
                Rect {
                    min_x: b0,
                    min_y: c0,
                    max_x: b1,
                    max_y: c1,
                }
            });
        }
    }
    out
}

/// Uniform bucket grid for nearest-record queries.
#[derive(Debug, Clone)]
struct NearestIndex {
    cell: f64,
    side: usize,
    buckets: Vec<Vec<usize>>,
}

impl NearestIndex {
    fn build(records: &[AddressRecord], size: f64) -> NearestIndex {
        let side = ((records.len() as f64).sqrt().ceil() as usize).max(1);
        let cell = size / side as f64;
        let mut buckets = vec![Vec::new(); side * side];
        for r in records {
            let (cx, cy) = Self::cell_coords(cell, side, &r.coordinate);
            buckets[cy * side + cx].push(r.id);
        }
        NearestIndex {
            cell,
            side,
            buckets,
        }
    }

    fn cell_coords(cell: f64, side: usize, c: &Coordinate) -> (usize, usize) {
        let cx = ((c.x / cell).floor().max(0.0) as usize).min(side - 1);
        let cy = ((c.y / cell).floor().max(0.0) as usize).min(side - 1);
        (cx, cy)
    }

    fn nearest(&self, records: &[AddressRecord], c: &Coordinate) -> usize {
        let (cx, cy) = Self::cell_coords(self.cell, self.side, c);
        let mut best: Option<(f64, usize)> = None;
        for ring in 0..=self.side {
            let lo_x = cx as isize - ring as isize;
            let hi_x = cx as isize + ring as isize;
            let lo_y = cy as isize - ring as isize;
            let hi_y = cy as isize + ring as isize;
            for gy in lo_y..=hi_y {
                for gx in lo_x..=hi_x {
                    let on_ring = gx == lo_x || gx == hi_x || gy == lo_y || gy == hi_y;
                    if !on_ring
                        || gx < 0
                        || gy < 0
                        || gx >= self.side as isize
                        || gy >= self.side as isize
                    {
                        continue;
                    }
                    for &id in &self.buckets[gy as usize * self.side + gx as usize] {
                        let d = records[id].coordinate.distance_sq(c);
                        let better = match best {
                            None => true,
                            Some((bd, bid)) => d < bd || (d == bd && id < bid),
                        };
                        if better {
                            best = Some((d, id));
                        }
                    }
                }
            }
            // Unvisited cells lie at least `ring * cell` away.
            if let Some((bd, _)) = best {
                let reach = ring as f64 * self.cell;
                if bd < reach * reach {
                    break;
                }
            }
        }
        best.expect("world has at least one record").1
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn small() -> World {
        World::generate(&WorldParams {
            branching: vec![2; 6],
            ..WorldParams::default()
        })
        .unwrap()
    }

    #[test]
    fn branching_product_gives_leaf_count() {
        let world = small();
        assert_eq!(world.records.len(), 64);
        assert_eq!(world.hierarchy.len(), 1 + 2 + 4 + 8 + 16 + 32 + 64);
    }

    #[test]
    fn zero_branching_is_rejected() {
        let params = WorldParams {
            branching: vec![2, 2, 0, 2, 2, 2],
            ..WorldParams::default()
        };
        assert!(matches!(World::generate(&params), Err(Error::Config(_))));
    }

    #[test]
    fn same_seed_same_bytes() {
        let a = small().to_json().unwrap();
        let b = small().to_json().unwrap();
        assert_eq!(a, b);
        let other = World::generate(&WorldParams {
            branching: vec![2; 6],
            seed: 8,
            ..WorldParams::default()
        })
        .unwrap();
        assert_ne!(a, other.to_json().unwrap());
    }

    #[test]
    fn zero_alias_rate_means_no_aliases() {
        let world = World::generate(&WorldParams {
            branching: vec![2; 6],
            alias_rate: 0.0,
            ..WorldParams::default()
        })
        .unwrap();
        assert!(world.aliases.is_empty());
    }

    #[test]
    fn regions_nest_and_records_sit_inside_ancestors() {
        let world = small();
        for node in world.hierarchy.iter().skip(1) {
            let parent = &world.hierarchy[node.parent.unwrap()];
            assert!(parent.region.contains_rect(&node.region));
        }
        for r in &world.records {
            let mut cur = r.node;
            loop {
                assert!(world.hierarchy[cur].region.contains(&r.coordinate));
                match world.hierarchy[cur].parent {
                    Some(p) => cur = p,
                    None => break,
                }
            }
        }
    }

    #[test]
    fn sibling_names_are_unique_and_aliases_never_collide() {
        let world = World::generate(&WorldParams::default()).unwrap();
        for node in &world.hierarchy {
            let names: BTreeSet<&str> = node
                .children
                .iter()
                .map(|&c| world.hierarchy[c].name.as_str())
                .collect();
            assert_eq!(names.len(), node.children.len());
        }
        let canonical: BTreeSet<&str> = world.hierarchy.iter().map(|n| n.name.as_str()).collect();
        for list in world.aliases.values() {
            for alias in list {
                assert!(!canonical.contains(alias.as_str()));
            }
        }
        let texts: BTreeSet<&str> = world
            .records
            .iter()
            .map(|r| r.canonical_text.as_str())
            .collect();
        assert_eq!(texts.len(), world.records.len());
    }

    #[test]
    fn geocode_canonical_is_exact() {
        let world = small();
        for r in &world.records {
            assert_eq!(world.geocode(&r.canonical_text), Ok(r.coordinate));
        }
    }

    #[test]
    fn geocode_contradiction_and_shallow_failure() {
        let world = small();
        let a = &world.records[0];
        let b = world.record(*world.records_outside_province(a).first().unwrap());
        let text = format!(
            "{}, {}",
            a.canonical_text,
            b.prefix_text(HierarchyTier::DISTRICT)
        );
        assert_eq!(
            world.geocode(&text),
            Err(GeocodeFailure::Contradiction {
                tier: HierarchyTier::PROVINCE
            })
        );
        let shallow = a.prefix_text(HierarchyTier::CITY);
        assert_eq!(
            world.geocode(&shallow),
            Err(GeocodeFailure::Unresolved { depth: 2 })
        );
    }

    #[test]
    fn reverse_geocode_own_coordinate_gives_prefix() {
        let world = small();
        for r in &world.records {
            let text = world.reverse_geocode(&r.coordinate).unwrap();
            assert_eq!(text, r.prefix_text(HierarchyTier::POI));
            assert!(r.canonical_text.starts_with(&text));
        }
    }

    #[test]
    fn midpoint_tie_goes_to_lower_id() {
        let mut world = small();
        world.records[5].coordinate = Coordinate::new(100.0, 100.0);
        world.records[3].coordinate = Coordinate::new(300.0, 100.0);
        let rebuilt = World::assemble(
            world.params.clone(),
            world.hierarchy.clone(),
            world.records.clone(),
            world.stations.clone(),
            world.station_grid.clone(),
            world.aliases.clone(),
            world.lexicon.clone(),
        );
        let hit = rebuilt
            .nearest_record(&Coordinate::new(200.0, 100.0))
            .unwrap();
        assert_eq!(hit.id, 3);
    }

    #[test]
    fn out_of_bounds_is_a_domain_error() {
        let world = small();
        let outside = Coordinate::new(-1.0, 5.0);
        assert!(matches!(
            world.reverse_geocode(&outside),
            Err(Error::Domain(_))
        ));
        assert!(matches!(world.station_of(&outside), Err(Error::Domain(_))));
    }

    #[test]
    fn stations_tile_the_world() {
        let world = small();
        let area: f64 = world
            .stations
            .iter()
            .map(|s| s.region.width() * s.region.height())
            .sum();
        let size = world.params.world_size_m;
        assert!((area - size * size).abs() < 1e-6 * size * size);
        for (i, s) in world.stations.iter().enumerate() {
            assert_eq!(s.id, i);
            let inside = s.region.center();
            assert_eq!(world.station_of(&inside).unwrap(), i);
        }
    }

    #[test]
    fn shared_edge_goes_to_smaller_station() {
        let world = small();
        let s = &world.stations[0];
        let on_edge = Coordinate::new(s.region.max_x, s.region.center().y);
        assert_eq!(world.station_of(&on_edge).unwrap(), 0);
        let corner = Coordinate::new(s.region.max_x, s.region.max_y);
        assert_eq!(world.station_of(&corner).unwrap(), 0);
    }

    #[test]
    fn zero_noise_delivery_is_exact() {
        let world = small();
        let mut rng = seeded(1);
        let r = &world.records[9];
        assert_eq!(
            world.sample_delivery(r, 0.0, &mut rng).unwrap(),
            r.coordinate
        );
        assert!(world.sample_delivery(r, -1.0, &mut rng).is_err());
    }

    #[test]
    fn json_round_trip_preserves_world() {
        let world = small();
        let json = world.to_json().unwrap();
        let back = World::from_json(&json).unwrap();
        assert_eq!(back.to_json().unwrap(), json);
        assert_eq!(back.records, world.records);
    }
}
