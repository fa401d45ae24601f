//! Metric harness: address entity prediction, direct hit rate, and the
//! geocoding accuracy family, plus CSV and SVG report emission.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::address::{HierarchyTier, ParsedAddress};
use crate::datasets::{RewriteSample, TestSets};
use crate::embedder::CorrelationReport;
use crate::error::{Error, Result};
use crate::policy::{PolicyModel, Prompt, PromptContext, SampleMode};
use crate::rng::seeded;
use crate::world::World;

pub const METRICS_FILE: &str = "metrics.csv";
pub const CORRELATION_FILE: &str = "correlation.csv";

/// Anything that maps an input address to a rewritten one.
pub trait Rewriter {
    fn rewrite(&self, sample: &RewriteSample) -> Result<String>;
}

/// Returns the input unchanged.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityRewriter;

impl Rewriter for IdentityRewriter {
    fn rewrite(&self, sample: &RewriteSample) -> Result<String> {
        Ok(sample.input_text.clone())
    }
}

/// Emits the canonical groundtruth text of the sample's record.
#[derive(Debug, Clone, Copy)]
pub struct OracleRewriter<'a> {
    pub world: &'a World,
}

impl Rewriter for OracleRewriter<'_> {
    fn rewrite(&self, sample: &RewriteSample) -> Result<String> {
        match (sample.record_id, &sample.target_text) {
            (Some(id), _) if id < self.world.records.len() => {
                Ok(self.world.record(id).canonical_text.clone())
            }
            (_, Some(t)) => Ok(t.clone()),
            _ => Err(Error::InvalidArgument(
                "oracle needs a record id or a target".into(),
            )),
        }
    }
}

/// Greedy decoding of the prompt for each sample's own task.
pub struct PolicyRewriter<'a> {
    pub policy: &'a PolicyModel<f32>,
    pub ctx: PromptContext<'a>,
}

impl PolicyRewriter<'_> {
    pub fn prompt(&self, sample: &RewriteSample) -> Result<Prompt> {
        self.ctx.prompt(sample.task, &sample.input_text)
    }
}

impl Rewriter for PolicyRewriter<'_> {
    fn rewrite(&self, sample: &RewriteSample) -> Result<String> {
        let prompt = self.prompt(sample)?;
        let g = self
            .policy
            .generate(&prompt, SampleMode::Greedy, &mut seeded(0))?;
        Ok(self.ctx.world.lexicon.render_output(&g.tokens))
    }
}

pub fn rewrite_all(rewriter: &dyn Rewriter, samples: &[RewriteSample]) -> Result<Vec<String>> {
    samples.iter().map(|s| rewriter.rewrite(s)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AepMetrics {
    pub trigger_prediction: f64,
    pub aep_accuracy: f64,
    pub n: usize,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        f64::NAN
    } else {
        num as f64 / den as f64
    }
}

fn same_components(a: &ParsedAddress, b: &ParsedAddress) -> bool {
    a.assignments == b.assignments
}

/// Trigger: the output differs from the input. Accuracy: the output parses
/// to the same components as the groundtruth.
pub fn eval_aep_outputs(
    world: &World,
    samples: &[RewriteSample],
    outputs: &[String],
) -> Result<AepMetrics> {
    check_lengths(samples, outputs)?;
    let (mut triggered, mut correct) = (0, 0);
    for (s, y) in samples.iter().zip(outputs) {
        let truth = s
            .target_text
            .as_deref()
            .ok_or_else(|| Error::InvalidArgument("AEP sample without groundtruth".into()))?;
        triggered += (*y != s.input_text) as usize;
        correct += same_components(&world.parse(y), &world.parse(truth)) as usize;
    }
    Ok(AepMetrics {
        trigger_prediction: ratio(triggered, samples.len()),
        aep_accuracy: ratio(correct, samples.len()),
        n: samples.len(),
    })
}

pub fn eval_aep(
    rewriter: &dyn Rewriter,
    samples: &[RewriteSample],
    world: &World,
) -> Result<AepMetrics> {
    eval_aep_outputs(world, samples, &rewrite_all(rewriter, samples)?)
}

fn check_lengths(samples: &[RewriteSample], outputs: &[String]) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("empty test set".into()));
    }
    if samples.len() != outputs.len() {
        return Err(Error::InvalidArgument(
            "one output per sample required".into(),
        ));
    }
    Ok(())
}

/// Groundtruth components: tiers 1-4 from reverse geocoding the delivery
/// coordinate, tiers 5-6 from the input.
pub fn hit_groundtruth(
    world: &World,
    sample: &RewriteSample,
) -> Result<BTreeMap<HierarchyTier, String>> {
    let c = sample.delivery_coordinate.ok_or_else(|| {
        Error::InvalidArgument("direct sample lacks a delivery coordinate".into())
    })?;
    let rg = world.parse(&world.reverse_geocode(&c)?);
    let input = world.parse(&sample.input_text);
    let mut truth = BTreeMap::new();
    for tier in HierarchyTier::all() {
        let src = if tier <= HierarchyTier::ROAD {
            &rg
        } else {
            &input
        };
        if let Some(name) = src.get(tier) {
            truth.insert(tier, name.to_string());
        }
    }
    Ok(truth)
}

/// Fraction of groundtruth components the prediction reproduces at the same
/// tier.
pub fn sample_hit_rate(truth: &BTreeMap<HierarchyTier, String>, prediction: &ParsedAddress) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    let hits = truth
        .iter()
        .filter(|(tier, name)| prediction.get(**tier) == Some(name.as_str()))
        .count();
    hits as f64 / truth.len() as f64
}

pub fn eval_direct_outputs(
    world: &World,
    samples: &[RewriteSample],
    outputs: &[String],
) -> Result<f64> {
    check_lengths(samples, outputs)?;
    let mut rates = Vec::with_capacity(samples.len());
    for (s, y) in samples.iter().zip(outputs) {
        rates.push(sample_hit_rate(
            &hit_groundtruth(world, s)?,
            &world.parse(y),
        ));
    }
    Ok(order_free_mean(&mut rates))
}

pub fn eval_direct(
    rewriter: &dyn Rewriter,
    samples: &[RewriteSample],
    world: &World,
) -> Result<f64> {
    eval_direct_outputs(world, samples, &rewrite_all(rewriter, samples)?)
}

/// Mean that does not depend on the order of the inputs.
fn order_free_mean(xs: &mut [f64]) -> f64 {
    xs.sort_by(f64::total_cmp);
    xs.iter().sum::<f64>() / xs.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoMetrics {
    pub acc_300m: f64,
    pub acc_500m: f64,
    pub acc_station: f64,
    pub robustness: f64,
    pub correction: f64,
    pub n: usize,
    /// Standard samples dispatched correctly before rewriting.
    pub n_robustness: usize,
    /// Abnormal samples dispatched wrongly before rewriting.
    pub n_correction: usize,
    pub geocode_failures: usize,
}

fn station_hit(world: &World, text: &str, station: usize) -> bool {
    match world.geocode(text) {
        Ok(c) => world.station_of(&c).ok() == Some(station),
        Err(_) => false,
    }
}

/// Rewrite-then-geocode accuracy against the delivery coordinate and its
/// station. Geocoding failures count as misses.
pub fn eval_geocoding_outputs(
    world: &World,
    samples: &[RewriteSample],
    outputs: &[String],
) -> Result<GeoMetrics> {
    check_lengths(samples, outputs)?;
    let (mut a300, mut a500, mut ast, mut fails) = (0, 0, 0, 0);
    let (mut rob_n, mut rob_ok, mut cor_n, mut cor_ok) = (0, 0, 0, 0);
    for (s, y) in samples.iter().zip(outputs) {
        let c = s.delivery_coordinate.ok_or_else(|| {
            Error::InvalidArgument("geocoding sample lacks a delivery coordinate".into())
        })?;
        let station = s
            .station_id
            .ok_or_else(|| Error::InvalidArgument("geocoding sample lacks a station".into()))?;
        match world.geocode(y) {
            Ok(g) => {
                let d = g.distance(&c);
                a300 += (d <= 300.0) as usize;
                a500 += (d <= 500.0) as usize;
            }
            Err(_) => fails += 1,
        }
        let after = station_hit(world, y, station);
        ast += after as usize;
        let before = station_hit(world, &s.input_text, station);
        match s.abnormal {
            Some(false) if before => {
                rob_n += 1;
                rob_ok += after as usize;
            }
            Some(true) if !before => {
                cor_n += 1;
                cor_ok += after as usize;
            }
            None => {
                return Err(Error::InvalidArgument(
                    "geocoding sample lacks the abnormal tag".into(),
                ))
            }
            _ => {}
        }
    }
    let n = samples.len();
    Ok(GeoMetrics {
        acc_300m: ratio(a300, n),
        acc_500m: ratio(a500, n),
        acc_station: ratio(ast, n),
        robustness: ratio(rob_ok, rob_n),
        correction: ratio(cor_ok, cor_n),
        n,
        n_robustness: rob_n,
        n_correction: cor_n,
        geocode_failures: fails,
    })
}

pub fn eval_geocoding(
    rewriter: &dyn Rewriter,
    samples: &[RewriteSample],
    world: &World,
) -> Result<GeoMetrics> {
    eval_geocoding_outputs(world, samples, &rewrite_all(rewriter, samples)?)
}

/// One row of the results table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub variant: String,
    pub trigger_prediction: f64,
    pub aep_accuracy: f64,
    pub hit_rate: f64,
    pub acc_300m: f64,
    pub acc_500m: f64,
    pub acc_station: f64,
    pub robustness: f64,
    pub correction: f64,
    pub n_aep: usize,
    pub n_direct: usize,
    pub n_geocoding: usize,
    pub n_robustness: usize,
    pub n_correction: usize,
    pub geocode_failures: usize,
}

impl MetricsReport {
    pub fn fractions(&self) -> [(&'static str, f64); 8] {
        [
            ("trigger_prediction", self.trigger_prediction),
            ("aep_accuracy", self.aep_accuracy),
            ("hit_rate", self.hit_rate),
            ("acc_300m", self.acc_300m),
            ("acc_500m", self.acc_500m),
            ("acc_station", self.acc_station),
            ("robustness", self.robustness),
            ("correction", self.correction),
        ]
    }
}

/// Runs all three evaluations. Direct and geocoding sets that hold the same
/// samples share one pass of rewrites.
pub fn evaluate(
    variant: &str,
    rewriter: &dyn Rewriter,
    tests: &TestSets,
    world: &World,
) -> Result<MetricsReport> {
    let aep = eval_aep(rewriter, &tests.aep, world)?;
    let geo_out = rewrite_all(rewriter, &tests.geocoding)?;
    let direct_out = if tests.direct == tests.geocoding {
        geo_out.clone()
    } else {
        rewrite_all(rewriter, &tests.direct)?
    };
    let hit_rate = eval_direct_outputs(world, &tests.direct, &direct_out)?;
    let geo = eval_geocoding_outputs(world, &tests.geocoding, &geo_out)?;
    Ok(MetricsReport {
        variant: variant.to_string(),
        trigger_prediction: aep.trigger_prediction,
        aep_accuracy: aep.aep_accuracy,
        hit_rate,
        acc_300m: geo.acc_300m,
        acc_500m: geo.acc_500m,
        acc_station: geo.acc_station,
        robustness: geo.robustness,
        correction: geo.correction,
        n_aep: aep.n,
        n_direct: tests.direct.len(),
        n_geocoding: geo.n,
        n_robustness: geo.n_robustness,
        n_correction: geo.n_correction,
        geocode_failures: geo.geocode_failures,
    })
}

const HEADER: [&str; 15] = [
    "variant",
    "trigger_prediction",
    "aep_accuracy",
    "hit_rate",
    "acc_300m",
    "acc_500m",
    "acc_station",
    "robustness",
    "correction",
    "n_aep",
    "n_direct",
    "n_geocoding",
    "n_robustness",
    "n_correction",
    "geocode_failures",
];

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::format(path, e.to_string())
}

/// Metrics table with fractions at four decimals.
pub fn write_metrics_csv(reports: &[MetricsReport], path: &Path) -> Result<()> {
    if reports.is_empty() {
        return Err(Error::InvalidArgument("no reports to write".into()));
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(HEADER).map_err(|e| csv_err(path, e))?;
    for r in reports {
        let mut row = vec![r.variant.clone()];
        row.extend(r.fractions().iter().map(|(_, v)| format!("{v:.4}")));
        row.extend(
            [
                r.n_aep,
                r.n_direct,
                r.n_geocoding,
                r.n_robustness,
                r.n_correction,
                r.geocode_failures,
            ]
            .iter()
            .map(usize::to_string),
        );
        w.write_record(&row).map_err(|e| csv_err(path, e))?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::format(path, e.to_string()))?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricsReport>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let headers = r.headers().map_err(|e| csv_err(path, e))?.clone();
    if headers.iter().collect::<Vec<_>>() != HEADER {
        return Err(Error::format(path, "unexpected metrics header".to_string()));
    }
    let mut out = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let bad = |col: usize| {
            Error::format(
                path,
                format!("row {}: bad value in column {}", line + 2, HEADER[col]),
            )
        };
        let f = |i: usize| {
            rec.get(i)
                .and_then(|s| s.parse::<f64>().ok())
                .ok_or_else(|| bad(i))
        };
        let n = |i: usize| {
            rec.get(i)
                .and_then(|s| s.parse::<usize>().ok())
                .ok_or_else(|| bad(i))
        };
        out.push(MetricsReport {
            variant: rec.get(0).unwrap_or_default().to_string(),
            trigger_prediction: f(1)?,
            aep_accuracy: f(2)?,
            hit_rate: f(3)?,
            acc_300m: f(4)?,
            acc_500m: f(5)?,
            acc_station: f(6)?,
            robustness: f(7)?,
            correction: f(8)?,
            n_aep: n(9)?,
            n_direct: n(10)?,
            n_geocoding: n(11)?,
            n_robustness: n(12)?,
            n_correction: n(13)?,
            geocode_failures: n(14)?,
        });
    }
    Ok(out)
}

fn svg_open(w: f64, h: f64) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n\
         <rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n"
    )
}

/// Grouped bar chart of every fraction per variant.
pub fn metrics_svg(reports: &[MetricsReport]) -> String {
    let (w, h, left, bottom, top) = (760.0, 360.0, 50.0, 60.0, 20.0);
    let plot_h = h - bottom - top;
    let mut s = svg_open(w, h);
    let groups = 8.0;
    let gw = (w - left - 20.0) / groups;
    let bw = gw * 0.8 / reports.len().max(1) as f64;
    let palette = [
        "#4c72b0", "#dd8452", "#55a868", "#c44e52", "#8172b3", "#937860",
    ];
    for tick in 0..=4 {
        let v = tick as f64 / 4.0;
        let y = top + plot_h * (1.0 - v);
        let _ = writeln!(
            s,
            "<line x1=\"{left}\" y1=\"{y:.1}\" x2=\"{:.1}\" y2=\"{y:.1}\" stroke=\"#ddd\"/><text x=\"{:.1}\" y=\"{:.1}\" font-size=\"10\" text-anchor=\"end\">{v:.2}</text>",
            w - 20.0,
            left - 4.0,
            y + 3.0
        );
    }
    for (ri, r) in reports.iter().enumerate() {
        for (gi, (_, v)) in r.fractions().iter().enumerate() {
            let v = if v.is_finite() {
                v.clamp(0.0, 1.0)
            } else {
                0.0
            };
            let x = left + gi as f64 * gw + gw * 0.1 + ri as f64 * bw;
            let bh = plot_h * v;
            let _ = writeln!(
                s,
                "<rect x=\"{x:.1}\" y=\"{:.1}\" width=\"{bw:.1}\" height=\"{bh:.1}\" fill=\"{}\"/>",
                top + plot_h - bh,
                palette[ri % palette.len()]
            );
        }
    }
    if let Some(r) = reports.first() {
        for (gi, (name, _)) in r.fractions().iter().enumerate() {
            let x = left + (gi as f64 + 0.5) * gw;
            let _ = writeln!(
                s,
                "<text x=\"{x:.1}\" y=\"{:.1}\" font-size=\"10\" text-anchor=\"middle\">{name}</text>",
                h - bottom + 14.0
            );
        }
    }
    for (ri, r) in reports.iter().enumerate() {
        let x = left + ri as f64 * 140.0;
        let _ = writeln!(
            s,
            "<rect x=\"{x:.1}\" y=\"{:.1}\" width=\"10\" height=\"10\" fill=\"{}\"/><text x=\"{:.1}\" y=\"{:.1}\" font-size=\"11\">{}</text>",
            h - 24.0,
            palette[ri % palette.len()],
            x + 14.0,
            h - 15.0,
            xml_escape(&r.variant)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Scatter of embedding cosine distance against geographic distance with
/// the fitted line.
pub fn correlation_svg(report: &CorrelationReport) -> String {
    let (w, h, m) = (480.0, 360.0, 40.0);
    let xmax = report.points.iter().map(|p| p.0).fold(1e-9, f64::max);
    let ymax = report.points.iter().map(|p| p.1).fold(1e-9, f64::max);
    let sx = |x: f64| m + (w - 2.0 * m) * x / xmax;
    let sy = |y: f64| h - m - (h - 2.0 * m) * (y / ymax).clamp(0.0, 1.0);
    let mut s = svg_open(w, h);
    let _ = writeln!(
        s,
        "<line x1=\"{m}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" stroke=\"black\"/><line x1=\"{m}\" y1=\"{m}\" x2=\"{m}\" y2=\"{:.1}\" stroke=\"black\"/>",
        h - m,
        w - m,
        h - m,
        h - m
    );
    for &(x, y) in &report.points {
        let _ = writeln!(
            s,
            "<circle cx=\"{:.1}\" cy=\"{:.1}\" r=\"1.5\" fill=\"#4c72b0\" fill-opacity=\"0.4\"/>",
            sx(x),
            sy(y)
        );
    }
    let _ = writeln!(
        s,
        "<line x1=\"{:.1}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" stroke=\"#c44e52\" stroke-width=\"2\"/>",
        sx(0.0),
        sy(report.intercept),
        sx(xmax),
        sy(report.intercept + report.slope * xmax)
    );
    let _ = writeln!(
        s,
        "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"12\">R2 = {:.3} (n = {})</text><text x=\"{:.1}\" y=\"{:.1}\" font-size=\"11\" text-anchor=\"middle\">embedding cosine distance</text><text x=\"12\" y=\"{:.1}\" font-size=\"11\" transform=\"rotate(-90 12 {:.1})\" text-anchor=\"middle\">distance (km)</text>",
        m + 10.0,
        m + 10.0,
        report.r2,
        report.n_pairs,
        w / 2.0,
        h - 8.0,
        h / 2.0,
        h / 2.0
    );
    s.push_str("</svg>\n");
    s
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

/// Writes `metrics.csv`, `metrics.svg` and, when given, the correlation
/// scatter data and plot into `dir`.
pub fn emit_report(
    reports: &[MetricsReport],
    correlation: Option<&CorrelationReport>,
    dir: &Path,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_metrics_csv(reports, &dir.join(METRICS_FILE))?;
    let svg = dir.join("metrics.svg");
    fs::write(&svg, metrics_svg(reports)).map_err(|e| Error::io(&svg, e))?;
    if let Some(c) = correlation {
        let path = dir.join(CORRELATION_FILE);
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["cosine_distance", "distance_km"])
            .map_err(|e| csv_err(&path, e))?;
        for (x, y) in &c.points {
            w.write_record([format!("{x:.6}"), format!("{y:.6}")])
                .map_err(|e| csv_err(&path, e))?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| Error::format(&path, e.to_string()))?;
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        let svg = dir.join("correlation.svg");
        fs::write(&svg, correlation_svg(c)).map_err(|e| Error::io(&svg, e))?;
    }
    Ok(())
}

/// Plain-text comparison table for terminals and logs.
pub fn format_table(reports: &[MetricsReport]) -> String {
    let mut s = format!("{:<14}", "variant");
    for (name, _) in reports.first().map(|r| r.fractions()).unwrap_or_default() {
        let _ = write!(s, " {name:>18}");
    }
    s.push('\n');
    for r in reports {
        let _ = write!(s, "{:<14}", r.variant);
        for (_, v) in r.fractions() {
            let _ = write!(s, " {v:>18.4}");
        }
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corruptor::ErrorType;
    use crate::corruptor::DEFAULT_ERROR_WEIGHTS;
    use crate::datasets::{build_test_sets, split_records, Task};
    use crate::rng::stage_rng;
    use crate::world::{Coordinate, WorldParams};

    fn world() -> World {
        World::generate(&WorldParams {
            branching: vec![2, 2, 2, 4, 2, 4],
            ..WorldParams::default()
        })
        .unwrap()
    }

    fn tests_for(w: &World, sigma: f64, seed: u64) -> TestSets {
        let split = split_records(w, 100, &mut stage_rng(seed, "split")).unwrap();
        build_test_sets(
            w,
            &split.test,
            100,
            0.3,
            sigma,
            &DEFAULT_ERROR_WEIGHTS,
            &mut stage_rng(seed, "test"),
        )
        .unwrap()
    }

    fn labeled(w: &World, id: usize, input: &str, c: Coordinate, abnormal: bool) -> RewriteSample {
        RewriteSample {
            task: Task::Rewriting,
            input_text: input.to_string(),
            target_text: Some(w.record(id).canonical_text.clone()),
            delivery_coordinate: Some(c),
            record_id: Some(id),
            error_type: abnormal.then_some(ErrorType::MissingRegion),
            station_id: Some(w.station_of(&c).unwrap()),
            abnormal: Some(abnormal),
        }
    }

    #[test]
    fn identity_and_oracle_patterns() {
        let w = world();
        for seed in [1, 2] {
            let t = tests_for(&w, 30.0, seed);
            let id = evaluate("identity", &IdentityRewriter, &t, &w).unwrap();
            assert_eq!(id.robustness, 1.0);
            assert_eq!(id.correction, 0.0);
            assert_eq!((id.trigger_prediction, id.aep_accuracy), (0.0, 0.0));
            assert!(id.acc_300m <= id.acc_500m);
            let or = evaluate("oracle", &OracleRewriter { world: &w }, &t, &w).unwrap();
            assert_eq!((or.trigger_prediction, or.aep_accuracy), (1.0, 1.0));
            assert!(or.acc_300m <= or.acc_500m);
        }
        let exact = tests_for(&w, 0.0, 3);
        let or = evaluate("oracle", &OracleRewriter { world: &w }, &exact, &w).unwrap();
        assert_eq!(or.acc_station, 1.0);
        assert_eq!(or.acc_300m, 1.0);
    }

    #[test]
    fn aep_hand_count() {
        let w = world();
        let samples: Vec<RewriteSample> = (0..4)
            .map(|i| {
                let r = w.record(i);
                let missing = format!(
                    "{}, {}",
                    r.component(HierarchyTier::PROVINCE),
                    r.prefix_text(HierarchyTier::ROOM)
                        .split(", ")
                        .skip(2)
                        .collect::<Vec<_>>()
                        .join(", ")
                );
                labeled(&w, i, &missing, r.coordinate, true)
            })
            .collect();
        // Two attempts, one of them correct.
        let outputs = vec![
            w.record(0).canonical_text.clone(),
            w.record(0).canonical_text.clone(),
            samples[2].input_text.clone(),
            samples[3].input_text.clone(),
        ];
        let m = eval_aep_outputs(&w, &samples, &outputs).unwrap();
        assert_eq!((m.trigger_prediction, m.aep_accuracy), (0.5, 0.25));
    }

    #[test]
    fn hit_rate_counts_components() {
        let w = world();
        let r = w.record(5);
        let s = labeled(&w, 5, &r.canonical_text, r.coordinate, false);
        let truth = hit_groundtruth(&w, &s).unwrap();
        assert_eq!(truth.len(), 6);
        assert_eq!(sample_hit_rate(&truth, &w.parse(&r.canonical_text)), 1.0);
        let other = w.records.iter().find(|o| {
            (1..=3).all(|t| {
                o.component(HierarchyTier::from_index(t - 1))
                    == r.component(HierarchyTier::from_index(t - 1))
            }) && (4..=6).all(|t| {
                o.component(HierarchyTier::from_index(t - 1))
                    != r.component(HierarchyTier::from_index(t - 1))
            })
        });
        if let Some(o) = other {
            assert_eq!(sample_hit_rate(&truth, &w.parse(&o.canonical_text)), 0.5);
        }
        // Independent recount over a corpus.
        let t = tests_for(&w, 30.0, 4);
        let outs = rewrite_all(&IdentityRewriter, &t.direct).unwrap();
        let mut total = 0.0;
        for (s, y) in t.direct.iter().zip(&outs) {
            let c = s.delivery_coordinate.unwrap();
            let rg = w.nearest_record(&c).unwrap();
            let p = w.parse(y);
            let mut hit = 0;
            let mut den = 0;
            for tier in HierarchyTier::all() {
                let truth = if tier <= HierarchyTier::ROAD {
                    Some(rg.component(tier).to_string())
                } else {
                    w.parse(&s.input_text).get(tier).map(str::to_string)
                };
                if let Some(tn) = truth {
                    den += 1;
                    hit += (p.get(tier) == Some(tn.as_str())) as usize;
                }
            }
            total += hit as f64 / den as f64;
        }
        let expect = total / t.direct.len() as f64;
        assert!((eval_direct_outputs(&w, &t.direct, &outs).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn geocoding_hand_labeled() {
        let w = world();
        let mut samples = Vec::new();
        let mut outputs = Vec::new();
        // Four standard samples: correct kept, correct broken, correct moved
        // 400 m inside the world, and one with a wrong input station.
        for i in 0..4 {
            let r = w.record(i * 7);
            samples.push(labeled(&w, r.id, &r.canonical_text, r.coordinate, false));
        }
        outputs.push(w.record(0).canonical_text.clone());
        outputs.push("garbage".to_string());
        outputs.push(w.record(14).canonical_text.clone());
        outputs.push(w.record(21).canonical_text.clone());
        // Shift the third sample's delivery point by 400 m.
        let c = w.record(14).coordinate;
        let shifted = Coordinate::new(c.x + if c.x > 1000.0 { -400.0 } else { 400.0 }, c.y);
        samples[2].delivery_coordinate = Some(shifted);
        samples[2].station_id = Some(w.station_of(&shifted).unwrap());
        let far = w
            .records
            .iter()
            .find(|o| {
                w.station_of(&o.coordinate).unwrap()
                    != w.station_of(&w.record(21).coordinate).unwrap()
            })
            .unwrap();
        samples[3].input_text = far.canonical_text.clone();
        // Six abnormal samples, three fixed.
        for i in 0..6 {
            let r = w.record(40 + i);
            let broken = r
                .canonical_text
                .split(", ")
                .skip(1)
                .collect::<Vec<_>>()
                .join(", ");
            samples.push(labeled(&w, r.id, &broken, r.coordinate, true));
            outputs.push(if i % 2 == 0 {
                r.canonical_text.clone()
            } else {
                broken
            });
        }
        let m = eval_geocoding_outputs(&w, &samples, &outputs).unwrap();
        let station_same = (w.station_of(&shifted).unwrap() == w.station_of(&c).unwrap()) as usize;
        assert_eq!(m.n, 10);
        assert_eq!(m.acc_300m, 5.0 / 10.0);
        assert_eq!(m.acc_500m, 6.0 / 10.0);
        assert_eq!(m.acc_station, (5 + station_same) as f64 / 10.0);
        let rob_den = 2 + station_same;
        assert_eq!(m.n_robustness, rob_den);
        assert_eq!(m.robustness, (1 + station_same) as f64 / rob_den as f64);
        assert_eq!(m.n_correction, 6);
        assert_eq!(m.correction, 0.5);
        assert_eq!(m.geocode_failures, 4);
    }

    #[test]
    fn metrics_are_permutation_invariant() {
        let w = world();
        let t = tests_for(&w, 30.0, 5);
        let or = OracleRewriter { world: &w };
        let a = evaluate("x", &or, &t, &w).unwrap();
        let mut rev = t.clone();
        rev.aep.reverse();
        rev.direct.reverse();
        rev.geocoding.reverse();
        assert_eq!(evaluate("x", &or, &rev, &w).unwrap(), a);
    }

    #[test]
    fn report_round_trip() {
        let w = world();
        let t = tests_for(&w, 30.0, 6);
        let reports = vec![
            evaluate("identity", &IdentityRewriter, &t, &w).unwrap(),
            evaluate("oracle", &OracleRewriter { world: &w }, &t, &w).unwrap(),
        ];
        let dir = tempfile::tempdir().unwrap();
        emit_report(&reports[..1], None, dir.path()).unwrap();
        let text = fs::read_to_string(dir.path().join(METRICS_FILE)).unwrap();
        assert_eq!(text.lines().count(), 2);
        let row = text.lines().nth(1).unwrap();
        for field in row.split(',').skip(1).take(8) {
            assert_eq!(field.split('.').nth(1).map(str::len), Some(4), "{field}");
        }
        emit_report(&reports, None, dir.path()).unwrap();
        let back = read_metrics_csv(&dir.path().join(METRICS_FILE)).unwrap();
        assert_eq!(back.len(), 2);
        for (a, b) in back.iter().zip(&reports) {
            for ((_, x), (_, y)) in a.fractions().iter().zip(b.fractions()) {
                assert!((x - y).abs() <= 1e-4);
            }
            assert_eq!(a.n_correction, b.n_correction);
        }
        assert!(fs::read_to_string(dir.path().join("metrics.svg"))
            .unwrap()
            .starts_with("<svg"));
        assert!(matches!(
            emit_report(&reports, None, Path::new("/proc/forbidden/report")),
            Err(Error::Io { .. })
        ));
    }
}
