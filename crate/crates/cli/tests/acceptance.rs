//! End-to-end acceptance checks. Each test prints one PASS/FAIL line
//! straight to stdout so the verdicts show up even when output is captured.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::{Mutex, OnceLock};

use georewrite_cli::artifacts::{checksum_tree, sha256_file};
use georewrite_cli::config::ExperimentConfig;
use georewrite_cli::pipeline::{EvalSummary, EVAL_SUMMARY_FILE};
use georewrite_core::corruptor::{corrupt, ErrorType, ErrorTypeSampler, DEFAULT_ERROR_WEIGHTS};
use georewrite_core::datasets::{build_test_sets, read_json, split_records, DatasetBundle, Task};
use georewrite_core::embedder::{correlation_report, fresh_encoder};
use georewrite_core::eval::{evaluate, IdentityRewriter, OracleRewriter};
use georewrite_core::nn::{Matrix, ParamStore};
use georewrite_core::policy::{
    format_prompt, target_tokens, PolicyConfig, PolicyModel, Prompt, PromptFields, ValueModel,
};
use georewrite_core::ppo::{
    clipped_objective, compute_gae, ppo_loss, AlignReport, PpoConfig, Trajectory,
};
use georewrite_core::retriever::{dot, Retriever};
use georewrite_core::reward::{
    geo_score, geo_score_from_distance, seman_score, total_reward, RewardBreakdown, RewardConfig,
    SemanticEmbedder,
};
use georewrite_core::rng::{seeded, stage_rng};
use georewrite_core::world::{Coordinate, World};
use rand::Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn verdict(n: u32, name: &str, pass: bool, detail: &str) {
    let line = format!(
        "[{}] {n:>2} {name}: {detail}\n",
        if pass { "PASS" } else { "FAIL" }
    );
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(line.as_bytes());
    let _ = out.flush();
    assert!(pass, "{}", line.trim_end());
}

fn default_world() -> &'static World {
    static W: OnceLock<World> = OnceLock::new();
    W.get_or_init(|| World::generate(&ExperimentConfig::default().world_params()).unwrap())
}

#[test]
fn acceptance_01_reward_formula_exactness() {
    let cfg = RewardConfig::default();
    let w = default_world();
    let f = SemanticEmbedder::from_config(&cfg).unwrap();
    let r = &w.records[100];
    let at = |dy: f64| {
        Coordinate::new(
            r.coordinate.x,
            r.coordinate.y + if r.coordinate.y < 10_000.0 { dy } else { -dy },
        )
    };
    let g50 = geo_score(&r.canonical_text, &at(50.0), w, &cfg).unwrap();
    let g550 = geo_score(&r.canonical_text, &at(550.0), w, &cfg).unwrap();
    let gfail = geo_score("no such place", &at(50.0), w, &cfg).unwrap();
    let exact = (g50 - 1.0).abs() < 1e-9
        && (g550 - 0.55).abs() < 1e-9
        && gfail == 0.0
        && (geo_score_from_distance(Some(550.0), &cfg) - 0.55).abs() < 1e-9
        && geo_score_from_distance(None, &cfg) == 0.0;
    let x = "Outlets Store (Eastern door), Room 3";
    let y = &r.canonical_text;
    let c = at(550.0);
    let full = total_reward(x, y, &c, w, &f, &cfg).unwrap();
    let with = |lambda| {
        total_reward(
            x,
            y,
            &c,
            w,
            &f,
            &RewardConfig {
                lambda,
                ..cfg.clone()
            },
        )
        .unwrap()
        .total
    };
    let linear = (with([0.0, 0.0, 1.0]) - full.geo).abs() < 1e-9
        && (with([1.0, 0.0, 0.0]) - full.seman).abs() < 1e-9
        && (full.total - (0.2 * full.seman + 0.2 * full.revgeo + 0.6 * full.geo)).abs() < 1e-9;
    let self_sim = (seman_score(y, y, &f) - 1.0).abs() < 1e-9;
    verdict(
        1,
        "reward formula exactness",
        exact && linear && self_sim,
        &format!("geo(50)={g50} geo(550)={g550:.6} geo(fail)={gfail} linear={linear} seman(x,x)=1:{self_sim}"),
    );
}

fn gae_oracle(rewards: &[f64], values: &[f64], lambda: f64) -> Vec<f64> {
    let n = rewards.len();
    let v = |t: usize| if t < n { values[t] } else { 0.0 };
    (0..n)
        .map(|t| {
            let mut a = 0.0;
            for l in 0..n - t {
                let s = t + l;
                a += lambda.powi(l as i32) * (rewards[s] + v(s + 1) - v(s));
            }
            a
        })
        .collect()
}

#[test]
fn acceptance_02_ppo_objective_exactness() {
    let cases = [(1.0, 2.0, 2.0), (1.5, 1.0, 1.2), (0.5, -1.0, -0.8)];
    let got: Vec<f64> = cases
        .iter()
        .map(|&(k, a, _)| clipped_objective(k, a, 0.2))
        .collect();
    let exact = cases.iter().zip(&got).all(|(c, g)| (c.2 - g).abs() < 1e-9);
    let mut rng = seeded(2);
    let mut td_ok = true;
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let r: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
        let v: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (a0, _) = compute_gae(&r, &v, 0.0, 1.0);
        for t in 0..5 {
            let next = if t + 1 < 5 { v[t + 1] } else { 0.0 };
            td_ok &= (a0[t] - (r[t] + next - v[t])).abs() < 1e-9;
        }
        let lambda = rng.random_range(0.0..1.0);
        let (a, ret) = compute_gae(&r, &v, lambda, 1.0);
        for ((x, y), (rt, vt)) in a
            .iter()
            .zip(gae_oracle(&r, &v, lambda))
            .zip(ret.iter().zip(&v))
        {
            worst = worst.max((x - y).abs()).max((rt - (x + vt)).abs());
        }
    }
    verdict(
        2,
        "PPO clipped objective and GAE",
        exact && td_ok && worst < 1e-7,
        &format!("cases {got:?}, lambda=0 equals TD residuals: {td_ok}, max GAE oracle error {worst:.2e}"),
    );
}

fn grad_world() -> World {
    let mut cfg = ExperimentConfig::default();
    cfg.world.branching = vec![2, 2, 2, 2, 2, 2];
    World::generate(&cfg.world_params()).unwrap()
}

fn jitter(store: &mut ParamStore<f64>, std: f64, rng: &mut impl Rng) {
    for id in 0..store.len() {
        for x in &mut store.get_mut(id).data {
            *x += rng.random_range(-std..std);
        }
    }
}

/// Worst relative error over `probes` central differences.
fn fd_worst(
    f: &mut dyn FnMut(&ParamStore<f64>) -> f64,
    store: &ParamStore<f64>,
    grads: &[Matrix<f64>],
    probes: usize,
    seed: u64,
) -> f64 {
    let mut rng = seeded(seed);
    let mut s = store.clone();
    let mut worst = 0.0f64;
    for _ in 0..probes {
        let id = rng.random_range(0..s.len());
        let i = rng.random_range(0..s.get(id).len());
        let h = 1e-5;
        let x = s.get(id).data[i];
        s.get_mut(id).data[i] = x + h;
        let up = f(&s);
        s.get_mut(id).data[i] = x - h;
        let down = f(&s);
        s.get_mut(id).data[i] = x;
        let fd = (up - down) / (2.0 * h);
        let g = grads[id].data[i];
        worst = worst.max((fd - g).abs() / fd.abs().max(g.abs()).max(1e-6));
    }
    worst
}

#[test]
fn acceptance_03_gradient_checks() {
    let w = grad_world();
    let cfg = PolicyConfig {
        d_model: 16,
        layers: 1,
        heads: 2,
        d_ff: 32,
        max_len: 96,
        max_positions: 32,
        max_new_tokens: 12,
        init_std: 0.2,
    };
    let mut rng = seeded(3);
    let mut p = PolicyModel::<f32>::new(cfg, &w.lexicon, &mut rng)
        .unwrap()
        .cast::<f64>();
    jitter(&mut p.params, 0.1, &mut rng);
    let prompt = |task, i: usize, related: Option<Vec<String>>| -> Prompt {
        let fields = PromptFields {
            address: w.records[i].canonical_text.clone(),
            examples: Vec::new(),
            related,
        };
        format_prompt(&w.lexicon, task, &fields, 32).unwrap()
    };
    let p1 = prompt(
        Task::Rewriting,
        3,
        Some(vec![w.records[4].canonical_text.clone()]),
    );
    let p2 = prompt(Task::Parsing, 9, None);
    let o1 = target_tokens(&w.lexicon, &w.records[3].canonical_text);
    let o2 = target_tokens(&w.lexicon, &w.parse(&w.records[9].canonical_text).listing());
    let items = [(&p1, o1.as_slice()), (&p2, o2.as_slice())];

    let (_, g) = p.sft_loss(&items).unwrap();
    let mut probe = p.clone();
    let sft = fd_worst(
        &mut |s| {
            probe.params.copy_from(s).unwrap();
            probe.sft_loss(&items).unwrap().0
        },
        &p.params,
        &g,
        12,
        1,
    );

    // Trajectories sampled under a slightly different old policy.
    let mut old = p.clone();
    jitter(&mut old.params, 0.05, &mut rng);
    let trajs: Vec<Trajectory> = [(&p1, &o1), (&p2, &o2)]
        .iter()
        .map(|(pr, out)| {
            let n = out.len();
            Trajectory {
                prompt: (*pr).clone(),
                input_text: String::new(),
                coordinate: Coordinate::new(0.0, 0.0),
                tokens: out.to_vec(),
                old_logprobs: old.logprob(pr, out).unwrap(),
                ref_logprobs: vec![0.0; n],
                values: vec![0.0; n],
                kl: vec![0.0; n],
                rewards: vec![0.0; n],
                terminal: RewardBreakdown {
                    seman: 0.0,
                    revgeo: 0.0,
                    geo: 0.0,
                    total: 0.0,
                },
                truncated: false,
            }
        })
        .collect();
    let refs: Vec<&Trajectory> = trajs.iter().collect();
    let adv: Vec<Vec<f64>> = trajs
        .iter()
        .map(|t| {
            t.tokens
                .iter()
                .map(|_| rng.random_range(-1.0..1.0))
                .collect()
        })
        .collect();
    let ret: Vec<Vec<f64>> = trajs
        .iter()
        .map(|t| {
            t.tokens
                .iter()
                .map(|_| rng.random_range(-1.0..1.0))
                .collect()
        })
        .collect();
    let mut v = ValueModel::from_policy(&p);
    jitter(&mut v.params, 0.1, &mut rng);
    let ppo_cfg = PpoConfig::default();
    let l = ppo_loss(&refs, &adv, &ret, &p, &v, &ppo_cfg).unwrap();
    let mut probe = p.clone();
    let policy = fd_worst(
        &mut |s| {
            probe.params.copy_from(s).unwrap();
            ppo_loss(&refs, &adv, &ret, &probe, &v, &ppo_cfg)
                .unwrap()
                .policy_loss
        },
        &p.params,
        &l.policy_grads,
        12,
        2,
    );
    let vg: Vec<Matrix<f64>> = l
        .value_grads
        .iter()
        .map(|g| {
            let mut g = g.clone();
            g.scale(1.0 / ppo_cfg.value_coef);
            g
        })
        .collect();
    let mut vprobe = v.clone();
    let value = fd_worst(
        &mut |s| {
            vprobe.params.copy_from(s).unwrap();
            ppo_loss(&refs, &adv, &ret, &p, &vprobe, &ppo_cfg)
                .unwrap()
                .value_loss
        },
        &v.params,
        &vg,
        12,
        3,
    );
    verdict(
        3,
        "gradient checks",
        sft < 1e-4 && policy < 1e-4 && value < 1e-4,
        &format!("12 probes each, worst relative error sft {sft:.1e}, ppo policy {policy:.1e}, value {value:.1e}"),
    );
}

#[test]
fn acceptance_04_retrieval_exactness() {
    let w = default_world();
    let cfg = ExperimentConfig::default();
    let enc = fresh_encoder(cfg.encoder.clone(), w, 4).unwrap();
    let retriever = Retriever::build(w, enc).unwrap();
    let mut rng = seeded(4);
    let sampler = ErrorTypeSampler::new(&DEFAULT_ERROR_WEIGHTS).unwrap();
    let mut mismatches = 0;
    for _ in 0..1000 {
        let record = &w.records[rng.random_range(0..w.records.len())];
        let query = if rng.random_bool(0.5) {
            record.canonical_text.clone()
        } else {
            corrupt(record, sampler.sample(&mut rng), w, &mut rng)
                .unwrap()
                .corrupted_text
        };
        let k = 10;
        let hits = retriever.retrieve(&w.lexicon, &query, k).unwrap();
        let q = retriever.encoder.encode(&w.lexicon, &query).unwrap();
        let mut brute: Vec<(usize, f64)> = (0..retriever.index.len())
            .map(|row| {
                (
                    retriever.index.record_ids[row],
                    dot(retriever.index.embeddings.row(row), &q),
                )
            })
            .collect();
        brute.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        let same = hits.len() == k
            && hits
                .iter()
                .zip(&brute)
                .all(|(h, b)| h.record_id == b.0 && (h.score - b.1).abs() < 1e-12);
        mismatches += usize::from(!same);
    }
    let mut self_fail = 0;
    let mut worst = 0.0f64;
    for r in &w.records {
        let top = &retriever
            .retrieve(&w.lexicon, &r.canonical_text, 1)
            .unwrap()[0];
        self_fail += usize::from(top.record_id != r.id);
        worst = worst.max((top.score - 1.0).abs());
    }
    verdict(
        4,
        "retrieval exactness",
        mismatches == 0 && self_fail == 0 && worst <= 1e-6,
        &format!(
            "{} records, 1000 queries with {mismatches} brute-force mismatches, self-retrieval misses {self_fail}, max |score-1| {worst:.1e}",
            w.records.len()
        ),
    );
}

#[test]
fn acceptance_05_spatial_embedding_correlation() {
    let cfg = ExperimentConfig::default();
    let w = default_world();
    let bundle = DatasetBundle::generate(w, &cfg.data, cfg.stage_seed("data")).unwrap();
    let mut enc = fresh_encoder(cfg.encoder.clone(), w, cfg.stage_seed("encoder-init")).unwrap();
    let untrained =
        correlation_report(&enc, w, 2000, &mut stage_rng(cfg.seed, "correlation")).unwrap();
    let report = enc
        .train_geocoding(
            &w.lexicon,
            &bundle.geocoding,
            &cfg.embedder,
            &mut stage_rng(cfg.seed, "encoder-train"),
        )
        .unwrap();
    let trained =
        correlation_report(&enc, w, 2000, &mut stage_rng(cfg.seed, "correlation")).unwrap();
    let frozen = report.encoder_checksum_before_phase1 == report.encoder_checksum_after_phase1;
    let moved = enc.encoder_checksum() != report.encoder_checksum_after_phase1;
    verdict(
        5,
        "spatial-embedding correlation",
        bundle.geocoding.len() >= 5000 && trained.r2 >= 0.6 && untrained.r2 <= 0.1 && frozen && moved,
        &format!(
            "{} pairs, R2 trained {:.3} vs untrained {:.3}, encoder frozen in phase 1: {frozen}, updated in phase 2: {moved}",
            bundle.geocoding.len(),
            trained.r2,
            untrained.r2
        ),
    );
}

#[test]
fn acceptance_06_corruption_distribution() {
    const N: usize = 100_000;
    let sampler = ErrorTypeSampler::new(&DEFAULT_ERROR_WEIGHTS).unwrap();
    let mut counts = [0usize; 5];
    let mut rng = seeded(6);
    for _ in 0..N {
        counts[sampler.sample(&mut rng).index()] += 1;
    }
    let total: f64 = DEFAULT_ERROR_WEIGHTS.iter().sum();
    let stat: f64 = ErrorType::ALL
        .iter()
        .map(|t| {
            let e = N as f64 * DEFAULT_ERROR_WEIGHTS[t.index()] / total;
            (counts[t.index()] as f64 - e).powi(2) / e
        })
        .sum();
    let critical = ChiSquared::new(4.0).unwrap().inverse_cdf(0.99);
    verdict(
        6,
        "corruption distribution",
        stat < critical,
        &format!("chi-square {stat:.3} < {critical:.3} (df 4, alpha 0.01), counts {counts:?}"),
    );
}

#[test]
fn acceptance_07_metric_harness() {
    let w = default_world();
    let mut ok = true;
    let mut detail = Vec::new();
    for (seed, sigma) in [(1u64, 30.0), (2, 60.0), (3, 0.0)] {
        let split = split_records(w, 300, &mut stage_rng(seed, "split")).unwrap();
        let tests = build_test_sets(
            w,
            &split.test,
            300,
            0.1,
            sigma,
            &DEFAULT_ERROR_WEIGHTS,
            &mut stage_rng(seed, "test"),
        )
        .unwrap();
        let id = evaluate("identity", &IdentityRewriter, &tests, w).unwrap();
        let or = evaluate("oracle", &OracleRewriter { world: w }, &tests, w).unwrap();
        ok &= id.robustness == 1.0 && id.correction == 0.0;
        ok &= id.acc_300m <= id.acc_500m && or.acc_300m <= or.acc_500m;
        if sigma == 0.0 {
            ok &= or.acc_station == 1.0;
            detail.push(format!(
                "oracle acc_station at zero noise {}",
                or.acc_station
            ));
        }
        detail.push(format!(
            "seed {seed}: identity robustness {} correction {}",
            id.robustness, id.correction
        ));
    }
    verdict(7, "metric harness", ok, &detail.join("; "));
}

/// The default pipeline with ablations, run once and shared.
struct DefaultRun {
    dir: PathBuf,
}

fn default_run() -> &'static DefaultRun {
    static RUN: OnceLock<DefaultRun> = OnceLock::new();
    static LOCK: Mutex<()> = Mutex::new(());
    let _guard = LOCK.lock().unwrap_or_else(|e| e.into_inner());
    RUN.get_or_init(|| {
        let dir = fresh_dir("default-a");
        run_binary(&["run", "--ablate"], &dir);
        DefaultRun { dir }
    })
}

fn fresh_dir(name: &str) -> PathBuf {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR"))
        .join("acceptance")
        .join(name);
    if dir.exists() {
        fs::remove_dir_all(&dir).unwrap();
    }
    fs::create_dir_all(&dir).unwrap();
    dir
}

fn run_binary(args: &[&str], dir: &Path) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_georewrite"))
        .args(args)
        .arg("--workdir")
        .arg(dir)
        .env("RUST_LOG", "info")
        .output()
        .unwrap();
    fs::write(dir.join("stderr.log"), &out.stderr).unwrap();
    assert!(
        out.status.success(),
        "georewrite {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn summary(path: &Path) -> EvalSummary {
    read_json(&path.join(EVAL_SUMMARY_FILE)).unwrap()
}

#[test]
fn acceptance_08_end_to_end_ablation_ordering() {
    let run = default_run();
    let full = summary(&run.dir.join("report")).metrics;
    let ab = |slug: &str| summary(&run.dir.join("ablate").join(slug).join("report")).metrics;
    let (wo_sft, wo_oa, wo_rag) = (ab("wo_sft"), ab("wo_oa"), ab("wo_rag"));
    let a = full.robustness >= 0.95;
    let b = full.correction >= 0.30;
    let c = full.correction > wo_oa.correction && full.correction > wo_rag.correction;
    let d = wo_sft.robustness < full.robustness;
    verdict(
        8,
        "end-to-end ablation ordering",
        a && b && c && d,
        &format!(
            "(a) robustness {:.4} [{}] (b) correction {:.4} [{}] (c) correction full {:.4} vs w/o OA {:.4} vs w/o RAG {:.4} [{}] (d) robustness w/o SFT {:.4} < full [{}]; n_robustness {} n_correction {}",
            full.robustness,
            a,
            full.correction,
            b,
            full.correction,
            wo_oa.correction,
            wo_rag.correction,
            c,
            wo_sft.robustness,
            d,
            full.n_robustness,
            full.n_correction
        ),
    );
}

#[test]
fn acceptance_09_alignment_improves_reward() {
    let run = default_run();
    let report: AlignReport = read_json(&run.dir.join("align.json")).unwrap();
    let gain = report.final_heldout_reward() - report.initial_heldout_reward;
    verdict(
        9,
        "alignment improves held-out reward",
        report.epochs.len() == 4 && gain >= 0.05,
        &format!(
            "{} epochs, held-out mean reward {:.4} -> {:.4} (gain {gain:+.4})",
            report.epochs.len(),
            report.initial_heldout_reward,
            report.final_heldout_reward()
        ),
    );
}

fn tree(dir: &Path, parts: &[&str]) -> std::collections::BTreeMap<String, String> {
    let mut out = std::collections::BTreeMap::new();
    for p in parts {
        checksum_tree(&dir.join(p), dir, &mut out).unwrap();
    }
    out
}

#[test]
fn acceptance_10_reproducibility() {
    let run = default_run();
    let second = fresh_dir("default-b");
    run_binary(&["run"], &second);
    let artifacts = [
        "world.json",
        "data",
        "encoder.ckpt",
        "index.bin",
        "policy.ckpt",
        "aligned.ckpt",
        "value.ckpt",
        "align.json",
        "report",
    ];
    let a = tree(&run.dir, &artifacts);
    let b = tree(&second, &artifacts);
    let differing: Vec<&String> = a.keys().filter(|k| a.get(*k) != b.get(*k)).collect();
    let report_a = sha256_file(&run.dir.join("report/metrics.csv")).unwrap();
    let report_b = sha256_file(&second.join("report/metrics.csv")).unwrap();
    // A third invocation reuses everything and leaves the report untouched.
    run_binary(&["run"], &second);
    let log = fs::read_to_string(second.join("stderr.log")).unwrap();
    let cached = log.contains("0 stages rebuilt");
    let report_c = sha256_file(&second.join("report/metrics.csv")).unwrap();
    verdict(
        10,
        "reproducibility",
        report_a == report_b && report_b == report_c && differing.is_empty() && a.len() == b.len() && cached,
        &format!(
            "final reports identical across two fresh runs: {}; {} artifact files compared, {} differ; cached rerun identical: {}",
            report_a == report_b,
            a.len(),
            differing.len(),
            cached && report_b == report_c
        ),
    );
}
