//! Stage orchestration with config-hash caching.
//!
//! Stages form a chain: world, data, embedder, index, sft, align, eval. Each
//! stage's key holds its own config slice plus the previous stage's hash, so
//! a change anywhere invalidates everything below it. A stage is reused only
//! when its sidecar hash matches and its files are intact; once any stage
//! executes, every later stage executes too.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use georewrite_core::datasets::{read_json, write_json, DatasetBundle, RewriteSample, TestSets};
use georewrite_core::embedder::{correlation_report, fresh_encoder, SpatialEncoder};
use georewrite_core::eval::{
    emit_report, evaluate, format_table, metrics_svg, write_metrics_csv, MetricsReport,
    PolicyRewriter,
};
use georewrite_core::nn::{load_checkpoint, save_checkpoint};
use georewrite_core::policy::{
    build_sft_examples, sft_train, PolicyModel, PromptContext, ValueModel,
};
use georewrite_core::ppo::{align, RewardFn};
use georewrite_core::retriever::Retriever;
use georewrite_core::rng::stage_rng;
use georewrite_core::world::World;
use georewrite_core::{Error, Result};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::artifacts::{hash_value, json_diff, sidecar, Meta};
use crate::config::ExperimentConfig;

/// Bumped when stage semantics change so old artifacts are not reused.
const PIPELINE_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageId {
    World,
    Data,
    Embedder,
    Index,
    Sft,
    Align,
    Eval,
}

impl StageId {
    pub const ALL: [StageId; 7] = [
        StageId::World,
        StageId::Data,
        StageId::Embedder,
        StageId::Index,
        StageId::Sft,
        StageId::Align,
        StageId::Eval,
    ];

    /// Subcommand name of the stage.
    pub fn name(self) -> &'static str {
        match self {
            StageId::World => "world-gen",
            StageId::Data => "data-gen",
            StageId::Embedder => "train-embedder",
            StageId::Index => "build-index",
            StageId::Sft => "sft",
            StageId::Align => "align",
            StageId::Eval => "eval",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for StageId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Where every artifact lives. Paths default to fixed names under one
/// work directory and may be overridden individually.
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub root: PathBuf,
    pub world: PathBuf,
    pub data: PathBuf,
    pub encoder: PathBuf,
    pub embedder_report: PathBuf,
    pub index: PathBuf,
    pub policy: PathBuf,
    pub sft_report: PathBuf,
    pub aligned: PathBuf,
    pub value: PathBuf,
    pub align_csv: PathBuf,
    pub align_report: PathBuf,
    pub report: PathBuf,
}

impl Layout {
    pub fn new(root: &Path) -> Self {
        let p = |name: &str| root.join(name);
        Layout {
            root: root.to_path_buf(),
            world: p("world.json"),
            data: p("data"),
            encoder: p("encoder.ckpt"),
            embedder_report: p("embedder.json"),
            index: p("index.bin"),
            policy: p("policy.ckpt"),
            sft_report: p("sft.json"),
            aligned: p("aligned.ckpt"),
            value: p("value.ckpt"),
            align_csv: p("align.csv"),
            align_report: p("align.json"),
            report: p("report"),
        }
    }

    pub fn outputs(&self, stage: StageId) -> Vec<PathBuf> {
        match stage {
            StageId::World => vec![self.world.clone()],
            StageId::Data => vec![self.data.clone()],
            StageId::Embedder => vec![self.encoder.clone(), self.embedder_report.clone()],
            StageId::Index => vec![self.index.clone()],
            StageId::Sft => vec![self.policy.clone(), self.sft_report.clone()],
            StageId::Align => vec![
                self.aligned.clone(),
                self.value.clone(),
                self.align_csv.clone(),
                self.align_report.clone(),
            ],
            StageId::Eval => vec![self.report.clone()],
        }
    }

    pub fn ablation_dir(&self) -> PathBuf {
        self.root.join("ablate")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Cached,
    Ran,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub stages: Vec<(String, Outcome)>,
    pub report: MetricsReport,
}

impl RunSummary {
    pub fn ran(&self) -> Vec<&str> {
        self.stages
            .iter()
            .filter(|(_, o)| *o == Outcome::Ran)
            .map(|(s, _)| s.as_str())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Status {
    Valid,
    Missing,
    Modified,
    Stale(String),
}

/// Everything the eval stage writes besides the CSV and plots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub metrics: MetricsReport,
    pub correlation_r2: Option<f64>,
    pub untrained_correlation_r2: Option<f64>,
    /// SHA-256 of the evaluated policy checkpoint.
    pub policy_checksum: String,
    pub related_per_rewriting_prompt: f64,
}

pub const EVAL_SUMMARY_FILE: &str = "summary.json";

/// Which ablation rows to produce.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Drop {
    Sft,
    Oa,
    Rag,
}

impl Drop {
    pub fn variant(self) -> &'static str {
        match self {
            Drop::Sft => "w/o SFT",
            Drop::Oa => "w/o OA",
            Drop::Rag => "w/o RAG",
        }
    }

    fn slug(self) -> &'static str {
        match self {
            Drop::Sft => "wo_sft",
            Drop::Oa => "wo_oa",
            Drop::Rag => "wo_rag",
        }
    }
}

impl std::str::FromStr for Drop {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sft" => Ok(Drop::Sft),
            "oa" => Ok(Drop::Oa),
            "rag" => Ok(Drop::Rag),
            _ => Err(Error::InvalidArgument(format!(
                "unknown ablation `{s}` (use sft, oa or rag)"
            ))),
        }
    }
}

pub struct Pipeline {
    pub cfg: ExperimentConfig,
    pub layout: Layout,
    /// Refuse to replace artifacts whose hash no longer matches.
    pub strict: bool,
}

/// Loaded inputs shared by the training and eval stages.
struct Inputs {
    world: World,
    bundle: DatasetBundle,
    retriever: Retriever,
    exemplars: Vec<(String, String)>,
}

impl Inputs {
    fn ctx(&self, cfg: &ExperimentConfig, rag: bool) -> PromptContext<'_> {
        prompt_context(
            &self.world,
            rag.then_some(&self.retriever),
            &self.exemplars,
            cfg,
        )
    }
}

pub fn prompt_context<'a>(
    world: &'a World,
    retriever: Option<&'a Retriever>,
    exemplars: &'a [(String, String)],
    cfg: &ExperimentConfig,
) -> PromptContext<'a> {
    PromptContext {
        world,
        retriever,
        top_k: cfg.retrieval.top_k,
        examples: exemplars,
        max_positions: cfg.policy.max_positions,
    }
}

/// The first `k` rewriting pairs whose input actually changes.
pub fn exemplars(rewriting: &[RewriteSample], k: usize) -> Vec<(String, String)> {
    rewriting
        .iter()
        .filter_map(|s| match &s.target_text {
            Some(t) if *t != s.input_text => Some((s.input_text.clone(), t.clone())),
            _ => None,
        })
        .take(k)
        .collect()
}

fn limit_tests(tests: &TestSets, n: usize) -> TestSets {
    if n == 0 {
        return tests.clone();
    }
    let cut = |v: &Vec<RewriteSample>| v.iter().take(n).cloned().collect();
    TestSets {
        aep: cut(&tests.aep),
        direct: cut(&tests.direct),
        geocoding: cut(&tests.geocoding),
    }
}

fn reset(path: &Path) -> Result<()> {
    if path.is_dir() {
        fs::remove_dir_all(path).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => fs::create_dir_all(p).map_err(|e| Error::io(p, e)),
        _ => Ok(()),
    }
}

impl Pipeline {
    pub fn new(cfg: ExperimentConfig, layout: Layout, strict: bool) -> Result<Self> {
        cfg.validate()?;
        Ok(Pipeline {
            cfg,
            layout,
            strict,
        })
    }

    fn slice(&self, stage: StageId) -> Value {
        let c = &self.cfg;
        match stage {
            StageId::World => json!({ "world": c.world }),
            StageId::Data => json!({ "data": c.data }),
            StageId::Embedder => json!({ "encoder": c.encoder, "embedder": c.embedder }),
            StageId::Index => json!({}),
            StageId::Sft => json!({ "retrieval": c.retrieval, "policy": c.policy, "sft": c.sft }),
            StageId::Align => json!({ "ppo": c.ppo, "reward": c.reward }),
            StageId::Eval => json!({ "eval": c.eval }),
        }
    }

    /// Keys of the whole chain, in stage order.
    pub fn keys(&self) -> Vec<Value> {
        let mut upstream = Value::Null;
        StageId::ALL
            .iter()
            .map(|&s| {
                let key = json!({
                    "pipeline": PIPELINE_VERSION,
                    "stage": s.name(),
                    "seed": self.cfg.seed,
                    "upstream": upstream,
                    "config": self.slice(s),
                });
                upstream = Value::String(hash_value(&key));
                key
            })
            .collect()
    }

    pub fn hash(&self, stage: StageId) -> String {
        hash_value(&self.keys()[stage.index()])
    }

    fn status_of(&self, outputs: &[PathBuf], key: &Value) -> Result<Status> {
        let Some(meta) = Meta::read(&sidecar(&outputs[0]))? else {
            return Ok(Status::Missing);
        };
        if meta.hash != hash_value(key) {
            return Ok(Status::Stale(json_diff(&meta.key, key)));
        }
        if !meta.outputs_intact(&self.layout.root)? {
            return Ok(Status::Modified);
        }
        Ok(Status::Valid)
    }

    /// Runs `exec` unless the outputs are current. `dirty` forces a rerun
    /// and is set whenever something executes.
    fn step(
        &self,
        name: &str,
        key: &Value,
        outputs: &[PathBuf],
        dirty: &mut bool,
        log: &mut Vec<(String, Outcome)>,
        exec: impl FnOnce() -> Result<()>,
    ) -> Result<()> {
        let status = self.status_of(outputs, key)?;
        if status == Status::Valid && !*dirty {
            log::info!("{name}: up to date");
            log.push((name.to_string(), Outcome::Cached));
            return Ok(());
        }
        if let Status::Stale(diff) = &status {
            if self.strict {
                return Err(Error::HashMismatch {
                    stage: name.to_string(),
                    diff: diff.clone(),
                });
            }
            log::info!("{name}: config changed, rebuilding\n{diff}");
        }
        self.execute(name, key, outputs, exec)?;
        *dirty = true;
        log.push((name.to_string(), Outcome::Ran));
        Ok(())
    }

    fn execute(
        &self,
        name: &str,
        key: &Value,
        outputs: &[PathBuf],
        exec: impl FnOnce() -> Result<()>,
    ) -> Result<()> {
        for o in outputs {
            ensure_parent(o)?;
        }
        // Drop the old sidecar first so an interrupted stage is never
        // mistaken for a finished one.
        let meta_path = sidecar(&outputs[0]);
        if meta_path.exists() {
            fs::remove_file(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        }
        log::info!("{name}: running");
        let t = Instant::now();
        exec()?;
        Meta::new(name, key.clone(), outputs, &self.layout.root)?.write(&meta_path)?;
        log::info!("{name}: done in {:.1}s", t.elapsed().as_secs_f64());
        Ok(())
    }

    /// Executes the whole chain, reusing current artifacts.
    pub fn run(&self) -> Result<RunSummary> {
        let keys = self.keys();
        let mut dirty = false;
        let mut log = Vec::new();
        for s in StageId::ALL {
            let outputs = self.layout.outputs(s);
            self.step(
                s.name(),
                &keys[s.index()],
                &outputs,
                &mut dirty,
                &mut log,
                || self.exec(s),
            )?;
        }
        let summary: EvalSummary = read_json(&self.layout.report.join(EVAL_SUMMARY_FILE))?;
        Ok(RunSummary {
            stages: log,
            report: summary.metrics,
        })
    }

    /// Runs one stage after checking that everything upstream is current.
    pub fn run_stage(&self, stage: StageId) -> Result<()> {
        let keys = self.keys();
        for s in &StageId::ALL[..stage.index()] {
            self.require(*s, &keys[s.index()])?;
        }
        self.execute(
            stage.name(),
            &keys[stage.index()],
            &self.layout.outputs(stage),
            || self.exec(stage),
        )
    }

    fn require(&self, s: StageId, key: &Value) -> Result<()> {
        match self.status_of(&self.layout.outputs(s), key)? {
            Status::Valid => Ok(()),
            Status::Stale(diff) => Err(Error::HashMismatch {
                stage: s.name().to_string(),
                diff,
            }),
            Status::Missing => Err(Error::InvalidArgument(format!(
                "artifacts of stage `{s}` are missing; run `georewrite {s}` first"
            ))),
            Status::Modified => Err(Error::InvalidArgument(format!(
                "artifacts of stage `{s}` were modified after they were written; rerun `georewrite {s}`"
            ))),
        }
    }

    /// Checks the sidecar of an artifact supplied by path against the stage
    /// that wrote it.
    pub fn verify_artifact(&self, artifact: &Path) -> Result<()> {
        let Some(meta) = Meta::read(&sidecar(artifact))? else {
            log::warn!(
                "{} has no sidecar; cannot verify its config hash",
                artifact.display()
            );
            return Ok(());
        };
        let Some(stage) = StageId::ALL.into_iter().find(|s| s.name() == meta.stage) else {
            log::warn!(
                "{} comes from stage `{}`; not verified",
                artifact.display(),
                meta.stage
            );
            return Ok(());
        };
        let key = &self.keys()[stage.index()];
        if meta.hash != hash_value(key) {
            return Err(Error::HashMismatch {
                stage: stage.name().to_string(),
                diff: json_diff(&meta.key, key),
            });
        }
        Ok(())
    }

    fn exec(&self, stage: StageId) -> Result<()> {
        let l = &self.layout;
        match stage {
            StageId::World => self.exec_world(&l.world),
            StageId::Data => self.exec_data(),
            StageId::Embedder => self.exec_embedder(),
            StageId::Index => self.exec_index(),
            StageId::Sft => self.exec_sft(&self.load_inputs()?, true, &l.policy, &l.sft_report),
            StageId::Align => {
                let inputs = self.load_inputs()?;
                let policy = PolicyModel::<f32>::from_checkpoint(&load_checkpoint(&l.policy)?)?;
                self.exec_align(&inputs, policy, true, &AlignOutputs::of(l))
            }
            StageId::Eval => {
                let inputs = self.load_inputs()?;
                self.exec_eval(&inputs, &l.aligned, true, "full", true, &l.report)
                    .map(|_| ())
            }
        }
    }

    fn exec_world(&self, out: &Path) -> Result<()> {
        let world = World::generate(&self.cfg.world_params())?;
        log::info!(
            "world: {} records, {} stations",
            world.records.len(),
            world.stations.len()
        );
        world.save(out)
    }

    fn exec_data(&self) -> Result<()> {
        let world = World::load(&self.layout.world)?;
        let bundle = DatasetBundle::generate(&world, &self.cfg.data, self.cfg.stage_seed("data"))?;
        reset(&self.layout.data)?;
        bundle.save(&self.layout.data)
    }

    fn exec_embedder(&self) -> Result<()> {
        let world = World::load(&self.layout.world)?;
        let bundle = DatasetBundle::load(&self.layout.data)?;
        let mut enc = fresh_encoder(
            self.cfg.encoder.clone(),
            &world,
            self.cfg.stage_seed("encoder-init"),
        )?;
        let report = enc.train_geocoding(
            &world.lexicon,
            &bundle.geocoding,
            &self.cfg.embedder,
            &mut stage_rng(self.cfg.seed, "encoder-train"),
        )?;
        log::info!(
            "embedder: loss {:.4} -> {:.4}",
            report.initial_loss,
            report.final_loss
        );
        save_checkpoint(&self.layout.encoder, &enc.to_checkpoint())?;
        write_json(&self.layout.embedder_report, &report)
    }

    fn exec_index(&self) -> Result<()> {
        let world = World::load(&self.layout.world)?;
        let enc = SpatialEncoder::from_checkpoint(&load_checkpoint(&self.layout.encoder)?)?;
        Retriever::build(&world, enc)?.save(&self.layout.index)
    }

    fn load_inputs(&self) -> Result<Inputs> {
        let world = World::load(&self.layout.world)?;
        let bundle = DatasetBundle::load(&self.layout.data)?;
        let retriever = Retriever::load(&self.layout.index)?;
        let exemplars = exemplars(&bundle.rewriting, self.cfg.retrieval.exemplars);
        Ok(Inputs {
            world,
            bundle,
            retriever,
            exemplars,
        })
    }

    fn init_policy(&self, world: &World) -> Result<PolicyModel<f32>> {
        PolicyModel::new(
            self.cfg.policy.clone(),
            &world.lexicon,
            &mut stage_rng(self.cfg.seed, "policy-init"),
        )
    }

    fn exec_sft(&self, inputs: &Inputs, rag: bool, out: &Path, report_path: &Path) -> Result<()> {
        let ctx = inputs.ctx(&self.cfg, rag);
        let (examples, skipped) =
            build_sft_examples(&ctx, &inputs.bundle.sft_mixture(), self.cfg.policy.max_len)?;
        if skipped > 0 {
            log::warn!("sft: {skipped} samples exceed the context limit and were skipped");
        }
        let mut policy = self.init_policy(&inputs.world)?;
        let report = sft_train(
            &mut policy,
            &examples,
            &self.cfg.sft,
            &mut stage_rng(self.cfg.seed, "sft"),
        )?;
        log::info!(
            "sft: {} steps, loss {:.4} -> {:.4}",
            report.steps,
            report.window_mean(0.05, false),
            report.window_mean(0.05, true)
        );
        save_checkpoint(out, &policy.to_checkpoint())?;
        write_json(
            report_path,
            &json!({ "steps": report.steps, "examples": report.examples, "skipped": skipped, "step_losses": report.step_losses }),
        )
    }

    fn exec_align(
        &self,
        inputs: &Inputs,
        mut policy: PolicyModel<f32>,
        rag: bool,
        out: &AlignOutputs,
    ) -> Result<()> {
        let ctx = inputs.ctx(&self.cfg, rag);
        let mut value = ValueModel::from_policy(&policy);
        let reward = RewardFn::new(&inputs.world, self.cfg.reward.clone())?;
        let report = align(
            &mut policy,
            &mut value,
            &inputs.bundle.oa,
            &inputs.bundle.oa_heldout,
            &ctx,
            &reward,
            &self.cfg.ppo,
            &mut stage_rng(self.cfg.seed, "align"),
        )?;
        log::info!(
            "align: held-out reward {:.4} -> {:.4}",
            report.initial_heldout_reward,
            report.final_heldout_reward()
        );
        save_checkpoint(&out.aligned, &policy.to_checkpoint())?;
        save_checkpoint(&out.value, &value.to_checkpoint())?;
        report.write_csv(&out.csv)?;
        write_json(&out.report, &report)
    }

    fn exec_eval(
        &self,
        inputs: &Inputs,
        policy_path: &Path,
        rag: bool,
        variant: &str,
        correlation: bool,
        out: &Path,
    ) -> Result<EvalSummary> {
        let policy = PolicyModel::<f32>::from_checkpoint(&load_checkpoint(policy_path)?)?;
        let ctx = inputs.ctx(&self.cfg, rag);
        let tests = limit_tests(&inputs.bundle.tests, self.cfg.eval.limit);
        let rewriter = PolicyRewriter {
            policy: &policy,
            ctx,
        };
        let metrics = evaluate(variant, &rewriter, &tests, &inputs.world)?;
        let related = tests
            .geocoding
            .iter()
            .map(|s| rewriter.prompt(s).map(|p| p.related_count()))
            .sum::<Result<usize>>()? as f64
            / tests.geocoding.len() as f64;
        let (corr, untrained) = if correlation {
            let n = self.cfg.eval.correlation_pairs;
            let trained = correlation_report(
                &inputs.retriever.encoder,
                &inputs.world,
                n,
                &mut stage_rng(self.cfg.seed, "correlation"),
            )?;
            let fresh = fresh_encoder(
                self.cfg.encoder.clone(),
                &inputs.world,
                self.cfg.stage_seed("encoder-init"),
            )?;
            let control = correlation_report(
                &fresh,
                &inputs.world,
                n,
                &mut stage_rng(self.cfg.seed, "correlation"),
            )?;
            (Some(trained), Some(control.r2))
        } else {
            (None, None)
        };
        reset(out)?;
        emit_report(std::slice::from_ref(&metrics), corr.as_ref(), out)?;
        let summary = EvalSummary {
            metrics,
            correlation_r2: corr.as_ref().map(|c| c.r2),
            untrained_correlation_r2: untrained,
            policy_checksum: crate::artifacts::sha256_file(policy_path)?,
            related_per_rewriting_prompt: related,
        };
        write_json(&out.join(EVAL_SUMMARY_FILE), &summary)?;
        log::info!(
            "eval ({variant}):\n{}",
            format_table(std::slice::from_ref(&summary.metrics))
        );
        Ok(summary)
    }

    /// Evaluates a policy checkpoint given by explicit paths.
    pub fn eval_paths(&self, paths: &EvalPaths, rag: bool) -> Result<EvalSummary> {
        let world = World::load(&paths.world)?;
        let bundle = DatasetBundle::load(&paths.data)?;
        let retriever = Retriever::load(&paths.index)?;
        let exemplars = exemplars(&bundle.rewriting, self.cfg.retrieval.exemplars);
        let inputs = Inputs {
            world,
            bundle,
            retriever,
            exemplars,
        };
        self.exec_eval(&inputs, &paths.policy, rag, "full", true, &paths.out)
    }

    /// Writes a world to an explicit path with its sidecar.
    pub fn world_to(&self, out: &Path) -> Result<()> {
        let key = &self.keys()[StageId::World.index()];
        self.execute(StageId::World.name(), key, &[out.to_path_buf()], || {
            self.exec_world(out)
        })
    }

    /// Ablation rows next to the full pipeline, each cached like a stage.
    pub fn ablate(&self, drops: &[Drop]) -> Result<(Vec<EvalSummary>, Vec<(String, Outcome)>)> {
        let keys = self.keys();
        for s in StageId::ALL {
            self.require(s, &keys[s.index()])?;
        }
        let hash = |s: StageId| hash_value(&keys[s.index()]);
        let inputs = self.load_inputs()?;
        let mut rows: Vec<EvalSummary> =
            vec![read_json(&self.layout.report.join(EVAL_SUMMARY_FILE))?];
        let mut log = Vec::new();
        let mut drops = drops.to_vec();
        drops.sort();
        drops.dedup();
        for d in drops {
            let dir = self.layout.ablation_dir().join(d.slug());
            let report_dir = dir.join("report");
            let eval_key = |upstream: &str| json!({ "pipeline": PIPELINE_VERSION, "stage": format!("ablate/{}/eval", d.slug()), "upstream": upstream, "config": self.slice(StageId::Eval) });
            let mut dirty = false;
            let evaluated = match d {
                Drop::Oa => {
                    let key = eval_key(&hash(StageId::Sft));
                    self.step(
                        &format!("ablate/{}/eval", d.slug()),
                        &key,
                        std::slice::from_ref(&report_dir),
                        &mut dirty,
                        &mut log,
                        || {
                            self.exec_eval(
                                &inputs,
                                &self.layout.policy,
                                true,
                                d.variant(),
                                false,
                                &report_dir,
                            )
                            .map(|_| ())
                        },
                    )?;
                    report_dir
                }
                Drop::Sft | Drop::Rag => {
                    let rag = d != Drop::Rag;
                    let mut upstream = hash(StageId::Index);
                    let policy = dir.join("policy.ckpt");
                    if d == Drop::Rag {
                        let key = json!({ "pipeline": PIPELINE_VERSION, "stage": "ablate/wo_rag/sft", "upstream": upstream, "rag": false, "config": self.slice(StageId::Sft) });
                        let report = dir.join("sft.json");
                        self.step(
                            "ablate/wo_rag/sft",
                            &key,
                            &[policy.clone(), report.clone()],
                            &mut dirty,
                            &mut log,
                            || self.exec_sft(&inputs, false, &policy, &report),
                        )?;
                        upstream = hash_value(&key);
                    }
                    let out = AlignOutputs::in_dir(&dir);
                    let stage = format!("ablate/{}/align", d.slug());
                    let key = json!({
                        "pipeline": PIPELINE_VERSION,
                        "stage": stage,
                        "upstream": upstream,
                        "rag": rag,
                        "init": if d == Drop::Sft { "random" } else { "sft" },
                        "config": { "policy": self.cfg.policy, "retrieval": self.cfg.retrieval, "align": self.slice(StageId::Align) },
                    });
                    self.step(&stage, &key, &out.list(), &mut dirty, &mut log, || {
                        let start = if d == Drop::Sft {
                            self.init_policy(&inputs.world)?
                        } else {
                            PolicyModel::from_checkpoint(&load_checkpoint(&policy)?)?
                        };
                        self.exec_align(&inputs, start, rag, &out)
                    })?;
                    let key = eval_key(&hash_value(&key));
                    self.step(
                        &format!("ablate/{}/eval", d.slug()),
                        &key,
                        std::slice::from_ref(&report_dir),
                        &mut dirty,
                        &mut log,
                        || {
                            self.exec_eval(
                                &inputs,
                                &out.aligned,
                                rag,
                                d.variant(),
                                false,
                                &report_dir,
                            )
                            .map(|_| ())
                        },
                    )?;
                    report_dir
                }
            };
            rows.push(read_json(&evaluated.join(EVAL_SUMMARY_FILE))?);
        }
        let dir = self.layout.ablation_dir();
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let metrics: Vec<MetricsReport> = rows.iter().map(|r| r.metrics.clone()).collect();
        write_metrics_csv(&metrics, &dir.join("metrics.csv"))?;
        let svg = dir.join("metrics.svg");
        fs::write(&svg, metrics_svg(&metrics)).map_err(|e| Error::io(&svg, e))?;
        Ok((rows, log))
    }
}

/// Output files of an alignment run.
pub struct AlignOutputs {
    pub aligned: PathBuf,
    pub value: PathBuf,
    pub csv: PathBuf,
    pub report: PathBuf,
}

impl AlignOutputs {
    fn of(l: &Layout) -> Self {
        AlignOutputs {
            aligned: l.aligned.clone(),
            value: l.value.clone(),
            csv: l.align_csv.clone(),
            report: l.align_report.clone(),
        }
    }

    fn in_dir(dir: &Path) -> Self {
        AlignOutputs {
            aligned: dir.join("aligned.ckpt"),
            value: dir.join("value.ckpt"),
            csv: dir.join("align.csv"),
            report: dir.join("align.json"),
        }
    }

    fn list(&self) -> Vec<PathBuf> {
        vec![
            self.aligned.clone(),
            self.value.clone(),
            self.csv.clone(),
            self.report.clone(),
        ]
    }
}

/// Explicit inputs of a standalone evaluation.
#[derive(Debug, Clone)]
pub struct EvalPaths {
    pub world: PathBuf,
    pub data: PathBuf,
    pub index: PathBuf,
    pub policy: PathBuf,
    pub out: PathBuf,
}
