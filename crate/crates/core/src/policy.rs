//! Small decoder-only transformer over the world lexicon: prompt formatting,
//! supervised fine-tuning, sampling with a key/value cache, and
//! teacher-forced log-probabilities.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::address::{Control, HierarchyTier, Lexicon, TokenId};
use crate::datasets::{RewriteSample, Task};
use crate::error::{Error, Result};
use crate::nn::{
    clip_global_norm, AdamW, AdamWConfig, Checkpoint, Matrix, ParamStore, Scalar, Segment, Tape,
    Var,
};
use crate::retriever::Retriever;
use crate::world::World;

pub const NUM_SEGMENTS: usize = 16;
const SEG_TASK: u8 = 0;
const SEG_ADDRESS: u8 = 1;
const SEG_HIERARCHY: u8 = 2;
const SEG_EXAMPLES: u8 = 3;
const SEG_RELATED: u8 = 4;
const SEG_FIRST_ITEM: u8 = 5;
const SEG_OUTPUT: u8 = 15;
const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub d_ff: usize,
    /// Context limit L over prompt plus output.
    pub max_len: usize,
    /// Positions are counted from the start of each prompt field and
    /// clamped to this many distinct values.
    pub max_positions: usize,
    pub max_new_tokens: usize,
    pub init_std: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            d_model: 64,
            layers: 2,
            heads: 4,
            d_ff: 128,
            max_len: 256,
            max_positions: 64,
            max_new_tokens: 32,
            init_std: 0.05,
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config("heads must divide d_model".into()));
        }
        if self.layers == 0 || self.d_ff == 0 || self.max_positions == 0 {
            return Err(Error::Config(
                "layers, d_ff and max_positions must be >= 1".into(),
            ));
        }
        if self.max_len < 2 || self.max_new_tokens == 0 {
            return Err(Error::Config(
                "max_len must be >= 2 and max_new_tokens >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Field map of a prompt. `related` is `Some` exactly for rewriting prompts;
/// an empty list is the no-retrieval variant.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PromptFields {
    pub address: String,
    pub examples: Vec<(String, String)>,
    pub related: Option<Vec<String>>,
}

/// Serialized prompt ending with the `<output>` delimiter.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Prompt {
    pub task: Task,
    pub tokens: Vec<TokenId>,
    pub segments: Vec<u8>,
    pub positions: Vec<u16>,
}

impl Prompt {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Number of retrieved addresses embedded in the prompt.
    pub fn related_count(&self) -> usize {
        self.tokens
            .iter()
            .zip(&self.segments)
            .filter(|(&t, &s)| t == Control::Item.id() && (SEG_FIRST_ITEM..SEG_OUTPUT).contains(&s))
            .count()
    }

    /// Position id of the `j`-th generated token.
    fn output_position(&self, j: usize, max_positions: usize) -> u16 {
        (1 + j).min(max_positions - 1) as u16
    }
}

fn task_token(task: Task) -> TokenId {
    match task {
        Task::Parsing => Control::TaskParse.id(),
        Task::Aep => Control::TaskAep.id(),
        Task::Rewriting => Control::TaskRewrite.id(),
    }
}

struct PromptBuilder {
    tokens: Vec<TokenId>,
    segments: Vec<u8>,
    positions: Vec<u16>,
    seg: u8,
    pos: usize,
    max_positions: usize,
}

impl PromptBuilder {
    fn open(&mut self, seg: u8, delimiter: TokenId) {
        self.seg = seg;
        self.pos = 0;
        self.push(delimiter);
    }

    fn push(&mut self, token: TokenId) {
        self.tokens.push(token);
        self.segments.push(self.seg);
        self.positions
            .push(self.pos.min(self.max_positions - 1) as u16);
        self.pos += 1;
    }

    fn extend(&mut self, tokens: &[TokenId]) {
        for &t in tokens {
            self.push(t);
        }
    }
}

/// Deterministic serialization:
/// `task <address> x <hierarchy> [1]..[6] [<examples> (<item> x <arrow> y)*]
/// [<related> (<item> r)*] <output>`.
pub fn format_prompt(
    lexicon: &Lexicon,
    task: Task,
    fields: &PromptFields,
    max_positions: usize,
) -> Result<Prompt> {
    if fields.address.is_empty() {
        return Err(Error::InvalidArgument(
            "prompt needs a non-empty address".into(),
        ));
    }
    match (task, &fields.related) {
        (Task::Rewriting, None) => {
            return Err(Error::InvalidArgument(
                "rewriting prompt needs a related-addresses field".into(),
            ))
        }
        (Task::Parsing | Task::Aep, Some(_)) => {
            return Err(Error::InvalidArgument(
                "related addresses are only allowed in rewriting prompts".into(),
            ))
        }
        _ => {}
    }
    let mut b = PromptBuilder {
        tokens: Vec::new(),
        segments: Vec::new(),
        positions: Vec::new(),
        seg: SEG_TASK,
        pos: 0,
        max_positions: max_positions.max(1),
    };
    b.push(task_token(task));
    b.open(SEG_ADDRESS, Control::Address.id());
    b.extend(&lexicon.tokenize(&fields.address).tokens);
    b.open(SEG_HIERARCHY, Control::Hierarchy.id());
    for tier in HierarchyTier::all() {
        b.push(lexicon.tier_label_id(tier));
    }
    if !fields.examples.is_empty() {
        b.open(SEG_EXAMPLES, Control::Examples.id());
        for (x, y) in &fields.examples {
            b.push(Control::Item.id());
            b.extend(&lexicon.tokenize(x).tokens);
            b.push(Control::Arrow.id());
            b.extend(&lexicon.tokenize(y).tokens);
        }
    }
    if let Some(related) = &fields.related {
        b.open(SEG_RELATED, Control::Related.id());
        for (i, r) in related.iter().enumerate() {
            let seg = SEG_FIRST_ITEM + (i.min((SEG_OUTPUT - SEG_FIRST_ITEM - 1) as usize)) as u8;
            b.open(seg, Control::Item.id());
            b.extend(&lexicon.tokenize(r).tokens);
        }
    }
    b.open(SEG_OUTPUT, Control::Output.id());
    Ok(Prompt {
        task,
        tokens: b.tokens,
        segments: b.segments,
        positions: b.positions,
    })
}

/// Target tokens followed by `<end>`.
pub fn target_tokens(lexicon: &Lexicon, text: &str) -> Vec<TokenId> {
    let mut t = lexicon.tokenize(text).tokens;
    t.push(Control::End.id());
    t
}

/// Supplies prompts for samples: optional retrieval and fixed exemplars.
#[derive(Debug, Clone, Copy)]
pub struct PromptContext<'a> {
    pub world: &'a World,
    /// `None` formats rewriting prompts with an empty related field.
    pub retriever: Option<&'a Retriever>,
    pub top_k: usize,
    pub examples: &'a [(String, String)],
    pub max_positions: usize,
}

impl<'a> PromptContext<'a> {
    pub fn related_for(&self, query: &str) -> Result<Vec<String>> {
        match self.retriever {
            None => Ok(Vec::new()),
            Some(r) => Ok(r
                .retrieve(&self.world.lexicon, query, self.top_k)?
                .into_iter()
                .map(|h| self.world.record(h.record_id).canonical_text.clone())
                .collect()),
        }
    }

    pub fn prompt(&self, task: Task, input: &str) -> Result<Prompt> {
        let related = match task {
            Task::Rewriting => Some(self.related_for(input)?),
            _ => None,
        };
        let fields = PromptFields {
            address: input.to_string(),
            examples: if task == Task::Rewriting {
                self.examples.to_vec()
            } else {
                Vec::new()
            },
            related,
        };
        format_prompt(&self.world.lexicon, task, &fields, self.max_positions)
    }
}

/// One prompt with its teacher-forced output.
#[derive(Debug, Clone, PartialEq)]
pub struct SftExample {
    pub prompt: Prompt,
    pub output: Vec<TokenId>,
}

/// Formats supervised samples, dropping those that would exceed the
/// context limit. Returns the examples and the number skipped.
pub fn build_sft_examples(
    ctx: &PromptContext,
    samples: &[RewriteSample],
    max_len: usize,
) -> Result<(Vec<SftExample>, usize)> {
    let mut out = Vec::with_capacity(samples.len());
    let mut skipped = 0;
    for s in samples {
        let target = s
            .target_text
            .as_deref()
            .ok_or_else(|| Error::InvalidArgument("supervised sample without target".into()))?;
        let prompt = ctx.prompt(s.task, &s.input_text)?;
        let output = target_tokens(&ctx.world.lexicon, target);
        if prompt.len() + output.len() > max_len {
            skipped += 1;
            continue;
        }
        out.push(SftExample { prompt, output });
    }
    if skipped > 0 {
        log::warn!("skipped {skipped} samples longer than the context limit {max_len}");
    }
    Ok((out, skipped))
}

/// A packed batch of `(prompt, output)` sequences. Each sequence holds the
/// prompt and every output token but the last, so row
/// `start + prompt_len - 1 + t` predicts output token `t`.
#[derive(Debug, Clone)]
pub struct Packed {
    tokens: Vec<u32>,
    positions: Vec<u32>,
    segment_ids: Vec<u32>,
    segs: Vec<Segment>,
    /// For each item, the rows predicting its output tokens.
    pub rows: Vec<Vec<usize>>,
}

impl Packed {
    pub fn new(items: &[(&Prompt, &[TokenId])], max_positions: usize) -> Self {
        let mut p = Packed {
            tokens: Vec::new(),
            positions: Vec::new(),
            segment_ids: Vec::new(),
            segs: Vec::new(),
            rows: Vec::new(),
        };
        for (prompt, output) in items {
            let start = p.tokens.len();
            p.tokens.extend(&prompt.tokens);
            p.positions
                .extend(prompt.positions.iter().map(|&x| x as u32));
            p.segment_ids
                .extend(prompt.segments.iter().map(|&x| x as u32));
            for (j, &tok) in output
                .iter()
                .take(output.len().saturating_sub(1))
                .enumerate()
            {
                p.tokens.push(tok);
                p.positions
                    .push(prompt.output_position(j, max_positions) as u32);
                p.segment_ids.push(SEG_OUTPUT as u32);
            }
            let len = p.tokens.len() - start;
            p.segs.push(Segment { start, len });
            let first = start + prompt.len() - 1;
            p.rows.push((0..output.len()).map(|t| first + t).collect());
        }
        p
    }

    fn flat_rows(&self) -> Vec<usize> {
        self.rows.iter().flatten().copied().collect()
    }
}

#[derive(Debug, Clone, Copy)]
struct LayerIds {
    ln1_g: usize,
    ln1_b: usize,
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
    ln2_g: usize,
    ln2_b: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Debug, Clone)]
struct TrunkIds {
    tok: usize,
    pos: usize,
    seg: usize,
    layers: Vec<LayerIds>,
    lnf_g: usize,
    lnf_b: usize,
}

impl TrunkIds {
    fn lookup<S: Scalar>(store: &ParamStore<S>, cfg: &PolicyConfig) -> Result<Self> {
        let id = |name: String| {
            store
                .id_of(&name)
                .ok_or_else(|| Error::InvalidArgument(format!("checkpoint lacks parameter {name}")))
        };
        let mut layers = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let p = |s: &str| id(format!("layer{l}.{s}"));
            layers.push(LayerIds {
                ln1_g: p("ln1.g")?,
                ln1_b: p("ln1.b")?,
                wq: p("wq")?,
                wk: p("wk")?,
                wv: p("wv")?,
                wo: p("wo")?,
                ln2_g: p("ln2.g")?,
                ln2_b: p("ln2.b")?,
                w1: p("ff.w1")?,
                b1: p("ff.b1")?,
                w2: p("ff.w2")?,
                b2: p("ff.b2")?,
            });
        }
        Ok(TrunkIds {
            tok: id("tok_emb".into())?,
            pos: id("pos_emb".into())?,
            seg: id("seg_emb".into())?,
            layers,
            lnf_g: id("lnf.g".into())?,
            lnf_b: id("lnf.b".into())?,
        })
    }
}

fn init_trunk<S: Scalar>(cfg: &PolicyConfig, vocab: usize, rng: &mut impl Rng) -> ParamStore<S> {
    let (d, std) = (cfg.d_model, cfg.init_std);
    let mut s = ParamStore::new();
    s.add("tok_emb", Matrix::randn(vocab, d, std, rng));
    s.add("pos_emb", Matrix::randn(cfg.max_positions, d, std, rng));
    s.add("seg_emb", Matrix::randn(NUM_SEGMENTS, d, std, rng));
    // Residual branch outputs are scaled down with depth.
    let out_std = std / (2.0 * cfg.layers as f64).sqrt();
    for l in 0..cfg.layers {
        s.add(format!("layer{l}.ln1.g"), Matrix::filled(1, d, S::one()));
        s.add(format!("layer{l}.ln1.b"), Matrix::zeros(1, d));
        s.add(format!("layer{l}.wq"), Matrix::randn(d, d, std, rng));
        s.add(format!("layer{l}.wk"), Matrix::randn(d, d, std, rng));
        s.add(format!("layer{l}.wv"), Matrix::randn(d, d, std, rng));
        s.add(format!("layer{l}.wo"), Matrix::randn(d, d, out_std, rng));
        s.add(format!("layer{l}.ln2.g"), Matrix::filled(1, d, S::one()));
        s.add(format!("layer{l}.ln2.b"), Matrix::zeros(1, d));
        s.add(
            format!("layer{l}.ff.w1"),
            Matrix::randn(d, cfg.d_ff, std, rng),
        );
        s.add(format!("layer{l}.ff.b1"), Matrix::zeros(1, cfg.d_ff));
        s.add(
            format!("layer{l}.ff.w2"),
            Matrix::randn(cfg.d_ff, d, out_std, rng),
        );
        s.add(format!("layer{l}.ff.b2"), Matrix::zeros(1, d));
    }
    s.add("lnf.g", Matrix::filled(1, d, S::one()));
    s.add("lnf.b", Matrix::zeros(1, d));
    s
}

/// Final hidden states for every packed row. When `kv` is given, the key and
/// value projections of each layer are appended to it.
fn trunk_on_tape<S: Scalar>(
    tape: &mut Tape<'_, S>,
    cfg: &PolicyConfig,
    ids: &TrunkIds,
    batch: &Packed,
    mut kv: Option<&mut Vec<(Var, Var)>>,
) -> Var {
    let tok = tape.param(ids.tok);
    let pos = tape.param(ids.pos);
    let seg = tape.param(ids.seg);
    let a = tape.gather(tok, &batch.tokens);
    let b = tape.gather(pos, &batch.positions);
    let c = tape.gather(seg, &batch.segment_ids);
    let ab = tape.add(a, b);
    let mut x = tape.add(ab, c);
    for l in &ids.layers {
        let (g, bb) = (tape.param(l.ln1_g), tape.param(l.ln1_b));
        let h = tape.layer_norm(x, g, bb);
        let (wq, wk, wv, wo) = (
            tape.param(l.wq),
            tape.param(l.wk),
            tape.param(l.wv),
            tape.param(l.wo),
        );
        let q = tape.matmul(h, wq);
        let k = tape.matmul(h, wk);
        let v = tape.matmul(h, wv);
        if let Some(kv) = kv.as_deref_mut() {
            kv.push((k, v));
        }
        let att = tape.causal_attention(q, k, v, cfg.heads, &batch.segs);
        let proj = tape.matmul(att, wo);
        x = tape.add(x, proj);
        let (g, bb) = (tape.param(l.ln2_g), tape.param(l.ln2_b));
        let h = tape.layer_norm(x, g, bb);
        let (w1, b1, w2, b2) = (
            tape.param(l.w1),
            tape.param(l.b1),
            tape.param(l.w2),
            tape.param(l.b2),
        );
        let f = tape.linear(h, w1, b1);
        let f = tape.gelu(f);
        let f = tape.linear(f, w2, b2);
        x = tape.add(x, f);
    }
    let (g, bb) = (tape.param(ids.lnf_g), tape.param(ids.lnf_b));
    tape.layer_norm(x, g, bb)
}

fn layer_norm_row<S: Scalar>(x: &[S], g: &[S], b: &[S]) -> Vec<S> {
    let n = S::of(x.len() as f64);
    let mean = x.iter().copied().sum::<S>() / n;
    let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / n;
    let rs = S::one() / (var + S::of(LN_EPS)).sqrt();
    x.iter()
        .zip(g.iter().zip(b))
        .map(|(&v, (&gi, &bi))| (v - mean) * rs * gi + bi)
        .collect()
}

fn vec_mat<S: Scalar>(x: &[S], w: &Matrix<S>) -> Vec<S> {
    let mut out = vec![S::zero(); w.cols];
    for (i, &xi) in x.iter().enumerate() {
        for (o, &wij) in out.iter_mut().zip(w.row(i)) {
            *o += xi * wij;
        }
    }
    out
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
    logits.iter().map(|&z| z - lse).collect()
}

/// Index of the largest value, ties to the lowest index.
fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SampleMode {
    Greedy,
    Sample { temperature: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    pub tokens: Vec<TokenId>,
    /// Log-probability of each token under the untempered policy.
    pub logprobs: Vec<f64>,
    /// The length budget ran out before `<end>`.
    pub truncated: bool,
}

/// Key/value cache for incremental decoding of a single sequence.
struct KvCache<S> {
    keys: Vec<Vec<S>>,
    values: Vec<Vec<S>>,
    len: usize,
}

#[derive(Debug, Clone)]
pub struct PolicyModel<S: Scalar> {
    pub cfg: PolicyConfig,
    pub vocab_size: usize,
    pub vocab_fingerprint: String,
    pub params: ParamStore<S>,
    trunk: TrunkIds,
    w_out: usize,
    b_out: usize,
}

impl<S: Scalar> PolicyModel<S> {
    /// Random trunk and a zero output projection, so the initial next-token
    /// distribution is uniform.
    pub fn new(cfg: PolicyConfig, lexicon: &Lexicon, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let vocab = lexicon.len();
        let mut params = init_trunk::<S>(&cfg, vocab, rng);
        params.add("out.w", Matrix::zeros(cfg.d_model, vocab));
        params.add("out.b", Matrix::zeros(1, vocab));
        Self::assemble(cfg, vocab, lexicon.fingerprint(), params)
    }

    fn assemble(
        cfg: PolicyConfig,
        vocab_size: usize,
        vocab_fingerprint: String,
        params: ParamStore<S>,
    ) -> Result<Self> {
        let trunk = TrunkIds::lookup(&params, &cfg)?;
        let w_out = params
            .id_of("out.w")
            .ok_or_else(|| Error::InvalidArgument("missing out.w".into()))?;
        let b_out = params
            .id_of("out.b")
            .ok_or_else(|| Error::InvalidArgument("missing out.b".into()))?;
        if params.get(trunk.tok).rows != vocab_size || params.get(w_out).cols != vocab_size {
            return Err(Error::InvalidArgument(
                "vocabulary size does not match parameters".into(),
            ));
        }
        Ok(PolicyModel {
            cfg,
            vocab_size,
            vocab_fingerprint,
            params,
            trunk,
            w_out,
            b_out,
        })
    }

    pub fn cast<T: Scalar>(&self) -> PolicyModel<T> {
        PolicyModel {
            cfg: self.cfg.clone(),
            vocab_size: self.vocab_size,
            vocab_fingerprint: self.vocab_fingerprint.clone(),
            params: self.params.cast(),
            trunk: self.trunk.clone(),
            w_out: self.w_out,
            b_out: self.b_out,
        }
    }

    pub fn check_lexicon(&self, lexicon: &Lexicon) -> Result<()> {
        if lexicon.fingerprint() != self.vocab_fingerprint {
            return Err(Error::InvalidArgument(
                "policy was trained on a different vocabulary".into(),
            ));
        }
        Ok(())
    }

    fn check_tokens(&self, tokens: &[TokenId]) -> Result<()> {
        match tokens.iter().find(|&&t| t as usize >= self.vocab_size) {
            Some(t) => Err(Error::InvalidArgument(format!(
                "token id {t} outside vocabulary of {}",
                self.vocab_size
            ))),
            None => Ok(()),
        }
    }

    fn check_lengths(&self, items: &[(&Prompt, &[TokenId])]) -> Result<()> {
        for (p, o) in items {
            self.check_tokens(&p.tokens)?;
            self.check_tokens(o)?;
            if o.is_empty() {
                return Err(Error::InvalidArgument(
                    "output must contain at least one token".into(),
                ));
            }
            if p.len() + o.len() > self.cfg.max_len {
                return Err(Error::InvalidArgument(format!(
                    "sequence of {} tokens exceeds the context limit {}",
                    p.len() + o.len(),
                    self.cfg.max_len
                )));
            }
        }
        Ok(())
    }

    pub fn pack(&self, items: &[(&Prompt, &[TokenId])]) -> Packed {
        Packed::new(items, self.cfg.max_positions)
    }

    fn logits_on_tape(&self, tape: &mut Tape<'_, S>, batch: &Packed) -> Var {
        let h = trunk_on_tape(tape, &self.cfg, &self.trunk, batch, None);
        let h = tape.select_rows(h, &batch.flat_rows());
        let (w, b) = (tape.param(self.w_out), tape.param(self.b_out));
        tape.linear(h, w, b)
    }

    /// Output logits per item, one `T x V` matrix each.
    pub fn logits(&self, items: &[(&Prompt, &[TokenId])]) -> Result<Vec<Matrix<f64>>> {
        self.check_lengths(items)?;
        let mut out = Vec::with_capacity(items.len());
        for chunk in items.chunks(16) {
            let batch = self.pack(chunk);
            let mut tape = Tape::new(&self.params);
            let z = self.logits_on_tape(&mut tape, &batch);
            let zm = tape.value(z);
            let mut r = 0;
            for rows in &batch.rows {
                let mut m = Matrix::zeros(rows.len(), self.vocab_size);
                for t in 0..rows.len() {
                    for (o, &x) in m.row_mut(t).iter_mut().zip(zm.row(r)) {
                        *o = x.f64();
                    }
                    r += 1;
                }
                out.push(m);
            }
        }
        Ok(out)
    }

    /// Teacher-forced log-probability of each output token.
    pub fn logprob(&self, prompt: &Prompt, output: &[TokenId]) -> Result<Vec<f64>> {
        Ok(self.logprobs_batch(&[(prompt, output)])?.remove(0))
    }

    pub fn logprobs_batch(&self, items: &[(&Prompt, &[TokenId])]) -> Result<Vec<Vec<f64>>> {
        let logits = self.logits(items)?;
        Ok(logits
            .iter()
            .zip(items)
            .map(|(z, (_, out))| {
                out.iter()
                    .enumerate()
                    .map(|(t, &a)| log_softmax(z.row(t))[a as usize])
                    .collect()
            })
            .collect())
    }

    /// Runs a loss defined on output-row logits and back-propagates it.
    /// `per_row(item, t, logits)` returns the row's loss contribution and
    /// its gradient with respect to the logits.
    pub fn logits_loss(
        &self,
        items: &[(&Prompt, &[TokenId])],
        mut per_row: impl FnMut(usize, usize, &[f64]) -> (f64, Vec<f64>),
    ) -> Result<(f64, Vec<Matrix<S>>)> {
        self.check_lengths(items)?;
        let batch = self.pack(items);
        let mut tape = Tape::new(&self.params);
        let z = self.logits_on_tape(&mut tape, &batch);
        let zm = tape.value(z);
        let mut seed = Matrix::zeros(zm.rows, zm.cols);
        let mut loss = 0.0;
        let mut r = 0;
        let mut row = vec![0.0; self.vocab_size];
        for (i, rows) in batch.rows.iter().enumerate() {
            for t in 0..rows.len() {
                for (o, &x) in row.iter_mut().zip(zm.row(r)) {
                    *o = x.f64();
                }
                let (l, g) = per_row(i, t, &row);
                loss += l;
                for (s, gv) in seed.row_mut(r).iter_mut().zip(g) {
                    *s = S::of(gv);
                }
                r += 1;
            }
        }
        Ok((loss, tape.backward(z, seed)))
    }

    /// Mean per-token negative log-likelihood of the outputs.
    pub fn sft_loss(&self, items: &[(&Prompt, &[TokenId])]) -> Result<(f64, Vec<Matrix<S>>)> {
        let n: usize = items.iter().map(|(_, o)| o.len()).sum();
        let inv = 1.0 / n.max(1) as f64;
        self.logits_loss(items, |i, t, z| {
            let target = items[i].1[t] as usize;
            let lp = log_softmax(z);
            let grad = lp
                .iter()
                .enumerate()
                .map(|(j, &l)| inv * (l.exp() - if j == target { 1.0 } else { 0.0 }))
                .collect();
            (-lp[target] * inv, grad)
        })
    }

    fn prefill(&self, prompt: &Prompt) -> (KvCache<S>, Vec<f64>) {
        let batch = Packed {
            tokens: prompt.tokens.clone(),
            positions: prompt.positions.iter().map(|&x| x as u32).collect(),
            segment_ids: prompt.segments.iter().map(|&x| x as u32).collect(),
            segs: vec![Segment {
                start: 0,
                len: prompt.len(),
            }],
            rows: vec![vec![prompt.len() - 1]],
        };
        let mut tape = Tape::new(&self.params);
        let mut kv = Vec::new();
        let h = trunk_on_tape(&mut tape, &self.cfg, &self.trunk, &batch, Some(&mut kv));
        let last = tape.select_rows(h, &[prompt.len() - 1]);
        let (w, b) = (tape.param(self.w_out), tape.param(self.b_out));
        let z = tape.linear(last, w, b);
        let logits = tape.value(z).data.iter().map(|x| x.f64()).collect();
        let cache = KvCache {
            keys: kv
                .iter()
                .map(|(k, _)| tape.value(*k).data.clone())
                .collect(),
            values: kv
                .iter()
                .map(|(_, v)| tape.value(*v).data.clone())
                .collect(),
            len: prompt.len(),
        };
        (cache, logits)
    }

    /// Appends one token at the given position and returns next-token logits.
    fn step(&self, cache: &mut KvCache<S>, token: TokenId, position: u16) -> Vec<f64> {
        let (d, heads) = (self.cfg.d_model, self.cfg.heads);
        let dh = d / heads;
        let p = &self.params;
        let ids = &self.trunk;
        let mut x: Vec<S> = p
            .get(ids.tok)
            .row(token as usize)
            .iter()
            .zip(p.get(ids.pos).row(position as usize))
            .zip(p.get(ids.seg).row(SEG_OUTPUT as usize))
            .map(|((&a, &b), &c)| a + b + c)
            .collect();
        let scale = S::one() / S::of(dh as f64).sqrt();
        let n = cache.len + 1;
        for (li, l) in ids.layers.iter().enumerate() {
            let h = layer_norm_row(&x, &p.get(l.ln1_g).data, &p.get(l.ln1_b).data);
            let q = vec_mat(&h, p.get(l.wq));
            cache.keys[li].extend(vec_mat(&h, p.get(l.wk)));
            cache.values[li].extend(vec_mat(&h, p.get(l.wv)));
            let (keys, values) = (&cache.keys[li], &cache.values[li]);
            let mut att = vec![S::zero(); d];
            let mut w = vec![S::zero(); n];
            for hd in 0..heads {
                let qs = &q[hd * dh..(hd + 1) * dh];
                for (j, wj) in w.iter_mut().enumerate() {
                    let ks = &keys[j * d + hd * dh..j * d + (hd + 1) * dh];
                    *wj = qs.iter().zip(ks).map(|(&a, &b)| a * b).sum::<S>() * scale;
                }
                let max = w.iter().copied().fold(S::neg_infinity(), S::max);
                let mut sum = S::zero();
                for wj in w.iter_mut() {
                    *wj = (*wj - max).exp();
                    sum += *wj;
                }
                for (j, &wj) in w.iter().enumerate() {
                    let vs = &values[j * d + hd * dh..j * d + (hd + 1) * dh];
                    for (o, &v) in att[hd * dh..(hd + 1) * dh].iter_mut().zip(vs) {
                        *o += wj / sum * v;
                    }
                }
            }
            for (xi, o) in x.iter_mut().zip(vec_mat(&att, p.get(l.wo))) {
                *xi += o;
            }
            let h = layer_norm_row(&x, &p.get(l.ln2_g).data, &p.get(l.ln2_b).data);
            let mut f = vec_mat(&h, p.get(l.w1));
            for (fi, &b) in f.iter_mut().zip(&p.get(l.b1).data) {
                *fi = crate::nn::gelu(*fi + b);
            }
            let f = vec_mat(&f, p.get(l.w2));
            for ((xi, fi), &b) in x.iter_mut().zip(f).zip(&p.get(l.b2).data) {
                *xi += fi + b;
            }
        }
        cache.len = n;
        let h = layer_norm_row(&x, &p.get(ids.lnf_g).data, &p.get(ids.lnf_b).data);
        vec_mat(&h, p.get(self.w_out))
            .iter()
            .zip(&p.get(self.b_out).data)
            .map(|(&z, &b)| (z + b).f64())
            .collect()
    }

    /// Decodes until `<end>` or the length budget
    /// `min(max_new_tokens, max_len - prompt_len)`.
    pub fn generate(
        &self,
        prompt: &Prompt,
        mode: SampleMode,
        rng: &mut impl Rng,
    ) -> Result<Generation> {
        self.check_tokens(&prompt.tokens)?;
        if prompt.is_empty() || prompt.len() >= self.cfg.max_len {
            return Err(Error::InvalidArgument(format!(
                "prompt of {} tokens leaves no room under the context limit {}",
                prompt.len(),
                self.cfg.max_len
            )));
        }
        let budget = self.cfg.max_new_tokens.min(self.cfg.max_len - prompt.len());
        let (mut cache, mut logits) = self.prefill(prompt);
        let mut gen = Generation {
            tokens: Vec::new(),
            logprobs: Vec::new(),
            truncated: false,
        };
        loop {
            let lp = log_softmax(&logits);
            let a = match mode {
                SampleMode::Greedy => argmax(&logits),
                SampleMode::Sample { temperature } if temperature <= 0.0 => argmax(&logits),
                SampleMode::Sample { temperature } => {
                    let scaled: Vec<f64> = logits.iter().map(|z| z / temperature).collect();
                    sample_index(&log_softmax(&scaled), rng)
                }
            };
            gen.tokens.push(a as TokenId);
            gen.logprobs.push(lp[a]);
            if a as TokenId == Control::End.id() {
                break;
            }
            if gen.tokens.len() >= budget {
                gen.truncated = true;
                break;
            }
            let position = prompt.output_position(gen.tokens.len() - 1, self.cfg.max_positions);
            logits = self.step(&mut cache, a as TokenId, position);
        }
        Ok(gen)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            kind: "policy".into(),
            meta: serde_json::json!({
                "config": self.cfg,
                "vocab_size": self.vocab_size,
                "vocab_fingerprint": self.vocab_fingerprint,
            }),
            params: self.params.cast(),
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let (cfg, vocab_size, fp) = read_meta(ckpt, "policy")?;
        Self::assemble(cfg, vocab_size, fp, ckpt.params.cast())
    }
}

fn read_meta(ckpt: &Checkpoint, kind: &str) -> Result<(PolicyConfig, usize, String)> {
    if ckpt.kind != kind {
        return Err(Error::InvalidArgument(format!(
            "expected a {kind} checkpoint, found {}",
            ckpt.kind
        )));
    }
    let bad =
        |what: &str| Error::InvalidArgument(format!("{kind} checkpoint metadata lacks {what}"));
    let cfg: PolicyConfig = serde_json::from_value(
        ckpt.meta
            .get("config")
            .cloned()
            .ok_or_else(|| bad("config"))?,
    )?;
    let vocab = ckpt
        .meta
        .get("vocab_size")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| bad("vocab_size"))? as usize;
    let fp = ckpt
        .meta
        .get("vocab_fingerprint")
        .and_then(|v| v.as_str())
        .ok_or_else(|| bad("vocab_fingerprint"))?
        .to_string();
    Ok((cfg, vocab, fp))
}

/// Inverse-CDF draw from log-probabilities.
fn sample_index(logp: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &l) in logp.iter().enumerate() {
        acc += l.exp();
        if u < acc {
            return i;
        }
    }
    argmax(logp)
}

/// State-value model: a copy of the policy trunk with a scalar head.
#[derive(Debug, Clone)]
pub struct ValueModel<S: Scalar> {
    pub cfg: PolicyConfig,
    pub vocab_size: usize,
    pub vocab_fingerprint: String,
    pub params: ParamStore<S>,
    trunk: TrunkIds,
    w_v: usize,
    b_v: usize,
}

impl<S: Scalar> ValueModel<S> {
    /// Copies every trunk parameter and adds a zero-initialized head.
    pub fn from_policy(policy: &PolicyModel<S>) -> Self {
        let mut params = ParamStore::new();
        for (id, m) in policy.params.values().iter().enumerate() {
            let name = policy.params.name(id);
            if !name.starts_with("out.") {
                params.add(name.to_string(), m.clone());
            }
        }
        params.add("value.w", Matrix::zeros(policy.cfg.d_model, 1));
        params.add("value.b", Matrix::zeros(1, 1));
        Self::assemble(
            policy.cfg.clone(),
            policy.vocab_size,
            policy.vocab_fingerprint.clone(),
            params,
        )
        .expect("policy trunk has every parameter")
    }

    fn assemble(
        cfg: PolicyConfig,
        vocab_size: usize,
        vocab_fingerprint: String,
        params: ParamStore<S>,
    ) -> Result<Self> {
        let trunk = TrunkIds::lookup(&params, &cfg)?;
        let w_v = params
            .id_of("value.w")
            .ok_or_else(|| Error::InvalidArgument("missing value.w".into()))?;
        let b_v = params
            .id_of("value.b")
            .ok_or_else(|| Error::InvalidArgument("missing value.b".into()))?;
        Ok(ValueModel {
            cfg,
            vocab_size,
            vocab_fingerprint,
            params,
            trunk,
            w_v,
            b_v,
        })
    }

    pub fn cast<T: Scalar>(&self) -> ValueModel<T> {
        ValueModel {
            cfg: self.cfg.clone(),
            vocab_size: self.vocab_size,
            vocab_fingerprint: self.vocab_fingerprint.clone(),
            params: self.params.cast(),
            trunk: self.trunk.clone(),
            w_v: self.w_v,
            b_v: self.b_v,
        }
    }

    fn values_on_tape(&self, tape: &mut Tape<'_, S>, batch: &Packed) -> Var {
        let h = trunk_on_tape(tape, &self.cfg, &self.trunk, batch, None);
        let h = tape.select_rows(h, &batch.flat_rows());
        let (w, b) = (tape.param(self.w_v), tape.param(self.b_v));
        tape.linear(h, w, b)
    }

    /// `V(s_t)` for every output step `t`, where `s_t` is the prompt plus the
    /// first `t` output tokens.
    pub fn values(&self, items: &[(&Prompt, &[TokenId])]) -> Vec<Vec<f64>> {
        let mut out = Vec::with_capacity(items.len());
        for chunk in items.chunks(16) {
            let batch = Packed::new(chunk, self.cfg.max_positions);
            let mut tape = Tape::new(&self.params);
            let v = self.values_on_tape(&mut tape, &batch);
            let vm = tape.value(v);
            let mut r = 0;
            for rows in &batch.rows {
                out.push(
                    rows.iter()
                        .map(|_| {
                            r += 1;
                            vm.data[r - 1].f64()
                        })
                        .collect(),
                );
            }
        }
        out
    }

    /// Runs a loss on the per-step values; `per_row(item, t, value)` returns
    /// the loss contribution and its derivative.
    pub fn values_loss(
        &self,
        items: &[(&Prompt, &[TokenId])],
        mut per_row: impl FnMut(usize, usize, f64) -> (f64, f64),
    ) -> (f64, Vec<Matrix<S>>) {
        let batch = Packed::new(items, self.cfg.max_positions);
        let mut tape = Tape::new(&self.params);
        let v = self.values_on_tape(&mut tape, &batch);
        let vm = tape.value(v);
        let mut seed = Matrix::zeros(vm.rows, 1);
        let mut loss = 0.0;
        let mut r = 0;
        for (i, rows) in batch.rows.iter().enumerate() {
            for t in 0..rows.len() {
                let (l, g) = per_row(i, t, vm.data[r].f64());
                loss += l;
                seed.data[r] = S::of(g);
                r += 1;
            }
        }
        (loss, tape.backward(v, seed))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            kind: "value".into(),
            meta: serde_json::json!({
                "config": self.cfg,
                "vocab_size": self.vocab_size,
                "vocab_fingerprint": self.vocab_fingerprint,
            }),
            params: self.params.cast(),
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let (cfg, vocab_size, fp) = read_meta(ckpt, "value")?;
        Self::assemble(cfg, vocab_size, fp, ckpt.params.cast())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SftConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub warmup_steps: usize,
    pub grad_clip: f64,
    pub weight_decay: f64,
}

impl Default for SftConfig {
    fn default() -> Self {
        SftConfig {
            epochs: 1,
            lr: 1e-3,
            batch_size: 16,
            warmup_steps: 100,
            grad_clip: 1.0,
            weight_decay: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftReport {
    pub steps: usize,
    pub examples: usize,
    pub step_losses: Vec<f64>,
}

impl SftReport {
    /// Mean loss over a fraction of the steps at the start or end.
    pub fn window_mean(&self, frac: f64, from_end: bool) -> f64 {
        let n = ((self.step_losses.len() as f64 * frac).ceil() as usize)
            .clamp(1, self.step_losses.len().max(1));
        let s = if from_end {
            &self.step_losses[self.step_losses.len() - n..]
        } else {
            &self.step_losses[..n]
        };
        s.iter().sum::<f64>() / s.len().max(1) as f64
    }
}

/// Minimizes the mean per-token NLL with AdamW, shuffling each epoch.
pub fn sft_train<S: Scalar>(
    policy: &mut PolicyModel<S>,
    examples: &[SftExample],
    cfg: &SftConfig,
    rng: &mut impl Rng,
) -> Result<SftReport> {
    if examples.is_empty() {
        return Err(Error::InvalidArgument("SFT dataset is empty".into()));
    }
    if cfg.batch_size == 0 || !(cfg.lr >= 0.0) {
        return Err(Error::Config(
            "SFT needs batch_size >= 1 and lr >= 0".into(),
        ));
    }
    let mut opt = AdamW::new(
        &policy.params,
        AdamWConfig {
            weight_decay: cfg.weight_decay,
            ..AdamWConfig::default()
        },
    );
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut report = SftReport {
        steps: 0,
        examples: examples.len(),
        step_losses: Vec::new(),
    };
    for epoch in 0..cfg.epochs {
        order.shuffle(rng);
        for chunk in order.chunks(cfg.batch_size) {
            let items: Vec<(&Prompt, &[TokenId])> = chunk
                .iter()
                .map(|&i| (&examples[i].prompt, examples[i].output.as_slice()))
                .collect();
            let (loss, mut grads) = policy.sft_loss(&items)?;
            clip_global_norm(&mut grads, cfg.grad_clip);
            let warm = ((report.steps + 1) as f64 / cfg.warmup_steps.max(1) as f64).min(1.0);
            opt.step(&mut policy.params, &grads, cfg.lr * warm, |_| true);
            report.steps += 1;
            report.step_losses.push(loss);
            if report.steps.is_multiple_of(200) {
                log::info!("sft epoch {epoch} step {} loss {loss:.4}", report.steps);
            }
        }
    }
    Ok(report)
}
