//! Spatial encoder: maps address text to a unit-norm embedding whose geometry
//! follows geography. Trained by regressing coordinates through a small head.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::address::{Control, Lexicon, TokenId};
use crate::datasets::GeocodingPair;
use crate::error::{Error, Result};
use crate::nn::{
    clip_global_norm, AdamW, AdamWConfig, Checkpoint, Matrix, ParamStore, Scalar, Segment, Tape,
    Var,
};
use crate::rng::{seeded, StageRng};
use crate::world::{Coordinate, World};

pub const ENCODER_KIND: &str = "spatial-encoder";
const HEAD_PREFIX: &str = "head.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub dim: usize,
    pub max_positions: usize,
    pub heads: usize,
    /// Hidden width of the regression head; 0 makes the head linear.
    pub head_hidden: usize,
    pub init_std: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            dim: 64,
            max_positions: 48,
            heads: 4,
            head_hidden: 32,
            init_std: 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSchedule {
    /// Epochs with the encoder frozen; only the head learns.
    pub phase1_epochs: usize,
    /// Epochs of joint training.
    pub phase2_epochs: usize,
    pub batch_size: usize,
    pub lr_phase1: f64,
    pub lr_phase2: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        TrainSchedule {
            phase1_epochs: 1,
            phase2_epochs: 10,
            batch_size: 64,
            lr_phase1: 3e-3,
            lr_phase2: 5e-3,
            weight_decay: 0.1,
            grad_clip: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Ids {
    tok: usize,
    pos: usize,
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
    w1: usize,
    b1: usize,
    ws: usize,
    w2: usize,
    b2: usize,
    w3: usize,
    b3: usize,
    hw1: Option<(usize, usize)>,
    hw2: usize,
    hb2: usize,
}

impl Ids {
    fn lookup<S: Scalar>(p: &ParamStore<S>) -> Result<Ids> {
        let get = |n: &str| {
            p.id_of(n)
                .ok_or_else(|| Error::InvalidArgument(format!("encoder parameter `{n}` missing")))
        };
        Ok(Ids {
            tok: get("tok")?,
            pos: get("pos")?,
            wq: get("wq")?,
            wk: get("wk")?,
            wv: get("wv")?,
            wo: get("wo")?,
            w1: get("w1")?,
            b1: get("b1")?,
            ws: get("ws")?,
            w2: get("w2")?,
            b2: get("b2")?,
            w3: get("w3")?,
            b3: get("b3")?,
            hw1: match (p.id_of("head.w1"), p.id_of("head.b1")) {
                (Some(w), Some(b)) => Some((w, b)),
                _ => None,
            },
            hw2: get("head.w2")?,
            hb2: get("head.b2")?,
        })
    }
}

/// Encoder `E` plus its coordinate-regression head. Both live in one
/// parameter store; head parameters carry the `head.` prefix.
#[derive(Debug, Clone)]
pub struct SpatialEncoder<S> {
    pub cfg: EncoderConfig,
    pub vocab_fingerprint: String,
    pub world_size_m: f64,
    pub params: ParamStore<S>,
    ids: Ids,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub initial_loss: f64,
    pub final_loss: f64,
    /// Mean training loss of each epoch, phase 1 first.
    pub epoch_losses: Vec<f64>,
    /// Centroid-predictor loss on the same data, for reference.
    pub centroid_loss: f64,
    pub encoder_checksum_before_phase1: String,
    pub encoder_checksum_after_phase1: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub n_pairs: usize,
    pub slope: f64,
    pub intercept: f64,
    pub mse: f64,
    pub r2: f64,
    /// `(embedding cosine distance, geographic distance in km)` per pair.
    pub points: Vec<(f64, f64)>,
}

fn tokens_for(lexicon: &Lexicon, text: &str) -> Vec<TokenId> {
    let t = lexicon.tokenize(text).tokens;
    if t.is_empty() {
        vec![Control::Pad.id()]
    } else {
        t
    }
}

impl<S: Scalar> SpatialEncoder<S> {
    pub fn new(
        cfg: EncoderConfig,
        lexicon: &Lexicon,
        world_size_m: f64,
        rng: &mut StageRng,
    ) -> Result<Self> {
        if cfg.dim == 0 || cfg.max_positions == 0 || cfg.heads == 0 || !cfg.dim.is_multiple_of(cfg.heads) {
            return Err(Error::Config(
                "encoder sizes must be >= 1 and heads must divide dim".into(),
            ));
        }
        let (d, v) = (cfg.dim, lexicon.len());
        let std = cfg.init_std;
        let lin = |fan_in: usize| 1.0 / (fan_in as f64).sqrt();
        let mut p = ParamStore::new();
        p.add("tok", Matrix::randn(v, d, std, rng));
        p.add("pos", Matrix::randn(cfg.max_positions, d, std * 0.5, rng));
        for name in ["wq", "wk", "wv"] {
            p.add(name, Matrix::randn(d, d, lin(d), rng));
        }
        // Zero output projection: the context layer starts as an identity.
        p.add("wo", Matrix::zeros(d, d));
        p.add("w1", Matrix::randn(d, d, lin(d), rng));
        p.add("b1", Matrix::zeros(1, d));
        p.add("ws", Matrix::randn(d, 1, lin(d), rng));
        p.add("w2", Matrix::randn(d, d, lin(d), rng));
        p.add("b2", Matrix::zeros(1, d));
        p.add("w3", Matrix::randn(d, d, lin(d), rng));
        p.add("b3", Matrix::zeros(1, d));
        if cfg.head_hidden > 0 {
            p.add("head.w1", Matrix::randn(d, cfg.head_hidden, lin(d), rng));
            p.add("head.b1", Matrix::zeros(1, cfg.head_hidden));
            p.add(
                "head.w2",
                Matrix::randn(cfg.head_hidden, 2, lin(cfg.head_hidden), rng),
            );
        } else {
            p.add("head.w2", Matrix::randn(d, 2, lin(d), rng));
        }
        p.add("head.b2", Matrix::filled(1, 2, S::of(0.5)));
        let ids = Ids::lookup(&p)?;
        Ok(SpatialEncoder {
            cfg,
            vocab_fingerprint: lexicon.fingerprint(),
            world_size_m,
            params: p,
            ids,
        })
    }

    pub fn is_head_param(&self, id: usize) -> bool {
        self.params.name(id).starts_with(HEAD_PREFIX)
    }

    /// Checksum of encoder parameters only (excluding the head).
    pub fn encoder_checksum(&self) -> String {
        self.params.checksum_of(|n| !n.starts_with(HEAD_PREFIX))
    }

    fn check_lexicon(&self, lexicon: &Lexicon) -> Result<()> {
        if lexicon.fingerprint() != self.vocab_fingerprint {
            return Err(Error::InvalidArgument(
                "encoder was trained on a different lexicon".into(),
            ));
        }
        Ok(())
    }

    /// Records the embedding computation for a batch of token sequences.
    pub fn embed_on_tape(&self, tape: &mut Tape<'_, S>, batch: &[Vec<TokenId>]) -> Var {
        let ids = self.ids;
        let mut flat = Vec::new();
        let mut pos = Vec::new();
        let mut segs = Vec::with_capacity(batch.len());
        for seq in batch {
            segs.push(Segment {
                start: flat.len(),
                len: seq.len(),
            });
            for (i, &t) in seq.iter().enumerate() {
                flat.push(t);
                pos.push(i.min(self.cfg.max_positions - 1) as u32);
            }
        }
        let tok = tape.param(ids.tok);
        let pe = tape.param(ids.pos);
        let x = tape.gather(tok, &flat);
        let p = tape.gather(pe, &pos);
        let x = tape.add(x, p);
        // Each component attends to the coarser components before it, so a
        // road name can be read in the context of its district.
        let (wq, wk, wv, wo) = (
            tape.param(ids.wq),
            tape.param(ids.wk),
            tape.param(ids.wv),
            tape.param(ids.wo),
        );
        let q = tape.matmul(x, wq);
        let k = tape.matmul(x, wk);
        let v = tape.matmul(x, wv);
        let a = tape.causal_attention(q, k, v, self.cfg.heads, &segs);
        let a = tape.matmul(a, wo);
        let x = tape.add(x, a);
        let (w1, b1, ws) = (tape.param(ids.w1), tape.param(ids.b1), tape.param(ids.ws));
        let h = tape.linear(x, w1, b1);
        let h = tape.tanh(h);
        let scores = tape.matmul(h, ws);
        let pooled = tape.attention_pool(h, scores, &segs);
        // No residual path here: token identity should not leak past the
        // mixing layers, or it shows up as embedding spread unrelated to place.
        let mut z = pooled;
        for (w, b) in [(ids.w2, ids.b2), (ids.w3, ids.b3)] {
            let (w, b) = (tape.param(w), tape.param(b));
            let m = tape.linear(z, w, b);
            z = tape.tanh(m);
        }
        tape.l2_normalize(z)
    }

    /// Head output: coordinates normalized to the unit square.
    pub fn head_on_tape(&self, tape: &mut Tape<'_, S>, emb: Var) -> Var {
        let ids = self.ids;
        let mut h = emb;
        if let Some((w1, b1)) = ids.hw1 {
            let (w1, b1) = (tape.param(w1), tape.param(b1));
            h = tape.linear(h, w1, b1);
            h = tape.relu(h);
        }
        let (w2, b2) = (tape.param(ids.hw2), tape.param(ids.hb2));
        tape.linear(h, w2, b2)
    }

    pub fn tokenize(&self, lexicon: &Lexicon, text: &str) -> Vec<TokenId> {
        tokens_for(lexicon, text)
    }

    /// Unit-norm embeddings, one row per text.
    pub fn encode_batch(&self, lexicon: &Lexicon, texts: &[&str]) -> Result<Matrix<S>> {
        self.check_lexicon(lexicon)?;
        let batch: Vec<Vec<TokenId>> = texts.iter().map(|t| tokens_for(lexicon, t)).collect();
        Ok(self.encode_tokens(&batch))
    }

    pub fn encode_tokens(&self, batch: &[Vec<TokenId>]) -> Matrix<S> {
        let mut tape = Tape::new(&self.params);
        let e = self.embed_on_tape(&mut tape, batch);
        tape.value(e).clone()
    }

    pub fn encode(&self, lexicon: &Lexicon, text: &str) -> Result<Vec<S>> {
        Ok(self.encode_batch(lexicon, &[text])?.data)
    }

    fn normalize(&self, c: &Coordinate) -> [S; 2] {
        [
            S::of(c.x / self.world_size_m),
            S::of(c.y / self.world_size_m),
        ]
    }

    /// Predicted coordinate for `text`, in meters.
    pub fn predict(&self, lexicon: &Lexicon, text: &str) -> Result<Coordinate> {
        self.check_lexicon(lexicon)?;
        let mut tape = Tape::new(&self.params);
        let e = self.embed_on_tape(&mut tape, &[tokens_for(lexicon, text)]);
        let out = self.head_on_tape(&mut tape, e);
        let v = tape.value(out);
        Ok(Coordinate::new(
            v.data[0].f64() * self.world_size_m,
            v.data[1].f64() * self.world_size_m,
        ))
    }

    /// Mean squared error in normalized units and its parameter gradients.
    pub fn regression_loss(
        &self,
        batch: &[Vec<TokenId>],
        targets: &[[S; 2]],
    ) -> (f64, Vec<Matrix<S>>) {
        let mut tape = Tape::new(&self.params);
        let e = self.embed_on_tape(&mut tape, batch);
        let out = self.head_on_tape(&mut tape, e);
        let pred = tape.value(out);
        let n = S::of((2 * targets.len()) as f64);
        let mut loss = S::zero();
        let mut seed = Matrix::zeros(pred.rows, 2);
        for (i, t) in targets.iter().enumerate() {
            for j in 0..2 {
                let diff = pred.at(i, j) - t[j];
                loss += diff * diff;
                seed.data[i * 2 + j] = S::of(2.0) * diff / n;
            }
        }
        let loss = (loss / n).f64();
        (loss, tape.backward(out, seed))
    }

    fn eval_loss(&self, data: &[(Vec<TokenId>, [S; 2])], batch_size: usize) -> f64 {
        let mut total = 0.0;
        for chunk in data.chunks(batch_size.max(1)) {
            let toks: Vec<Vec<TokenId>> = chunk.iter().map(|(t, _)| t.clone()).collect();
            let mut tape = Tape::new(&self.params);
            let e = self.embed_on_tape(&mut tape, &toks);
            let out = self.head_on_tape(&mut tape, e);
            let pred = tape.value(out);
            for (i, (_, t)) in chunk.iter().enumerate() {
                for j in 0..2 {
                    let d = (pred.at(i, j) - t[j]).f64();
                    total += d * d;
                }
            }
        }
        total / (2 * data.len()) as f64
    }

    /// Two-phase geocoding regression: head-only epochs, then joint epochs.
    pub fn train_geocoding(
        &mut self,
        lexicon: &Lexicon,
        pairs: &[GeocodingPair],
        schedule: &TrainSchedule,
        rng: &mut StageRng,
    ) -> Result<TrainReport> {
        self.check_lexicon(lexicon)?;
        if pairs.is_empty() {
            return Err(Error::Config("geocoding training set is empty".into()));
        }
        if schedule.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        let data: Vec<(Vec<TokenId>, [S; 2])> = pairs
            .iter()
            .map(|p| (tokens_for(lexicon, &p.text), self.normalize(&p.coordinate)))
            .collect();
        let centroid_loss = {
            let n = data.len() as f64;
            let mean = [0, 1].map(|j| data.iter().map(|(_, t)| t[j].f64()).sum::<f64>() / n);
            data.iter()
                .map(|(_, t)| (0..2).map(|j| (t[j].f64() - mean[j]).powi(2)).sum::<f64>())
                .sum::<f64>()
                / (2.0 * n)
        };
        let initial_loss = self.eval_loss(&data, 256);
        let before = self.encoder_checksum();
        let mut after_phase1 = before.clone();
        let mut epoch_losses = Vec::new();
        let mut opt = AdamW::new(
            &self.params,
            AdamWConfig {
                weight_decay: schedule.weight_decay,
                ..AdamWConfig::default()
            },
        );
        let mut order: Vec<usize> = (0..data.len()).collect();
        let total = schedule.phase1_epochs + schedule.phase2_epochs;
        for epoch in 0..total {
            let phase1 = epoch < schedule.phase1_epochs;
            if !phase1 && epoch == schedule.phase1_epochs {
                after_phase1 = self.encoder_checksum();
                // Phase 2 starts with fresh moments over every parameter.
                opt = AdamW::new(
                    &self.params,
                    AdamWConfig {
                        weight_decay: schedule.weight_decay,
                        ..AdamWConfig::default()
                    },
                );
            }
            // Phase 2 decays linearly so the final epochs settle.
            let lr = if phase1 {
                schedule.lr_phase1
            } else {
                let k = (epoch - schedule.phase1_epochs) as f64;
                schedule.lr_phase2 * (1.0 - k / (schedule.phase2_epochs as f64 + 1.0))
            };
            order.shuffle(rng);
            let mut sum = 0.0;
            let mut batches = 0;
            for chunk in order.chunks(schedule.batch_size) {
                let toks: Vec<Vec<TokenId>> = chunk.iter().map(|&i| data[i].0.clone()).collect();
                let targets: Vec<[S; 2]> = chunk.iter().map(|&i| data[i].1).collect();
                let (loss, mut grads) = self.regression_loss(&toks, &targets);
                clip_global_norm(&mut grads, schedule.grad_clip);
                let head: Vec<bool> = (0..self.params.len())
                    .map(|id| self.is_head_param(id))
                    .collect();
                opt.step(&mut self.params, &grads, lr, |id| !phase1 || head[id]);
                sum += loss;
                batches += 1;
            }
            let mean = sum / batches as f64;
            log::info!(
                "embedder epoch {}/{} ({}) loss {mean:.6}",
                epoch + 1,
                total,
                if phase1 { "head only" } else { "joint" }
            );
            epoch_losses.push(mean);
        }
        if schedule.phase2_epochs == 0 {
            after_phase1 = self.encoder_checksum();
        }
        Ok(TrainReport {
            initial_loss,
            final_loss: self.eval_loss(&data, 256),
            epoch_losses,
            centroid_loss,
            encoder_checksum_before_phase1: before,
            encoder_checksum_after_phase1: after_phase1,
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            kind: ENCODER_KIND.to_string(),
            meta: serde_json::json!({
                "config": self.cfg,
                "vocab_fingerprint": self.vocab_fingerprint,
                "world_size_m": self.world_size_m,
            }),
            params: self.params.cast(),
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.kind != ENCODER_KIND {
            return Err(Error::InvalidArgument(format!(
                "expected a {ENCODER_KIND} checkpoint, found `{}`",
                ckpt.kind
            )));
        }
        let meta: EncoderMeta = serde_json::from_value(ckpt.meta.clone())?;
        let params = ckpt.params.cast::<S>();
        let ids = Ids::lookup(&params)?;
        Ok(SpatialEncoder {
            cfg: meta.config,
            vocab_fingerprint: meta.vocab_fingerprint,
            world_size_m: meta.world_size_m,
            params,
            ids,
        })
    }
}

#[derive(Deserialize)]
struct EncoderMeta {
    config: EncoderConfig,
    vocab_fingerprint: String,
    world_size_m: f64,
}

/// Cosine similarity of two unit vectors.
pub fn cosine<S: Scalar>(a: &[S], b: &[S]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x.f64() * y.f64()).sum();
    let na: f64 = a.iter().map(|x| x.f64().powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x.f64().powi(2)).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Ordinary least squares of `y` on `x`: `(slope, intercept, mse, r2)`.
pub fn ols(points: &[(f64, f64)]) -> Result<(f64, f64, f64, f64)> {
    let n = points.len() as f64;
    if points.len() < 2 {
        return Err(Error::Diagnostic(
            "need at least two points for a fit".into(),
        ));
    }
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let syy: f64 = points.iter().map(|p| (p.1 - my).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    if sxx <= 1e-18 * n || syy <= 1e-18 * n {
        return Err(Error::Diagnostic(
            "degenerate variance in correlation sample".into(),
        ));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse: f64 = points
        .iter()
        .map(|p| (p.1 - (slope * p.0 + intercept)).powi(2))
        .sum();
    Ok((slope, intercept, sse / n, 1.0 - sse / syy))
}

/// Embeds every canonical address of the world, one row per record id.
pub fn embed_world<S: Scalar>(encoder: &SpatialEncoder<S>, world: &World) -> Result<Matrix<S>> {
    encoder.check_lexicon(&world.lexicon)?;
    let mut out = Matrix::zeros(world.records.len(), encoder.cfg.dim);
    for (c, chunk) in world.records.chunks(512).enumerate() {
        let toks: Vec<Vec<TokenId>> = chunk
            .iter()
            .map(|r| tokens_for(&world.lexicon, &r.canonical_text))
            .collect();
        let e = encoder.encode_tokens(&toks);
        let start = c * 512 * encoder.cfg.dim;
        out.data[start..start + e.data.len()].copy_from_slice(&e.data);
    }
    Ok(out)
}

/// Regresses geographic distance on embedding cosine distance over random
/// pairs of distinct canonical addresses.
pub fn correlation_report<S: Scalar>(
    encoder: &SpatialEncoder<S>,
    world: &World,
    n_pairs: usize,
    rng: &mut StageRng,
) -> Result<CorrelationReport> {
    if n_pairs < 2 {
        return Err(Error::InvalidArgument("n_pairs must be >= 2".into()));
    }
    if world.records.len() < 2 {
        return Err(Error::Diagnostic("world has fewer than two records".into()));
    }
    let emb = embed_world(encoder, world)?;
    let n = world.records.len();
    let points: Vec<(f64, f64)> = (0..n_pairs)
        .map(|_| {
            let a = rng.random_range(0..n);
            let mut b = rng.random_range(0..n - 1);
            if b >= a {
                b += 1;
            }
            let cos_dist = 1.0 - cosine(emb.row(a), emb.row(b));
            let geo = world.records[a]
                .coordinate
                .distance(&world.records[b].coordinate)
                / 1000.0;
            (cos_dist, geo)
        })
        .collect();
    let (slope, intercept, mse, r2) = ols(&points)?;
    Ok(CorrelationReport {
        n_pairs,
        slope,
        intercept,
        mse,
        r2,
        points,
    })
}

/// Fraction of triples `(a, near, far)` with `d(a, near) < d(a, far) / 4`
/// for which `a` is more similar to `near` than to `far`.
pub fn monotonicity_rate<S: Scalar>(
    encoder: &SpatialEncoder<S>,
    world: &World,
    n_triples: usize,
    rng: &mut StageRng,
) -> Result<f64> {
    let emb = embed_world(encoder, world)?;
    let n = world.records.len();
    if n < 3 || n_triples == 0 {
        return Err(Error::InvalidArgument(
            "need >= 3 records and >= 1 triple".into(),
        ));
    }
    let mut hits = 0;
    let mut found = 0;
    let mut attempts = 0usize;
    while found < n_triples {
        attempts += 1;
        if attempts > 1000 * n_triples {
            return Err(Error::Diagnostic(
                "could not sample near/far triples".into(),
            ));
        }
        let a = rng.random_range(0..n);
        let (mut b, mut c) = (rng.random_range(0..n), rng.random_range(0..n));
        if a == b || a == c || b == c {
            continue;
        }
        let ca = &world.records[a].coordinate;
        let (mut db, mut dc) = (
            ca.distance(&world.records[b].coordinate),
            ca.distance(&world.records[c].coordinate),
        );
        if db > dc {
            std::mem::swap(&mut b, &mut c);
            std::mem::swap(&mut db, &mut dc);
        }
        if db >= dc / 4.0 {
            continue;
        }
        found += 1;
        if cosine(emb.row(a), emb.row(b)) > cosine(emb.row(a), emb.row(c)) {
            hits += 1;
        }
    }
    Ok(hits as f64 / n_triples as f64)
}

/// Convenience constructor seeded from `seed`.
pub fn fresh_encoder(cfg: EncoderConfig, world: &World, seed: u64) -> Result<SpatialEncoder<f32>> {
    SpatialEncoder::new(
        cfg,
        &world.lexicon,
        world.params.world_size_m,
        &mut seeded(seed),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corruptor::DEFAULT_ERROR_WEIGHTS;
    use crate::datasets::build_geocoding_pairs;
    use crate::world::WorldParams;

    fn small_world() -> World {
        World::generate(&WorldParams {
            branching: vec![2, 2, 3, 2, 2, 2],
            ..WorldParams::default()
        })
        .unwrap()
    }

    #[test]
    fn encode_is_deterministic_and_unit_norm() {
        let world = small_world();
        let enc = fresh_encoder(EncoderConfig::default(), &world, 1).unwrap();
        let text = &world.records[3].canonical_text;
        let a = enc.encode(&world.lexicon, text).unwrap();
        let b = enc.encode(&world.lexicon, text).unwrap();
        assert_eq!(a, b);
        let norm: f64 = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-5);
        assert!((cosine(&a, &b) - 1.0).abs() < 1e-6);
        let empty = enc.encode(&world.lexicon, "").unwrap();
        assert!(empty.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn regression_gradient_matches_finite_differences() {
        let world = small_world();
        let enc32 = fresh_encoder(
            EncoderConfig {
                dim: 8,
                head_hidden: 4,
                ..EncoderConfig::default()
            },
            &world,
            2,
        )
        .unwrap();
        let mut enc = SpatialEncoder::<f64>::from_checkpoint(&enc32.to_checkpoint()).unwrap();
        let texts = [
            &world.records[0].canonical_text,
            &world.records[9].canonical_text,
        ];
        let batch: Vec<Vec<TokenId>> = texts
            .iter()
            .map(|t| world.lexicon.tokenize(t).tokens)
            .collect();
        let targets = [[0.2, 0.7], [0.9, 0.1]];
        let (_, grads) = enc.regression_loss(&batch, &targets);
        let mut rng = seeded(5);
        let eps = 1e-6;
        let mut checked = 0;
        while checked < 10 {
            let p = rng.random_range(0..enc.params.len());
            let i = rng.random_range(0..enc.params.get(p).len());
            if grads[p].data[i].abs() < 1e-9 {
                continue;
            }
            let orig = enc.params.get(p).data[i];
            enc.params.get_mut(p).data[i] = orig + eps;
            let up = enc.regression_loss(&batch, &targets).0;
            enc.params.get_mut(p).data[i] = orig - eps;
            let down = enc.regression_loss(&batch, &targets).0;
            enc.params.get_mut(p).data[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let rel =
                (numeric - grads[p].data[i]).abs() / numeric.abs().max(grads[p].data[i].abs());
            assert!(rel < 1e-4, "{}[{i}] rel {rel}", enc.params.name(p));
            checked += 1;
        }
    }

    #[test]
    fn phase_one_freezes_encoder_and_training_reduces_loss() {
        let world = small_world();
        let pool: Vec<usize> = (0..world.records.len()).collect();
        let pairs =
            build_geocoding_pairs(&world, &pool, 600, &DEFAULT_ERROR_WEIGHTS, &mut seeded(3))
                .unwrap();
        let mut enc = fresh_encoder(EncoderConfig::default(), &world, 4).unwrap();
        let mut head_only = enc.clone();
        let r1 = head_only
            .train_geocoding(
                &world.lexicon,
                &pairs,
                &TrainSchedule {
                    phase1_epochs: 3,
                    phase2_epochs: 0,
                    ..TrainSchedule::default()
                },
                &mut seeded(6),
            )
            .unwrap();
        assert_eq!(
            r1.encoder_checksum_before_phase1,
            r1.encoder_checksum_after_phase1
        );
        assert_eq!(head_only.encoder_checksum(), enc.encoder_checksum());
        assert!(r1.final_loss < r1.centroid_loss, "{r1:?}");

        let r = enc
            .train_geocoding(
                &world.lexicon,
                &pairs,
                &TrainSchedule::default(),
                &mut seeded(6),
            )
            .unwrap();
        assert_eq!(
            r.encoder_checksum_before_phase1,
            r.encoder_checksum_after_phase1
        );
        assert_ne!(enc.encoder_checksum(), r.encoder_checksum_before_phase1);
        assert!(r.final_loss < r.initial_loss);
    }

    #[test]
    fn empty_training_set_is_a_config_error() {
        let world = small_world();
        let mut enc = fresh_encoder(EncoderConfig::default(), &world, 1).unwrap();
        let err = enc.train_geocoding(
            &world.lexicon,
            &[],
            &TrainSchedule::default(),
            &mut seeded(1),
        );
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn two_point_fit_is_exact_and_constant_is_degenerate() {
        let (_, _, mse, r2) = ols(&[(0.1, 3.0), (0.4, 1.0)]).unwrap();
        assert!(mse < 1e-20);
        assert_eq!(r2, 1.0);
        assert!(matches!(
            ols(&[(0.1, 1.0), (0.1, 1.0), (0.1, 1.0)]),
            Err(Error::Diagnostic(_))
        ));
        let world = small_world();
        let enc = fresh_encoder(EncoderConfig::default(), &world, 1).unwrap();
        let rep = correlation_report(&enc, &world, 2, &mut seeded(1)).unwrap();
        assert!((rep.r2 - 1.0).abs() < 1e-9);
    }

    #[test]
    fn checkpoint_round_trip_preserves_embeddings() {
        let world = small_world();
        let enc = fresh_encoder(EncoderConfig::default(), &world, 8).unwrap();
        let back = SpatialEncoder::<f32>::from_checkpoint(&enc.to_checkpoint()).unwrap();
        let t = &world.records[1].canonical_text;
        assert_eq!(
            enc.encode(&world.lexicon, t).unwrap(),
            back.encode(&world.lexicon, t).unwrap()
        );
    }
}
