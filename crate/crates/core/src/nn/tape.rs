use super::{gemm, Matrix, ParamStore, Scalar, View};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Rows `[start, start + len)` of a packed batch that form one sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_K: f64 = 0.044_715;
const LN_EPS: f64 = 1e-5;
const L2_EPS: f64 = 1e-12;

enum Op<S> {
    Param(usize),
    Const,
    Gather {
        table: Var,
        ids: Vec<u32>,
    },
    MatMul {
        a: Var,
        b: Var,
    },
    AddBias {
        a: Var,
        bias: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Scale {
        a: Var,
        c: S,
    },
    LayerNorm {
        a: Var,
        gamma: Var,
        beta: Var,
        xhat: Matrix<S>,
        rstd: Vec<S>,
    },
    Gelu {
        a: Var,
    },
    Tanh {
        a: Var,
    },
    Relu {
        a: Var,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        segs: Vec<Segment>,
        probs: Vec<S>,
    },
    AttnPool {
        h: Var,
        scores: Var,
        segs: Vec<Segment>,
        weights: Vec<S>,
    },
    L2Normalize {
        a: Var,
        norms: Vec<S>,
    },
    SelectRows {
        a: Var,
        rows: Vec<usize>,
    },
}

struct Node<S> {
    value: Option<Matrix<S>>,
    op: Op<S>,
    needs_grad: bool,
}

/// Records a forward computation so it can be differentiated once.
pub struct Tape<'p, S: Scalar> {
    store: &'p ParamStore<S>,
    nodes: Vec<Node<S>>,
}

impl<'p, S: Scalar> Tape<'p, S> {
    pub fn new(store: &'p ParamStore<S>) -> Self {
        Tape {
            store,
            nodes: Vec::new(),
        }
    }

    pub fn value(&self, v: Var) -> &Matrix<S> {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(m), _) => m,
            (None, Op::Param(id)) => self.store.get(*id),
            _ => unreachable!("every non-param node owns its value"),
        }
    }

    fn push(&mut self, value: Matrix<S>, op: Op<S>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn param(&mut self, id: usize) -> Var {
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, m: Matrix<S>) -> Var {
        self.push(m, Op::Const, false)
    }

    /// Rows of `table` selected by `ids`.
    pub fn gather(&mut self, table: Var, ids: &[u32]) -> Var {
        let t = self.value(table);
        let mut out = Matrix::zeros(ids.len(), t.cols);
        for (r, &id) in ids.iter().enumerate() {
            out.row_mut(r).copy_from_slice(t.row(id as usize));
        }
        let ng = self.ng(table);
        self.push(
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            ng,
        )
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::MatMul { a, b }, ng)
    }

    pub fn add_bias(&mut self, a: Var, bias: Var) -> Var {
        let mut out = self.value(a).clone();
        let b = self.value(bias);
        assert_eq!((b.rows, b.cols), (1, out.cols), "bias shape");
        for r in 0..out.rows {
            for (x, &y) in out.row_mut(r).iter_mut().zip(&b.data) {
                *x += y;
            }
        }
        let ng = self.ng(a) || self.ng(bias);
        self.push(out, Op::AddBias { a, bias }, ng)
    }

    /// `a @ w + b`.
    pub fn linear(&mut self, a: Var, w: Var, b: Var) -> Var {
        let y = self.matmul(a, w);
        self.add_bias(y, b)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Add { a, b }, ng)
    }

    pub fn scale(&mut self, a: Var, c: S) -> Var {
        let mut out = self.value(a).clone();
        out.scale(c);
        let ng = self.ng(a);
        self.push(out, Op::Scale { a, c }, ng)
    }

    pub fn layer_norm(&mut self, a: Var, gamma: Var, beta: Var) -> Var {
        let x = self.value(a);
        let (g, b) = (self.value(gamma), self.value(beta));
        let n = x.cols;
        let mut xhat = Matrix::zeros(x.rows, n);
        let mut out = Matrix::zeros(x.rows, n);
        let mut rstd = Vec::with_capacity(x.rows);
        for r in 0..x.rows {
            let row = x.row(r);
            let mean = row.iter().copied().sum::<S>() / S::of(n as f64);
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / S::of(n as f64);
            let rs = S::one() / (var + S::of(LN_EPS)).sqrt();
            rstd.push(rs);
            for c in 0..n {
                let xh = (row[c] - mean) * rs;
                xhat.data[r * n + c] = xh;
                out.data[r * n + c] = xh * g.data[c] + b.data[c];
            }
        }
        let ng = self.ng(a) || self.ng(gamma) || self.ng(beta);
        self.push(
            out,
            Op::LayerNorm {
                a,
                gamma,
                beta,
                xhat,
                rstd,
            },
            ng,
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for x in &mut out.data {
            *x = gelu(*x);
        }
        let ng = self.ng(a);
        self.push(out, Op::Gelu { a }, ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for x in &mut out.data {
            *x = x.tanh();
        }
        let ng = self.ng(a);
        self.push(out, Op::Tanh { a }, ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for x in &mut out.data {
            *x = x.max(S::zero());
        }
        let ng = self.ng(a);
        self.push(out, Op::Relu { a }, ng)
    }

    /// Causal multi-head self-attention applied independently inside each
    /// segment. `q`, `k`, `v` are `n x d` with heads laid out as column blocks.
    pub fn causal_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        segs: &[Segment],
    ) -> Var {
        let (qm, km, vm) = (self.value(q), self.value(k), self.value(v));
        let d = qm.cols;
        assert!(heads > 0 && d % heads == 0, "heads must divide width");
        let dh = d / heads;
        let scale = S::one() / S::of(dh as f64).sqrt();
        let mut out = Matrix::zeros(qm.rows, d);
        let mut probs =
            Vec::with_capacity(segs.iter().map(|s| s.len * s.len).sum::<usize>() * heads);
        let full = View::of(qm);
        for seg in segs {
            let t = seg.len;
            for h in 0..heads {
                let off = probs.len();
                probs.resize(off + t * t, S::zero());
                let pv = View {
                    offset: off,
                    rows: t,
                    cols: t,
                    rs: t,
                    cs: 1,
                };
                let blk = full.block(seg.start, h * dh, t, dh);
                gemm(
                    scale,
                    &qm.data,
                    blk,
                    &km.data,
                    blk.t(),
                    S::zero(),
                    &mut probs,
                    pv,
                );
                for i in 0..t {
                    let row = &mut probs[off + i * t..off + (i + 1) * t];
                    softmax_prefix(row, i + 1);
                }
                gemm(
                    S::one(),
                    &probs,
                    pv,
                    &vm.data,
                    blk,
                    S::zero(),
                    &mut out.data,
                    blk,
                );
            }
        }
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                segs: segs.to_vec(),
                probs,
            },
            ng,
        )
    }

    /// Softmax-weighted sum of the rows of `h` within each segment, with one
    /// score per row taken from the `n x 1` matrix `scores`.
    pub fn attention_pool(&mut self, h: Var, scores: Var, segs: &[Segment]) -> Var {
        let (hm, sm) = (self.value(h), self.value(scores));
        assert_eq!((sm.rows, sm.cols), (hm.rows, 1), "pool score shape");
        let mut out = Matrix::zeros(segs.len(), hm.cols);
        let mut weights = vec![S::zero(); hm.rows];
        for (si, seg) in segs.iter().enumerate() {
            let w = &mut weights[seg.start..seg.start + seg.len];
            w.copy_from_slice(&sm.data[seg.start..seg.start + seg.len]);
            softmax_prefix(w, seg.len);
            for (i, &wi) in w.iter().enumerate() {
                for (o, &x) in out.row_mut(si).iter_mut().zip(hm.row(seg.start + i)) {
                    *o += wi * x;
                }
            }
        }
        let ng = self.ng(h) || self.ng(scores);
        self.push(
            out,
            Op::AttnPool {
                h,
                scores,
                segs: segs.to_vec(),
                weights,
            },
            ng,
        )
    }

    /// Scales each row to unit Euclidean norm.
    pub fn l2_normalize(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        let mut norms = Vec::with_capacity(out.rows);
        for r in 0..out.rows {
            let row = out.row_mut(r);
            let n = (row.iter().map(|&x| x * x).sum::<S>() + S::of(L2_EPS)).sqrt();
            for x in row.iter_mut() {
                *x /= n;
            }
            norms.push(n);
        }
        let ng = self.ng(a);
        self.push(out, Op::L2Normalize { a, norms }, ng)
    }

    pub fn select_rows(&mut self, a: Var, rows: &[usize]) -> Var {
        let m = self.value(a);
        let mut out = Matrix::zeros(rows.len(), m.cols);
        for (i, &r) in rows.iter().enumerate() {
            out.row_mut(i).copy_from_slice(m.row(r));
        }
        let ng = self.ng(a);
        self.push(
            out,
            Op::SelectRows {
                a,
                rows: rows.to_vec(),
            },
            ng,
        )
    }

    /// Back-propagates `seed` (the gradient of some scalar objective with
    /// respect to `out`) and returns gradients for every parameter in the
    /// store, zero for parameters the computation never touched.
    pub fn backward(self, out: Var, seed: Matrix<S>) -> Vec<Matrix<S>> {
        let Tape { store, mut nodes } = self;
        {
            let v = match &nodes[out.0].value {
                Some(m) => m,
                None => match nodes[out.0].op {
                    Op::Param(id) => store.get(id),
                    _ => unreachable!(),
                },
            };
            assert_eq!((seed.rows, seed.cols), (v.rows, v.cols), "seed shape");
        }
        let mut param_grads = store.zeros_like();
        let mut grads: Vec<Option<Matrix<S>>> = (0..nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(seed);

        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !nodes[i].needs_grad {
                continue;
            }
            // Values of earlier nodes are read through this closure-free view.
            let (before, rest) = nodes.split_at_mut(i);
            let node = &mut rest[0];
            let val = |v: Var| -> &Matrix<S> {
                let n = &before[v.0];
                match (&n.value, &n.op) {
                    (Some(m), _) => m,
                    (None, Op::Param(id)) => store.get(*id),
                    _ => unreachable!(),
                }
            };
            let need = |v: Var| before[v.0].needs_grad;
            match &node.op {
                Op::Param(id) => param_grads[*id].add_assign(&g),
                Op::Const => {}
                Op::Gather { table, ids } => {
                    if need(*table) {
                        let t = val(*table);
                        let dst = slot(&mut grads, *table, t.rows, t.cols);
                        for (r, &id) in ids.iter().enumerate() {
                            for (d, &x) in dst.row_mut(id as usize).iter_mut().zip(g.row(r)) {
                                *d += x;
                            }
                        }
                    }
                }
                Op::MatMul { a, b } => {
                    let (am, bm) = (val(*a), val(*b));
                    if need(*a) {
                        let dst = slot(&mut grads, *a, am.rows, am.cols);
                        let vd = View::of(dst);
                        gemm(
                            S::one(),
                            &g.data,
                            View::of(&g),
                            &bm.data,
                            View::of(bm).t(),
                            S::one(),
                            &mut dst.data,
                            vd,
                        );
                    }
                    if need(*b) {
                        let dst = slot(&mut grads, *b, bm.rows, bm.cols);
                        let vd = View::of(dst);
                        gemm(
                            S::one(),
                            &am.data,
                            View::of(am).t(),
                            &g.data,
                            View::of(&g),
                            S::one(),
                            &mut dst.data,
                            vd,
                        );
                    }
                }
                Op::AddBias { a, bias } => {
                    if need(*bias) {
                        let dst = slot(&mut grads, *bias, 1, g.cols);
                        for r in 0..g.rows {
                            for (d, &x) in dst.data.iter_mut().zip(g.row(r)) {
                                *d += x;
                            }
                        }
                    }
                    if need(*a) {
                        accumulate(&mut grads, *a, g);
                    }
                }
                Op::Add { a, b } => {
                    if need(*a) && need(*b) {
                        accumulate(&mut grads, *b, g.clone());
                        accumulate(&mut grads, *a, g);
                    } else if need(*a) {
                        accumulate(&mut grads, *a, g);
                    } else if need(*b) {
                        accumulate(&mut grads, *b, g);
                    }
                }
                Op::Scale { a, c } => {
                    let mut g = g;
                    g.scale(*c);
                    accumulate(&mut grads, *a, g);
                }
                Op::LayerNorm {
                    a,
                    gamma,
                    beta,
                    xhat,
                    rstd,
                } => {
                    let n = g.cols;
                    let gm = val(*gamma);
                    if need(*gamma) || need(*beta) {
                        let mut dg = Matrix::zeros(1, n);
                        let mut db = Matrix::zeros(1, n);
                        for r in 0..g.rows {
                            for c in 0..n {
                                let gv = g.data[r * n + c];
                                dg.data[c] += gv * xhat.data[r * n + c];
                                db.data[c] += gv;
                            }
                        }
                        if need(*gamma) {
                            accumulate(&mut grads, *gamma, dg);
                        }
                        if need(*beta) {
                            accumulate(&mut grads, *beta, db);
                        }
                    }
                    if need(*a) {
                        let mut dx = Matrix::zeros(g.rows, n);
                        let inv_n = S::one() / S::of(n as f64);
                        for r in 0..g.rows {
                            let mut mean_d = S::zero();
                            let mut mean_dx = S::zero();
                            for c in 0..n {
                                let dxh = g.data[r * n + c] * gm.data[c];
                                mean_d += dxh;
                                mean_dx += dxh * xhat.data[r * n + c];
                            }
                            mean_d *= inv_n;
                            mean_dx *= inv_n;
                            for c in 0..n {
                                let dxh = g.data[r * n + c] * gm.data[c];
                                dx.data[r * n + c] =
                                    rstd[r] * (dxh - mean_d - xhat.data[r * n + c] * mean_dx);
                            }
                        }
                        accumulate(&mut grads, *a, dx);
                    }
                }
                Op::Gelu { a } => {
                    let x = val(*a);
                    let mut g = g;
                    for (gv, &xv) in g.data.iter_mut().zip(&x.data) {
                        *gv *= gelu_grad(xv);
                    }
                    accumulate(&mut grads, *a, g);
                }
                Op::Tanh { a } => {
                    let y = node.value.as_ref().expect("owned");
                    let mut g = g;
                    for (gv, &yv) in g.data.iter_mut().zip(&y.data) {
                        *gv *= S::one() - yv * yv;
                    }
                    accumulate(&mut grads, *a, g);
                }
                Op::Relu { a } => {
                    let x = val(*a);
                    let mut g = g;
                    for (gv, &xv) in g.data.iter_mut().zip(&x.data) {
                        if xv <= S::zero() {
                            *gv = S::zero();
                        }
                    }
                    accumulate(&mut grads, *a, g);
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    heads,
                    segs,
                    probs,
                } => {
                    let (qm, km, vm) = (val(*q), val(*k), val(*v));
                    let (rows, d) = (qm.rows, qm.cols);
                    let dh = d / heads;
                    let scale = S::one() / S::of(dh as f64).sqrt();
                    let mut dq = Matrix::zeros(rows, d);
                    let mut dk = Matrix::zeros(rows, d);
                    let mut dv = Matrix::zeros(rows, d);
                    let full = View::of(qm);
                    let mut off = 0;
                    let mut dp = Vec::new();
                    for seg in segs {
                        let t = seg.len;
                        for h in 0..*heads {
                            let pv = View {
                                offset: off,
                                rows: t,
                                cols: t,
                                rs: t,
                                cs: 1,
                            };
                            let blk = full.block(seg.start, h * dh, t, dh);
                            let local = View { offset: 0, ..pv };
                            dp.clear();
                            dp.resize(t * t, S::zero());
                            // dP = dO Vᵀ ; dV += Pᵀ dO
                            gemm(
                                S::one(),
                                &g.data,
                                blk,
                                &vm.data,
                                blk.t(),
                                S::zero(),
                                &mut dp,
                                local,
                            );
                            gemm(
                                S::one(),
                                probs,
                                pv.t(),
                                &g.data,
                                blk,
                                S::one(),
                                &mut dv.data,
                                blk,
                            );
                            for i in 0..t {
                                let p = &probs[off + i * t..off + (i + 1) * t];
                                let dpr = &mut dp[i * t..(i + 1) * t];
                                let dot: S = p.iter().zip(dpr.iter()).map(|(&a, &b)| a * b).sum();
                                for (x, &pj) in dpr.iter_mut().zip(p) {
                                    *x = pj * (*x - dot) * scale;
                                }
                            }
                            // dQ += dS K ; dK += dSᵀ Q
                            gemm(
                                S::one(),
                                &dp,
                                local,
                                &km.data,
                                blk,
                                S::one(),
                                &mut dq.data,
                                blk,
                            );
                            gemm(
                                S::one(),
                                &dp,
                                local.t(),
                                &qm.data,
                                blk,
                                S::one(),
                                &mut dk.data,
                                blk,
                            );
                            off += t * t;
                        }
                    }
                    if need(*q) {
                        accumulate(&mut grads, *q, dq);
                    }
                    if need(*k) {
                        accumulate(&mut grads, *k, dk);
                    }
                    if need(*v) {
                        accumulate(&mut grads, *v, dv);
                    }
                }
                Op::AttnPool {
                    h,
                    scores,
                    segs,
                    weights,
                } => {
                    let hm = val(*h);
                    let mut dh = Matrix::zeros(hm.rows, hm.cols);
                    let mut ds = Matrix::zeros(hm.rows, 1);
                    for (si, seg) in segs.iter().enumerate() {
                        let gr = g.row(si);
                        let mut dw = Vec::with_capacity(seg.len);
                        for i in 0..seg.len {
                            let r = seg.start + i;
                            let w = weights[r];
                            for (d, &x) in dh.row_mut(r).iter_mut().zip(gr) {
                                *d += w * x;
                            }
                            dw.push(hm.row(r).iter().zip(gr).map(|(&a, &b)| a * b).sum::<S>());
                        }
                        let dot: S = (0..seg.len).map(|i| weights[seg.start + i] * dw[i]).sum();
                        for i in 0..seg.len {
                            ds.data[seg.start + i] = weights[seg.start + i] * (dw[i] - dot);
                        }
                    }
                    if need(*h) {
                        accumulate(&mut grads, *h, dh);
                    }
                    if need(*scores) {
                        accumulate(&mut grads, *scores, ds);
                    }
                }
                Op::L2Normalize { a, norms } => {
                    let y = node.value.as_ref().expect("owned");
                    let mut dx = Matrix::zeros(g.rows, g.cols);
                    for r in 0..g.rows {
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let dot: S = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for ((d, &yv), &gv) in dx.row_mut(r).iter_mut().zip(yr).zip(gr) {
                            *d = (gv - yv * dot) / norms[r];
                        }
                    }
                    accumulate(&mut grads, *a, dx);
                }
                Op::SelectRows { a, rows } => {
                    let am = val(*a);
                    let dst = slot(&mut grads, *a, am.rows, am.cols);
                    for (i, &r) in rows.iter().enumerate() {
                        for (d, &x) in dst.row_mut(r).iter_mut().zip(g.row(i)) {
                            *d += x;
                        }
                    }
                }
            }
            // Free activations as soon as they are no longer needed.
            node.value = None;
            if let Op::Attention { probs, .. } = &mut node.op {
                *probs = Vec::new();
            }
        }
        param_grads
    }
}

fn slot<S: Scalar>(
    grads: &mut [Option<Matrix<S>>],
    v: Var,
    rows: usize,
    cols: usize,
) -> &mut Matrix<S> {
    grads[v.0].get_or_insert_with(|| Matrix::zeros(rows, cols))
}

fn accumulate<S: Scalar>(grads: &mut [Option<Matrix<S>>], v: Var, g: Matrix<S>) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        empty => *empty = Some(g),
    }
}

/// In-place softmax over `row[..valid]`; entries past `valid` become zero.
fn softmax_prefix<S: Scalar>(row: &mut [S], valid: usize) {
    let max = row[..valid].iter().copied().fold(S::neg_infinity(), S::max);
    let mut sum = S::zero();
    for x in &mut row[..valid] {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in &mut row[..valid] {
        *x /= sum;
    }
    for x in &mut row[valid..] {
        *x = S::zero();
    }
}

pub(crate) fn gelu<S: Scalar>(x: S) -> S {
    let half = S::of(0.5);
    let u = S::of(GELU_C) * (x + S::of(GELU_K) * x * x * x);
    half * x * (S::one() + u.tanh())
}

fn gelu_grad<S: Scalar>(x: S) -> S {
    let half = S::of(0.5);
    let u = S::of(GELU_C) * (x + S::of(GELU_K) * x * x * x);
    let t = u.tanh();
    let du = S::of(GELU_C) * (S::one() + S::of(3.0 * GELU_K) * x * x);
    half * (S::one() + t) + half * x * (S::one() - t * t) * du
}
