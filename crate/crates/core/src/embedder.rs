//! Mutual assistance embedder.
//!
//! Each branch projects its brain representation into `T` tokens. The
//! geometric and semantic embedders decode coarse embeddings by letting
//! learnable queries cross-attend to those tokens; the mutual embedder then
//! attends over `[mutual tokens, coarse geometric, coarse semantic]` with its
//! own queries and its output is split into the fine geometric (first `T_g`
//! rows) and fine semantic (last `T_s` rows) embeddings.
//!
//! All token tensors are batch-stacked: a batch of `B` sequences of length
//! `S` is a `(B·S × D_b)` matrix.

use std::collections::BTreeMap;

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::extractor::{BankCache, Extractor, ExtractorBank};
use crate::nn::{self, join, LayerNorm, LayerNormCache, Linear, Mode, Params, Real, Visit, VisitMut};
use crate::par;
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Geometric,
    Semantic,
    Mutual,
}

impl Branch {
    pub const ALL: [Branch; 3] = [Branch::Geometric, Branch::Semantic, Branch::Mutual];

    pub fn name(self) -> &'static str {
        match self {
            Branch::Geometric => "geometric",
            Branch::Semantic => "semantic",
            Branch::Mutual => "mutual",
        }
    }
}

/// Which embedders exist. `Assist` is the full coarse-to-fine model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Arm {
    Assist,
    GeometricSemantic,
    GeometricOnly,
    SemanticOnly,
}

impl Arm {
    pub fn branches(self) -> &'static [Branch] {
        match self {
            Arm::Assist => &Branch::ALL,
            Arm::GeometricSemantic => &[Branch::Geometric, Branch::Semantic],
            Arm::GeometricOnly => &[Branch::Geometric],
            Arm::SemanticOnly => &[Branch::Semantic],
        }
    }

    pub fn has(self, b: Branch) -> bool {
        self.branches().contains(&b)
    }

    pub fn label(self) -> &'static str {
        match self {
            Arm::Assist => "geometric+semantic+assist",
            Arm::GeometricSemantic => "geometric+semantic",
            Arm::GeometricOnly => "geometric-only",
            Arm::SemanticOnly => "semantic-only",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExtractorMode {
    Unified,
    SubjectSpecific,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// G
    pub groups: usize,
    /// K
    pub group_size: usize,
    /// D_l
    pub local_dim: usize,
    /// D_b
    pub width: usize,
    /// T
    pub tokens: usize,
    /// T_g
    pub image_tokens: usize,
    /// T_s
    pub text_tokens: usize,
    /// L
    pub depth: usize,
    /// h
    pub heads: usize,
    pub ffn_mult: usize,
    pub dropout: f64,
    pub positional: bool,
    pub arm: Arm,
    pub extractor_mode: ExtractorMode,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    pub fn desk() -> Self {
        Self {
            groups: 64,
            group_size: 8,
            local_dim: 8,
            width: 64,
            tokens: 32,
            image_tokens: 17,
            text_tokens: 9,
            depth: 2,
            heads: 2,
            ffn_mult: 4,
            dropout: 0.5,
            positional: false,
            arm: Arm::Assist,
            extractor_mode: ExtractorMode::Unified,
            init_seed: 0,
        }
    }

    pub fn full_scale() -> Self {
        Self {
            groups: 512,
            group_size: 32,
            local_dim: 32,
            width: 768,
            tokens: 512,
            image_tokens: 257,
            text_tokens: 77,
            depth: 2,
            heads: 8,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("groups", self.groups),
            ("group_size", self.group_size),
            ("local_dim", self.local_dim),
            ("width", self.width),
            ("tokens", self.tokens),
            ("image_tokens", self.image_tokens),
            ("text_tokens", self.text_tokens),
            ("depth", self.depth),
            ("heads", self.heads),
            ("ffn_mult", self.ffn_mult),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("model.{name} must be positive")));
        }
        if !self.width.is_multiple_of(self.heads) {
            return Err(Error::Config(format!("width {} not divisible by {} heads", self.width, self.heads)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("dropout must lie in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn query_len(&self, b: Branch) -> usize {
        match b {
            Branch::Geometric => self.image_tokens,
            Branch::Semantic => self.text_tokens,
            Branch::Mutual => self.image_tokens + self.text_tokens,
        }
    }

    /// Key/value length seen by a branch's embedder.
    pub fn context_len(&self, b: Branch) -> usize {
        match b {
            Branch::Mutual => self.tokens + self.image_tokens + self.text_tokens,
            _ => self.tokens,
        }
    }

    /// Closed-form parameter count of the decoding network (no discriminator).
    pub fn param_count(&self, subjects: usize) -> usize {
        let d = self.width;
        let ext = Extractor::<f32>::param_count(self.groups, self.group_size, self.local_dim, d);
        let ext_copies = match self.extractor_mode {
            ExtractorMode::Unified => 1,
            ExtractorMode::SubjectSpecific => subjects,
        };
        let proj = d * self.tokens * d + self.tokens * d + 2 * d + if self.positional { self.tokens * d } else { 0 };
        let block =
            3 * 2 * d + 4 * (d * d + d) + (d * self.ffn_mult * d + self.ffn_mult * d) + (self.ffn_mult * d * d + d);
        self.arm
            .branches()
            .iter()
            .map(|&b| ext * ext_copies + proj + self.query_len(b) * d + self.depth * block + 2 * d)
            .sum()
    }
}

/// A global representation produced by one branch's extractor.
#[derive(Clone, Debug, PartialEq)]
pub struct BrainRepresentation<F: Real> {
    pub branch: Branch,
    pub vector: Array1<F>,
}

/// Affine map `D_b → T·D_b`, token-wise layer norm, dropout.
#[derive(Clone, Debug)]
pub struct Projector<F: Real> {
    pub branch: Branch,
    pub tokens: usize,
    pub dropout: f64,
    pub linear: Linear<F>,
    pub norm: LayerNorm<F>,
    pub position: Option<Array2<F>>,
}

pub struct ProjectorCache<F: Real> {
    input: Array2<F>,
    norm: LayerNormCache<F>,
    mask: Option<Array2<F>>,
}

impl<F: Real> Projector<F> {
    pub fn new<R: rand::Rng>(branch: Branch, cfg: &ModelConfig, rng: &mut R) -> Self {
        let d = cfg.width;
        let position = cfg.positional.then(|| nn::gaussian(rng, cfg.tokens, d, 0.02));
        Self {
            branch,
            tokens: cfg.tokens,
            dropout: cfg.dropout,
            linear: Linear::new(d, cfg.tokens * d, rng),
            norm: LayerNorm::new(d),
            position,
        }
    }

    /// `reps` is `(B × D_b)`, output `(B·T × D_b)`.
    pub fn forward(&self, reps: ArrayView2<F>, mode: Mode) -> (Array2<F>, ProjectorCache<F>) {
        let b = reps.nrows();
        let d = self.norm.gamma.len();
        let flat = self.linear.forward(reps);
        let tokens = flat.into_shape_with_order((b * self.tokens, d)).expect("contiguous");
        let (mut y, norm) = self.norm.forward(tokens.view());
        if let Some(pos) = &self.position {
            for mut chunk in y.axis_chunks_iter_mut(Axis(0), self.tokens) {
                chunk += pos;
            }
        }
        let tag = format!("dropout.projector.{}", self.branch.name());
        let mask = nn::dropout_mask(mode, self.dropout, &tag, y.nrows(), d);
        if let Some(m) = &mask {
            y *= m;
        }
        (y, ProjectorCache { input: reps.to_owned(), norm, mask })
    }

    pub fn backward(&self, cache: &ProjectorCache<F>, dy: ArrayView2<F>, grad: &mut Self) -> Array2<F> {
        let mut d = dy.to_owned();
        if let Some(m) = &cache.mask {
            d *= m;
        }
        if let (Some(gp), Some(_)) = (grad.position.as_mut(), &self.position) {
            for chunk in d.axis_chunks_iter(Axis(0), self.tokens) {
                *gp += &chunk;
            }
        }
        let d_tokens = self.norm.backward(&cache.norm, d.view(), &mut grad.norm);
        let b = cache.input.nrows();
        let d_flat = d_tokens.into_shape_with_order((b, self.linear.fan_out())).expect("contiguous");
        self.linear.backward(cache.input.view(), d_flat.view(), &mut grad.linear)
    }
}

impl<F: Real> Params<F> for Projector<F> {
    fn visit(&self, prefix: &str, f: &mut Visit<'_, F>) {
        self.linear.visit(&join(prefix, "linear"), f);
        self.norm.visit(&join(prefix, "norm"), f);
        if let Some(p) = &self.position {
            nn::visit_array2(p, join(prefix, "position"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut VisitMut<'_, F>) {
        self.linear.visit_mut(&join(prefix, "linear"), f);
        self.norm.visit_mut(&join(prefix, "norm"), f);
        if let Some(p) = &mut self.position {
            nn::visit_array2_mut(p, join(prefix, "position"), f);
        }
    }
}

/// Project a single representation; the representation must come from the
/// projector's branch.
pub fn project<F: Real>(rep: &BrainRepresentation<F>, projector: &Projector<F>, mode: Mode) -> Result<Array2<F>> {
    if rep.branch != projector.branch {
        return Err(Error::Config(format!(
            "{} representation fed to the {} projector",
            rep.branch.name(),
            projector.branch.name()
        )));
    }
    let row = rep.vector.view().insert_axis(Axis(0));
    Ok(projector.forward(row, mode).0)
}

/// Pre-norm residual block: multi-head cross-attention of the running
/// queries over a context sequence, then a GELU feed-forward sublayer.
#[derive(Clone, Debug)]
pub struct CrossAttentionBlock<F: Real> {
    pub heads: usize,
    pub norm_q: LayerNorm<F>,
    pub norm_kv: LayerNorm<F>,
    pub wq: Linear<F>,
    pub wk: Linear<F>,
    pub wv: Linear<F>,
    pub wo: Linear<F>,
    pub norm_ff: LayerNorm<F>,
    pub ff1: Linear<F>,
    pub ff2: Linear<F>,
}

pub struct BlockCache<F: Real> {
    batch: usize,
    q_len: usize,
    s_len: usize,
    norm_q: LayerNormCache<F>,
    qn: Array2<F>,
    norm_kv: LayerNormCache<F>,
    kvn: Array2<F>,
    q: Array2<F>,
    k: Array2<F>,
    v: Array2<F>,
    /// per sample, per head: (Q × S) attention weights
    probs: Vec<Vec<Array2<F>>>,
    attn: Array2<F>,
    norm_ff: LayerNormCache<F>,
    hn: Array2<F>,
    pre_act: Array2<F>,
    act: Array2<F>,
}

impl<F: Real> BlockCache<F> {
    pub fn attention_weights(&self) -> &[Vec<Array2<F>>] {
        &self.probs
    }
}

impl<F: Real> CrossAttentionBlock<F> {
    pub fn new<R: rand::Rng>(width: usize, heads: usize, ffn_mult: usize, rng: &mut R) -> Self {
        Self {
            heads,
            norm_q: LayerNorm::new(width),
            norm_kv: LayerNorm::new(width),
            wq: Linear::new(width, width, rng),
            wk: Linear::new(width, width, rng),
            wv: Linear::new(width, width, rng),
            wo: Linear::new(width, width, rng),
            norm_ff: LayerNorm::new(width),
            ff1: Linear::new(width, ffn_mult * width, rng),
            ff2: Linear::new(ffn_mult * width, width, rng),
        }
    }

    pub fn forward(&self, x: ArrayView2<F>, ctx: ArrayView2<F>, batch: usize) -> (Array2<F>, BlockCache<F>) {
        let q_len = x.nrows() / batch;
        let s_len = ctx.nrows() / batch;
        let width = x.ncols();
        let dh = width / self.heads;
        let scale = F::one() / F::from_usize(dh).unwrap().sqrt();

        let (qn, norm_q) = self.norm_q.forward(x);
        let (kvn, norm_kv) = self.norm_kv.forward(ctx);
        let q = self.wq.forward(qn.view());
        let k = self.wk.forward(kvn.view());
        let v = self.wv.forward(kvn.view());

        let per_sample = par::map_indexed(batch, |b| {
            let qs = q.slice(s![b * q_len..(b + 1) * q_len, ..]);
            let ks = k.slice(s![b * s_len..(b + 1) * s_len, ..]);
            let vs = v.slice(s![b * s_len..(b + 1) * s_len, ..]);
            let mut out = Array2::zeros((q_len, width));
            let mut probs = Vec::with_capacity(self.heads);
            for h in 0..self.heads {
                let cols = s![.., h * dh..(h + 1) * dh];
                let mut p = qs.slice(cols).dot(&ks.slice(cols).t()) * scale;
                nn::softmax_rows_inplace(&mut p);
                out.slice_mut(cols).assign(&p.dot(&vs.slice(cols)));
                probs.push(p);
            }
            (out, probs)
        });
        let mut attn = Array2::zeros((batch * q_len, width));
        let mut probs = Vec::with_capacity(batch);
        for (b, (out, p)) in per_sample.into_iter().enumerate() {
            attn.slice_mut(s![b * q_len..(b + 1) * q_len, ..]).assign(&out);
            probs.push(p);
        }

        let h = &x + &self.wo.forward(attn.view());
        let (hn, norm_ff) = self.norm_ff.forward(h.view());
        let pre_act = self.ff1.forward(hn.view());
        let act = nn::gelu(pre_act.view());
        let y = &h + &self.ff2.forward(act.view());
        let cache = BlockCache {
            batch,
            q_len,
            s_len,
            norm_q,
            qn,
            norm_kv,
            kvn,
            q,
            k,
            v,
            probs,
            attn,
            norm_ff,
            hn,
            pre_act,
            act,
        };
        (y, cache)
    }

    /// Returns gradients w.r.t. the query stream and the context.
    pub fn backward(&self, cache: &BlockCache<F>, dy: ArrayView2<F>, grad: &mut Self) -> (Array2<F>, Array2<F>) {
        let BlockCache { batch, q_len, s_len, .. } = *cache;
        let width = dy.ncols();
        let dh = width / self.heads;
        let scale = F::one() / F::from_usize(dh).unwrap().sqrt();

        // feed-forward sublayer
        let d_act = self.ff2.backward(cache.act.view(), dy, &mut grad.ff2);
        let d_pre = nn::gelu_backward(cache.pre_act.view(), d_act.view());
        let d_hn = self.ff1.backward(cache.hn.view(), d_pre.view(), &mut grad.ff1);
        let mut d_h = self.norm_ff.backward(&cache.norm_ff, d_hn.view(), &mut grad.norm_ff);
        d_h += &dy;

        // attention sublayer
        let d_attn = self.wo.backward(cache.attn.view(), d_h.view(), &mut grad.wo);
        let per_sample = par::map_indexed(batch, |b| {
            let qs = cache.q.slice(s![b * q_len..(b + 1) * q_len, ..]);
            let ks = cache.k.slice(s![b * s_len..(b + 1) * s_len, ..]);
            let vs = cache.v.slice(s![b * s_len..(b + 1) * s_len, ..]);
            let dout = d_attn.slice(s![b * q_len..(b + 1) * q_len, ..]);
            let mut dq = Array2::zeros((q_len, width));
            let mut dk = Array2::zeros((s_len, width));
            let mut dv = Array2::zeros((s_len, width));
            for h in 0..self.heads {
                let cols = s![.., h * dh..(h + 1) * dh];
                let p = &cache.probs[b][h];
                let dout_h = dout.slice(cols);
                dv.slice_mut(cols).assign(&p.t().dot(&dout_h));
                let dp = dout_h.dot(&vs.slice(cols).t());
                // softmax backward: ds = p ⊙ (dp − Σ_j dp_j p_j)
                let row_dot = (&dp * p).sum_axis(Axis(1)).insert_axis(Axis(1));
                let ds = (&dp - &row_dot) * p * scale;
                dq.slice_mut(cols).assign(&ds.dot(&ks.slice(cols)));
                dk.slice_mut(cols).assign(&ds.t().dot(&qs.slice(cols)));
            }
            (dq, dk, dv)
        });
        let mut dq = Array2::zeros((batch * q_len, width));
        let mut dk = Array2::zeros((batch * s_len, width));
        let mut dv = Array2::zeros((batch * s_len, width));
        for (b, (q_, k_, v_)) in per_sample.into_iter().enumerate() {
            dq.slice_mut(s![b * q_len..(b + 1) * q_len, ..]).assign(&q_);
            dk.slice_mut(s![b * s_len..(b + 1) * s_len, ..]).assign(&k_);
            dv.slice_mut(s![b * s_len..(b + 1) * s_len, ..]).assign(&v_);
        }
        let d_qn = self.wq.backward(cache.qn.view(), dq.view(), &mut grad.wq);
        let mut d_kvn = self.wk.backward(cache.kvn.view(), dk.view(), &mut grad.wk);
        d_kvn += &self.wv.backward(cache.kvn.view(), dv.view(), &mut grad.wv);
        let mut d_x = self.norm_q.backward(&cache.norm_q, d_qn.view(), &mut grad.norm_q);
        d_x += &d_h;
        let d_ctx = self.norm_kv.backward(&cache.norm_kv, d_kvn.view(), &mut grad.norm_kv);
        (d_x, d_ctx)
    }
}

impl<F: Real> Params<F> for CrossAttentionBlock<F> {
    fn visit(&self, prefix: &str, f: &mut Visit<'_, F>) {
        self.norm_q.visit(&join(prefix, "norm_q"), f);
        self.norm_kv.visit(&join(prefix, "norm_kv"), f);
        self.wq.visit(&join(prefix, "attn.q"), f);
        self.wk.visit(&join(prefix, "attn.k"), f);
        self.wv.visit(&join(prefix, "attn.v"), f);
        self.wo.visit(&join(prefix, "attn.out"), f);
        self.norm_ff.visit(&join(prefix, "norm_ff"), f);
        self.ff1.visit(&join(prefix, "ff.0"), f);
        self.ff2.visit(&join(prefix, "ff.1"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut VisitMut<'_, F>) {
        self.norm_q.visit_mut(&join(prefix, "norm_q"), f);
        self.norm_kv.visit_mut(&join(prefix, "norm_kv"), f);
        self.wq.visit_mut(&join(prefix, "attn.q"), f);
        self.wk.visit_mut(&join(prefix, "attn.k"), f);
        self.wv.visit_mut(&join(prefix, "attn.v"), f);
        self.wo.visit_mut(&join(prefix, "attn.out"), f);
        self.norm_ff.visit_mut(&join(prefix, "norm_ff"), f);
        self.ff1.visit_mut(&join(prefix, "ff.0"), f);
        self.ff2.visit_mut(&join(prefix, "ff.1"), f);
    }
}

/// Learnable queries refined by `L` cross-attention blocks over a context.
#[derive(Clone, Debug)]
pub struct CrossAttentionEmbedder<F: Real> {
    pub query: Array2<F>,
    pub blocks: Vec<CrossAttentionBlock<F>>,
    pub norm_out: LayerNorm<F>,
}

pub struct EmbedderCache<F: Real> {
    pub blocks: Vec<BlockCache<F>>,
    norm_out: LayerNormCache<F>,
    batch: usize,
}

impl<F: Real> CrossAttentionEmbedder<F> {
    pub fn new<R: rand::Rng>(queries: usize, cfg: &ModelConfig, rng: &mut R) -> Self {
        let query = nn::gaussian(rng, queries, cfg.width, 0.02);
        let blocks =
            (0..cfg.depth).map(|_| CrossAttentionBlock::new(cfg.width, cfg.heads, cfg.ffn_mult, rng)).collect();
        Self { query, blocks, norm_out: LayerNorm::new(cfg.width) }
    }

    pub fn queries(&self) -> usize {
        self.query.nrows()
    }

    /// `ctx` is `(B·S × D_b)`; output `(B·T_out × D_b)`.
    pub fn forward(&self, ctx: ArrayView2<F>, batch: usize) -> Result<(Array2<F>, EmbedderCache<F>)> {
        if batch == 0 || !ctx.nrows().is_multiple_of(batch) || ctx.ncols() != self.query.ncols() {
            return Err(Error::Shape(format!(
                "context ({} × {}) is not a batch of {batch} sequences of width {}",
                ctx.nrows(),
                ctx.ncols(),
                self.query.ncols()
            )));
        }
        let views = vec![self.query.view(); batch];
        let mut x = concatenate(Axis(0), &views).expect("same width");
        let mut caches = Vec::with_capacity(self.blocks.len());
        for blk in &self.blocks {
            let (y, c) = blk.forward(x.view(), ctx, batch);
            x = y;
            caches.push(c);
        }
        let (out, norm_out) = self.norm_out.forward(x.view());
        Ok((out, EmbedderCache { blocks: caches, norm_out, batch }))
    }

    /// Returns the context gradient.
    pub fn backward(&self, cache: &EmbedderCache<F>, dy: ArrayView2<F>, grad: &mut Self) -> Array2<F> {
        let mut dx = self.norm_out.backward(&cache.norm_out, dy, &mut grad.norm_out);
        let mut d_ctx: Option<Array2<F>> = None;
        for (blk, (c, g)) in self.blocks.iter().zip(cache.blocks.iter().zip(grad.blocks.iter_mut())).rev() {
            let (d_in, dc) = blk.backward(c, dx.view(), g);
            dx = d_in;
            match &mut d_ctx {
                Some(acc) => *acc += &dc,
                None => d_ctx = Some(dc),
            }
        }
        let q = self.query.nrows();
        for chunk in dx.axis_chunks_iter(Axis(0), q).take(cache.batch) {
            grad.query += &chunk;
        }
        d_ctx.expect("at least one block")
    }
}

impl<F: Real> Params<F> for CrossAttentionEmbedder<F> {
    fn visit(&self, prefix: &str, f: &mut Visit<'_, F>) {
        nn::visit_array2(&self.query, join(prefix, "query"), f);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("blocks.{i}")), f);
        }
        self.norm_out.visit(&join(prefix, "norm_out"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut VisitMut<'_, F>) {
        nn::visit_array2_mut(&mut self.query, join(prefix, "query"), f);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("blocks.{i}")), f);
        }
        self.norm_out.visit_mut(&join(prefix, "norm_out"), f);
    }
}

/// Coarse decoding: learnable queries over projected tokens.
pub fn decode_coarse<F: Real>(
    tokens: ArrayView2<F>,
    batch: usize,
    embedder: &CrossAttentionEmbedder<F>,
) -> Result<(Array2<F>, EmbedderCache<F>)> {
    embedder.forward(tokens, batch)
}

/// Interleave per-sample sequences: row block `b` of the result is
/// `[a_b; b_b; c_b]`.
fn concat_sequences<F: Real>(parts: &[(ArrayView2<F>, usize)], batch: usize) -> Array2<F> {
    let total: usize = parts.iter().map(|(_, l)| l).sum();
    let width = parts[0].0.ncols();
    let mut out = Array2::zeros((batch * total, width));
    for b in 0..batch {
        let mut off = b * total;
        for (m, l) in parts {
            out.slice_mut(s![off..off + l, ..]).assign(&m.slice(s![b * l..(b + 1) * l, ..]));
            off += l;
        }
    }
    out
}

fn split_sequences<F: Real>(x: ArrayView2<F>, lens: &[usize], batch: usize) -> Vec<Array2<F>> {
    let total: usize = lens.iter().sum();
    let width = x.ncols();
    let mut outs: Vec<Array2<F>> = lens.iter().map(|&l| Array2::zeros((batch * l, width))).collect();
    for b in 0..batch {
        let mut off = b * total;
        for (o, &l) in outs.iter_mut().zip(lens) {
            o.slice_mut(s![b * l..(b + 1) * l, ..]).assign(&x.slice(s![off..off + l, ..]));
            off += l;
        }
    }
    outs
}

/// Fine decoding: the mutual embedder attends over
/// `[mutual tokens, e_cg, e_cs]`; the first `T_g` output rows are the fine
/// geometric embedding and the last `T_s` the fine semantic one.
pub fn decode_fine<'a, F: Real>(
    mutual_tokens: ArrayView2<'a, F>,
    coarse_geometric: ArrayView2<'a, F>,
    coarse_semantic: ArrayView2<'a, F>,
    batch: usize,
    mutual: &CrossAttentionEmbedder<F>,
) -> Result<(Array2<F>, Array2<F>, EmbedderCache<F>)> {
    let t = mutual_tokens.nrows() / batch;
    let tg = coarse_geometric.nrows() / batch;
    let ts = coarse_semantic.nrows() / batch;
    if mutual.queries() != tg + ts {
        return Err(Error::Shape(format!("mutual embedder has {} queries, expected {}", mutual.queries(), tg + ts)));
    }
    let ctx = concat_sequences(&[(mutual_tokens, t), (coarse_geometric, tg), (coarse_semantic, ts)], batch);
    let (out, cache) = mutual.forward(ctx.view(), batch)?;
    let mut parts = split_sequences(out.view(), &[tg, ts], batch).into_iter();
    let fine_g = parts.next().expect("two parts");
    let fine_s = parts.next().expect("two parts");
    Ok((fine_g, fine_s, cache))
}

/// Projector and embedder of one branch plus its extractor bank.
#[derive(Clone, Debug)]
pub struct BranchModules<F: Real> {
    pub extractor: ExtractorBank<F>,
    pub projector: Projector<F>,
    pub embedder: CrossAttentionEmbedder<F>,
}

/// The decoding network: three group-based extractors, projectors, two
/// coarse embedders and one mutual embedder (fewer under ablation arms).
#[derive(Clone, Debug)]
pub struct UniBrain<F: Real> {
    pub cfg: ModelConfig,
    pub branches: BTreeMap<Branch, BranchModules<F>>,
}

/// The four decoded blocks, each batch-stacked `(B·T_o × D_b)`. Blocks an
/// ablation arm does not produce are `None`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EmbeddingSet<F: Real> {
    pub coarse_geometric: Option<Array2<F>>,
    pub coarse_semantic: Option<Array2<F>>,
    pub fine_geometric: Option<Array2<F>>,
    pub fine_semantic: Option<Array2<F>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BlockKind {
    CoarseGeometric,
    CoarseSemantic,
    FineGeometric,
    FineSemantic,
}

impl BlockKind {
    pub const ALL: [BlockKind; 4] =
        [BlockKind::CoarseGeometric, BlockKind::CoarseSemantic, BlockKind::FineGeometric, BlockKind::FineSemantic];

    pub fn short(self) -> &'static str {
        match self {
            BlockKind::CoarseGeometric => "cg",
            BlockKind::CoarseSemantic => "cs",
            BlockKind::FineGeometric => "g",
            BlockKind::FineSemantic => "s",
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            BlockKind::CoarseGeometric => "coarse_geometric",
            BlockKind::CoarseSemantic => "coarse_semantic",
            BlockKind::FineGeometric => "fine_geometric",
            BlockKind::FineSemantic => "fine_semantic",
        }
    }

    /// Geometric blocks target the teacher's image tokens, semantic blocks its text tokens.
    pub fn is_geometric(self) -> bool {
        matches!(self, BlockKind::CoarseGeometric | BlockKind::FineGeometric)
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "fine-geometric" | "fine_geometric" | "g" => Some(BlockKind::FineGeometric),
            "fine-semantic" | "fine_semantic" | "s" => Some(BlockKind::FineSemantic),
            "coarse-geometric" | "coarse_geometric" | "cg" => Some(BlockKind::CoarseGeometric),
            "coarse-semantic" | "coarse_semantic" | "cs" => Some(BlockKind::CoarseSemantic),
            _ => None,
        }
    }
}

impl<F: Real> EmbeddingSet<F> {
    pub fn get(&self, kind: BlockKind) -> Option<&Array2<F>> {
        match kind {
            BlockKind::CoarseGeometric => self.coarse_geometric.as_ref(),
            BlockKind::CoarseSemantic => self.coarse_semantic.as_ref(),
            BlockKind::FineGeometric => self.fine_geometric.as_ref(),
            BlockKind::FineSemantic => self.fine_semantic.as_ref(),
        }
    }

    pub fn get_mut(&mut self, kind: BlockKind) -> &mut Option<Array2<F>> {
        match kind {
            BlockKind::CoarseGeometric => &mut self.coarse_geometric,
            BlockKind::CoarseSemantic => &mut self.coarse_semantic,
            BlockKind::FineGeometric => &mut self.fine_geometric,
            BlockKind::FineSemantic => &mut self.fine_semantic,
        }
    }

    pub fn present(&self) -> Vec<BlockKind> {
        BlockKind::ALL.into_iter().filter(|&k| self.get(k).is_some()).collect()
    }

    pub fn all_finite(&self) -> bool {
        BlockKind::ALL.iter().filter_map(|&k| self.get(k)).all(|a| a.iter().all(|v| v.is_finite()))
    }
}

/// Block scored by retrieval when `requested` is absent from an arm:
/// fine → coarse of the same kind → the other kind.
pub fn resolve_block(arm: Arm, requested: BlockKind) -> BlockKind {
    let available = |k: BlockKind| match k {
        BlockKind::FineGeometric | BlockKind::FineSemantic => arm == Arm::Assist,
        BlockKind::CoarseGeometric => arm.has(Branch::Geometric),
        BlockKind::CoarseSemantic => arm.has(Branch::Semantic),
    };
    let chain: [BlockKind; 4] = if requested.is_geometric() {
        [requested, BlockKind::FineGeometric, BlockKind::CoarseGeometric, BlockKind::CoarseSemantic]
    } else {
        [requested, BlockKind::FineSemantic, BlockKind::CoarseSemantic, BlockKind::CoarseGeometric]
    };
    chain.into_iter().find(|&k| available(k)).unwrap_or(requested)
}

/// Batch input: grouped signals stacked `(B·G × K)` and the subject of each sample.
#[derive(Clone, Debug)]
pub struct ModelInput<F: Real> {
    pub grouped: Array2<F>,
    pub subjects: Vec<u32>,
}

impl<F: Real> ModelInput<F> {
    pub fn batch(&self) -> usize {
        self.subjects.len()
    }
}

pub struct ForwardOutput<F: Real> {
    /// Global representation per branch, `(B × D_b)`.
    pub reps: BTreeMap<Branch, Array2<F>>,
    pub embeddings: EmbeddingSet<F>,
}

struct BranchCache<F: Real> {
    extractor: BankCache<F>,
    projector: ProjectorCache<F>,
    embedder: EmbedderCache<F>,
}

pub struct ForwardCache<F: Real> {
    batch: usize,
    branches: BTreeMap<Branch, BranchCache<F>>,
}

impl<F: Real> ForwardCache<F> {
    /// Attention caches of one branch's embedder.
    pub fn embedder_cache(&self, b: Branch) -> Option<&EmbedderCache<F>> {
        self.branches.get(&b).map(|c| &c.embedder)
    }
}

/// Upstream gradients for [`UniBrain::backward`].
#[derive(Clone, Debug, Default)]
pub struct OutputGrads<F: Real> {
    pub embeddings: EmbeddingSet<F>,
    pub reps: BTreeMap<Branch, Array2<F>>,
}

impl<F: Real> UniBrain<F> {
    /// Initialize from `cfg.init_seed`. Every module draws from its own
    /// named stream, so modules shared between ablation arms start equal.
    /// `subjects` lists the training subjects (used in subject-specific mode).
    pub fn new(cfg: &ModelConfig, subjects: &[u32]) -> Result<Self> {
        cfg.validate()?;
        if cfg.extractor_mode == ExtractorMode::SubjectSpecific && subjects.is_empty() {
            return Err(Error::Config("subject-specific extractors need at least one training subject".into()));
        }
        let mut branches = BTreeMap::new();
        for &b in cfg.arm.branches() {
            let ext_name = format!("extractor.{}", b.name());
            let make_ext = |tag: &str| {
                let mut rng = seed::rng(cfg.init_seed, tag, 0);
                Extractor::new(cfg.groups, cfg.group_size, cfg.local_dim, cfg.width, &mut rng)
            };
            let extractor = match cfg.extractor_mode {
                ExtractorMode::Unified => ExtractorBank::Unified(make_ext(&ext_name)),
                ExtractorMode::SubjectSpecific => ExtractorBank::PerSubject(
                    subjects.iter().map(|&s| (s, make_ext(&format!("{ext_name}.subj_{s}")))).collect(),
                ),
            };
            let projector =
                Projector::new(b, cfg, &mut seed::rng(cfg.init_seed, &format!("projector.{}", b.name()), 0));
            let embedder = CrossAttentionEmbedder::new(
                cfg.query_len(b),
                cfg,
                &mut seed::rng(cfg.init_seed, &format!("embedder.{}", b.name()), 0),
            );
            branches.insert(b, BranchModules { extractor, projector, embedder });
        }
        Ok(Self { cfg: cfg.clone(), branches })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    /// Number of extractor stacks per branch (1 in unified mode).
    pub fn extractor_stacks(&self) -> usize {
        self.branches.values().next().map_or(0, |m| m.extractor.len())
    }

    /// Training subjects with dedicated extractors, if in subject-specific mode.
    pub fn extractor_subjects(&self) -> Option<Vec<u32>> {
        match &self.branches.values().next()?.extractor {
            ExtractorBank::Unified(_) => None,
            ExtractorBank::PerSubject(m) => Some(m.keys().copied().collect()),
        }
    }

    /// Full forward pass for a batch.
    pub fn forward(&self, input: &ModelInput<F>, mode: Mode) -> Result<(ForwardOutput<F>, ForwardCache<F>)> {
        let batch = input.batch();
        let expected = batch * self.cfg.groups;
        if input.grouped.dim() != (expected, self.cfg.group_size) {
            return Err(Error::Shape(format!(
                "grouped input {:?} does not match ({expected}, {})",
                input.grouped.dim(),
                self.cfg.group_size
            )));
        }
        let mut reps = BTreeMap::new();
        let mut tokens = BTreeMap::new();
        let mut partial = BTreeMap::new();
        for (&b, m) in &self.branches {
            let (rep, ec) = m.extractor.forward(input.grouped.view(), &input.subjects)?;
            let (tok, pc) = m.projector.forward(rep.view(), mode);
            reps.insert(b, rep);
            tokens.insert(b, tok);
            partial.insert(b, (ec, pc));
        }
        let mut caches = BTreeMap::new();
        let mut emb = EmbeddingSet::default();
        for b in [Branch::Geometric, Branch::Semantic] {
            if let Some(m) = self.branches.get(&b) {
                let (out, c) = decode_coarse(tokens[&b].view(), batch, &m.embedder)?;
                let (ec, pc) = partial.remove(&b).expect("partial cache");
                caches.insert(b, BranchCache { extractor: ec, projector: pc, embedder: c });
                *emb.get_mut(if b == Branch::Geometric {
                    BlockKind::CoarseGeometric
                } else {
                    BlockKind::CoarseSemantic
                }) = Some(out);
            }
        }
        if let Some(m) = self.branches.get(&Branch::Mutual) {
            let (cg, cs) = (emb.coarse_geometric.as_ref(), emb.coarse_semantic.as_ref());
            let (cg, cs) =
                cg.zip(cs).ok_or_else(|| Error::Config("mutual branch needs both coarse embedders".into()))?;
            let (g, s, c) = decode_fine(tokens[&Branch::Mutual].view(), cg.view(), cs.view(), batch, &m.embedder)?;
            let (ec, pc) = partial.remove(&Branch::Mutual).expect("partial cache");
            caches.insert(Branch::Mutual, BranchCache { extractor: ec, projector: pc, embedder: c });
            emb.fine_geometric = Some(g);
            emb.fine_semantic = Some(s);
        }
        Ok((ForwardOutput { reps, embeddings: emb }, ForwardCache { batch, branches: caches }))
    }

    /// Accumulate parameter gradients into `grad` (a model of identical structure).
    pub fn backward(&self, cache: &ForwardCache<F>, upstream: &OutputGrads<F>, grad: &mut Self) {
        let batch = cache.batch;
        let d = self.cfg.width;
        let zeros = |rows: usize| Array2::<F>::zeros((batch * rows, d));
        let mut d_cg = upstream.embeddings.coarse_geometric.clone();
        let mut d_cs = upstream.embeddings.coarse_semantic.clone();
        let mut d_tokens: BTreeMap<Branch, Array2<F>> = BTreeMap::new();

        if let (Some(m), Some(c)) = (self.branches.get(&Branch::Mutual), cache.branches.get(&Branch::Mutual)) {
            let (tg, ts) = (self.cfg.image_tokens, self.cfg.text_tokens);
            let dg = upstream.embeddings.fine_geometric.clone().unwrap_or_else(|| zeros(tg));
            let ds = upstream.embeddings.fine_semantic.clone().unwrap_or_else(|| zeros(ts));
            let d_out = concat_sequences(&[(dg.view(), tg), (ds.view(), ts)], batch);
            let g = grad.branches.get_mut(&Branch::Mutual).expect("grad mirrors model");
            let d_ctx = m.embedder.backward(&c.embedder, d_out.view(), &mut g.embedder);
            let mut parts = split_sequences(d_ctx.view(), &[self.cfg.tokens, tg, ts], batch).into_iter();
            d_tokens.insert(Branch::Mutual, parts.next().expect("3 parts"));
            let (pg, ps) = (parts.next().expect("3 parts"), parts.next().expect("3 parts"));
            d_cg = Some(d_cg.map_or(pg.clone(), |a| a + &pg));
            d_cs = Some(d_cs.map_or(ps.clone(), |a| a + &ps));
        }
        for (b, d_emb) in [(Branch::Geometric, d_cg), (Branch::Semantic, d_cs)] {
            if let (Some(m), Some(c)) = (self.branches.get(&b), cache.branches.get(&b)) {
                let d_emb = d_emb.unwrap_or_else(|| zeros(self.cfg.query_len(b)));
                let g = grad.branches.get_mut(&b).expect("grad mirrors model");
                d_tokens.insert(b, m.embedder.backward(&c.embedder, d_emb.view(), &mut g.embedder));
            }
        }
        for (&b, m) in &self.branches {
            let c = &cache.branches[&b];
            let g = grad.branches.get_mut(&b).expect("grad mirrors model");
            let mut d_rep = m.projector.backward(&c.projector, d_tokens[&b].view(), &mut g.projector);
            if let Some(extra) = upstream.reps.get(&b) {
                d_rep += extra;
            }
            m.extractor.backward(&c.extractor, d_rep.view(), &mut g.extractor);
        }
    }
}

impl<F: Real> Params<F> for UniBrain<F> {
    fn visit(&self, prefix: &str, f: &mut Visit<'_, F>) {
        for (b, m) in &self.branches {
            m.extractor.visit(&join(prefix, &format!("extractor.{}", b.name())), f);
        }
        for (b, m) in &self.branches {
            m.projector.visit(&join(prefix, &format!("projector.{}", b.name())), f);
        }
        for (b, m) in &self.branches {
            m.embedder.visit(&join(prefix, &format!("embedder.{}", b.name())), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut VisitMut<'_, F>) {
        for (b, m) in self.branches.iter_mut() {
            m.extractor.visit_mut(&join(prefix, &format!("extractor.{}", b.name())), f);
        }
        for (b, m) in self.branches.iter_mut() {
            m.projector.visit_mut(&join(prefix, &format!("projector.{}", b.name())), f);
        }
        for (b, m) in self.branches.iter_mut() {
            m.embedder.visit_mut(&join(prefix, &format!("embedder.{}", b.name())), f);
        }
    }
}

/// Extract one branch's representation for a single grouped signal.
pub fn extract<F: Real>(
    grouped: ArrayView2<F>,
    branch: Branch,
    extractor: &Extractor<F>,
) -> Result<BrainRepresentation<F>> {
    let (rep, _) = extractor.forward(grouped)?;
    Ok(BrainRepresentation { branch, vector: rep.row(0).to_owned() })
}
