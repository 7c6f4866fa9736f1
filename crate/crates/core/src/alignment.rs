//! Bilevel alignment objective.
//!
//! Extractor level: a subject discriminator behind a gradient reversal layer
//! sees every branch representation; its cross-entropy is averaged first
//! within each subject, then across subjects. Embedder level: every decoded
//! block is aligned to its teacher block with MSE and SoftCLIP.
//!
//! Loss functions return their value together with the gradient w.r.t. the
//! predictions, so the trainer can chain them into [`UniBrain::backward`].
//!
//! [`UniBrain::backward`]: crate::embedder::UniBrain::backward

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::embedder::{BlockKind, Branch, EmbeddingSet};
use crate::error::{Error, Result};
use crate::nn::{self, join, LayerNorm, LayerNormCache, Linear, Mode, Params, Real, Visit, VisitMut};
use crate::seed;

/// Gradient reversal, forward pass: identity.
pub fn grl<F: Real>(x: ArrayView2<F>) -> Array2<F> {
    x.to_owned()
}

/// Gradient reversal, backward pass: `-alpha * g`.
pub fn grl_backward<F: Real>(g: ArrayView2<F>, alpha: F) -> Array2<F> {
    debug_assert!(alpha >= F::zero());
    g.mapv(|v| -(alpha * v))
}

/// Schedule of the reversal strength over training progress `p ∈ [0, 1]`:
/// `2 / (1 + exp(-gamma p)) - 1`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GrlConfig {
    pub gamma: f64,
    /// Constant override for experiments; `None` uses the schedule.
    pub fixed_alpha: Option<f64>,
}

impl Default for GrlConfig {
    fn default() -> Self {
        Self { gamma: 10.0, fixed_alpha: None }
    }
}

impl GrlConfig {
    pub fn alpha(&self, progress: f64) -> f64 {
        if let Some(a) = self.fixed_alpha {
            return a;
        }
        let p = progress.clamp(0.0, 1.0);
        2.0 / (1.0 + (-self.gamma * p).exp()) - 1.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DiscriminatorVariant {
    /// No discriminator: the adversarial term is disabled.
    None,
    Linear,
    #[serde(rename = "nonlinear-2l")]
    NonLinear2,
    #[serde(rename = "nonlinear-3l")]
    NonLinear3,
}

impl DiscriminatorVariant {
    pub fn hidden_layers(self) -> usize {
        match self {
            Self::None | Self::Linear => 0,
            Self::NonLinear2 => 1,
            Self::NonLinear3 => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::Linear => "linear",
            Self::NonLinear2 => "nonlinear-2l",
            Self::NonLinear3 => "nonlinear-3l",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "none" => Some(Self::None),
            "linear" => Some(Self::Linear),
            "nonlinear-2l" | "2l" => Some(Self::NonLinear2),
            "nonlinear-3l" | "3l" => Some(Self::NonLinear3),
            _ => None,
        }
    }
}

/// affine → layer norm → GELU → dropout, repeated per hidden layer, then an
/// affine map to one logit per training subject.
#[derive(Clone, Debug)]
pub struct Discriminator<F: Real> {
    pub hidden: Vec<(Linear<F>, LayerNorm<F>)>,
    pub out: Linear<F>,
    pub dropout: f64,
}

struct HiddenCache<F: Real> {
    input: Array2<F>,
    norm: LayerNormCache<F>,
    normed: Array2<F>,
    mask: Option<Array2<F>>,
}

pub struct DiscriminatorCache<F: Real> {
    hidden: Vec<HiddenCache<F>>,
    last: Array2<F>,
}

impl<F: Real> Discriminator<F> {
    pub fn new(
        variant: DiscriminatorVariant,
        width: usize,
        hidden: usize,
        subjects: usize,
        dropout: f64,
        init_seed: u64,
    ) -> Self {
        let mut rng = seed::rng(init_seed, "discriminator", 0);
        let mut layers = Vec::new();
        let mut fan_in = width;
        for _ in 0..variant.hidden_layers() {
            layers.push((Linear::new(fan_in, hidden, &mut rng), LayerNorm::new(hidden)));
            fan_in = hidden;
        }
        Self { hidden: layers, out: Linear::new(fan_in, subjects, &mut rng), dropout }
    }

    pub fn param_count(variant: DiscriminatorVariant, width: usize, hidden: usize, subjects: usize) -> usize {
        match variant {
            DiscriminatorVariant::None => 0,
            _ => {
                let layers = variant.hidden_layers();
                let first = if layers > 0 { width * hidden + hidden + 2 * hidden } else { 0 };
                let rest = layers.saturating_sub(1) * (hidden * hidden + hidden + 2 * hidden);
                let fan_in = if layers > 0 { hidden } else { width };
                first + rest + fan_in * subjects + subjects
            }
        }
    }

    pub fn subjects(&self) -> usize {
        self.out.fan_out()
    }

    pub fn forward(&self, x: ArrayView2<F>, mode: Mode, tag: &str) -> (Array2<F>, DiscriminatorCache<F>) {
        let mut h = x.to_owned();
        let mut caches = Vec::with_capacity(self.hidden.len());
        for (i, (lin, ln)) in self.hidden.iter().enumerate() {
            let z = lin.forward(h.view());
            let (normed, norm) = ln.forward(z.view());
            let mut a = nn::gelu(normed.view());
            let mask = nn::dropout_mask(mode, self.dropout, &format!("{tag}.{i}"), a.nrows(), a.ncols());
            if let Some(m) = &mask {
                a *= m;
            }
            caches.push(HiddenCache { input: h, norm, normed, mask });
            h = a;
        }
        let logits = self.out.forward(h.view());
        (logits, DiscriminatorCache { hidden: caches, last: h })
    }

    pub fn backward(&self, cache: &DiscriminatorCache<F>, d_logits: ArrayView2<F>, grad: &mut Self) -> Array2<F> {
        let mut d = self.out.backward(cache.last.view(), d_logits, &mut grad.out);
        for (((lin, ln), c), (glin, gln)) in self.hidden.iter().zip(&cache.hidden).zip(grad.hidden.iter_mut()).rev() {
            if let Some(m) = &c.mask {
                d *= m;
            }
            let d_normed = nn::gelu_backward(c.normed.view(), d.view());
            let dz = ln.backward(&c.norm, d_normed.view(), gln);
            d = lin.backward(c.input.view(), dz.view(), glin);
        }
        d
    }
}

impl<F: Real> Params<F> for Discriminator<F> {
    fn visit(&self, prefix: &str, f: &mut Visit<'_, F>) {
        for (i, (lin, ln)) in self.hidden.iter().enumerate() {
            lin.visit(&join(prefix, &format!("hidden.{i}.linear")), f);
            ln.visit(&join(prefix, &format!("hidden.{i}.norm")), f);
        }
        self.out.visit(&join(prefix, "out"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut VisitMut<'_, F>) {
        for (i, (lin, ln)) in self.hidden.iter_mut().enumerate() {
            lin.visit_mut(&join(prefix, &format!("hidden.{i}.linear")), f);
            ln.visit_mut(&join(prefix, &format!("hidden.{i}.norm")), f);
        }
        self.out.visit_mut(&join(prefix, "out"), f);
    }
}

/// Per-sample weights of the nested average `(1/N) Σ_i (1/M_i) Σ_j`, where
/// `N` counts the groups present in the batch and `M_i` their sizes.
pub fn nested_weights(groups: &[usize]) -> Vec<f64> {
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for &g in groups {
        *counts.entry(g).or_default() += 1;
    }
    let n = counts.len() as f64;
    groups.iter().map(|g| 1.0 / (n * counts[g] as f64)).collect()
}

/// Cross-entropy of `logits` against `labels` under the nested
/// subject/sample average. Returns the loss and `dL/dlogits`.
pub fn nested_cross_entropy<F: Real>(logits: ArrayView2<F>, labels: &[usize]) -> Result<(F, Array2<F>)> {
    let classes = logits.ncols();
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Domain(format!("subject label {bad} outside [0, {classes})")));
    }
    let w = nested_weights(labels);
    let mut loss = F::zero();
    let mut grad = Array2::zeros(logits.raw_dim());
    for (i, row) in logits.outer_iter().enumerate() {
        let ls = nn::log_softmax_row(row);
        let wi = F::c(w[i]);
        loss += -ls[labels[i]] * wi;
        let mut g = grad.row_mut(i);
        for (gj, &l) in g.iter_mut().zip(ls.iter()) {
            *gj = l.exp() * wi;
        }
        g[labels[i]] -= wi;
    }
    Ok((loss, grad))
}

/// Adversarial loss averaged over the given branch representations, each
/// passed through the gradient reversal layer before the shared
/// discriminator. `labels` are dense subject indices in `[0, N)`.
///
/// Returns the (unweighted) loss and, per branch, the gradient that reaches
/// the extractor: `-alpha * weight * dL/drep`. Discriminator gradients
/// (scaled by `weight`) are accumulated into `grad` when given.
pub fn adversarial_loss<F: Real>(
    reps: &BTreeMap<Branch, Array2<F>>,
    labels: &[usize],
    disc: &Discriminator<F>,
    alpha: F,
    weight: F,
    mode: Mode,
    mut grad: Option<&mut Discriminator<F>>,
) -> Result<(F, BTreeMap<Branch, Array2<F>>)> {
    if reps.is_empty() {
        return Ok((F::zero(), BTreeMap::new()));
    }
    if alpha < F::zero() {
        return Err(Error::Domain("gradient reversal strength must be nonnegative".into()));
    }
    let n_branches = F::from_usize(reps.len()).unwrap();
    let mut total = F::zero();
    let mut rep_grads = BTreeMap::new();
    for (&b, rep) in reps {
        let x = grl(rep.view());
        let (logits, cache) = disc.forward(x.view(), mode, &format!("dropout.discriminator.{}", b.name()));
        let (loss, d_logits) = nested_cross_entropy(logits.view(), labels)?;
        total += loss / n_branches;
        let d_logits = d_logits * (weight / n_branches);
        let d_x = match grad.as_deref_mut() {
            Some(g) => disc.backward(&cache, d_logits.view(), g),
            None => disc.backward(&cache, d_logits.view(), &mut nn::zeros_like(disc)),
        };
        rep_grads.insert(b, grl_backward(d_x.view(), alpha));
    }
    Ok((total, rep_grads))
}

/// MSE between per-token L2-normalized blocks (or raw blocks when
/// `normalize` is false), nested-averaged over subjects and samples.
/// `target` and `pred` are `(B·T × D)`; `subjects` has length `B`.
pub fn mse_loss<F: Real>(
    target: ArrayView2<F>,
    pred: ArrayView2<F>,
    subjects: &[u32],
    normalize: bool,
) -> Result<(F, Array2<F>)> {
    if target.dim() != pred.dim() {
        return Err(Error::Shape(format!("MSE target {:?} vs prediction {:?}", target.dim(), pred.dim())));
    }
    let b = subjects.len();
    if b == 0 || !pred.nrows().is_multiple_of(b) {
        return Err(Error::Shape(format!("{} rows do not split into {b} samples", pred.nrows())));
    }
    let t = pred.nrows() / b;
    let per_sample = F::from_usize(t * pred.ncols()).unwrap();
    let groups: Vec<usize> = subjects.iter().map(|&s| s as usize).collect();
    let w = nested_weights(&groups);

    let (tn, pn, norms) = if normalize {
        let (tn, _) = nn::l2_normalize_rows(target);
        let (pn, norms) = nn::l2_normalize_rows(pred);
        (tn, pn, Some(norms))
    } else {
        (target.to_owned(), pred.to_owned(), None)
    };
    let diff = &pn - &tn;
    let mut loss = F::zero();
    let mut d = Array2::zeros(diff.raw_dim());
    for (i, (dc, mut dd)) in diff.axis_chunks_iter(Axis(0), t).zip(d.axis_chunks_iter_mut(Axis(0), t)).enumerate() {
        let wi = F::c(w[i]) / per_sample;
        loss += dc.iter().map(|&v| v * v).sum::<F>() * wi;
        let two_w = wi + wi;
        dd.zip_mut_with(&dc, |o, &v| *o = v * two_w);
    }
    let d_pred = match norms {
        Some(n) => nn::l2_normalize_rows_backward(pn.view(), n.view(), d.view()),
        None => d,
    };
    Ok((loss, d_pred))
}

fn flatten_samples<F: Real>(x: ArrayView2<F>, batch: usize) -> Array2<F> {
    let flat = x.as_standard_layout().to_owned();
    let len = flat.len() / batch;
    flat.into_shape_with_order((batch, len)).expect("contiguous")
}

/// SoftCLIP: each sample's block is flattened and L2-normalized, then
///
/// `L = -(1/H) Σ_ρ (1/H) Σ_ϱ softmax_ϱ(t_ρ·t_ϱ/τ) · log softmax_ϱ(e_ρ·t_ϱ/τ)`
///
/// over a batch of `H = batch` samples, outer `1/H` included.
pub fn softclip_loss<F: Real>(
    target: ArrayView2<F>,
    pred: ArrayView2<F>,
    batch: usize,
    tau: F,
) -> Result<(F, Array2<F>)> {
    if tau <= F::zero() {
        return Err(Error::Domain(format!("SoftCLIP temperature must be positive, got {tau}")));
    }
    if target.dim() != pred.dim() || batch == 0 || !pred.nrows().is_multiple_of(batch) {
        return Err(Error::Shape(format!("SoftCLIP target {:?} vs prediction {:?}", target.dim(), pred.dim())));
    }
    let h = F::from_usize(batch).unwrap();
    let (t, _) = nn::l2_normalize_rows(flatten_samples(target, batch).view());
    let (e, norms) = nn::l2_normalize_rows(flatten_samples(pred, batch).view());
    let mut soft = t.dot(&t.t()) / tau;
    nn::softmax_rows_inplace(&mut soft);
    let logits = e.dot(&t.t()) / tau;
    let mut loss = F::zero();
    let mut d_logits = Array2::zeros(logits.raw_dim());
    let inv_h2 = F::one() / (h * h);
    for (r, row) in logits.outer_iter().enumerate() {
        let ls = nn::log_softmax_row(row);
        let p = soft.row(r);
        loss -= p.iter().zip(ls.iter()).map(|(&a, &b)| a * b).sum::<F>() * inv_h2;
        let p_sum = p.sum();
        for (j, o) in d_logits.row_mut(r).iter_mut().enumerate() {
            *o = (ls[j].exp() * p_sum - p[j]) * inv_h2;
        }
    }
    let d_e = d_logits.dot(&t) / tau;
    let d_flat = nn::l2_normalize_rows_backward(e.view(), norms.view(), d_e.view());
    let d_pred = d_flat.into_shape_with_order(pred.raw_dim()).expect("contiguous");
    Ok((loss, d_pred))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda0: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub tau: f64,
    /// Per-token L2 normalization inside the MSE term.
    pub mse_normalize: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda0: 1.0, lambda1: 1e5, lambda2: 1.0, tau: 0.005, mse_normalize: true }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.lambda0 < 0.0 || self.lambda1 < 0.0 || self.lambda2 < 0.0 {
            return Err(Error::Config("loss weights must be nonnegative".into()));
        }
        if self.tau <= 0.0 {
            return Err(Error::Config("tau must be positive".into()));
        }
        Ok(())
    }
}

/// Per-step loss record written to the metrics log.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub adv: f64,
    pub mse_cg: f64,
    pub mse_cs: f64,
    pub mse_g: f64,
    pub mse_s: f64,
    pub clip_cg: f64,
    pub clip_cs: f64,
    pub clip_g: f64,
    pub clip_s: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn set_block(&mut self, kind: BlockKind, mse: f64, clip: f64) {
        let (m, c) = match kind {
            BlockKind::CoarseGeometric => (&mut self.mse_cg, &mut self.clip_cg),
            BlockKind::CoarseSemantic => (&mut self.mse_cs, &mut self.clip_cs),
            BlockKind::FineGeometric => (&mut self.mse_g, &mut self.clip_g),
            BlockKind::FineSemantic => (&mut self.mse_s, &mut self.clip_s),
        };
        *m = mse;
        *c = clip;
    }

    pub fn components(&self) -> [(&'static str, f64); 10] {
        [
            ("adv", self.adv),
            ("mse_cg", self.mse_cg),
            ("mse_cs", self.mse_cs),
            ("mse_g", self.mse_g),
            ("mse_s", self.mse_s),
            ("clip_cg", self.clip_cg),
            ("clip_cs", self.clip_cs),
            ("clip_g", self.clip_g),
            ("clip_s", self.clip_s),
            ("total", self.total),
        ]
    }
}

/// Teacher blocks for a batch, stacked like the predictions.
pub struct AlignTargets<F: Real> {
    /// (B·T_g × D_b)
    pub image: Array2<F>,
    /// (B·T_s × D_b)
    pub text: Array2<F>,
}

pub struct AlignOutcome<F: Real> {
    pub value: F,
    /// (mse, softclip) per present block
    pub terms: BTreeMap<BlockKind, (F, F)>,
    pub grads: EmbeddingSet<F>,
}

/// `Σ_o [λ1 MSE(ê^o, e^o) + λ2 SoftCLIP(ê^o, e^o)]` over the blocks present;
/// geometric blocks target image tokens, semantic blocks text tokens.
pub fn align_loss<F: Real>(
    emb: &EmbeddingSet<F>,
    targets: &AlignTargets<F>,
    subjects: &[u32],
    weights: &LossWeights,
) -> Result<AlignOutcome<F>> {
    let (l1, l2, tau) = (F::c(weights.lambda1), F::c(weights.lambda2), F::c(weights.tau));
    let mut value = F::zero();
    let mut terms = BTreeMap::new();
    let mut grads = EmbeddingSet::default();
    for kind in emb.present() {
        let pred = emb.get(kind).expect("present");
        let target = if kind.is_geometric() { &targets.image } else { &targets.text };
        let (mse, d_mse) = mse_loss(target.view(), pred.view(), subjects, weights.mse_normalize)?;
        let (clip, d_clip) = softclip_loss(target.view(), pred.view(), subjects.len(), tau)?;
        value += l1 * mse + l2 * clip;
        terms.insert(kind, (mse, clip));
        *grads.get_mut(kind) = Some(d_mse * l1 + &(d_clip * l2));
    }
    Ok(AlignOutcome { value, terms, grads })
}

/// `λ0 · ℒ_adv + ℒ_align`
pub fn total_loss(adv: f64, align: f64, weights: &LossWeights) -> f64 {
    weights.lambda0 * adv + align
}

/// Mean row entropy of `softmax(T Tᵀ / τ)` divided by `H`; equals
/// `softclip_loss(t, t, τ)`.
pub fn softclip_self_entropy<F: Real>(target: ArrayView2<F>, batch: usize, tau: F) -> F {
    let (t, _) = nn::l2_normalize_rows(flatten_samples(target, batch).view());
    let mut soft = t.dot(&t.t()) / tau;
    nn::softmax_rows_inplace(&mut soft);
    let h = F::from_usize(batch).unwrap();
    let ent: Array1<F> =
        soft.map_axis(Axis(1), |r| -r.iter().filter(|&&p| p > F::zero()).map(|&p| p * p.ln()).sum::<F>());
    ent.sum() / h / h
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn grl_examples() {
        let x = array![[1.5f64, -2.0]];
        assert_eq!(grl(x.view()), x);
        let g = array![[1.0f64, 1.0]];
        assert_eq!(grl_backward(g.view(), 0.5), array![[-0.5, -0.5]]);
        assert!(grl_backward(g.view(), 0.0).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn alpha_schedule_is_monotone_from_zero() {
        let s = GrlConfig::default();
        assert_eq!(s.alpha(0.0), 0.0);
        let mut prev = 0.0;
        for i in 1..=100 {
            let a = s.alpha(i as f64 / 100.0);
            assert!(a >= prev);
            prev = a;
        }
        assert!(prev < 1.0 && prev > 0.99);
    }

    #[test]
    fn uniform_logits_give_ln_n() {
        let logits = Array2::<f64>::zeros((6, 4));
        let (l, _) = nested_cross_entropy(logits.view(), &[0, 1, 2, 3, 0, 1]).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_discriminator_approaches_zero() {
        let mut logits = Array2::<f64>::zeros((3, 3));
        for i in 0..3 {
            logits[[i, i]] = 50.0;
        }
        let (l, _) = nested_cross_entropy(logits.view(), &[0, 1, 2]).unwrap();
        assert!(l < 1e-20);
    }

    #[test]
    fn label_out_of_range_is_domain_error() {
        let logits = Array2::<f64>::zeros((2, 2));
        assert!(matches!(nested_cross_entropy(logits.view(), &[0, 2]), Err(Error::Domain(_))));
    }

    #[test]
    fn mse_of_negated_unit_rows() {
        let d = 8;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (e, _) = nn::l2_normalize_rows(nn::gaussian::<f64, _>(&mut rng, 6, d, 1.0).view());
        let t = -&e;
        let (l, _) = mse_loss(t.view(), e.view(), &[0, 1, 1], true).unwrap();
        assert!((l - 4.0 / d as f64).abs() < 1e-12);
        let (z, _) = mse_loss(e.view(), e.view(), &[0, 1, 1], true).unwrap();
        assert_eq!(z, 0.0);
    }

    #[test]
    fn softclip_small_cases() {
        let one = array![[0.3f64, 0.4]];
        assert_eq!(softclip_loss(one.view(), one.view(), 1, 1.0).unwrap().0, 0.0);
        let two = array![[1.0f64, 0.0], [0.0, 1.0]];
        let (l, _) = softclip_loss(two.view(), two.view(), 2, 1.0).unwrap();
        assert!((l - 0.2911).abs() < 1e-3, "{l}");
        assert!(matches!(softclip_loss(two.view(), two.view(), 2, 0.0), Err(Error::Domain(_))));
    }

    #[test]
    fn softclip_finite_at_tiny_tau() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let t: Array2<f64> = nn::gaussian(&mut rng, 8, 5, 1.0);
        let e: Array2<f64> = nn::gaussian(&mut rng, 8, 5, 1.0);
        for tau in [1e-8, 0.005, 1.0] {
            let (l, g) = softclip_loss(t.view(), e.view(), 4, tau).unwrap();
            assert!(l.is_finite() && g.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn discriminator_param_count_matches() {
        for v in [DiscriminatorVariant::Linear, DiscriminatorVariant::NonLinear2, DiscriminatorVariant::NonLinear3] {
            let d = Discriminator::<f64>::new(v, 16, 12, 4, 0.5, 0);
            assert_eq!(d.num_params(), Discriminator::<f64>::param_count(v, 16, 12, 4));
        }
    }
}
