//! Embedding-space retrieval evaluation and the two subject protocols.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Archive;
use crate::config::{EvalConfig, RunConfig};
use crate::dataset::{Dataset, SampleRef, Split};
use crate::embedder::{resolve_block, BlockKind, ExtractorMode, ModelInput, UniBrain};
use crate::error::{Error, Result};
use crate::extractor::PlanCache;
use crate::nn::{self, Mode};
use crate::par;
use crate::seed;
use crate::trainer::{self, TrainedModel};

/// Printed with every report.
pub const REPORT_NOTE: &str = "Retrieval of synthetic teacher embeddings; these numbers are not comparable to \
published image-reconstruction benchmarks.";

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RetrievalScores {
    pub queries: usize,
    pub candidates: usize,
    pub top1: f64,
    pub top5: f64,
    pub two_way: f64,
    pub mean_cosine: f64,
}

impl RetrievalScores {
    /// Arithmetic mean over subjects (candidate and query counts are rounded means).
    pub fn mean(per: &[RetrievalScores]) -> Self {
        if per.is_empty() {
            return Self::default();
        }
        let n = per.len() as f64;
        let avg = |f: fn(&RetrievalScores) -> f64| per.iter().map(f).sum::<f64>() / n;
        Self {
            queries: avg(|s| s.queries as f64).round() as usize,
            candidates: avg(|s| s.candidates as f64).round() as usize,
            top1: avg(|s| s.top1),
            top5: avg(|s| s.top5),
            two_way: avg(|s| s.two_way),
            mean_cosine: avg(|s| s.mean_cosine),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryRank {
    pub subject_id: u32,
    pub stimulus_id: u32,
    /// Expected rank under random tie-breaking (1 = best).
    pub rank: f64,
    pub cosine: f64,
}

fn normalized_f64(x: ArrayView2<f32>) -> Array2<f64> {
    nn::l2_normalize_rows(x.mapv(|v| v as f64).view()).0
}

/// Score flattened predictions `(Q × F)` against candidate teacher features
/// `(C × F)`. `truth[q]` is the stimulus id of query `q`.
///
/// Exact ties (distinct stimuli with identical teacher features) are
/// credited in expectation over a uniformly random tie-break: with `gt`
/// distractors scoring higher and `eq` scoring equal, the rank is uniform on
/// `1+gt ..= 1+gt+eq`. Two-way identification is exhaustive over
/// distractors, a tie counting one half. Returns expected ranks.
pub fn retrieval_metrics(
    pred: ArrayView2<f32>,
    truth: &[u32],
    candidates: ArrayView2<f32>,
    candidate_ids: &[u32],
) -> Result<(RetrievalScores, Vec<f64>)> {
    if pred.nrows() != truth.len() || candidates.nrows() != candidate_ids.len() {
        return Err(Error::Shape("query or candidate count disagrees with its ids".into()));
    }
    if pred.ncols() != candidates.ncols() {
        return Err(Error::Shape(format!(
            "prediction width {} vs candidate width {}",
            pred.ncols(),
            candidates.ncols()
        )));
    }
    let mut sorted = candidate_ids.to_vec();
    sorted.sort_unstable();
    if sorted.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::Domain("candidate set contains duplicate stimulus ids".into()));
    }
    let index_of = |id: u32| candidate_ids.iter().position(|&c| c == id);
    let truth_idx: Vec<usize> = truth
        .iter()
        .map(|&t| index_of(t).ok_or_else(|| Error::Domain(format!("true stimulus {t} is not among the candidates"))))
        .collect::<Result<_>>()?;
    let c = candidates.nrows();
    if truth.is_empty() || c < 2 {
        return Err(Error::Domain("retrieval needs at least one query and two candidates".into()));
    }
    let p = normalized_f64(pred);
    let k = normalized_f64(candidates);
    let sims = p.dot(&k.t());
    let (mut top1, mut top5, mut two_way, mut cos) = (0.0, 0.0, 0.0, 0.0);
    let mut ranks = Vec::with_capacity(truth.len());
    for (q, &ti) in truth_idx.iter().enumerate() {
        let row = sims.row(q);
        let s_true = row[ti];
        let (mut gt, mut eq) = (0usize, 0usize);
        for (j, &s) in row.iter().enumerate() {
            if j != ti {
                gt += (s > s_true) as usize;
                eq += (s == s_true) as usize;
            }
        }
        let within = |k: usize| (k.min(1 + gt + eq).saturating_sub(gt)) as f64 / (eq + 1) as f64;
        top1 += within(1);
        top5 += within(5);
        two_way += (c - 1 - gt) as f64 / (c - 1) as f64 - 0.5 * eq as f64 / (c - 1) as f64;
        cos += s_true;
        ranks.push(1.0 + gt as f64 + eq as f64 / 2.0);
    }
    let n = truth.len() as f64;
    Ok((
        RetrievalScores {
            queries: truth.len(),
            candidates: c,
            top1: top1 / n,
            top5: top5 / n,
            two_way: two_way / n,
            mean_cosine: cos / n,
        },
        ranks,
    ))
}

/// Grouping plans for every subject in the dataset.
pub fn plans_for(data: &Dataset, groups: usize, group_size: usize) -> Result<PlanCache> {
    let mut plans = PlanCache::new(groups, group_size);
    for s in &data.subjects {
        plans.get_or_build(s.subject_id, s.voxel_count)?;
    }
    Ok(plans)
}

/// Predicted `block` for each sample, flattened to one row per sample.
pub fn embed_refs(
    net: &UniBrain<f32>,
    data: &Dataset,
    plans: &PlanCache,
    refs: &[SampleRef],
    block: BlockKind,
    batch_size: usize,
) -> Result<Array2<f32>> {
    let mut rows = Vec::new();
    for chunk in refs.chunks(batch_size.max(1)) {
        let mut grouped = Vec::with_capacity(chunk.len());
        let mut subjects = Vec::with_capacity(chunk.len());
        for &r in chunk {
            let s = data.sample(r);
            let plan = plans
                .get(s.subject_id)
                .ok_or_else(|| Error::Config(format!("no grouping plan for subject {}", s.subject_id)))?;
            grouped.push(plan.apply(s.voxels)?);
            subjects.push(s.subject_id);
        }
        let views: Vec<_> = grouped.iter().map(|a| a.view()).collect();
        let grouped = ndarray::concatenate(Axis(0), &views).map_err(|e| Error::Shape(e.to_string()))?;
        let (out, _) = net.forward(&ModelInput { grouped, subjects }, Mode::Eval)?;
        let emb =
            out.embeddings.get(block).ok_or_else(|| Error::Config(format!("model has no {} block", block.name())))?;
        let per = emb.len() / chunk.len();
        rows.push(
            emb.as_standard_layout()
                .into_owned()
                .into_shape_with_order((chunk.len(), per))
                .map_err(|e| Error::Shape(e.to_string()))?,
        );
    }
    let views: Vec<_> = rows.iter().map(|a| a.view()).collect();
    ndarray::concatenate(Axis(0), &views).map_err(|e| Error::Shape(e.to_string()))
}

/// Teacher features targeted by `block`, flattened to one row per stimulus.
pub fn teacher_matrix(data: &Dataset, stimuli: &[u32], block: BlockKind) -> Array2<f32> {
    let rows: Vec<Vec<f32>> = stimuli
        .iter()
        .map(|&id| {
            let (img, txt) = data.teacher_features(id);
            let t = if block.is_geometric() { img } else { txt };
            t.iter().copied().collect()
        })
        .collect();
    let width = rows.first().map_or(0, Vec::len);
    Array2::from_shape_vec((rows.len(), width), rows.concat()).expect("uniform teacher blocks")
}

fn stimuli_of(data: &Dataset, refs: &[SampleRef]) -> Vec<u32> {
    refs.iter().map(|&r| data.subjects[r.subject].stimulus_ids[r.pos]).collect()
}

/// Retrieval over the given samples with their own stimuli as candidates.
pub fn score_refs(
    net: &UniBrain<f32>,
    data: &Dataset,
    plans: &PlanCache,
    refs: &[SampleRef],
    block: BlockKind,
    batch_size: usize,
) -> Result<RetrievalScores> {
    let truth = stimuli_of(data, refs);
    let cands: Vec<u32> = truth.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    let pred = embed_refs(net, data, plans, refs, block, batch_size)?;
    let (scores, _) = retrieval_metrics(pred.view(), &truth, teacher_matrix(data, &cands, block).view(), &cands)?;
    Ok(scores)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Protocol {
    InDistribution,
    Loso,
}

impl Protocol {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "in-distribution" => Some(Protocol::InDistribution),
            "loso" => Some(Protocol::Loso),
            _ => None,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Protocol::InDistribution => "in-distribution",
            Protocol::Loso => "loso",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectReport {
    pub subject_id: u32,
    #[serde(flatten)]
    pub scores: RetrievalScores,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub protocol: Protocol,
    pub requested_embedding: BlockKind,
    /// Block actually scored (differs from the request for arms lacking it).
    pub embedding: BlockKind,
    pub training_subjects: Vec<u32>,
    pub per_subject: Vec<SubjectReport>,
    pub mean: RetrievalScores,
    /// Expected top-1 of a random ranking, `mean(1 / candidates)`.
    pub chance_top1: f64,
    pub note: String,
}

impl RetrievalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("reports serialize")
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# {}", self.note);
        let _ = writeln!(
            s,
            "protocol: {}  embedding: {}  training subjects: {:?}",
            self.protocol.label(),
            self.embedding.name(),
            self.training_subjects
        );
        let _ = writeln!(
            s,
            "{:<8} {:>7} {:>10} {:>7} {:>7} {:>8} {:>8}",
            "subject", "queries", "candidates", "top1", "top5", "two-way", "cosine"
        );
        let mut line = |label: String, r: &RetrievalScores| {
            let _ = writeln!(
                s,
                "{:<8} {:>7} {:>10} {:>7.4} {:>7.4} {:>8.4} {:>8.4}",
                label, r.queries, r.candidates, r.top1, r.top5, r.two_way, r.mean_cosine
            );
        };
        for p in &self.per_subject {
            line(p.subject_id.to_string(), &p.scores);
        }
        line("mean".into(), &self.mean);
        let _ = writeln!(s, "chance top-1: {:.4}", self.chance_top1);
        s
    }
}

/// Test-split queries and candidates of one subject, optionally subsampled.
fn subject_queries(data: &Dataset, subject_id: u32, cfg: &EvalConfig) -> (Vec<SampleRef>, Vec<u32>) {
    let refs = data.sample_refs(Some(&[subject_id]), Split::Test);
    let mut cands: Vec<u32> = stimuli_of(data, &refs).into_iter().collect::<BTreeSet<_>>().into_iter().collect();
    if let Some(max) = cfg.max_candidates.filter(|&m| m < cands.len()) {
        cands.shuffle(&mut seed::rng(cfg.candidate_seed, "candidates", subject_id as u64));
        cands.truncate(max);
        cands.sort_unstable();
    }
    let keep: Vec<SampleRef> = refs
        .into_iter()
        .filter(|&r| cands.binary_search(&data.subjects[r.subject].stimulus_ids[r.pos]).is_ok())
        .collect();
    (keep, cands)
}

/// Evaluate the given subjects' test splits (in parallel across subjects).
pub fn evaluate_subjects(
    model: &TrainedModel,
    data: &Dataset,
    subjects: &[u32],
    protocol: Protocol,
    cfg: &EvalConfig,
) -> Result<(RetrievalReport, Vec<QueryRank>)> {
    let net = &model.model.net;
    let block = resolve_block(net.cfg.arm, cfg.embedding);
    let plans = plans_for(data, net.cfg.groups, net.cfg.group_size)?;
    let results = par::map_indexed(subjects.len(), |i| -> Result<(SubjectReport, Vec<QueryRank>)> {
        let s = subjects[i];
        let (refs, cands) = subject_queries(data, s, cfg);
        let truth = stimuli_of(data, &refs);
        let pred = embed_refs(net, data, &plans, &refs, block, cfg.batch_size)?;
        let teacher = teacher_matrix(data, &cands, block);
        let (scores, ranks) = retrieval_metrics(pred.view(), &truth, teacher.view(), &cands)?;
        let pn = normalized_f64(pred.view());
        let tn = normalized_f64(teacher_matrix(data, &truth, block).view());
        let ranks = ranks
            .into_iter()
            .enumerate()
            .map(|(q, rank)| QueryRank {
                subject_id: s,
                stimulus_id: truth[q],
                rank,
                cosine: pn.row(q).dot(&tn.row(q)),
            })
            .collect();
        Ok((SubjectReport { subject_id: s, scores }, ranks))
    });
    let mut per_subject = Vec::new();
    let mut ranks = Vec::new();
    for r in results {
        let (rep, rk) = r?;
        per_subject.push(rep);
        ranks.extend(rk);
    }
    let scores: Vec<RetrievalScores> = per_subject.iter().map(|p| p.scores).collect();
    let chance_top1 = scores.iter().map(|s| 1.0 / s.candidates as f64).sum::<f64>() / scores.len().max(1) as f64;
    Ok((
        RetrievalReport {
            protocol,
            requested_embedding: cfg.embedding,
            embedding: block,
            training_subjects: model.meta.training_subjects.clone(),
            mean: RetrievalScores::mean(&scores),
            per_subject,
            chance_top1,
            note: REPORT_NOTE.to_string(),
        },
        ranks,
    ))
}

fn check_dataset(model: &TrainedModel, data: &Dataset) {
    if model.meta.dataset_hash != data.manifest.hash() {
        log::warn!("evaluating on a dataset that differs from the training dataset");
    }
}

/// Held-out stimuli of every training subject of the checkpoint.
pub fn run_in_distribution(
    model: &TrainedModel,
    data: &Dataset,
    cfg: &EvalConfig,
) -> Result<(RetrievalReport, Vec<QueryRank>)> {
    check_dataset(model, data);
    for &s in &model.meta.training_subjects {
        if data.subject_index(s).is_none() {
            return Err(Error::Config(format!("checkpoint subject {s} is absent from the dataset")));
        }
    }
    evaluate_subjects(model, data, &model.meta.training_subjects, Protocol::InDistribution, cfg)
}

/// Zero-shot evaluation on a subject the checkpoint never trained on.
pub fn run_loso(
    model: &TrainedModel,
    data: &Dataset,
    held_out: u32,
    cfg: &EvalConfig,
) -> Result<(RetrievalReport, Vec<QueryRank>)> {
    check_dataset(model, data);
    if model.meta.training_subjects.contains(&held_out) {
        return Err(Error::Protocol(format!(
            "subject {held_out} contributed training samples to this checkpoint (trained on {:?})",
            model.meta.training_subjects
        )));
    }
    if model.meta.config.model.extractor_mode == ExtractorMode::SubjectSpecific {
        return Err(Error::Config("subject-specific extractors have no parameters for an unseen subject".into()));
    }
    if data.subject_index(held_out).is_none() {
        return Err(Error::Config(format!("subject {held_out} is not in the dataset")));
    }
    evaluate_subjects(model, data, &[held_out], Protocol::Loso, cfg)
}

/// Train on every subject but `held_out`, then evaluate it zero-shot next
/// to an untrained model from the same initialization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LosoOutcome {
    pub held_out: u32,
    pub trained: RetrievalReport,
    pub untrained: RetrievalReport,
}

pub fn evaluate_loso(cfg: &RunConfig, data: &Dataset, held_out: u32) -> Result<LosoOutcome> {
    let mut cfg = cfg.clone();
    cfg.train.exclude_subjects = vec![held_out];
    let model = trainer::train(&cfg, data)?;
    let (trained, _) = run_loso(&model, data, held_out, &cfg.eval)?;
    let baseline = TrainedModel::untrained(&cfg, data)?;
    let (untrained, _) = run_loso(&baseline, data, held_out, &cfg.eval)?;
    Ok(LosoOutcome { held_out, trained, untrained })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ExportMeta {
    code_version: String,
    split: Split,
    blocks: Vec<BlockKind>,
    training_subjects: Vec<u32>,
    samples: usize,
}

/// Predicted blocks for every sample of `split`, named
/// `subj_<s>.stim_<id>.<block>` with shape `(tokens × D_b)`.
pub fn export_embeddings(
    model: &TrainedModel,
    data: &Dataset,
    split: Split,
    blocks: &[BlockKind],
    batch_size: usize,
) -> Result<Archive> {
    let net = &model.model.net;
    let plans = plans_for(data, net.cfg.groups, net.cfg.group_size)?;
    let mut subjects = model.meta.training_subjects.clone();
    if net.cfg.extractor_mode == ExtractorMode::Unified {
        subjects = data.manifest.subject_ids();
    }
    let mut archive = Archive::default();
    let mut samples = 0;
    let mut exported = Vec::new();
    for &block in blocks {
        if resolve_block(net.cfg.arm, block) != block {
            return Err(Error::Config(format!("arm {} has no {} block", net.cfg.arm.label(), block.name())));
        }
        exported.push(block);
    }
    for &s in &subjects {
        let refs = data.sample_refs(Some(&[s]), split);
        let ids = stimuli_of(data, &refs);
        samples += refs.len();
        for &block in &exported {
            let tokens = if block.is_geometric() { net.cfg.image_tokens } else { net.cfg.text_tokens };
            let emb = embed_refs(net, data, &plans, &refs, block, batch_size)?;
            for (row, id) in emb.outer_iter().zip(&ids) {
                archive.push(format!("subj_{s}.stim_{id}.{}", block.name()), vec![tokens, net.cfg.width], row.to_vec());
            }
        }
    }
    archive.set_metadata(&ExportMeta {
        code_version: crate::CODE_VERSION.to_string(),
        split,
        blocks: exported,
        training_subjects: model.meta.training_subjects.clone(),
        samples,
    });
    Ok(archive)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_unit(rng: &mut impl Rng, rows: usize, cols: usize) -> Array2<f32> {
        nn::gaussian::<f32, _>(rng, rows, cols, 1.0)
    }

    #[test]
    fn self_retrieval_is_perfect() {
        let mut rng = seed::rng(1, "t", 0);
        let c = random_unit(&mut rng, 50, 16);
        let ids: Vec<u32> = (0..50).collect();
        let (s, ranks) = retrieval_metrics(c.view(), &ids, c.view(), &ids).unwrap();
        assert_eq!(s.top1, 1.0);
        assert_eq!(s.two_way, 1.0);
        assert!(ranks.iter().all(|&r| r == 1.0));
        assert!((s.mean_cosine - 1.0).abs() < 1e-9);
    }

    #[test]
    fn positive_scaling_leaves_report_unchanged() {
        let mut rng = seed::rng(2, "t", 0);
        let c = random_unit(&mut rng, 30, 8);
        let p = random_unit(&mut rng, 30, 8);
        let ids: Vec<u32> = (100..130).collect();
        let a = retrieval_metrics(p.view(), &ids, c.view(), &ids).unwrap();
        let b = retrieval_metrics((&p * 7.0).view(), &ids, c.view(), &ids).unwrap();
        assert_eq!(a.1, b.1);
        assert_eq!((a.0.top1, a.0.top5, a.0.two_way), (b.0.top1, b.0.top5, b.0.two_way));
        assert!((a.0.mean_cosine - b.0.mean_cosine).abs() < 1e-6);
    }

    #[test]
    fn duplicate_candidates_rejected() {
        let c = Array2::<f32>::eye(3);
        let e = retrieval_metrics(c.view(), &[1, 2, 1], c.view(), &[1, 2, 1]).unwrap_err();
        assert!(matches!(e, Error::Domain(_)));
    }

    #[test]
    fn ties_are_credited_in_expectation() {
        // candidates 0 and 1 share features; the query matches both exactly
        let c = Array2::<f32>::from_shape_vec((3, 2), vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0]).unwrap();
        let p = Array2::<f32>::from_shape_vec((1, 2), vec![1.0, 0.0]).unwrap();
        let (s, r) = retrieval_metrics(p.view(), &[0], c.view(), &[0, 1, 2]).unwrap();
        assert_eq!(r, vec![1.5]);
        assert_eq!(s.top1, 0.5);
        assert_eq!(s.top5, 1.0);
        assert_eq!(s.two_way, 0.75);
    }

    #[test]
    fn tie_credit_matches_random_tie_break_enumeration() {
        // 2 strictly better, 3 tied with the truth: rank uniform on 3..=6
        let mut c = Array2::<f32>::zeros((8, 2));
        c.row_mut(0).assign(&ndarray::arr1(&[1.0, 0.2]));
        for j in 1..3 {
            c.row_mut(j).assign(&ndarray::arr1(&[1.0, 0.0]));
        }
        for j in 3..6 {
            c.row_mut(j).assign(&ndarray::arr1(&[1.0, 0.2]));
        }
        for j in 6..8 {
            c.row_mut(j).assign(&ndarray::arr1(&[0.0, 1.0]));
        }
        let p = Array2::<f32>::from_shape_vec((1, 2), vec![1.0, 0.0]).unwrap();
        let ids: Vec<u32> = (0..8).collect();
        let (s, r) = retrieval_metrics(p.view(), &[0], c.view(), &ids).unwrap();
        let ranks = [3.0, 4.0, 5.0, 6.0];
        assert_eq!(r[0], ranks.iter().sum::<f64>() / 4.0);
        assert_eq!(s.top1, 0.0);
        assert_eq!(s.top5, ranks.iter().filter(|&&k| k <= 5.0).count() as f64 / 4.0);
        // beats 2 strictly, ties 3, loses to 2
        assert_eq!(s.two_way, (2.0 + 1.5) / 7.0);
    }

    #[test]
    fn random_embeddings_score_at_chance() {
        let mut rng = seed::rng(3, "t", 0);
        let (c, trials) = (200usize, 40usize);
        let ids: Vec<u32> = (0..c as u32).collect();
        let (mut top1, mut two_way) = (0.0, 0.0);
        for _ in 0..trials {
            let cand = random_unit(&mut rng, c, 32);
            let pred = random_unit(&mut rng, c, 32);
            let (s, _) = retrieval_metrics(pred.view(), &ids, cand.view(), &ids).unwrap();
            top1 += s.top1;
            two_way += s.two_way;
        }
        let n = (c * trials) as f64;
        let (p1, p2) = (top1 / trials as f64, two_way / trials as f64);
        let sd1 = (0.005 * 0.995 / n).sqrt();
        assert!((p1 - 0.005).abs() < 3.0 * sd1 + 1e-12, "top1 {p1}");
        // two-way averages c-1 correlated comparisons per query; the per-query
        // bound is conservative
        let sd2 = (0.25 / n).sqrt();
        assert!((p2 - 0.5).abs() < 3.0 * sd2, "two-way {p2}");
    }
}
