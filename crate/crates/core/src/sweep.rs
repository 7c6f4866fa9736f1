//! Ablation sweeps: train one model per arm and seed, tabulate retrieval.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::alignment::DiscriminatorVariant;
use crate::config::RunConfig;
use crate::dataset::Dataset;
use crate::embedder::{Arm, ExtractorMode};
use crate::error::{Error, Result};
use crate::eval::{self, Protocol, RetrievalScores};
use crate::trainer;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepAxis {
    /// With and without the adversarial term.
    Adversarial,
    /// With and without the mutual-assistance embedder.
    Mutual,
    /// The four embedder arms.
    Arm,
    /// Full loss, without SoftCLIP, without MSE.
    Loss,
    /// Grouping (G, K) pairs.
    Groups,
    /// Cross-attention depth.
    Depth,
    Discriminator,
    Lambda1,
    /// Unified vs. subject-specific extractors.
    Extractor,
    /// Cross-subject evaluation across subject-variability settings.
    Variability,
}

impl SweepAxis {
    pub const ALL: [SweepAxis; 10] = [
        SweepAxis::Adversarial,
        SweepAxis::Mutual,
        SweepAxis::Arm,
        SweepAxis::Loss,
        SweepAxis::Groups,
        SweepAxis::Depth,
        SweepAxis::Discriminator,
        SweepAxis::Lambda1,
        SweepAxis::Extractor,
        SweepAxis::Variability,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Adversarial => "adversarial",
            SweepAxis::Mutual => "mutual",
            SweepAxis::Arm => "arm",
            SweepAxis::Loss => "loss",
            SweepAxis::Groups => "groups",
            SweepAxis::Depth => "depth",
            SweepAxis::Discriminator => "discriminator",
            SweepAxis::Lambda1 => "lambda1",
            SweepAxis::Extractor => "extractor",
            SweepAxis::Variability => "variability",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.name() == s)
    }

    /// Labelled configurations along this axis, derived from `base`.
    pub fn arms(self, base: &RunConfig) -> Vec<(String, RunConfig)> {
        let with = |label: &str, f: &dyn Fn(&mut RunConfig)| {
            let mut c = base.clone();
            f(&mut c);
            (label.to_string(), c)
        };
        match self {
            SweepAxis::Adversarial => vec![
                with("adversarial", &|c| c.loss.lambda0 = c.loss.lambda0.max(1.0)),
                with("no-adversarial", &|c| c.loss.lambda0 = 0.0),
            ],
            SweepAxis::Mutual => vec![
                with("mutual-assist", &|c| c.model.arm = Arm::Assist),
                with("no-mutual", &|c| c.model.arm = Arm::GeometricSemantic),
            ],
            SweepAxis::Arm => [Arm::Assist, Arm::GeometricSemantic, Arm::GeometricOnly, Arm::SemanticOnly]
                .into_iter()
                .map(|a| with(a.label(), &|c| c.model.arm = a))
                .collect(),
            SweepAxis::Loss => vec![
                with("mse+softclip", &|_| {}),
                with("no-softclip", &|c| c.loss.lambda2 = 0.0),
                with("no-mse", &|c| c.loss.lambda1 = 0.0),
            ],
            SweepAxis::Groups => [(32, 4), (64, 8), (128, 16)]
                .into_iter()
                .map(|(g, k)| {
                    with(&format!("G={g},K={k}"), &|c| {
                        c.model.groups = g;
                        c.model.group_size = k;
                    })
                })
                .collect(),
            SweepAxis::Depth => (1..=3).map(|d| with(&format!("depth={d}"), &|c| c.model.depth = d)).collect(),
            SweepAxis::Discriminator => {
                [DiscriminatorVariant::Linear, DiscriminatorVariant::NonLinear2, DiscriminatorVariant::NonLinear3]
                    .into_iter()
                    .map(|v| with(v.name(), &|c| c.discriminator.variant = v))
                    .collect()
            }
            SweepAxis::Lambda1 => [1e3, 1e4, 1e5, 1e6]
                .into_iter()
                .map(|l| with(&format!("lambda1={l:e}"), &|c| c.loss.lambda1 = l))
                .collect(),
            SweepAxis::Extractor => vec![
                with("unified", &|c| c.model.extractor_mode = ExtractorMode::Unified),
                with("subject-specific", &|c| c.model.extractor_mode = ExtractorMode::SubjectSpecific),
            ],
            SweepAxis::Variability => [0.0, 0.1, 0.5]
                .into_iter()
                .map(|v| with(&format!("sigma_subj={v}"), &|c| c.data.subject_variability = v))
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub label: String,
    pub protocol: Protocol,
    pub seeds: Vec<u64>,
    /// Mean over seeds of the subject-averaged scores.
    pub mean: RetrievalScores,
    pub top1_std: f64,
    pub per_seed_top1: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub axis: SweepAxis,
    pub rows: Vec<SweepRow>,
    pub note: String,
}

impl SweepTable {
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# {}", self.note);
        let _ = writeln!(s, "axis: {}", self.axis.name());
        let _ = writeln!(
            s,
            "{:<28} {:<16} {:>7} {:>7} {:>7} {:>8} {:>8}",
            "arm", "protocol", "top1", "±sd", "top5", "two-way", "cosine"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<28} {:<16} {:>7.4} {:>7.4} {:>7.4} {:>8.4} {:>8.4}",
                r.label,
                r.protocol.label(),
                r.mean.top1,
                r.top1_std,
                r.mean.top5,
                r.mean.two_way,
                r.mean.mean_cosine
            );
        }
        s
    }
}

/// Set both the initialization and the data-order seed of a run.
pub fn seeded(cfg: &RunConfig, seed: u64) -> RunConfig {
    let mut c = cfg.clone();
    c.train.seed = seed;
    c.model.init_seed = seed;
    c
}

/// Train and evaluate one configuration in memory (in-distribution).
pub fn run_in_distribution_arm(cfg: &RunConfig, data: &Dataset) -> Result<RetrievalScores> {
    let model = trainer::train(cfg, data)?;
    Ok(eval::run_in_distribution(&model, data, &cfg.eval)?.0.mean)
}

/// Train without the last subject and evaluate it zero-shot.
pub fn run_loso_arm(cfg: &RunConfig, data: &Dataset) -> Result<RetrievalScores> {
    let held_out = *data.manifest.subject_ids().last().ok_or_else(|| Error::Config("empty dataset".into()))?;
    Ok(eval::evaluate_loso(cfg, data, held_out)?.trained.mean)
}

fn summarize(label: String, protocol: Protocol, seeds: &[u64], runs: Vec<RetrievalScores>) -> SweepRow {
    let mean = RetrievalScores::mean(&runs);
    let top1: Vec<f64> = runs.iter().map(|r| r.top1).collect();
    let var = top1.iter().map(|t| (t - mean.top1).powi(2)).sum::<f64>() / top1.len().max(1) as f64;
    SweepRow { label, protocol, seeds: seeds.to_vec(), mean, top1_std: var.sqrt(), per_seed_top1: top1 }
}

/// Run every arm of `axis` for each seed. `data` is used as-is except on
/// the variability axis, which generates one dataset per setting from
/// `base.data`.
pub fn run_sweep(axis: SweepAxis, base: &RunConfig, data: &Dataset, seeds: &[u64]) -> Result<SweepTable> {
    if seeds.is_empty() {
        return Err(Error::Config("a sweep needs at least one seed".into()));
    }
    let mut rows = Vec::new();
    for (label, cfg) in axis.arms(base) {
        cfg.validate()?;
        log::info!("sweep {}: arm {label}", axis.name());
        let mut runs = Vec::new();
        let protocol = if axis == SweepAxis::Variability { Protocol::Loso } else { Protocol::InDistribution };
        let generated;
        let d = if axis == SweepAxis::Variability {
            generated = Dataset::generate(&cfg.data)?;
            &generated
        } else {
            data
        };
        for &s in seeds {
            let c = seeded(&cfg, s);
            runs.push(match protocol {
                Protocol::Loso => run_loso_arm(&c, d)?,
                Protocol::InDistribution => run_in_distribution_arm(&c, d)?,
            });
        }
        rows.push(summarize(label, protocol, seeds, runs));
    }
    Ok(SweepTable { axis, rows, note: eval::REPORT_NOTE.to_string() })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_axis_yields_valid_arms() {
        let base = RunConfig::desk();
        for axis in SweepAxis::ALL {
            let arms = axis.arms(&base);
            assert!(arms.len() >= 2, "{}", axis.name());
            for (label, c) in arms {
                c.validate().unwrap_or_else(|e| panic!("{} {label}: {e}", axis.name()));
            }
            assert_eq!(SweepAxis::parse(axis.name()), Some(axis));
        }
    }
}
