mod common;

use common::small_run;
use unibrain::checkpoint::Archive;
use unibrain::config::RunConfig;
use unibrain::dataset::{Dataset, Split};
use unibrain::embedder::{BlockKind, ExtractorMode};
use unibrain::eval::{self, Protocol};
use unibrain::extractor::PlanCache;
use unibrain::nn::{Mode, Params};
use unibrain::seed;
use unibrain::trainer::{self, assemble_batch, build_batch, StepRecord, TrainedModel, Trainer};
use unibrain::Error;

fn data(cfg: &RunConfig) -> Dataset {
    Dataset::generate(&cfg.data).unwrap()
}

#[test]
fn batches_are_uniform_over_subjects() {
    let mut cfg = small_run();
    cfg.data.subjects = 4;
    let ds = data(&cfg);
    let pool = ds.sample_refs(None, Split::Train);
    let mut counts = [0f64; 4];
    let mut rng = seed::rng(11, "batches", 0);
    for _ in 0..1000 {
        for r in assemble_batch(&ds, None, 24, &mut rng).unwrap() {
            counts[r.subject] += 1.0;
        }
    }
    let total: f64 = counts.iter().sum();
    let chi2: f64 = (0..4)
        .map(|s| {
            let share = pool.iter().filter(|r| r.subject == s).count() as f64 / pool.len() as f64;
            let e = total * share;
            (counts[s] - e).powi(2) / e
        })
        .sum();
    // 99th percentile of chi-square with 3 degrees of freedom
    assert!(chi2 < 11.345, "chi2 = {chi2}, counts {counts:?}");
}

#[test]
fn subject_filter_is_respected() {
    let mut cfg = small_run();
    cfg.data.subjects = 4;
    let ds = data(&cfg);
    let mut rng = seed::rng(0, "b", 0);
    for _ in 0..200 {
        let b = assemble_batch(&ds, Some(&[0, 1, 2]), 16, &mut rng).unwrap();
        assert!(b.iter().all(|r| ds.subjects[r.subject].subject_id != 3));
    }
}

#[test]
fn unequal_lengths_share_one_extractor() {
    let mut cfg = small_run();
    cfg.model.groups = 64;
    cfg.model.group_size = 8;
    cfg.data.subjects = 2;
    cfg.data.voxel_counts = Some(vec![500, 731]);
    let ds = data(&cfg);
    let pool = ds.sample_refs(None, Split::Train);
    let refs: Vec<_> = pool
        .iter()
        .filter(|r| r.subject == 0)
        .take(3)
        .chain(pool.iter().filter(|r| r.subject == 1).take(3))
        .copied()
        .collect();
    assert!(refs.iter().any(|r| r.subject == 0) && refs.iter().any(|r| r.subject == 1));
    let mut plans = PlanCache::new(64, 8);
    let (input, _) = build_batch(&ds, &mut plans, &refs).unwrap();
    let model = trainer::TrainableModel::new(&cfg, &[0, 1]).unwrap();
    assert_eq!(model.net.extractor_stacks(), 1);
    let (out, _) = model.net.forward(&input, Mode::Eval).unwrap();
    assert_eq!(out.embeddings.get(BlockKind::FineGeometric).unwrap().nrows(), 6 * cfg.model.image_tokens);
}

#[test]
fn single_subject_disables_adversarial_term() {
    let mut cfg = small_run();
    cfg.train.exclude_subjects = vec![1, 2];
    let ds = data(&cfg);
    let mut t = Trainer::new(&cfg, &ds).unwrap();
    assert!(!t.adversarial());
    assert!(t.model.disc.is_none());
    t.run_until(3).unwrap();
    assert_eq!(t.cfg.loss.lambda0, 0.0);
}

#[test]
fn same_seed_same_checkpoint() {
    let cfg = small_run();
    let ds = data(&cfg);
    let run = || {
        let mut t = Trainer::new(&cfg, &ds).unwrap();
        t.run().unwrap();
        t.archive().hash()
    };
    assert_eq!(run(), run());
    let mut other = cfg.clone();
    other.train.seed = 1;
    let mut t = Trainer::new(&other, &ds).unwrap();
    t.run().unwrap();
    assert_ne!(t.archive().hash(), run());
}

#[test]
fn resume_continues_step_for_step() {
    let cfg = small_run();
    let ds = data(&cfg);
    let mut full = Trainer::new(&cfg, &ds).unwrap();
    full.run().unwrap();
    let total = full.state.total_steps;
    let half = total / 2 + 1;

    let mut first = Trainer::new(&cfg, &ds).unwrap();
    first.run_until(half).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mid.ckpt");
    first.save(&path).unwrap();
    let archive = Archive::load(&path).unwrap();
    let mut resumed = Trainer::resume(&archive, &path, &cfg, &ds).unwrap();
    assert_eq!(resumed.state.step, half);
    resumed.run_until(total).unwrap();
    let tail: Vec<_> = full.trace.iter().filter(|(s, _)| *s >= half).collect();
    assert_eq!(tail.len(), resumed.trace.len());
    for ((s1, a), (s2, b)) in tail.into_iter().zip(&resumed.trace) {
        assert_eq!(s1, s2);
        assert!((a - b).abs() <= 1e-6 * a.abs().max(1.0), "step {s1}: {a} vs {b}");
    }
    assert_eq!(full.archive().hash(), resumed.archive().hash());
}

#[test]
fn resume_guards() {
    let cfg = small_run();
    let ds = data(&cfg);
    let mut t = Trainer::new(&cfg, &ds).unwrap();
    t.run_until(2).unwrap();
    let archive = t.archive();
    let p = std::path::Path::new("mem.ckpt");

    let mut changed_g = cfg.clone();
    changed_g.model.groups = 8;
    match Trainer::resume(&archive, p, &changed_g, &ds) {
        Err(Error::Config(m)) => assert!(m.contains("groups"), "{m}"),
        Err(e) => panic!("unexpected error {e}"),
        Ok(_) => panic!("changed G accepted"),
    }
    let mut changed_lambda = cfg.clone();
    changed_lambda.loss.lambda1 = 10.0;
    let r = Trainer::resume(&archive, p, &changed_lambda, &ds).unwrap();
    assert_eq!(r.state.step, 2);
    assert_eq!(r.cfg.loss.lambda1, 10.0);
}

#[test]
fn nan_loss_aborts_with_report() {
    let cfg = small_run();
    let ds = data(&cfg);
    let mut t = Trainer::new(&cfg, &ds).unwrap();
    t.run_until(1).unwrap();
    t.model.net.visit_mut("", &mut |name, _, v| {
        if name == "embedder.geometric.query" {
            v[0] = f32::NAN;
        }
    });
    match t.run_until(2) {
        Err(e @ Error::Numeric { step: 1, .. }) => {
            assert_eq!(e.exit_code(), 4);
            assert!(e.to_string().contains("mse_cg"), "{e}");
        }
        other => panic!("expected numeric abort, got {other:?}", other = other.err()),
    }
}

#[test]
fn parameter_report_matches_analytic_counts() {
    let cfg = small_run();
    let ds = data(&cfg);
    let unified = Trainer::new(&cfg, &ds).unwrap().param_report();
    assert_eq!(unified.extractor_stacks, 1);
    assert_eq!(unified.network, unified.analytic);
    let mut ss = cfg.clone();
    ss.model.extractor_mode = ExtractorMode::SubjectSpecific;
    let specific = Trainer::new(&ss, &ds).unwrap().param_report();
    assert_eq!(specific.extractor_stacks, 3);
    assert_eq!(specific.network, specific.analytic);
    assert!((unified.ratio_to_other_mode - unified.network as f64 / specific.network as f64).abs() < 1e-12);
}

#[test]
fn metrics_log_and_alpha_schedule() {
    let cfg = small_run();
    let ds = data(&cfg);
    let dir = tempfile::tempdir().unwrap();
    let teacher_before = ds.teacher.clone();
    let mut t = Trainer::new(&cfg, &ds).unwrap().with_output(dir.path()).unwrap();
    t.run().unwrap();
    assert_eq!(ds.teacher, teacher_before);
    for f in ["config.json", "final.ckpt", "best.ckpt", "metrics.jsonl", "plan_subj_0.json"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let text = std::fs::read_to_string(dir.path().join("metrics.jsonl")).unwrap();
    let steps: Vec<StepRecord> = text.lines().filter_map(|l| serde_json::from_str(l).ok()).collect();
    assert_eq!(steps.len() as u64, t.state.total_steps);
    assert_eq!(steps[0].alpha, 0.0);
    assert!(steps.windows(2).all(|w| w[1].alpha >= w[0].alpha));
    let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    for key in [
        "step", "epoch", "lr", "alpha", "adv", "mse_cg", "mse_cs", "mse_g", "mse_s", "clip_cg", "clip_cs", "clip_g",
        "clip_s", "total",
    ] {
        assert!(first.get(key).is_some(), "{key}");
    }
    let epochs = text.lines().filter(|l| l.contains("mean_loss")).count();
    assert_eq!(epochs, cfg.train.epochs);
}

#[test]
fn in_distribution_report_covers_test_split() {
    let cfg = small_run();
    let ds = data(&cfg);
    let model = trainer::train(&cfg, &ds).unwrap();
    let (report, ranks) = eval::run_in_distribution(&model, &ds, &cfg.eval).unwrap();
    assert_eq!(report.protocol, Protocol::InDistribution);
    assert_eq!(report.per_subject.len(), 3);
    assert_eq!(ranks.len(), ds.sample_refs(None, Split::Test).len());
    for p in &report.per_subject {
        assert_eq!(p.scores.candidates, ds.manifest.test_stimuli.len());
        for v in [p.scores.top1, p.scores.top5, p.scores.two_way] {
            assert!((0.0..=1.0).contains(&v));
        }
    }
    let mean_top1 = report.per_subject.iter().map(|p| p.scores.top1).sum::<f64>() / 3.0;
    assert!((report.mean.top1 - mean_top1).abs() < 1e-12);
    let (again, _) = eval::run_in_distribution(&model, &ds, &cfg.eval).unwrap();
    assert_eq!(report, again);
    assert!(report.to_table().contains("not comparable"));
}

#[test]
fn loso_protocol_guards() {
    let mut cfg = small_run();
    let ds = data(&cfg);
    let all = trainer::train(&cfg, &ds).unwrap();
    let e = eval::run_loso(&all, &ds, 2, &cfg.eval).unwrap_err();
    assert!(matches!(e, Error::Protocol(_)));
    assert_eq!(e.exit_code(), 5);

    cfg.train.exclude_subjects = vec![2];
    let held = trainer::train(&cfg, &ds).unwrap();
    assert_eq!(held.meta.training_subjects, vec![0, 1]);
    let (r, _) = eval::run_loso(&held, &ds, 2, &cfg.eval).unwrap();
    assert_eq!(r.protocol, Protocol::Loso);
    assert_eq!(r.per_subject[0].subject_id, 2);
    assert!(eval::run_in_distribution(&held, &ds, &cfg.eval).unwrap().0.per_subject.iter().all(|p| p.subject_id != 2));

    let mut ss = small_run();
    ss.model.extractor_mode = ExtractorMode::SubjectSpecific;
    let specific = trainer::train(&ss, &ds).unwrap();
    let mut m = specific.clone();
    m.meta.training_subjects = vec![0, 1];
    assert!(matches!(eval::run_loso(&m, &ds, 2, &ss.eval), Err(Error::Config(_))));
}

#[test]
fn unseen_subject_needs_no_new_parameters() {
    let mut cfg = small_run();
    cfg.data.voxel_counts = Some(vec![140, 120, 900]);
    cfg.train.exclude_subjects = vec![2];
    let ds = data(&cfg);
    let model = trainer::train(&cfg, &ds).unwrap();
    let before = model.model.num_params();
    let mut a = Archive::default();
    a.push_params("", &model.model);
    let (r, _) = eval::run_loso(&model, &ds, 2, &cfg.eval).unwrap();
    assert!(r.mean.queries > 0);
    let mut b = Archive::default();
    b.push_params("", &model.model);
    assert_eq!(before, model.model.num_params());
    assert_eq!(a.hash(), b.hash());
}

#[test]
fn checkpoint_round_trip_preserves_evaluation() {
    let cfg = small_run();
    let ds = data(&cfg);
    let dir = tempfile::tempdir().unwrap();
    let mut t = Trainer::new(&cfg, &ds).unwrap().with_output(dir.path()).unwrap();
    t.run().unwrap();
    let live = t.into_trained();
    let loaded = TrainedModel::load(&dir.path().join("final.ckpt")).unwrap();
    assert_eq!(loaded.meta, live.meta);
    let a = eval::run_in_distribution(&live, &ds, &cfg.eval).unwrap();
    let b = eval::run_in_distribution(&loaded, &ds, &cfg.eval).unwrap();
    assert_eq!(a, b);
}

#[test]
fn export_is_deterministic_with_block_shapes() {
    let cfg = small_run();
    let ds = data(&cfg);
    let model = trainer::train(&cfg, &ds).unwrap();
    let blocks = [BlockKind::FineGeometric, BlockKind::FineSemantic];
    let a = eval::export_embeddings(&model, &ds, Split::Test, &blocks, 16).unwrap();
    let b = eval::export_embeddings(&model, &ds, Split::Test, &blocks, 7).unwrap();
    assert_eq!(a.to_bytes(), b.to_bytes());
    let n = ds.sample_refs(None, Split::Test).len();
    assert_eq!(a.tensors.len(), 2 * n);
    let stim = ds.manifest.test_stimuli[0];
    let g = a.get(&format!("subj_0.stim_{stim}.fine_geometric")).unwrap();
    assert_eq!(g.shape, vec![cfg.model.image_tokens, cfg.model.width]);
    let s = a.get(&format!("subj_0.stim_{stim}.fine_semantic")).unwrap();
    assert_eq!(s.shape, vec![cfg.model.text_tokens, cfg.model.width]);
}

#[test]
fn untrained_baseline_shares_initialization() {
    let cfg = small_run();
    let ds = data(&cfg);
    let u = TrainedModel::untrained(&cfg, &ds).unwrap();
    let t = Trainer::new(&cfg, &ds).unwrap();
    let (mut a, mut b) = (Archive::default(), Archive::default());
    a.push_params("", &u.model);
    b.push_params("", &t.model);
    assert_eq!(a.hash(), b.hash());
}
