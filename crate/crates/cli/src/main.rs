use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use unibrain::alignment::DiscriminatorVariant;
use unibrain::checkpoint::Archive;
use unibrain::config::RunConfig;
use unibrain::dataset::{self, Dataset, Split};
use unibrain::embedder::{Arm, BlockKind, ExtractorMode};
use unibrain::eval::{self, Protocol};
use unibrain::sweep::{self, SweepAxis};
use unibrain::trainer::{TrainedModel, Trainer};
use unibrain::{par, Error, Result};

#[derive(Parser)]
#[command(name = "unibrain", version, about = "Subject-agnostic fMRI-to-embedding decoding")]
struct Cli {
    /// Run every numeric kernel on one thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-subject dataset.
    GenData(GenDataArgs),
    /// Train a model.
    Train(TrainArgs),
    /// Evaluate a checkpoint.
    Eval(EvalArgs),
    /// Export predicted embeddings per stimulus.
    Export(ExportArgs),
    /// Run an ablation axis and write a combined table.
    Sweep(SweepArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    subjects: Option<usize>,
    /// Recordings per subject.
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    subject_variability: Option<f64>,
    #[arg(long)]
    noise_sigma: Option<f64>,
    #[arg(long)]
    voxel_min: Option<usize>,
    #[arg(long)]
    voxel_max: Option<usize>,
    #[arg(long)]
    test_fraction: Option<f64>,
}

/// Overrides shared by `train` and `sweep`.
#[derive(Args, Default)]
struct ModelFlags {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Keep a subject out of training (repeatable).
    #[arg(long = "exclude-subject")]
    exclude_subject: Vec<u32>,
    /// Force the adversarial weight to 0.
    #[arg(long)]
    no_adversarial: bool,
    /// Drop the mutual-assistance embedder.
    #[arg(long)]
    no_mutual: bool,
    #[arg(long, conflicts_with_all = ["no_mutual", "geometric_only", "arm"])]
    semantic_only: bool,
    #[arg(long, conflicts_with_all = ["no_mutual", "arm"])]
    geometric_only: bool,
    /// assist | geometric-semantic | geometric-only | semantic-only
    #[arg(long)]
    arm: Option<String>,
    #[arg(long, conflicts_with = "no_mse")]
    no_softclip: bool,
    #[arg(long)]
    no_mse: bool,
    #[arg(long)]
    subject_specific_extractors: bool,
    #[arg(long)]
    groups: Option<usize>,
    #[arg(long)]
    group_size: Option<usize>,
    #[arg(long)]
    depth: Option<usize>,
    /// none | linear | nonlinear-2l | nonlinear-3l
    #[arg(long)]
    discriminator: Option<String>,
    #[arg(long)]
    lambda0: Option<f64>,
    #[arg(long)]
    lambda1: Option<f64>,
    #[arg(long)]
    lambda2: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Continue from a checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[command(flatten)]
    flags: ModelFlags,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// in-distribution | loso
    #[arg(long, default_value = "in-distribution")]
    protocol: String,
    /// Held-out subject for the loso protocol.
    #[arg(long)]
    subject: Option<u32>,
    /// fine-geometric | fine-semantic | coarse-geometric | coarse-semantic
    #[arg(long)]
    embedding: Option<String>,
    #[arg(long)]
    max_candidates: Option<usize>,
    #[arg(long)]
    candidate_seed: Option<u64>,
    /// Write one JSON line per query with its rank.
    #[arg(long)]
    dump_ranks: bool,
    /// Report directory (defaults to the checkpoint's directory).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// train | test | all
    #[arg(long, default_value = "test")]
    split: String,
    /// Blocks to export (repeatable); defaults to the fine blocks.
    #[arg(long)]
    embedding: Vec<String>,
}

#[derive(Args)]
struct SweepArgs {
    /// adversarial | mutual | arm | loss | groups | depth | discriminator | lambda1 | extractor | variability
    #[arg(long)]
    axis: String,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    seeds: u64,
    #[command(flatten)]
    flags: ModelFlags,
}

fn parse_or<T>(v: Option<T>, what: &str, raw: &str) -> Result<T> {
    v.ok_or_else(|| Error::Config(format!("unknown {what} `{raw}`")))
}

impl ModelFlags {
    fn apply(&self, cfg: &mut RunConfig) -> Result<()> {
        macro_rules! set {
            ($src:expr, $dst:expr) => {
                if let Some(v) = $src {
                    $dst = v;
                }
            };
        }
        set!(self.epochs, cfg.train.epochs);
        set!(self.batch_size, cfg.train.batch_size);
        set!(self.lr, cfg.train.max_lr);
        if let Some(s) = self.seed {
            cfg.train.seed = s;
            cfg.model.init_seed = s;
        }
        if !self.exclude_subject.is_empty() {
            cfg.train.exclude_subjects = self.exclude_subject.clone();
        }
        set!(self.groups, cfg.model.groups);
        set!(self.group_size, cfg.model.group_size);
        set!(self.depth, cfg.model.depth);
        set!(self.lambda0, cfg.loss.lambda0);
        set!(self.lambda1, cfg.loss.lambda1);
        set!(self.lambda2, cfg.loss.lambda2);
        set!(self.tau, cfg.loss.tau);
        if let Some(a) = &self.arm {
            cfg.model.arm = parse_or(serde_json::from_value::<Arm>(a.as_str().into()).ok(), "arm", a)?;
        }
        if self.no_mutual {
            cfg.model.arm = Arm::GeometricSemantic;
        }
        if self.semantic_only {
            cfg.model.arm = Arm::SemanticOnly;
        }
        if self.geometric_only {
            cfg.model.arm = Arm::GeometricOnly;
        }
        if let Some(d) = &self.discriminator {
            cfg.discriminator.variant = parse_or(DiscriminatorVariant::parse(d), "discriminator", d)?;
        }
        if self.no_adversarial {
            cfg.loss.lambda0 = 0.0;
        }
        if self.no_softclip {
            cfg.loss.lambda2 = 0.0;
        }
        if self.no_mse {
            cfg.loss.lambda1 = 0.0;
        }
        if self.subject_specific_extractors {
            cfg.model.extractor_mode = ExtractorMode::SubjectSpecific;
        }
        Ok(())
    }

    /// Defaults, then the config file, then flags; data settings come from
    /// the dataset on disk.
    fn resolve(&self, data: &Dataset) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::from_file(p)?,
            None => RunConfig::desk(),
        };
        self.apply(&mut cfg)?;
        cfg.data = data.manifest.generator.clone();
        cfg.validate()?;
        Ok(cfg)
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::desk(),
    };
    cfg.sync_teacher();
    let d = &mut cfg.data;
    macro_rules! set {
        ($src:expr, $dst:expr) => {
            if let Some(v) = $src {
                $dst = v;
            }
        };
    }
    set!(a.subjects, d.subjects);
    set!(a.samples, d.samples_per_subject);
    set!(a.seed, d.seed);
    set!(a.subject_variability, d.subject_variability);
    set!(a.noise_sigma, d.noise_sigma);
    set!(a.voxel_min, d.voxel_min);
    set!(a.voxel_max, d.voxel_max);
    set!(a.test_fraction, d.test_fraction);
    let manifest = dataset::generate_dataset(&cfg.data, &a.out)?;
    print!("{}", manifest.summary());
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let data = dataset::load_dataset(&a.data)?;
    let cfg = a.flags.resolve(&data)?;
    let trainer = match &a.resume {
        Some(p) => Trainer::resume(&Archive::load(p)?, p, &cfg, &data)?,
        None => Trainer::new(&cfg, &data)?,
    };
    let mut trainer = trainer.with_output(&a.out)?;
    let report = trainer.param_report();
    write_text(&a.out.join("params.json"), &serde_json::to_string_pretty(&report).expect("serializable"))?;
    println!(
        "parameters: network {} (analytic {}), discriminator {}, extractor stacks {}",
        report.network, report.analytic, report.discriminator, report.extractor_stacks
    );
    trainer.run()?;
    let s = &trainer.state;
    println!(
        "trained {} steps; epoch loss {:.5} -> {:.5}; best validation top-1 {:?}",
        s.step,
        s.epoch_losses.first().copied().unwrap_or(f64::NAN),
        s.epoch_losses.last().copied().unwrap_or(f64::NAN),
        s.best_val_top1
    );
    println!("checkpoint: {}", a.out.join("final.ckpt").display());
    Ok(())
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let model = TrainedModel::load(&a.checkpoint)?;
    let data = dataset::load_dataset(&a.data)?;
    let mut cfg = model.meta.config.eval.clone();
    if let Some(e) = &a.embedding {
        cfg.embedding = parse_or(BlockKind::parse(e), "embedding", e)?;
    }
    if a.max_candidates.is_some() {
        cfg.max_candidates = a.max_candidates;
    }
    if let Some(s) = a.candidate_seed {
        cfg.candidate_seed = s;
    }
    let protocol = parse_or(Protocol::parse(&a.protocol), "protocol", &a.protocol)?;
    let (report, ranks) = match protocol {
        Protocol::InDistribution => eval::run_in_distribution(&model, &data, &cfg)?,
        Protocol::Loso => {
            let s = a.subject.ok_or_else(|| Error::Config("--protocol loso requires --subject".into()))?;
            eval::run_loso(&model, &data, s, &cfg)?
        }
    };
    let dir = a.out.clone().unwrap_or_else(|| a.checkpoint.parent().unwrap_or(Path::new(".")).to_path_buf());
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let stem = match (protocol, a.subject) {
        (Protocol::Loso, Some(s)) => format!("report_loso_subj_{s}"),
        _ => "report_in_distribution".to_string(),
    };
    write_text(&dir.join(format!("{stem}.json")), &report.to_json())?;
    write_text(&dir.join(format!("{stem}.txt")), &report.to_table())?;
    if a.dump_ranks {
        let lines: Vec<String> = ranks.iter().map(|r| serde_json::to_string(r).expect("serializable")).collect();
        write_text(&dir.join(format!("{stem}_ranks.jsonl")), &(lines.join("\n") + "\n"))?;
    }
    print!("{}", report.to_table());
    Ok(())
}

fn export(a: ExportArgs) -> Result<()> {
    let model = TrainedModel::load(&a.checkpoint)?;
    let data = dataset::load_dataset(&a.data)?;
    let split = parse_or(serde_json::from_value::<Split>(a.split.as_str().into()).ok(), "split", &a.split)?;
    let blocks = if a.embedding.is_empty() {
        match model.meta.config.model.arm {
            Arm::Assist => vec![BlockKind::FineGeometric, BlockKind::FineSemantic],
            Arm::GeometricSemantic => vec![BlockKind::CoarseGeometric, BlockKind::CoarseSemantic],
            Arm::GeometricOnly => vec![BlockKind::CoarseGeometric],
            Arm::SemanticOnly => vec![BlockKind::CoarseSemantic],
        }
    } else {
        a.embedding.iter().map(|e| parse_or(BlockKind::parse(e), "embedding", e)).collect::<Result<_>>()?
    };
    let archive = eval::export_embeddings(&model, &data, split, &blocks, model.meta.config.eval.batch_size)?;
    archive.save(&a.out)?;
    println!("exported {} blocks to {}", archive.tensors.len(), a.out.display());
    Ok(())
}

fn sweep_cmd(a: SweepArgs) -> Result<()> {
    let axis = parse_or(SweepAxis::parse(&a.axis), "sweep axis", &a.axis)?;
    let data = dataset::load_dataset(&a.data)?;
    let cfg = a.flags.resolve(&data)?;
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    cfg.write(&a.out.join("config.json"))?;
    let seeds: Vec<u64> = (0..a.seeds).map(|i| cfg.train.seed + i).collect();
    let table = sweep::run_sweep(axis, &cfg, &data, &seeds)?;
    let stem = format!("sweep_{}", axis.name());
    write_text(&a.out.join(format!("{stem}.json")), &serde_json::to_string_pretty(&table).expect("serializable"))?;
    write_text(&a.out.join(format!("{stem}.txt")), &table.to_table())?;
    print!("{}", table.to_table());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    par::set_sequential(cli.sequential);
    let result = match cli.cmd {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Export(a) => export(a),
        Command::Sweep(a) => sweep_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
