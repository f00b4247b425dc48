use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use protoseg::checkpoint::{Checkpoint, RunMeta};
use protoseg::config::RunConfig;
use protoseg::dataset::{load_dataset, write_dataset};
use protoseg::episodes::{build_support, fold_for};
use protoseg::evaluation::{
    annotation_cost_ratio, evaluate_with, predict_volume, write_pgm_previews, DEFAULT_THRESHOLD,
    DEFAULT_WEAK_FACTOR,
};
use protoseg::fsv::{read_volume, write_volume, VolumeFile};
use protoseg::gradcheck::{format_table, run_suite};
use protoseg::phantom::{generate_phantoms, PhantomSpec};
use protoseg::trainer::train_fold_with;
use protoseg::volume::AnnotatedVolume;
use protoseg::{Error, ErrorKind, Result};

/// Few-shot organ segmentation with a masked U-Net.
#[derive(Parser)]
#[command(name = "protoseg", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic phantom volumes and a manifest.
    GenPhantoms(GenArgs),
    /// Train on every class but the held-out one.
    Train(TrainArgs),
    /// Score a checkpoint on its held-out class.
    Eval(EvalArgs),
    /// Segment one query volume from one annotated support volume.
    Predict(PredictArgs),
    /// Finite-difference check of every differentiable op.
    Gradcheck(GradcheckArgs),
    /// Annotation cost ratio of a support set against full annotation.
    Cost(CostArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 4)]
    classes: u8,
    #[arg(long, default_value_t = 20)]
    patients: u32,
    /// Height and width of every slice.
    #[arg(long, default_value_t = 64)]
    size: usize,
    /// Number of axial slices.
    #[arg(long, default_value_t = 32)]
    depth: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.05)]
    noise: f64,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    test_class: u8,
    /// Run configuration; defaults apply to everything it leaves out.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Train the mixed full/box support arm.
    #[arg(long)]
    weak_support: bool,
    /// Train log destination; defaults to the checkpoint path with a
    /// `.log.jsonl` extension.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    test_class: u8,
    #[arg(long)]
    report: PathBuf,
    /// Write per-slice overlays of every query patient here.
    #[arg(long)]
    pgm: Option<PathBuf>,
    /// Refuse to run unless the checkpoint was trained with this config.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    threshold: f32,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    query: PathBuf,
    #[arg(long)]
    support_img: PathBuf,
    #[arg(long)]
    support_mask: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    threshold: f32,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct CostArgs {
    /// Annotations needed to label the target fully.
    #[arg(long)]
    full_shot: u64,
    #[arg(long)]
    support_full: u64,
    #[arg(long)]
    support_weak: u64,
    /// How many times cheaper a box is than a full mask.
    #[arg(long, default_value_t = DEFAULT_WEAK_FACTOR)]
    weak_factor: f64,
}

fn read_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        None => Ok(RunConfig::default()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::Io {
                path: p.to_path_buf(),
                source: e,
            })?;
            RunConfig::from_json(&text)
        }
    }
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn gen_phantoms(a: GenArgs) -> Result<()> {
    let spec = PhantomSpec {
        n_classes: a.classes,
        n_patients: a.patients,
        dims: [a.depth, a.size, a.size],
        seed: a.seed,
        noise_sigma: a.noise,
    };
    let records = generate_phantoms(&spec)?;
    let manifest = write_dataset(&a.out, &records, Some(&spec))?;
    println!("wrote {} records to {}", manifest.entries.len(), a.out.display());
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = read_config(a.config.as_deref())?;
    if a.weak_support {
        cfg.train.weak_support = true;
    }
    cfg.validate()?;
    let (manifest, data) = load_dataset(&a.data)?;
    let fold = fold_for(manifest.n_classes(), manifest.n_patients(), a.test_class)?;
    let meta = RunMeta {
        config_json: cfg.canonical_json(),
        digest: cfg.digest(),
        test_class: a.test_class,
    };
    let out = a.out.clone();
    let outcome = train_fold_with(&fold, &data, &cfg, |episode, params, registry| {
        let path = out.with_extension(format!("ep{episode}.fspm"));
        Checkpoint {
            params: params.clone(),
            registry: registry.clone(),
            meta: Some(meta.clone()),
        }
        .write(&path)
    })?;
    Checkpoint {
        params: outcome.params,
        registry: outcome.registry,
        meta: Some(meta),
    }
    .write(&a.out)?;
    let log_path = a.log.unwrap_or_else(|| a.out.with_extension("log.jsonl"));
    let mut buf = Vec::new();
    outcome.log.write_jsonl(&mut buf).expect("in-memory write");
    write_file(&log_path, buf)?;
    println!(
        "trained {} episodes ({}) holding out class {}; checkpoint {}",
        outcome.log.records.len(),
        cfg.arm_label(),
        a.test_class,
        a.out.display()
    );
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let ckpt = Checkpoint::read(&a.model)?;
    let cfg = match &ckpt.meta {
        Some(meta) => {
            if meta.test_class != a.test_class {
                return Err(Error::Config(format!(
                    "checkpoint holds out class {}, not {}",
                    meta.test_class, a.test_class
                )));
            }
            let cfg = RunConfig::from_json(&meta.config_json)?;
            if cfg.digest() != meta.digest {
                return Err(Error::Config("checkpoint config does not match its digest".into()));
            }
            if let Some(p) = &a.config {
                let wanted = read_config(Some(p))?;
                if wanted.digest() != meta.digest {
                    return Err(Error::Config(format!(
                        "config digest {} does not match checkpoint digest {}",
                        wanted.digest(),
                        meta.digest
                    )));
                }
            }
            cfg
        }
        None => read_config(a.config.as_deref())?,
    };
    let (manifest, data) = load_dataset(&a.data)?;
    let fold = fold_for(manifest.n_classes(), manifest.n_patients(), a.test_class)?;
    let pgm = a.pgm.clone();
    let report = evaluate_with(
        &fold,
        &data,
        &cfg.effective_episode(),
        cfg.arm_label(),
        &cfg.digest(),
        |task| {
            let pred = predict_volume(&ckpt.params, &task.support, &task.query.volume, a.test_class, a.threshold)?;
            if let Some(dir) = &pgm {
                let prefix = format!("class{}_patient{:03}", a.test_class, task.query.patient_id);
                write_pgm_previews(dir, &prefix, &pred, &task.query.mask)?;
            }
            Ok(pred)
        },
    )?;
    write_file(&a.report, report.to_json() + "\n")?;
    println!(
        "class {} ({}): mean dice {:.4}, median {:.4} over {} patients",
        report.class_id,
        report.arm,
        report.mean,
        report.median,
        report.per_patient.len()
    );
    Ok(())
}

fn predict(a: PredictArgs) -> Result<()> {
    let ckpt = Checkpoint::read(&a.model)?;
    let cfg = match &ckpt.meta {
        Some(meta) => RunConfig::from_json(&meta.config_json)?,
        None => RunConfig::default(),
    };
    let query = read_volume(&a.query)?.into_image()?;
    let support_img = read_volume(&a.support_img)?.into_image()?;
    let support_mask = read_volume(&a.support_mask)?.into_mask()?;
    let class_id = support_mask
        .labels()
        .iter()
        .copied()
        .find(|&l| l != 0)
        .ok_or_else(|| Error::Sampling("support mask is empty".into()))?;
    let record = AnnotatedVolume::new(0, class_id, support_img, support_mask)?;
    let support = build_support(&record, &cfg.effective_episode());
    let pred = predict_volume(&ckpt.params, &support, &query, class_id, a.threshold)?;
    write_volume(&a.out, &VolumeFile::Mask(pred))?;
    println!("wrote {}", a.out.display());
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> Result<bool> {
    let rows = run_suite(a.seed)?;
    print!("{}", format_table(&rows));
    Ok(rows.iter().all(|r| r.passed))
}

fn cost(a: CostArgs) -> Result<()> {
    let ratio = annotation_cost_ratio(a.full_shot, a.support_full, a.support_weak, a.weak_factor)?;
    println!("{ratio}");
    Ok(())
}

fn exit_code(kind: ErrorKind) -> u8 {
    match kind {
        ErrorKind::Usage => 2,
        ErrorKind::Data => 3,
        ErrorKind::Numeric => 4,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenPhantoms(a) => gen_phantoms(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Predict(a) => predict(a),
        Command::Gradcheck(a) => match gradcheck(a) {
            Ok(true) => Ok(()),
            Ok(false) => {
                eprintln!("error: gradient check failed");
                return ExitCode::from(exit_code(ErrorKind::Numeric));
            }
            Err(e) => Err(e),
        },
        Command::Cost(a) => cost(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(e.kind()))
        }
    }
}
