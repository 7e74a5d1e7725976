use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use pvfuse::head::{read_descriptors, write_descriptors, DescriptorRecord};
use pvfuse::manifest::{Manifest, Split};
use pvfuse::numkit::io::read_checkpoint;
use pvfuse::retrieval::{evaluate, sweep_to_tsv, SweepAxis};
use pvfuse::trainer::{
    finetune, generate_synthetic_corpus, pretrain, sweep, write_checkpoint_dir, Config, Model, Phase, Primitive,
    SyntheticSpec, TrainFailure, Variant, LAST_GOOD_DIR,
};
use pvfuse::Error;

/// Point-cloud and multi-view 3D object retrieval.
#[derive(Parser, Debug)]
#[command(name = "pvfuse", version)]
struct Cli {
    /// `key = value` config file; missing keys keep their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `train.seed` (and the corpus seed for `gen`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output location: corpus dir (gen), run dir (train), PVD1 file (embed),
    /// report file (eval).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic primitive-shape corpus with a manifest.
    Gen(GenArgs),
    /// Pretrain a backbone or fine-tune the fused model.
    Train(TrainArgs),
    /// Write descriptors of one split to a PVD1 file.
    Embed(EmbedArgs),
    /// Retrieval metrics of a descriptor database, or a robustness sweep.
    Eval(EvalArgs),
}

#[derive(Args, Debug)]
struct GenArgs {
    /// Number of primitive classes, taken in the order sphere, box, cylinder, torus, cone.
    #[arg(long, default_value_t = 5)]
    classes: usize,
    /// Explicit comma-separated primitive list; overrides --classes.
    #[arg(long, value_delimiter = ',')]
    primitives: Vec<Primitive>,
    #[arg(long, default_value_t = 40)]
    per_class: usize,
    #[arg(long, default_value_t = 1024)]
    points: usize,
    #[arg(long, default_value_t = 12)]
    views: usize,
    #[arg(long, default_value_t = 32)]
    resolution: usize,
    #[arg(long, default_value_t = 0.01)]
    jitter: f64,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    phase: Phase,
    #[arg(long)]
    manifest: PathBuf,
    /// Model variant to fine-tune; overrides `model.ablation`.
    #[arg(long)]
    ablate: Option<Variant>,
    /// Pretrained point backbone (default: <out>/pretrain_point).
    #[arg(long)]
    point_ckpt: Option<PathBuf>,
    /// Pretrained view backbone (default: <out>/pretrain_view).
    #[arg(long)]
    view_ckpt: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EmbedArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value = "test")]
    split: Split,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// PVD1 descriptor database.
    db: Option<PathBuf>,
    /// Also dump `id  label  v0 v1 ...` lines for external plotting.
    #[arg(long)]
    export_embeddings: Option<PathBuf>,
    /// Evaluate the test split under reduced views or points instead.
    #[arg(long)]
    sweep: Option<SweepAxis>,
    /// Comma-separated settings for --sweep (default: 2..12 views, 128..1024 points).
    #[arg(long, value_delimiter = ',')]
    grid: Vec<usize>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
}

/// A failure with its process exit status.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::NonFinite { .. } | Error::Load { .. } | Error::Io { .. } => 3,
            Error::Shape { .. } | Error::Contract(_) | Error::Config(_) | Error::Format { .. } => 2,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: 2,
        message: message.into(),
    }
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn run(cli: Cli) -> Outcome {
    let mut config = match &cli.config {
        Some(p) => Config::read(p)?,
        None => Config::default(),
    };
    if let Some(s) = cli.seed {
        config.seed = s;
    }
    match cli.command {
        Command::Gen(a) => cmd_gen(&a, cli.seed.unwrap_or(0), cli.out.as_deref()),
        Command::Train(a) => cmd_train(&a, config, cli.out.as_deref()),
        Command::Embed(a) => cmd_embed(&a, cli.out.as_deref()),
        Command::Eval(a) => cmd_eval(&a, cli.out.as_deref()),
    }
}

fn cmd_gen(a: &GenArgs, seed: u64, out: Option<&Path>) -> Outcome {
    let classes = if a.primitives.is_empty() {
        if a.classes == 0 || a.classes > Primitive::ALL.len() {
            return Err(usage(format!("--classes must be in 1..={}", Primitive::ALL.len())));
        }
        Primitive::ALL[..a.classes].to_vec()
    } else {
        a.primitives.clone()
    };
    let spec = SyntheticSpec {
        classes,
        instances_per_class: a.per_class,
        jitter_sigma: a.jitter,
        points_n: a.points,
        views_m: a.views,
        resolution: a.resolution,
        seed,
        ..SyntheticSpec::default()
    };
    let dir = out.unwrap_or(Path::new("corpus"));
    let manifest = generate_synthetic_corpus(&spec, dir)?;
    let train = manifest.split(Split::Train).count();
    println!("{}", dir.join("manifest.tsv").display());
    println!(
        "{} objects, {} classes, {train} train / {} test, {} points, {} views at {}x{}",
        manifest.entries.len(),
        manifest.num_classes(),
        manifest.entries.len() - train,
        spec.points_n,
        spec.views_m,
        spec.resolution,
        spec.resolution
    );
    Ok(())
}

fn load_manifest(path: &Path) -> Result<(Manifest, Vec<pvfuse::manifest::LoadedObject>), Failure> {
    let manifest = Manifest::read(path)?;
    manifest.validate()?;
    let mut objects = manifest.load_split(Split::Train)?;
    objects.extend(manifest.load_split(Split::Test)?);
    Ok((manifest, objects))
}

fn cmd_train(a: &TrainArgs, mut config: Config, out: Option<&Path>) -> Outcome {
    if let Some(v) = a.ablate {
        config.model.ablation = v;
    }
    config.validate()?;
    let run_dir = out.unwrap_or(Path::new("runs"));
    let (manifest, objects) = load_manifest(&a.manifest)?;
    let classes = manifest.num_classes();
    let dir = match (a.phase, config.model.ablation) {
        (Phase::Finetune, v) if v != Variant::Full => run_dir.join(format!("finetune_{}", v.name())),
        (p, _) => run_dir.join(p.as_str()),
    };
    let failed = |f: Box<TrainFailure>| -> Failure {
        let keep = dir.join(LAST_GOOD_DIR);
        if !f.last_good.is_empty() {
            if let Err(e) = write_checkpoint_dir(&keep, &f.last_good, &config, &f.log) {
                eprintln!("error: could not write {}: {e}", keep.display());
            } else {
                eprintln!("last good parameters written to {}", keep.display());
            }
        }
        Failure::from(f.error)
    };
    let (store, log) = match a.phase {
        Phase::PretrainPoint | Phase::PretrainView => {
            let o = pretrain(&config, a.phase, &objects, classes).map_err(failed)?;
            (o.store, o.log)
        }
        Phase::Finetune => {
            let backbone = |given: &Option<PathBuf>, phase: Phase, needed: bool| -> Result<Option<_>, Failure> {
                if !needed {
                    return Ok(None);
                }
                let p = given.clone().unwrap_or_else(|| run_dir.join(phase.as_str()));
                if !p.is_dir() {
                    return Err(usage(format!(
                        "finetune needs the pretrained {} checkpoint at {}",
                        phase.as_str(),
                        p.display()
                    )));
                }
                Ok(Some(read_checkpoint(&p)?))
            };
            let variant = config.model.ablation;
            let point = backbone(&a.point_ckpt, Phase::PretrainPoint, variant.uses_point())?;
            let precomputed = manifest.entries.iter().any(|e| e.precomputed_views);
            let view = backbone(&a.view_ckpt, Phase::PretrainView, variant.uses_view() && !precomputed)?;
            let (model, log) = finetune(&config, &objects, classes, point.as_deref(), view.as_deref()).map_err(failed)?;
            (model.store, log)
        }
    };
    write_checkpoint_dir(&dir, &store, &config, &log)?;
    if let Some(last) = log.last() {
        println!("{}: {} epochs, final loss {:.6}", dir.display(), log.len(), last.loss);
    } else {
        println!("{}: 0 epochs", dir.display());
    }
    Ok(())
}

fn cmd_embed(a: &EmbedArgs, out: Option<&Path>) -> Outcome {
    let model = Model::load(&a.checkpoint)?;
    let manifest = Manifest::read(&a.manifest)?;
    manifest.validate()?;
    let objects = manifest.load_split(a.split)?;
    let records = model.embed_all(&objects)?;
    let path = out.unwrap_or(Path::new("descriptors.pvd"));
    write_descriptors(path, &records)?;
    println!("{}: {} descriptors of dimension {}", path.display(), records.len(), records.first().map_or(0, |r| r.vector.len()));
    Ok(())
}

fn export_text(records: &[DescriptorRecord]) -> String {
    let mut s = String::new();
    for r in records {
        let _ = write!(s, "{}\t{}\t", r.object_id, r.label);
        let v: Vec<String> = r.vector.iter().map(|x| format!("{x:e}")).collect();
        s.push_str(&v.join(" "));
        s.push('\n');
    }
    s
}

fn write_text(path: &Path, text: &str) -> Outcome {
    fs::write(path, text).map_err(|e| Failure::from(Error::Io { path: path.into(), source: e }))
}

fn cmd_eval(a: &EvalArgs, out: Option<&Path>) -> Outcome {
    if let Some(axis) = a.sweep {
        let (Some(ckpt), Some(manifest)) = (&a.checkpoint, &a.manifest) else {
            return Err(usage("--sweep needs --checkpoint and --manifest"));
        };
        let model = Model::load(ckpt)?;
        let (_, objects) = load_manifest(manifest)?;
        let grid = if a.grid.is_empty() { axis.default_grid() } else { a.grid.clone() };
        let report = sweep_to_tsv(&sweep(&model, &objects, axis, &grid)?);
        print!("{report}");
        return write_text(out.unwrap_or(Path::new(&format!("sweep_{}.tsv", axis.name()))), &report);
    }
    let Some(db) = &a.db else {
        return Err(usage("eval needs a descriptor database or --sweep"));
    };
    let records = read_descriptors(db)?;
    let report = evaluate(&records)?.to_tsv();
    print!("{report}");
    write_text(out.unwrap_or(Path::new("report.tsv")), &report)?;
    if let Some(p) = &a.export_embeddings {
        write_text(p, &export_text(&records))?;
    }
    Ok(())
}
