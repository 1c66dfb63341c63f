//! `cotrain`: command-line front end for the self-training and co-training
//! pipeline.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use cotrain_core::config::{RunConfig, TrainerKind};
use cotrain_core::datagen::{generate_split, DomainSpec};
use cotrain_core::io;
use cotrain_core::labeling::{run_pseudolabel, PseudoLabelSet};
use cotrain_core::metrics::{evaluate_pairs, MetricReport};
use cotrain_core::pipeline::{Pipeline, PipelineInputs, Stage, StopPoint};
use cotrain_core::preprocess::{align_to_target, class_balance_weights, DEFAULT_STATS_SAMPLE};
use cotrain_core::trainer::{serve, FileTrainer, Trainer, TrainerSession, ToyTrainer};
use cotrain_core::{BranchTag, Error, LabelSpace, ModelHandle};

const CONFIG_COPY: &str = "config.toml";

#[derive(Parser, Debug)]
#[command(name = "cotrain", version, about = "Synth-to-real self-training and co-training at the pseudo-label level")]
struct Cli {
    /// Run configuration (TOML). Defaults to the `gs-c` preset.
    #[arg(long, global = true, conflicts_with = "preset")]
    config: Option<PathBuf>,

    /// Start from a shipped preset instead of a file.
    #[arg(long, global = true)]
    preset: Option<String>,

    /// Directory holding run directories [env: COTRAIN_RUN_ROOT] [default: run]
    #[arg(long, global = true)]
    run_root: Option<PathBuf>,

    /// Worker cap; 1 runs the two co-training branches one after the other.
    #[arg(long, global = true, default_value_t = 2, value_parser = clap::value_parser!(u32).range(1..))]
    jobs: u32,

    /// Print the resolved configuration and exit.
    #[arg(long)]
    print_config: bool,

    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate toy source, target and eval splits plus a matching config.
    Toygen(ToygenArgs),
    /// Align source images to the target in LAB space.
    LabAlign(LabAlignArgs),
    /// Train the source-only model W_0.
    Baseline(RunArgs),
    /// Run the self-training stage.
    Selftrain(RunArgs),
    /// Run self-training, the co-training loop and the final training.
    Cotrain(CotrainArgs),
    /// Pseudo-label the target split with a trained model.
    Pseudolabel(PseudolabelArgs),
    /// Score predicted label maps against ground truth.
    Evaluate(EvaluateArgs),
    /// Serve the file protocol with the toy trainer.
    #[command(hide = true)]
    ServeToy(ServeToyArgs),
}

#[derive(Args, Debug)]
struct ToygenArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 200)]
    source: usize,
    #[arg(long, default_value_t = 200)]
    target: usize,
    #[arg(long, default_value_t = 50)]
    eval: usize,
}

#[derive(Args, Debug)]
struct LabAlignArgs {
    /// Source manifest [default: paths.source]
    #[arg(long)]
    source: Option<PathBuf>,
    /// Target manifest [default: paths.target]
    #[arg(long)]
    target: Option<PathBuf>,
    /// Output directory [default: <run dir>/lab]
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_STATS_SAMPLE)]
    sample: usize,
    /// Annotate the aligned manifest with class-balance sampling weights.
    #[arg(long)]
    cb: bool,
}

#[derive(Args, Debug)]
struct RunArgs {
    /// Continue an existing run directory.
    #[arg(long)]
    resume: bool,
}

#[derive(Args, Debug)]
struct CotrainArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Stop after persisting this co-training cycle.
    #[arg(long, hide = true)]
    stop_after_cycle: Option<u32>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum CurriculumStage {
    #[value(name = "self")]
    SelfTraining,
    Co,
}

#[derive(Args, Debug)]
struct PseudolabelArgs {
    /// Weights reference of a model in the run directory, e.g. `final.json`.
    #[arg(long)]
    model: String,
    /// Curriculum cycle `k` setting the threshold fraction.
    #[arg(long, default_value_t = 0)]
    cycle: u32,
    /// Which curriculum to use.
    #[arg(long, value_enum, default_value = "co")]
    stage: CurriculumStage,
    /// Output directory [default: <run dir>/pseudolabel/<model>]
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    /// Directory of predicted label PNGs.
    #[arg(long)]
    pred: PathBuf,
    /// Directory of ground-truth label PNGs with the same file names.
    #[arg(long)]
    gt: PathBuf,
    /// Cityscapes evaluation setting.
    #[arg(long, value_parser = ["19", "16", "13"])]
    classes: Option<String>,
    /// Take the label space from this manifest instead of Cityscapes.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Also write the `class,iou` table here.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ServeToyArgs {
    #[arg(long)]
    models: PathBuf,
    #[arg(long, default_value_t = 8)]
    num_classes: usize,
    #[arg(long, default_value_t = cotrain_core::trainer::ToyModelState::DEFAULT_TEMPERATURE)]
    temperature: f64,
    /// Session directory.
    dir: PathBuf,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<Error>()) {
        Some(Error::Config { .. }) => 2,
        Some(Error::Data { .. } | Error::Io(_) | Error::Json(_) | Error::Shape { .. } | Error::Invalid(_)) => 3,
        Some(Error::Trainer { .. } | Error::SessionBusy(_)) => 4,
        Some(Error::Interrupted(_)) => 0,
        None => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let code = exit_code(&err);
            if let Some(Error::Interrupted(at)) = err.downcast_ref::<Error>() {
                eprintln!("stopped after {at}; rerun with --resume to continue");
            } else {
                eprintln!("error: {err:#}");
                if let Some(Error::Trainer { log, .. }) = err.downcast_ref::<Error>() {
                    if !log.is_empty() {
                        eprintln!("--- trainer log ---\n{log}");
                    }
                }
            }
            ExitCode::from(code)
        }
    }
}

struct RunContext {
    cfg: RunConfig,
    run_dir: PathBuf,
    jobs: u32,
}

fn resolve(cli: &Cli) -> anyhow::Result<RunContext> {
    let mut cfg = match (&cli.config, &cli.preset) {
        (Some(path), _) => RunConfig::load(path)?,
        (None, Some(name)) => RunConfig::preset(name)?,
        (None, None) => RunConfig::default(),
    };
    let env_root = cfg.apply_env(|k| std::env::var(k).ok());
    cfg.validate()?;
    let root = cli.run_root.clone().or(env_root).unwrap_or_else(|| PathBuf::from("run"));
    Ok(RunContext {
        run_dir: root.join(&cfg.name),
        cfg,
        jobs: cli.jobs,
    })
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if cli.print_config {
        let ctx = resolve(&cli)?;
        print!("{}", ctx.cfg.to_toml_string()?);
        return Ok(());
    }
    let Some(command) = &cli.command else {
        return Err(Error::config("<command>", "no subcommand given; see --help").into());
    };
    match command {
        Command::Toygen(args) => toygen(args),
        Command::Evaluate(args) => evaluate(args),
        Command::ServeToy(args) => serve_toy(args),
        Command::LabAlign(args) => lab_align(&resolve(&cli)?, args),
        Command::Baseline(args) => baseline(&resolve(&cli)?, args),
        Command::Selftrain(args) => selftrain(&resolve(&cli)?, args),
        Command::Cotrain(args) => cotrain(&resolve(&cli)?, args),
        Command::Pseudolabel(args) => pseudolabel(&resolve(&cli)?, args),
    }
}

fn toygen(args: &ToygenArgs) -> anyhow::Result<()> {
    let source = DomainSpec::default_source();
    let mut target = DomainSpec::default_target();
    generate_split(&source, args.source, args.seed, true, &args.out.join("source"))?;
    generate_split(&target, args.target, args.seed.wrapping_add(1), false, &args.out.join("target"))?;
    target.name = "eval".into();
    generate_split(&target, args.eval, args.seed.wrapping_add(2), true, &args.out.join("eval"))?;
    let mut cfg = RunConfig {
        name: "toy".into(),
        seed: args.seed,
        ..RunConfig::default()
    };
    cfg.candidates = 60.min(args.target);
    cfg.keep = 20.min(cfg.candidates);
    cfg.self_training.k_min = 1;
    cfg.self_training.k_max = 5;
    cfg.co_training.cycles = 3;
    cfg.paths.source = Some("source/manifest.json".into());
    cfg.paths.target = Some("target/manifest.json".into());
    cfg.paths.eval = Some("eval/manifest.json".into());
    cfg.validate()?;
    let path = args.out.join("toy.toml");
    io::write_atomic(&path, cfg.to_toml_string()?.as_bytes())?;
    println!("wrote {} source, {} target, {} eval scenes under {}", args.source, args.target, args.eval, args.out.display());
    println!("config: {}", path.display());
    Ok(())
}

fn lab_align(ctx: &RunContext, args: &LabAlignArgs) -> anyhow::Result<()> {
    let pick = |arg: &Option<PathBuf>, cfg: &Option<PathBuf>, key: &str| {
        arg.clone()
            .or_else(|| cfg.clone())
            .ok_or_else(|| Error::config(format!("paths.{key}"), "manifest path is not set"))
    };
    let source = io::load_manifest(&pick(&args.source, &ctx.cfg.paths.source, "source")?)?;
    let target = io::load_manifest(&pick(&args.target, &ctx.cfg.paths.target, "target")?)?;
    let out = args.out.clone().unwrap_or_else(|| ctx.run_dir.join("lab"));
    let (mut aligned, record) = align_to_target(&source, &target, args.sample, ctx.cfg.seed, &out)?;
    if args.cb {
        let w = class_balance_weights(&aligned)?;
        for e in &mut aligned.entries {
            e.sampling_weight = w.get(&e.image_id);
        }
        io::save_manifest(&out.join("manifest.json"), &aligned)?;
    }
    println!(
        "source LAB mean {:.2?} std {:.2?}\ntarget LAB mean {:.2?} std {:.2?}",
        record.source.mean, record.source.std, record.target.mean, record.target.std
    );
    println!("aligned manifest: {}", out.join("manifest.json").display());
    Ok(())
}

/// Claims the run directory and stores the resolved config in it.
fn open_run(ctx: &RunContext, resume: bool) -> anyhow::Result<()> {
    let copy = ctx.run_dir.join(CONFIG_COPY);
    let text = ctx.cfg.to_toml_string()?;
    if copy.exists() {
        if !resume {
            return Err(Error::config(
                "run_dir",
                format!("{} already exists; pass --resume to continue it", ctx.run_dir.display()),
            )
            .into());
        }
        let stored = std::fs::read_to_string(&copy).with_context(|| copy.display().to_string())?;
        if stored != text {
            return Err(Error::config(
                "run_dir",
                format!("{} was created with a different config", ctx.run_dir.display()),
            )
            .into());
        }
        return Ok(());
    }
    std::fs::create_dir_all(&ctx.run_dir)?;
    io::write_atomic(&copy, text.as_bytes())?;
    Ok(())
}

fn pipeline(ctx: &RunContext, inputs: PipelineInputs) -> anyhow::Result<Pipeline> {
    let p = Pipeline::new(&ctx.run_dir, ctx.cfg.pipeline_params(), inputs)?;
    Ok(if ctx.jobs < 2 { p.sequential() } else { p })
}

fn session(ctx: &RunContext, branch: BranchTag, num_classes: usize) -> anyhow::Result<TrainerSession> {
    let id = branch.as_str().to_string();
    let t = &ctx.cfg.trainer;
    let trainer: Box<dyn Trainer> = match t.kind {
        TrainerKind::Toy => {
            Box::new(ToyTrainer::new(ctx.run_dir.join("models"), num_classes).with_temperature(t.temperature))
        }
        TrainerKind::External => {
            let program = t.program.as_ref().ok_or_else(|| Error::config("trainer.program", "not set"))?;
            Box::new(FileTrainer::spawn(
                &id,
                program,
                &t.args,
                ctx.run_dir.join("sessions").join(&id),
                Duration::from_secs(t.timeout_secs),
            )?)
        }
    };
    Ok(TrainerSession::new(id, branch, trainer))
}

fn finish<T>(result: cotrain_core::Result<T>, sessions: &[&TrainerSession]) -> anyhow::Result<T> {
    let mut shutdown = Ok(());
    for s in sessions {
        if let Err(e) = s.shutdown() {
            shutdown = shutdown.and(Err(e));
        }
    }
    let value = result?;
    shutdown?;
    Ok(value)
}

fn print_miou(label: &str, miou: Option<f64>) {
    match miou {
        Some(v) => println!("{label}: mIoU {v:.2}"),
        None => println!("{label}: done (no eval split configured)"),
    }
}

fn read_record(path: &Path) -> anyhow::Result<cotrain_core::pipeline::ModelRecord> {
    Ok(io::read_json(path)?)
}

fn baseline(ctx: &RunContext, args: &RunArgs) -> anyhow::Result<()> {
    open_run(ctx, args.resume)?;
    let inputs = ctx.cfg.prepare_inputs(&ctx.run_dir)?;
    let s1 = session(ctx, BranchTag::Branch1, inputs.source.label_space.num_classes())?;
    let mut p = pipeline(ctx, inputs)?;
    let model = finish(p.baseline(&s1), &[&s1])?;
    let record = read_record(&ctx.run_dir.join("baseline").join(cotrain_core::pipeline::RECORD))?;
    print_miou(&format!("baseline {}", model.weights), record.eval_miou);
    Ok(())
}

fn selftrain(ctx: &RunContext, args: &RunArgs) -> anyhow::Result<()> {
    open_run(ctx, args.resume)?;
    let inputs = ctx.cfg.prepare_inputs(&ctx.run_dir)?;
    let s1 = session(ctx, BranchTag::Branch1, inputs.source.label_space.num_classes())?;
    let mut p = pipeline(ctx, inputs)?;
    let outcome = finish(p.self_training_stage(&s1), &[&s1])?;
    for c in &outcome.cycles {
        print_miou(&format!("self-training cycle {}", c.cycle), c.branches[0].eval_miou);
    }
    println!("W_K_m = {}, W_K_M = {}", outcome.w_k_min.weights, outcome.w_k_max.weights);
    Ok(())
}

fn cotrain(ctx: &RunContext, args: &CotrainArgs) -> anyhow::Result<()> {
    open_run(ctx, args.run.resume)?;
    let inputs = ctx.cfg.prepare_inputs(&ctx.run_dir)?;
    let k = inputs.source.label_space.num_classes();
    let s1 = session(ctx, BranchTag::Branch1, k)?;
    let s2 = session(ctx, BranchTag::Branch2, k)?;
    let mut p = pipeline(ctx, inputs)?;
    if let Some(cycle) = args.stop_after_cycle {
        p = p.with_stop_after(StopPoint {
            stage: Stage::CoTraining,
            cycle,
        });
    }
    let outcome = finish(p.co_training(&s1, &s2), &[&s1, &s2])?;
    if let Some(last) = outcome.self_training.cycles.last() {
        print_miou("self-training W_K_M", last.branches[0].eval_miou);
    }
    for c in &outcome.cycles {
        for b in &c.branches {
            print_miou(&format!("co-training cycle {} {}", c.cycle, b.branch.as_str()), b.eval_miou);
        }
    }
    print_miou(&format!("final {}", outcome.final_record.model.weights), outcome.final_record.eval_miou);
    Ok(())
}

fn pseudolabel(ctx: &RunContext, args: &PseudolabelArgs) -> anyhow::Result<()> {
    let inputs = ctx.cfg.prepare_inputs(&ctx.run_dir)?;
    let space = inputs.target.label_space.clone();
    let s1 = session(ctx, BranchTag::Branch1, space.num_classes())?;
    let params = ctx.cfg.pipeline_params();
    let curriculum = match args.stage {
        CurriculumStage::SelfTraining => params.self_training.curriculum,
        CurriculumStage::Co => params.co_training.curriculum,
    };
    let model = ModelHandle {
        branch: BranchTag::Branch1,
        session: s1.id().to_string(),
        weights: args.model.clone(),
    };
    let target = inputs.target.as_unlabeled();
    let (images, vct) = finish(run_pseudolabel(&s1, &model, &target, args.cycle, &curriculum), &[&s1])?;
    let stem = Path::new(&args.model)
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| args.model.clone());
    let out = args.out.clone().unwrap_or_else(|| ctx.run_dir.join("pseudolabel").join(stem));
    let set: PseudoLabelSet = images.into_iter().collect();
    io::save_pseudo_set(&out, &set, Some(&vct))?;
    io::write_palette(&out, &space)?;
    let labeled: usize = set.iter().map(|i| i.labeled_pixels()).sum();
    let total: usize = set.iter().map(|i| i.labels().len()).sum();
    println!(
        "{} images, {:.1}% of pixels labeled, written to {}",
        set.len(),
        100.0 * labeled as f64 / total.max(1) as f64,
        out.display()
    );
    Ok(())
}

fn label_files(dir: &Path) -> anyhow::Result<Vec<String>> {
    let mut names = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::data(dir, e))? {
        let name = entry?.file_name().to_string_lossy().into_owned();
        if name.ends_with(".png") {
            names.push(name);
        }
    }
    names.sort();
    Ok(names)
}

fn evaluate(args: &EvaluateArgs) -> anyhow::Result<()> {
    let mut space = match &args.manifest {
        Some(m) => io::load_manifest(m)?.label_space,
        None => LabelSpace::cityscapes(),
    };
    if let Some(classes) = &args.classes {
        if space.num_classes() != 19 {
            return Err(Error::config("classes", "the 19/16/13 settings need the 19-class Cityscapes space").into());
        }
        let n: usize = classes.parse()?;
        let subset = LabelSpace::cityscapes_setting(n).ok_or_else(|| Error::config("classes", "use 19, 16 or 13"))?;
        space = space.with_eval_subset(subset)?;
    }
    let names = label_files(&args.gt)?;
    if names.is_empty() {
        return Err(Error::data(&args.gt, "no label PNGs found").into());
    }
    let mut pairs = Vec::with_capacity(names.len());
    for name in &names {
        let pred = args.pred.join(name);
        if !pred.exists() {
            return Err(Error::data(&pred, "prediction missing for ground-truth file").into());
        }
        pairs.push((io::load_label_map(&pred)?, io::load_label_map(&args.gt.join(name))?));
    }
    let cm = evaluate_pairs(pairs.iter().map(|(p, g)| (p, g)), &space)?;
    let report = MetricReport::new(&cm, &space, space.eval_subset.clone())?;
    print!("{}", report.to_table());
    if let Some(csv) = &args.csv {
        io::write_atomic(csv, report.to_csv().as_bytes())?;
    }
    Ok(())
}

fn serve_toy(args: &ServeToyArgs) -> anyhow::Result<()> {
    let mut trainer = ToyTrainer::new(&args.models, args.num_classes).with_temperature(args.temperature);
    Ok(serve(&args.dir, &mut trainer, Duration::from_millis(2))?)
}
