use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use cxrlab::config::{verify_artifact, write_stamped_json, ArtifactIndex, ExperimentConfig, ARTIFACT_INDEX};
use cxrlab::dataset::{class_counts, generate_phantom_dataset, load_manifest, make_split, write_dataset, ClassLabel, ImageRecord};
use cxrlab::evaluation::{write_ablation_csv, ClassPair, MetricsReport};
use cxrlab::interpret::{box_dim_stats, export_embeddings, grad_cam, feature_maps, write_feature_maps, write_reduced_csv, Pca2, Reducer};
use cxrlab::models::{load_classifier, load_encoder_decoder, load_meta, Stage};
use cxrlab::pretext::MaskMode;
use cxrlab::training::{
    evaluate, evaluate_multitask, finetune, kfold_baseline, pairwise_ablation, prepare, train_baseline, train_inpaint,
    train_moco, train_multitask, MultitaskData, Recipe, RunEnv,
};
use cxrlab::transforms::MocoVariant;
use cxrlab::Error;

type F = f32;

#[derive(Parser)]
#[command(name = "cxrlab", version, about = "Chest X-ray classification experiments: synthetic data, pretext pre-training, training, evaluation, interpretation")]
struct Cli {
    /// JSON experiment config; every key is optional, unknown keys are rejected.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Check that an artifact was produced by the given config, then exit.
    #[arg(long, value_name = "ARTIFACT")]
    verify: Option<PathBuf>,

    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic phantom dataset (PNGs + manifest).
    Synth(SynthArgs),
    /// Self-supervised pre-training of the encoder.
    Pretrain(PretrainArgs),
    /// Train a classifier (baseline or multi-task) and score it on the test split.
    Train(TrainArgs),
    /// Score a checkpoint on the test split.
    Eval(EvalArgs),
    /// Pairwise binary ablation over class pairs.
    Ablate(AblateArgs),
    /// Explainability outputs.
    Interpret(InterpretArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, value_parser = clap::value_parser!(u64).range(4..))]
    n: u64,
    #[arg(long, default_value_t = 64, value_parser = clap::value_parser!(u64).range(32..))]
    size: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

#[derive(Args)]
struct DataArgs {
    /// Dataset manifest; overrides `data.manifest`.
    #[arg(long, value_name = "PATH")]
    manifest: Option<PathBuf>,
    /// Output directory.
    #[arg(long, value_name = "DIR", default_value = "runs")]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    Moco,
    Inpaint,
}

#[derive(Args)]
struct PretrainArgs {
    #[arg(long, value_enum)]
    method: Method,
    /// MoCo augmentation variant: cxr, cxrModified or v2.
    #[arg(long, value_parser = parse_variant)]
    variant: Option<MocoVariant>,
    /// Inpainting holes: center or targetedCxr.
    #[arg(long, value_parser = parse_mask_mode)]
    mask_mode: Option<MaskMode>,
    #[command(flatten)]
    data: DataArgs,
}

#[derive(Clone, Copy, ValueEnum)]
enum TrainMode {
    Baseline,
    Multitask,
}

#[derive(Args)]
struct TrainArgs {
    /// Defaults to the recipe named in the config.
    #[arg(long, value_enum)]
    mode: Option<TrainMode>,
    /// Multi-task without the classification pre-training stage.
    #[arg(long)]
    skip_stage1: bool,
    /// Stratified k-fold cross-validation of the baseline instead of one split.
    #[arg(long, value_name = "K")]
    kfold: Option<usize>,
    /// Encoder checkpoint to fine-tune from.
    #[arg(long, value_name = "CHECKPOINT")]
    init_from: Option<PathBuf>,
    #[command(flatten)]
    data: DataArgs,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataArgs,
}

#[derive(Args)]
struct AblateArgs {
    /// `all` or a comma-separated list of pair names.
    #[arg(long, value_parser = parse_pairs)]
    pairs: Option<PairList>,
    #[arg(long, value_name = "CHECKPOINT")]
    init_from: Option<PathBuf>,
    #[command(flatten)]
    data: DataArgs,
}

#[derive(Clone)]
struct PairList(Vec<ClassPair>);

#[derive(Args)]
struct InterpretArgs {
    #[command(subcommand)]
    what: InterpretCommand,
}

#[derive(Subcommand)]
enum InterpretCommand {
    /// GradCAM heatmap per test image.
    Gradcam(GradcamArgs),
    /// Feature-map grids per test image.
    Features(LayerArgs),
    /// Pooled-feature embeddings of the test split, with a 2-D projection.
    Embeddings(LayerArgs),
    /// Box-size histograms per class.
    Boxes(BoxArgs),
}

#[derive(Args)]
struct GradcamArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Target class; defaults to `interpret.targetClass`.
    #[arg(long, value_parser = parse_class)]
    class: Option<ClassLabel>,
    #[arg(long)]
    layer: Option<String>,
    #[command(flatten)]
    data: DataArgs,
}

#[derive(Args)]
struct LayerArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    layer: Option<String>,
    #[command(flatten)]
    data: DataArgs,
}

#[derive(Args)]
struct BoxArgs {
    #[command(flatten)]
    data: DataArgs,
}

fn parse_variant(s: &str) -> Result<MocoVariant, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_mask_mode(s: &str) -> Result<MaskMode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_class(s: &str) -> Result<ClassLabel, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_pairs(s: &str) -> Result<PairList, String> {
    if s == "all" {
        return Ok(PairList(ClassPair::ALL.to_vec()));
    }
    s.split(',')
        .map(|p| p.trim().parse().map_err(|e: Error| e.to_string()))
        .collect::<Result<_, _>>()
        .map(PairList)
}

/// A checkpoint or artifact named on the command line does not exist.
#[derive(Debug)]
struct MissingArtifact(PathBuf);

impl std::fmt::Display for MissingArtifact {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} does not exist", self.0.display())
    }
}

impl std::error::Error for MissingArtifact {}

/// Invalid combination of arguments.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<MissingArtifact>() {
            return 3;
        }
        if cause.is::<Usage>() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Io { .. } | Error::Parse { .. } | Error::Validation(_) | Error::Config(_) | Error::Image { .. } => 2,
                Error::Compat(_) | Error::Json(_) => 3,
                Error::Divergence(_) => 4,
            };
        }
    }
    1
}

fn require_exists(path: &Path) -> anyhow::Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(MissingArtifact(path.to_path_buf()).into())
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut cfg = ExperimentConfig::resolve(cli.config.as_deref())?;
    if let Some(artifact) = cli.verify {
        if cli.command.is_some() {
            return Err(Usage("--verify cannot be combined with a subcommand".into()).into());
        }
        require_exists(&artifact)?;
        verify_artifact(&cfg, &artifact)?;
        println!("{}: config hash {} verified", artifact.display(), cfg.hash());
        return Ok(());
    }
    let Some(command) = cli.command else {
        return Err(Usage("no subcommand given (see --help)".into()).into());
    };
    match command {
        Command::Synth(args) => synth(&cfg, args),
        Command::Pretrain(args) => {
            match args.method {
                Method::Moco => {
                    cfg.train.recipe = Recipe::MocoPretrain;
                    if let Some(v) = args.variant {
                        cfg.pretext.moco.variant = v;
                    }
                }
                Method::Inpaint => {
                    cfg.train.recipe = Recipe::InpaintPretrain;
                    if let Some(m) = args.mask_mode {
                        cfg.pretext.inpaint.mask_mode = m;
                    }
                }
            }
            let run = Run::start(cfg, &args.data)?;
            pretrain(&run, args.method)?;
            run.finish()
        }
        Command::Train(args) => {
            let mode = match (args.mode, cfg.train.recipe) {
                (Some(m), _) => m,
                (None, Recipe::Baseline | Recipe::Finetune) => TrainMode::Baseline,
                (None, Recipe::Multitask) => TrainMode::Multitask,
                (None, r) => {
                    return Err(Usage(format!("config recipe {r:?} is a pre-training recipe; use `pretrain`")).into())
                }
            };
            cfg.train.recipe = match (mode, &args.init_from) {
                (TrainMode::Baseline, Some(_)) => Recipe::Finetune,
                (TrainMode::Baseline, None) => Recipe::Baseline,
                (TrainMode::Multitask, Some(_)) => {
                    return Err(Usage("--init-from applies to baseline training only".into()).into())
                }
                (TrainMode::Multitask, None) => Recipe::Multitask,
            };
            cfg.train.multitask.skip_stage1 |= args.skip_stage1;
            if let Some(k) = args.kfold {
                if !matches!(mode, TrainMode::Baseline) || args.init_from.is_some() {
                    return Err(Usage("--kfold applies to baseline training only".into()).into());
                }
                cfg.eval.kfold = k;
            }
            cfg.validate()?;
            let run = Run::start(cfg, &args.data)?;
            train(&run, mode, args.kfold.is_some(), args.init_from.as_deref())?;
            run.finish()
        }
        Command::Eval(args) => {
            require_exists(&args.checkpoint)?;
            let run = Run::start(cfg, &args.data)?;
            eval(&run, &args.checkpoint)?;
            run.finish()
        }
        Command::Ablate(args) => {
            if let Some(p) = args.pairs {
                cfg.eval.pairs = p.0;
            }
            if let Some(path) = &args.init_from {
                require_exists(path)?;
            }
            let run = Run::start(cfg, &args.data)?;
            ablate(&run, args.init_from.as_deref())?;
            run.finish()
        }
        Command::Interpret(args) => match args.what {
            InterpretCommand::Gradcam(a) => {
                require_exists(&a.checkpoint)?;
                if let Some(c) = a.class {
                    cfg.interpret.target_class = c;
                }
                if a.layer.is_some() {
                    cfg.interpret.layer = a.layer;
                }
                let run = Run::start(cfg, &a.data)?;
                gradcam(&run, &a.checkpoint)?;
                run.finish()
            }
            InterpretCommand::Features(a) => {
                require_exists(&a.checkpoint)?;
                if a.layer.is_some() {
                    cfg.interpret.layer = a.layer;
                }
                let run = Run::start(cfg, &a.data)?;
                features(&run, &a.checkpoint)?;
                run.finish()
            }
            InterpretCommand::Embeddings(a) => {
                require_exists(&a.checkpoint)?;
                if a.layer.is_some() {
                    cfg.interpret.layer = a.layer;
                }
                let run = Run::start(cfg, &a.data)?;
                embeddings(&run, &a.checkpoint)?;
                run.finish()
            }
            InterpretCommand::Boxes(a) => {
                let run = Run::start(cfg, &a.data)?;
                let stats = box_dim_stats(&run.records()?, run.cfg.interpret.bin_width)?;
                stats.write_csv(&run.out.join("box_dims.csv"))?;
                run.report("box_dims.json", &stats)?;
                for c in &stats.per_class {
                    println!("{:<14} n={:<4} mean={}", c.label.name(), c.dims.len(), c.mean.map_or("-".into(), |m| format!("{m:.1}")));
                }
                run.finish()
            }
        },
    }
}

fn synth(cfg: &ExperimentConfig, args: SynthArgs) -> anyhow::Result<()> {
    let size = args.size as usize;
    let records = generate_phantom_dataset(args.n as usize, (size, size), args.seed)?;
    let manifest = write_dataset(&records, &args.out)?;
    let counts = class_counts(&records);
    for label in ClassLabel::ALL {
        println!("{:<14} {}", label.name(), counts[label.index()]);
    }
    println!("manifest: {}", manifest.display());
    index_outputs(&args.out, &cfg.hash())
}

/// One command's resolved config and output directory.
struct Run {
    cfg: ExperimentConfig,
    hash: String,
    out: PathBuf,
}

impl Run {
    fn start(mut cfg: ExperimentConfig, data: &DataArgs) -> anyhow::Result<Self> {
        if data.manifest.is_some() {
            cfg.data.manifest = data.manifest.clone();
        }
        cfg.validate()?;
        std::fs::create_dir_all(&data.out).map_err(|e| Error::io(&data.out, e))?;
        // A rerun into the same directory starts a fresh log.
        let log = data.out.join("train_log.jsonl");
        if log.exists() {
            std::fs::remove_file(&log).map_err(|e| Error::io(&log, e))?;
        }
        let hash = cfg.hash();
        let config_path = data.out.join("config.json");
        std::fs::write(&config_path, cfg.to_json() + "\n").map_err(|e| Error::io(&config_path, e))?;
        info!("config hash {hash}");
        Ok(Self {
            cfg,
            hash,
            out: data.out.clone(),
        })
    }

    fn env(&self) -> RunEnv {
        self.cfg.run_env(&self.out)
    }

    fn records(&self) -> anyhow::Result<Vec<ImageRecord>> {
        let Some(path) = &self.cfg.data.manifest else {
            return Err(Usage("no dataset: pass --manifest or set data.manifest".into()).into());
        };
        Ok(load_manifest(path)?)
    }

    fn split(&self) -> anyhow::Result<(Vec<ImageRecord>, Vec<ImageRecord>)> {
        let records = self.records()?;
        let split = make_split(&records, self.cfg.data.test_fraction, self.cfg.data.split_seed)?;
        let (train, test) = split.partition(&records);
        Ok((train.into_iter().cloned().collect(), test.into_iter().cloned().collect()))
    }

    fn report<T: serde::Serialize>(&self, name: &str, body: &T) -> anyhow::Result<PathBuf> {
        let path = self.out.join(name);
        write_stamped_json(&path, &self.hash, body)?;
        Ok(path)
    }

    fn metrics(&self, report: &MetricsReport) -> anyhow::Result<()> {
        let path = self.report("metrics.json", report)?;
        report.confusion.write_csv(&self.out.join("confusion.csv"), false)?;
        report.confusion.write_csv(&self.out.join("confusion_normalized.csv"), true)?;
        println!("f1Macro {:.4}  accuracy {:.2}%  ({})", report.f1_macro, report.accuracy, path.display());
        Ok(())
    }

    fn finish(self) -> anyhow::Result<()> {
        index_outputs(&self.out, &self.hash)
    }
}

/// Record every output file in its directory's artifact index.
fn index_outputs(root: &Path, hash: &str) -> anyhow::Result<()> {
    let mut by_dir: BTreeMap<PathBuf, Vec<PathBuf>> = BTreeMap::new();
    for entry in walkdir::WalkDir::new(root).sort_by_file_name() {
        let entry = entry.with_context(|| format!("scanning {}", root.display()))?;
        if entry.file_type().is_file() && entry.file_name() != ARTIFACT_INDEX {
            let dir = entry.path().parent().unwrap_or(root).to_path_buf();
            by_dir.entry(dir).or_default().push(entry.path().to_path_buf());
        }
    }
    for (dir, files) in by_dir {
        ArtifactIndex::record(&dir, hash, &files)?;
    }
    Ok(())
}

fn pretrain(run: &Run, method: Method) -> anyhow::Result<()> {
    let (train, _) = run.split()?;
    let env = run.env();
    let checkpoint = match method {
        Method::Moco => {
            let moco = &run.cfg.pretext.moco;
            info!("MoCo ({}) temperature {}", moco.variant.name(), moco.temperature());
            train_moco::<F>(&run.cfg.train, &env, moco, &train)?.checkpoint
        }
        Method::Inpaint => train_inpaint::<F>(&run.cfg.train, &env, &run.cfg.pretext.inpaint, &train)?.checkpoint,
    };
    println!("checkpoint: {}", checkpoint.path.display());
    Ok(())
}

fn train(run: &Run, mode: TrainMode, kfold: bool, init_from: Option<&Path>) -> anyhow::Result<()> {
    let env = run.env();
    let tc = &run.cfg.train;
    if kfold {
        let summary = kfold_baseline::<F>(tc, &env, &run.records()?, run.cfg.eval.kfold)?;
        run.report("kfold.json", &summary)?;
        println!("f1Macro {}  accuracy {}", summary.f1_display, summary.acc_display);
        return Ok(());
    }
    let (train, test) = run.split()?;
    let test = prepare::<F>(&test, &env.preproc)?;
    let report = match mode {
        TrainMode::Baseline => {
            let mut trained = match init_from {
                Some(path) => {
                    require_exists(path)?;
                    finetune::<F>(tc, &env, path, &train)?
                }
                None => train_baseline::<F>(tc, &env, &train)?,
            };
            println!("checkpoint: {}", trained.checkpoint.path.display());
            evaluate(&mut trained.model, &test)?
        }
        TrainMode::Multitask => {
            let data = MultitaskData {
                stage1: &train,
                stage2: &train,
                stage3: &train,
            };
            let mut run_mt = train_multitask::<F>(tc, &env, &data)?;
            for c in &run_mt.checkpoints {
                println!("checkpoint: {}", c.path.display());
            }
            evaluate_multitask(&mut run_mt.model, &test)?
        }
    };
    run.metrics(&report)
}

fn eval(run: &Run, checkpoint: &Path) -> anyhow::Result<()> {
    let meta = load_meta(checkpoint)?;
    let backbone = &run.cfg.model.backbone;
    let (_, test) = run.split()?;
    let test = prepare::<F>(&test, &run.cfg.preproc)?;
    let report = match meta.stage {
        Stage::MultitaskStage2 | Stage::MultitaskStage3 => {
            let (mut model, _) = load_encoder_decoder::<F>(backbone, checkpoint)?;
            evaluate_multitask(&mut model, &test)?
        }
        _ => {
            let (mut model, meta) = load_classifier::<F>(backbone, checkpoint)?;
            if meta.num_classes != Some(cxrlab::models::NUM_CLASSES) {
                return Err(Error::Compat(format!(
                    "{} is a {}-class checkpoint; eval scores the 4-class task",
                    checkpoint.display(),
                    meta.num_classes.unwrap_or(0)
                ))
                .into());
            }
            evaluate(&mut model, &test)?
        }
    };
    run.metrics(&report)
}

fn ablate(run: &Run, init_from: Option<&Path>) -> anyhow::Result<()> {
    let (train, test) = run.split()?;
    let rows = pairwise_ablation::<F>(&run.cfg.train, &run.env(), &train, &test, &run.cfg.eval.pairs, init_from)?;
    write_ablation_csv(&rows, &run.out.join("ablation.csv"))?;
    run.report("ablation.json", &serde_json::json!({ "rows": rows }))?;
    for r in &rows {
        println!("{:<28} f1Positive {:.4}  f1Macro {:.4}  accuracy {:.2}%", r.pair.name(), r.f1_positive, r.f1_macro, r.accuracy);
    }
    Ok(())
}

/// Test-split images analysed by the per-image interpret commands.
fn interpret_inputs(run: &Run) -> anyhow::Result<Vec<cxrlab::training::Sample<F>>> {
    let (_, test) = run.split()?;
    let mut samples = prepare::<F>(&test, &run.cfg.preproc)?;
    samples.truncate(run.cfg.interpret.max_images);
    if samples.is_empty() {
        bail!(Usage("the test split is empty".into()));
    }
    Ok(samples)
}

fn interpret_model(run: &Run, checkpoint: &Path) -> anyhow::Result<(cxrlab::ClassifierF32, String)> {
    let (model, _) = load_classifier::<F>(&run.cfg.model.backbone, checkpoint)?;
    let layer = run.cfg.interpret.layer.clone().unwrap_or_else(|| model.encoder.last_layer().to_string());
    Ok((model, layer))
}

fn gradcam(run: &Run, checkpoint: &Path) -> anyhow::Result<()> {
    let (mut model, layer) = interpret_model(run, checkpoint)?;
    let target = run.cfg.interpret.target_class;
    let dir = run.out.join("gradcam");
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut rows = Vec::new();
    for s in interpret_inputs(run)? {
        let heat = grad_cam(&mut model, s.image.view(), target.index(), &layer)?;
        heat.write_png(&dir.join(format!("{}.png", s.id)))?;
        heat.write_raw(&dir.join(format!("{}.csv", s.id)))?;
        let (inside, outside) = heat.inside_outside_means(s.mask.view());
        rows.push(serde_json::json!({
            "id": s.id,
            "label": s.label,
            "insideMean": inside,
            "outsideMean": outside,
        }));
    }
    println!("{} heatmaps for class {} at {layer} in {}", rows.len(), target.name(), dir.display());
    run.report(
        "gradcam.json",
        &serde_json::json!({ "layer": layer, "targetClass": target, "checkpoint": checkpoint, "images": rows }),
    )?;
    Ok(())
}

fn features(run: &Run, checkpoint: &Path) -> anyhow::Result<()> {
    let (mut model, layer) = interpret_model(run, checkpoint)?;
    let dir = run.out.join("features");
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let samples = interpret_inputs(run)?;
    for s in &samples {
        let maps = feature_maps(&mut model, s.image.view(), &layer)?;
        write_feature_maps(maps.view(), &dir.join(format!("{}_{layer}", s.id)))?;
    }
    println!("{} feature grids at {layer} in {}", samples.len(), dir.display());
    Ok(())
}

fn embeddings(run: &Run, checkpoint: &Path) -> anyhow::Result<()> {
    let (mut model, layer) = interpret_model(run, checkpoint)?;
    let (_, test) = run.split()?;
    let samples = prepare::<F>(&test, &run.cfg.preproc)?;
    let ids: Vec<String> = samples.iter().map(|s| s.id.clone()).collect();
    let images: Vec<_> = samples.iter().map(|s| s.image.view()).collect();
    let labels: Vec<ClassLabel> = samples.iter().map(|s| s.label).collect();
    let mut dump = export_embeddings(&mut model, &ids, &images, &labels, &layer)?;
    dump.meta.checkpoint = Some(checkpoint.to_path_buf());
    dump.write_csv(&run.out.join("embeddings.csv"))?;
    let coords = Pca2 { iterations: 200 }.reduce(dump.features.view())?;
    write_reduced_csv(&run.out.join("embeddings_2d.csv"), &dump, coords.view())?;
    let (intra, inter) = dump.cosine_similarity_summary();
    run.report(
        "embeddings_summary.json",
        &serde_json::json!({ "layer": layer, "count": ids.len(), "intraClassCosine": intra, "interClassCosine": inter }),
    )?;
    println!("{} embeddings at {layer}; mean cosine intra {intra:.4} inter {inter:.4}", ids.len());
    Ok(())
}
