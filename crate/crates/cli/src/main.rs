use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand};
use glr_core::dataset::{
    read_dataset, read_embedding_file, split_dataset, write_dataset, write_embedding_file,
    HoldoutRules,
};
use glr_core::head::checkpoint::{load_head, save_head};
use glr_core::head::synth::{gen_synthetic, SynthConfig};
use glr_core::head::{embed_set, CosineHead};
use glr_core::recipe::{
    default_stages, retrieval_map, run_stage, DatasetView, RecipeOptions, RecipeStage, StageOutcome,
};
use glr_core::tables::{self, read_stages};
use glr_core::{
    concat_weighted, mean_ap_at_100, top_k_search, EnsembleMember, EnsembleSpec, DEFAULT_K,
};

/// Landmark retrieval pipeline on precomputed backbone features.
#[derive(Parser)]
#[command(name = "glr", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic clustered dataset with held-out query/index splits
    Gen(GenArgs),
    /// Train the head for one stage
    Train(TrainArgs),
    /// Run an ordered list of training stages
    Recipe(RecipeArgs),
    /// Project features through a checkpoint into normalized embeddings
    Embed(EmbedArgs),
    /// Exact k-nearest-neighbor lookup of queries against an index
    Knn(KnnArgs),
    /// Score predictions with mAP@100
    Eval(EvalArgs),
    /// Concatenate weighted, normalized embedding sets
    Ensemble(EnsembleArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long, default_value_t = 50)]
    classes: usize,
    #[arg(long, default_value_t = 32)]
    dim_in: usize,
    #[arg(long, default_value_t = 10)]
    samples_min: usize,
    #[arg(long, default_value_t = 30)]
    samples_max: usize,
    #[arg(long, default_value_t = 0.05)]
    noise_sigma: f64,
    /// Fraction of noisy-class samples given a wrong label
    #[arg(long, default_value_t = 0.0)]
    label_noise: f64,
    /// Fraction of classes tagged clean
    #[arg(long, default_value_t = 0.4)]
    clean_fraction: f64,
    #[arg(long, default_value_t = 4)]
    min_class_samples: usize,
    #[arg(long, default_value_t = 1)]
    queries_per_class: usize,
    #[arg(long, default_value_t = 3)]
    index_per_class: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Clone)]
struct HyperArgs {
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    #[arg(long, default_value_t = 1e-5)]
    weight_decay: f64,
    #[arg(long, default_value_t = 64)]
    batch: usize,
    #[arg(long, default_value_t = 512)]
    emb_dim: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl HyperArgs {
    fn options(&self) -> RecipeOptions {
        RecipeOptions {
            emb_dim: self.emb_dim,
            learning_rate: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            batch_size: self.batch,
            seed: self.seed,
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 1)]
    epochs: usize,
    #[command(flatten)]
    hyper: HyperArgs,
    /// Training view: clean-only or full-noisy
    #[arg(long, default_value = "full-noisy")]
    view: DatasetView,
    /// Loss weight of clean-tagged samples
    #[arg(long, default_value_t = 1.0)]
    clean_weight: f64,
    /// Start from this checkpoint instead of a fresh head
    #[arg(long)]
    init: Option<PathBuf>,
    /// Keep the projection from --init but draw new prototypes
    #[arg(long, requires = "init")]
    reinit: bool,
    /// Loss trace CSV; defaults to <out>.trace.csv
    #[arg(long)]
    trace: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RecipeArgs {
    #[arg(long)]
    data: PathBuf,
    /// Stage table; defaults to clean, transfer to noisy, noisy with clean weight 2
    #[arg(long)]
    stages: Option<PathBuf>,
    /// Epochs per stage when --stages is not given
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[command(flatten)]
    hyper: HyperArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EmbedArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    features: PathBuf,
    /// Text file with one id per line; restricts and orders the output
    #[arg(long)]
    ids: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct KnnArgs {
    #[arg(long)]
    query: PathBuf,
    #[arg(long)]
    index: PathBuf,
    #[arg(long, default_value_t = DEFAULT_K)]
    k: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    truth: PathBuf,
}

#[derive(Args)]
struct EnsembleArgs {
    /// Member as PATH:WEIGHT; repeat for each member
    #[arg(long = "in", required = true, value_parser = parse_member)]
    inputs: Vec<(PathBuf, f64)>,
    #[arg(long)]
    out: PathBuf,
}

fn parse_member(s: &str) -> Result<(PathBuf, f64), String> {
    let (path, weight) = s
        .rsplit_once(':')
        .ok_or_else(|| format!("expected PATH:WEIGHT, got {s:?}"))?;
    let weight: f64 = weight
        .parse()
        .map_err(|e| format!("bad weight {weight:?}: {e}"))?;
    if path.is_empty() {
        return Err("empty path".into());
    }
    Ok((PathBuf::from(path), weight))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(
        File::open(path).with_context(|| format!("opening {}", path.display()))?,
    ))
}

fn write_checkpoint(path: &Path, head: &CosineHead<f32>) -> Result<()> {
    let mut w = create(path)?;
    save_head(head, &mut w).with_context(|| format!("writing {}", path.display()))?;
    w.flush()?;
    Ok(())
}

fn read_checkpoint(path: &Path) -> Result<CosineHead<f32>> {
    load_head(open(path)?).with_context(|| format!("reading {}", path.display()))
}

fn write_trace(path: &Path, outcome: &StageOutcome) -> Result<()> {
    let mut w = create(path)?;
    tables::write_trace(&outcome.result.trace.epochs, &mut w)
        .with_context(|| format!("writing {}", path.display()))?;
    w.flush()?;
    Ok(())
}

fn cmd_gen(args: GenArgs) -> Result<()> {
    let config = SynthConfig {
        num_classes: args.classes,
        d_in: args.dim_in,
        samples_min: args.samples_min,
        samples_max: args.samples_max,
        noise_sigma: args.noise_sigma,
        label_noise_fraction: args.label_noise,
        clean_fraction: args.clean_fraction,
        seed: args.seed,
    };
    let data = gen_synthetic(&config)?;
    let rules = HoldoutRules {
        min_class_samples: args.min_class_samples,
        queries_per_class: args.queries_per_class,
        index_per_class: args.index_per_class,
    };
    let splits = split_dataset(&data, &rules)?;
    write_dataset(&args.out, &splits)?;
    let m = &splits.meta;
    eprintln!(
        "wrote {}: {} classes ({} clean), train {}, val {}, query {}, index {}",
        args.out.display(),
        m.num_classes,
        m.clean_classes,
        m.train_samples,
        m.val_samples,
        m.query_samples,
        m.index_samples
    );
    Ok(())
}

fn default_trace_path(out: &Path) -> PathBuf {
    let mut name = out.file_stem().unwrap_or_default().to_os_string();
    name.push(".trace.csv");
    out.with_file_name(name)
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let splits = read_dataset(&args.data)?;
    let data = splits.recipe_data();
    let stage = RecipeStage::new(args.view, args.clean_weight, args.reinit, args.epochs)?;
    let previous = args.init.as_deref().map(read_checkpoint).transpose()?;
    let outcome = run_stage(previous.as_ref(), &data, &stage, &args.hyper.options(), 0)?;
    write_checkpoint(&args.out, &outcome.result.head)?;
    let trace = args
        .trace
        .clone()
        .unwrap_or_else(|| default_trace_path(&args.out));
    write_trace(&trace, &outcome)?;
    if let (Some(first), Some(last)) = (outcome.result.trace.initial(), outcome.result.trace.last())
    {
        eprintln!(
            "val loss {:.6} -> {:.6} over {} epochs",
            first.val_loss, last.val_loss, stage.epochs
        );
    }
    Ok(())
}

const SUMMARY_HEADER: &str =
    "stage,dataset_view,clean_sample_weight,reinit_classifier,epochs,num_classes,\
first_batch_loss,initial_val_loss,final_train_loss,final_val_loss,map_at_100";

fn cmd_recipe(args: RecipeArgs) -> Result<()> {
    let splits = read_dataset(&args.data)?;
    let data = splits.recipe_data();
    let stages = match &args.stages {
        Some(path) => {
            read_stages(open(path)?).with_context(|| format!("reading {}", path.display()))?
        }
        None => default_stages(args.epochs),
    };
    let options = args.hyper.options();
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;

    let mut summary = create(&args.out.join("summary.csv"))?;
    writeln!(summary, "{SUMMARY_HEADER}")?;
    let mut previous: Option<CosineHead<f32>> = None;
    for (i, stage) in stages.iter().enumerate() {
        let outcome = run_stage(previous.as_ref(), &data, stage, &options, i)?;
        let n = i + 1;
        write_checkpoint(
            &args.out.join(format!("stage{n}.glrh")),
            &outcome.result.head,
        )?;
        write_trace(&args.out.join(format!("stage{n}_trace.csv")), &outcome)?;
        let map = retrieval_map(
            &outcome.result.head,
            &splits.query,
            &splits.index,
            &splits.truth,
        )?;
        let trace = &outcome.result.trace;
        let (first, last) = match (trace.initial(), trace.last()) {
            (Some(f), Some(l)) => (f, l),
            _ => bail!("stage {n} produced an empty loss trace"),
        };
        let first_batch = trace
            .first_batch_loss
            .map(|v| v.to_string())
            .unwrap_or_default();
        writeln!(
            summary,
            "{n},{},{},{},{},{},{first_batch},{},{},{},{map}",
            stage.dataset_view,
            stage.clean_sample_weight,
            stage.reinit_classifier,
            stage.epochs,
            outcome.num_classes,
            first.val_loss,
            last.train_loss,
            last.val_loss,
        )?;
        eprintln!(
            "stage {n} ({}, weight {}, {} epochs): val loss {:.6} -> {:.6}, mAP@100 {map:.6}",
            stage.dataset_view,
            stage.clean_sample_weight,
            stage.epochs,
            first.val_loss,
            last.val_loss
        );
        previous = Some(outcome.result.head);
    }
    summary.flush()?;
    Ok(())
}

fn read_id_list(path: &Path) -> Result<Vec<String>> {
    let mut ids = Vec::new();
    for line in open(path)?.lines() {
        let line = line.with_context(|| format!("reading {}", path.display()))?;
        let id = line.trim_end_matches('\r');
        if !id.is_empty() {
            ids.push(id.to_owned());
        }
    }
    Ok(ids)
}

fn cmd_embed(args: EmbedArgs) -> Result<()> {
    let head = read_checkpoint(&args.ckpt)?;
    let mut features = read_embedding_file(&args.features)?;
    if let Some(path) = &args.ids {
        let ids = read_id_list(path)?;
        features = features
            .subset(&ids)
            .with_context(|| format!("selecting ids from {}", path.display()))?;
    }
    let embeddings = embed_set(&head, &features)?;
    write_embedding_file(&args.out, &embeddings)?;
    Ok(())
}

fn cmd_knn(args: KnnArgs) -> Result<()> {
    let queries = read_embedding_file(&args.query)?;
    let index = read_embedding_file(&args.index)?;
    let lists = top_k_search(&queries, &index, args.k)?;
    let mut w = create(&args.out)?;
    tables::write_neighbor_lists(&lists, &mut w)
        .with_context(|| format!("writing {}", args.out.display()))?;
    w.flush()?;
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let preds = tables::read_predictions(open(&args.pred)?)
        .with_context(|| format!("reading {}", args.pred.display()))?;
    let truth = tables::read_ground_truth(open(&args.truth)?)
        .with_context(|| format!("reading {}", args.truth.display()))?;
    let map = mean_ap_at_100(&preds, &truth)?;
    println!("{map:.6}");
    Ok(())
}

fn cmd_ensemble(args: EnsembleArgs) -> Result<()> {
    ensure!(
        !args.inputs.is_empty(),
        "at least one --in member is required"
    );
    let members = args
        .inputs
        .iter()
        .map(|(path, weight)| {
            Ok(EnsembleMember {
                set: read_embedding_file(path)?,
                weight: *weight,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let combined = concat_weighted(&EnsembleSpec::new(members)?)?;
    write_embedding_file(&args.out, &combined)?;
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Gen(a) => cmd_gen(a),
        Command::Train(a) => cmd_train(a),
        Command::Recipe(a) => cmd_recipe(a),
        Command::Embed(a) => cmd_embed(a),
        Command::Knn(a) => cmd_knn(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Ensemble(a) => cmd_ensemble(a),
    }
}
