use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use infoground::attention::{attention_dump, write_attention_jsonl, GroundingModel};
use infoground::data::{load_dataset, write_jsonl};
use infoground::eval::{evaluate, EvalCsv};
use infoground::math::{Matrix, NormMode};
use infoground::mi::{infonce_bound, random_critic, DiscreteJoint, PRESETS};
use infoground::negcap::{NegParams, NegativeCache, TableLm};
use infoground::rng::substream;
use infoground::synth::{synth_generate, SynthConfig};
use infoground::train::{check_grad_suite, train, NegativeSource, TrainConfig, TrainOutputs, GRAD_CHECK_TOLERANCE};
use infoground::losses::Reduction;
use infoground::Error;

#[derive(Parser)]
#[command(name = "infoground", version, about = "Contrastive weakly supervised phrase grounding")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with planted word-region alignments.
    GenData(GenDataArgs),
    /// Build the context-preserving negative caption cache for a dataset.
    MakeNegatives(MakeNegativesArgs),
    /// Train a grounding model.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Compare analytic gradients with finite differences.
    CheckGrad(CheckGradArgs),
    /// Exact MI of a discrete joint versus the sampled InfoNCE bound.
    MiDemo(MiDemoArgs),
    /// Write per-word attention over regions as JSON lines.
    DumpAttention(DumpAttentionArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    /// JSON file with generator settings; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    num_images: Option<usize>,
    #[arg(long)]
    num_val_images: Option<usize>,
    #[arg(long)]
    regions_per_image: Option<usize>,
    #[arg(long)]
    vocab_size: Option<usize>,
    #[arg(long)]
    caption_length: Option<usize>,
    #[arg(long)]
    noun_fraction: Option<f64>,
    #[arg(long)]
    d_r: Option<usize>,
    #[arg(long)]
    d_w: Option<usize>,
    #[arg(long, alias = "noise")]
    alignment_noise: Option<f64>,
    #[arg(long)]
    context_mix: Option<f64>,
    #[arg(long)]
    salient_per_image: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct MakeNegativesArgs {
    /// Dataset manifest whose captions need negatives.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    lm: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = infoground::negcap::DEFAULT_N_CAND)]
    n_cand: usize,
    #[arg(long, default_value_t = infoground::negcap::DEFAULT_N_KEEP)]
    n_keep: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum NormArg {
    Batch,
    Affine,
}

#[derive(Clone, Copy, ValueEnum)]
enum ReductionArg {
    Mean,
    Sum,
}

#[derive(Clone, Copy, ValueEnum)]
enum NegativesArg {
    Cache,
    Random,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    val: PathBuf,
    /// Negative cache written by make-negatives.
    #[arg(long)]
    negatives_file: Option<PathBuf>,
    /// Directory for checkpoints, the run log and per-step metrics.
    #[arg(long)]
    out: PathBuf,
    /// JSON training config; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    eval_every: Option<usize>,
    /// Evaluations without improvement before stopping, or "none".
    #[arg(long, value_parser = parse_patience)]
    patience: Option<Patience>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    use_lang: Option<bool>,
    #[arg(long)]
    reduction: Option<ReductionArg>,
    #[arg(long)]
    norm: Option<NormArg>,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    n_cand: Option<usize>,
    #[arg(long)]
    n_keep: Option<usize>,
    #[arg(long)]
    negatives: Option<NegativesArg>,
    #[arg(long)]
    allow_missing_negatives: bool,
}

#[derive(Clone, Copy)]
struct Patience(Option<usize>);

fn parse_patience(s: &str) -> Result<Patience, String> {
    if s.eq_ignore_ascii_case("none") {
        return Ok(Patience(None));
    }
    s.parse().map(|p| Patience(Some(p))).map_err(|_| format!("expected a count or \"none\", got {s:?}"))
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Append the report to this CSV (header written when the file is new).
    #[arg(long)]
    csv: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    epoch: usize,
}

#[derive(Args)]
struct CheckGradArgs {
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 20)]
    instances: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum CriticArg {
    /// Fixed standard normal table.
    Random,
    /// The log density ratio of the joint (the optimal critic).
    Ratio,
}

#[derive(Args)]
struct MiDemoArgs {
    /// Preset name (independent, diagonal, correlated) or a JSON file holding a 2-D array.
    #[arg(long, default_value = "independent")]
    joint: String,
    #[arg(long, default_value_t = 16)]
    k: usize,
    #[arg(long, default_value_t = 5000)]
    batches: usize,
    #[arg(long, value_enum, default_value_t = CriticArg::Random)]
    critic: CriticArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct DumpAttentionArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Record index within the dataset.
    #[arg(long, default_value_t = 0)]
    index: usize,
    /// Token positions to dump; all tokens when omitted.
    #[arg(long, value_delimiter = ',')]
    tokens: Option<Vec<usize>>,
    /// Output file; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, Error> {
    let bytes = fs::read(path).map_err(|e| Error::Io {
        path: path.into(),
        source: e,
    })?;
    Ok(serde_json::from_slice(&bytes)?)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), Error> {
    fs::write(path, bytes).map_err(|e| Error::Io {
        path: path.into(),
        source: e,
    })
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<(), Error> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn gen_data(a: GenDataArgs) -> Result<(), Error> {
    let mut cfg: SynthConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => SynthConfig::default(),
    };
    macro_rules! over {
        ($($f:ident),*) => { $(if let Some(v) = a.$f { cfg.$f = v; })* };
    }
    over!(num_images, num_val_images, regions_per_image, vocab_size, caption_length, noun_fraction, d_r, d_w,
          alignment_noise, context_mix, salient_per_image, seed);
    let out = synth_generate(&cfg)?;
    fs::create_dir_all(&a.out).map_err(|e| Error::Io {
        path: a.out.clone(),
        source: e,
    })?;
    let train_manifest = out.train.save(&a.out, "train")?;
    let val_manifest = out.val.save(&a.out, "val")?;
    let mut oracle = Vec::new();
    write_jsonl(&mut oracle, &out.oracle)?;
    write_file(&a.out.join("oracle.jsonl"), &oracle)?;
    out.lm.save(&a.out.join("lm.json"))?;
    write_file(&a.out.join("synth_config.json"), &serde_json::to_vec_pretty(&cfg)?)?;
    print_json(&serde_json::json!({
        "train": train_manifest,
        "val": val_manifest,
        "train_images": out.train.len(),
        "val_images": out.val.len(),
        "oracle_entries": out.oracle.len(),
    }))
}

fn make_negatives(a: MakeNegativesArgs) -> Result<(), Error> {
    let data = load_dataset(&a.data)?;
    let lm = TableLm::from_file(&a.lm)?;
    let params = NegParams {
        n_cand: a.n_cand,
        n_keep: a.n_keep,
    };
    let cache = NegativeCache::build(data.pairs.iter().map(|p| &p.caption), &lm, params)?;
    cache.save(&a.out)?;
    print_json(&serde_json::json!({ "sets": cache.len(), "out": a.out }))
}

fn run_train(a: TrainArgs) -> Result<(), Error> {
    let mut cfg: TrainConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => TrainConfig::default(),
    };
    macro_rules! over {
        ($($f:ident),*) => { $(if let Some(v) = a.$f { cfg.$f = v; })* };
    }
    over!(batch_size, learning_rate, max_epochs, eval_every, seed, use_lang, d, n_cand, n_keep);
    if let Some(Patience(p)) = a.patience {
        cfg.patience = p;
    }
    if let Some(r) = a.reduction {
        cfg.reduction = match r {
            ReductionArg::Mean => Reduction::Mean,
            ReductionArg::Sum => Reduction::Sum,
        };
    }
    if let Some(n) = a.norm {
        cfg.norm = match n {
            NormArg::Batch => NormMode::Batch,
            NormArg::Affine => NormMode::Affine,
        };
    }
    if let Some(n) = a.negatives {
        cfg.negatives = match n {
            NegativesArg::Cache => NegativeSource::Cache,
            NegativesArg::Random => NegativeSource::Random,
        };
    }
    cfg.allow_missing_negatives |= a.allow_missing_negatives;
    cfg.validate()?;

    let train_set = load_dataset(&a.train)?;
    let val_set = load_dataset(&a.val)?;
    let cache = a.negatives_file.as_deref().map(NegativeCache::load).transpose()?;
    fs::create_dir_all(&a.out).map_err(|e| Error::Io {
        path: a.out.clone(),
        source: e,
    })?;
    write_file(&a.out.join("train_config.json"), &serde_json::to_vec_pretty(&cfg)?)?;
    let outcome = train(&cfg, &train_set, &val_set, cache.as_ref(), &TrainOutputs::in_dir(&a.out))?;
    let best = outcome.log.best();
    print_json(&serde_json::json!({
        "steps": outcome.steps,
        "best_step": outcome.best_step,
        "best_val_pointing_accuracy": best.map(|r| r.val_pointing_accuracy),
        "stopped_early": outcome.stopped_early,
        "out": a.out,
    }))
}

fn run_eval(a: EvalArgs) -> Result<(), Error> {
    let model = GroundingModel::load(&a.checkpoint)?;
    let data = load_dataset(&a.data)?;
    let report = evaluate(&model, &data)?;
    if let Some(path) = &a.csv {
        let fresh = !path.exists();
        let file = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::Io {
                path: path.clone(),
                source: e,
            })?;
        EvalCsv::new(file, fresh)?.append(a.epoch, &report)?;
    }
    print_json(&report)
}

/// Returns whether the suite passed.
fn check_grad(a: CheckGradArgs) -> Result<bool, Error> {
    let report = check_grad_suite(a.seed, a.instances)?;
    let pass = report.max_relative_error <= GRAD_CHECK_TOLERANCE;
    print_json(&serde_json::json!({
        "report": report,
        "tolerance": GRAD_CHECK_TOLERANCE,
        "pass": pass,
    }))?;
    Ok(pass)
}

fn mi_demo(a: MiDemoArgs) -> Result<(), Error> {
    let joint = if PRESETS.contains(&a.joint.as_str()) {
        DiscreteJoint::preset(&a.joint)?
    } else {
        let rows: Vec<Vec<f64>> = read_json(Path::new(&a.joint))?;
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Invalid("joint rows have different lengths".into()));
        }
        DiscreteJoint::new(Matrix::from_vec(rows.len(), cols, rows.concat())?)?
    };
    let (nx, ny) = (joint.probs().rows(), joint.probs().cols());
    let critic = match a.critic {
        CriticArg::Random => random_critic(nx, ny, &mut substream(a.seed, "mi-critic")),
        CriticArg::Ratio => {
            let mut c = joint.log_density_ratio();
            c.as_mut_slice().iter_mut().for_each(|v| *v = v.max(-50.0));
            c
        }
    };
    let est = infonce_bound(&joint, &critic, a.k, a.batches, &mut substream(a.seed, "mi-samples"))?;
    print_json(&serde_json::json!({
        "exact_mi": est.exact_mi,
        "mean_bound": est.mean_bound,
        "std_err": est.std_err,
        "excess_in_se": est.excess_in_se(),
        "log_k": (a.k as f64).ln(),
        "k": est.k,
        "batches": est.batches,
    }))
}

fn dump_attention(a: DumpAttentionArgs) -> Result<(), Error> {
    let model = GroundingModel::load(&a.checkpoint)?;
    let data = load_dataset(&a.data)?;
    let pair = data.pairs.get(a.index).ok_or(Error::OutOfRange {
        index: a.index,
        len: data.len(),
    })?;
    let records = attention_dump(&model.eval_copy(), &pair.regions, &pair.caption, a.tokens.as_deref())?;
    match &a.out {
        Some(path) => {
            let mut buf = Vec::new();
            write_attention_jsonl(&mut buf, &records)?;
            write_file(path, &buf)
        }
        None => write_attention_jsonl(io::stdout().lock(), &records),
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::NonFinite(_) => 3,
        Error::Io { .. } | Error::Invalid(_) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::MakeNegatives(a) => make_negatives(a),
        Command::Train(a) => run_train(a),
        Command::Eval(a) => run_eval(a),
        Command::CheckGrad(a) => match check_grad(a) {
            Ok(true) => Ok(()),
            Ok(false) => {
                eprintln!("error: gradient check exceeded tolerance {GRAD_CHECK_TOLERANCE:e}");
                return ExitCode::from(3);
            }
            Err(e) => Err(e),
        },
        Command::MiDemo(a) => mi_demo(a),
        Command::DumpAttention(a) => dump_attention(a),
    };
    let _ = io::stdout().flush();
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
