//! `ascl`: dataset synthesis, training, evaluation, gradient checking,
//! pairwise scoring, and ablation sweeps.
//!
//! Exit codes: 0 on success, 2 for usage/file/config problems, 3 for numeric
//! failures (including a failed gradient check).

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ascl_core::datastore::{
    generate_synthetic, load_dataset_auto, nearest_centroid_accuracy, save_features, Split,
    SynthConfig,
};
use ascl_core::matcher::{load_model, save_model, score};
use ascl_core::pipeline::{
    evaluate, gradient_check, train, write_training_log, Ablation, EvalOptions, TrainConfig,
    GRADCHECK_TOLERANCE,
};
use ascl_core::AsclError;

#[derive(Parser)]
#[command(
    name = "ascl",
    about = "Asymmetry-sensitive contrastive image-text retrieval engine",
    version
)]
struct Cli {
    /// Cap worker threads used for score-matrix evaluation.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic paired dataset and write it in the ASCL format.
    Synth(SynthArgs),
    /// Train a model from a config file (plus overrides).
    Train(TrainArgs),
    /// Evaluate a trained model: recall@K, Rsum, alignment/uniformity.
    Eval(EvalArgs),
    /// Check analytic gradients against central finite differences.
    Gradcheck(GradcheckArgs),
    /// Score image-text pairs with a trained model.
    Score(ScoreArgs),
    /// Train and evaluate several ablation variants on shared data.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 32)]
    clusters: usize,
    #[arg(long, default_value_t = 64)]
    dim: usize,
    #[arg(long = "captions-per-image", default_value_t = 5)]
    captions_per_image: usize,
    #[arg(long, default_value_t = 8)]
    regions: usize,
    /// Per-coordinate feature noise sigma.
    #[arg(long, default_value_t = 0.1)]
    noise: f64,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Inject short/long/extra-noisy caption variants.
    #[arg(long)]
    asymmetric: bool,
    /// Shared concept-pool size (images overlap); the default gives every
    /// image disjoint concepts.
    #[arg(long)]
    pool: Option<usize>,
    /// Minimum caption length; defaults to 4 (3 with --asymmetric).
    #[arg(long)]
    lmin: Option<usize>,
    /// Maximum caption length; defaults to 16 (28 with --asymmetric).
    #[arg(long)]
    lmax: Option<usize>,
    /// Captions per image held out as the test split.
    #[arg(long, default_value_t = 1)]
    holdout: usize,
    #[arg(long, default_value_t = 4)]
    concepts: usize,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Override config keys, e.g. --set train.lr=5e-4.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Include the caption-length bucket breakdown.
    #[arg(long)]
    lengths: bool,
    #[arg(long, default_value = "test")]
    split: String,
    /// Also write the JSON report here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 8)]
    dim: usize,
    #[arg(long, default_value_t = 2)]
    heads: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Image id; with --text, scores that single pair.
    #[arg(long)]
    image: Option<String>,
    /// Caption id.
    #[arg(long)]
    text: Option<String>,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    config: PathBuf,
    /// Comma-separated variant list.
    #[arg(long, default_value = "full,no_pos,no_neg,no_pn,no_mf,triplet")]
    variants: String,
    /// Seeds per variant (base seed, base seed + 1, ...).
    #[arg(long, default_value_t = 1)]
    seeds: u64,
    /// Also write the comparison as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn exit_code_for(err: &AsclError) -> u8 {
    match err {
        AsclError::NumericError(_) | AsclError::DegenerateVector(_) => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("ascl: failed to configure {n} threads: {e}");
            return ExitCode::from(2);
        }
    }
    let result = match cli.command {
        Command::Synth(args) => cmd_synth(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Gradcheck(args) => cmd_gradcheck(args),
        Command::Score(args) => cmd_score(args),
        Command::Ablate(args) => cmd_ablate(args),
    };
    match result {
        Ok(code) => code,
        Err(err) => {
            eprintln!("ascl: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}

fn cmd_synth(args: SynthArgs) -> Result<ExitCode, AsclError> {
    let len_range = (
        args.lmin.unwrap_or(if args.asymmetric { 3 } else { 4 }),
        args.lmax.unwrap_or(if args.asymmetric { 28 } else { 16 }),
    );
    let cfg = SynthConfig {
        clusters: args.clusters,
        captions_per_image: args.captions_per_image,
        dim: args.dim,
        regions_per_image: args.regions,
        len_range,
        concepts_per_image: args.concepts,
        noise_sigma: args.noise,
        holdout_per_image: args.holdout,
        asymmetric: args.asymmetric,
        pool_size: args.pool,
    };
    let dataset = generate_synthetic(&cfg, args.seed)?;
    save_features(&dataset, &args.out)?;
    let separation = nearest_centroid_accuracy(&dataset)?;
    println!(
        "wrote {}: {} images, {} captions, dim {}, train/test {}/{}, centroid-oracle accuracy {:.3}",
        args.out.display(),
        dataset.images.len(),
        dataset.captions.len(),
        dataset.dim,
        dataset.split_captions(Split::Train).len(),
        dataset.split_captions(Split::Test).len(),
        separation
    );
    Ok(ExitCode::SUCCESS)
}

fn load_config(path: &PathBuf, overrides: &[String]) -> Result<TrainConfig, AsclError> {
    let mut cfg = TrainConfig::load(path)?;
    for pair in overrides {
        let Some((key, value)) = pair.split_once('=') else {
            return Err(AsclError::ConfigError(format!(
                "--set expects KEY=VALUE, got '{pair}'"
            )));
        };
        cfg.apply_override(key.trim(), value.trim())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_train(args: TrainArgs) -> Result<ExitCode, AsclError> {
    let cfg = load_config(&args.config, &args.set)?;
    let data_path = cfg.data_path.clone().ok_or_else(|| {
        AsclError::ConfigError("config must set data.path to the training dataset".into())
    })?;
    let dataset = load_dataset_auto(&data_path)?;
    let outcome = train(&dataset, &cfg)?;
    let model_path = cfg.model_out.clone().unwrap_or_else(|| "model.ascm".into());
    let log_path = cfg.log_out.clone().unwrap_or_else(|| "train_log.jsonl".into());
    save_model(&outcome.params, &cfg.to_kv_string(), &model_path)?;
    write_training_log(&outcome.log, &cfg, &log_path)?;
    let last = outcome.log.last().expect("at least one epoch");
    println!(
        "trained {} epochs on {} ({} train pairs); final mean loss {:.6}; model -> {model_path}, log -> {log_path}",
        cfg.epochs,
        data_path,
        dataset.split_captions(Split::Train).len(),
        last.mean_loss
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_eval(args: EvalArgs) -> Result<ExitCode, AsclError> {
    let (params, echo) = load_model(&args.model)?;
    let dataset = load_dataset_auto(&args.data)?;
    let split = Split::parse(&args.split)?;
    let config_map: BTreeMap<String, String> = TrainConfig::parse_kv_str(&echo)
        .map(|cfg| cfg.to_kv())
        .unwrap_or_default();
    let options = EvalOptions {
        split,
        lengths: args.lengths,
        config: config_map,
    };
    let report = evaluate(&dataset, &params, &options)?;
    let json = serde_json::to_string_pretty(&report)?;
    println!("{json}");
    if let Some(path) = args.out {
        std::fs::write(path, json)?;
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<ExitCode, AsclError> {
    let report = gradient_check(args.dim, args.heads, args.seed)?;
    for (group, err) in &report.groups {
        println!("{group:28} max rel err {err:.3e}");
    }
    if report.passed() {
        println!("gradcheck PASS (max {:.3e} <= {GRADCHECK_TOLERANCE:e})", report.max_rel_err());
        Ok(ExitCode::SUCCESS)
    } else {
        println!("gradcheck FAIL (max {:.3e} > {GRADCHECK_TOLERANCE:e})", report.max_rel_err());
        Ok(ExitCode::from(3))
    }
}

fn cmd_score(args: ScoreArgs) -> Result<ExitCode, AsclError> {
    let (params, _) = load_model(&args.model)?;
    let dataset = load_dataset_auto(&args.data)?;
    let pairs: Vec<(usize, usize)> = match (&args.image, &args.text) {
        (Some(img_id), Some(txt_id)) => {
            let img = dataset.image_position(img_id).ok_or_else(|| {
                AsclError::ConfigError(format!("image id '{img_id}' not found"))
            })?;
            let txt = dataset.caption_position(txt_id).ok_or_else(|| {
                AsclError::ConfigError(format!("caption id '{txt_id}' not found"))
            })?;
            vec![(img, txt)]
        }
        (None, Some(txt_id)) => {
            let txt = dataset.caption_position(txt_id).ok_or_else(|| {
                AsclError::ConfigError(format!("caption id '{txt_id}' not found"))
            })?;
            vec![(dataset.parent_of(txt), txt)]
        }
        (Some(img_id), None) => {
            let img = dataset.image_position(img_id).ok_or_else(|| {
                AsclError::ConfigError(format!("image id '{img_id}' not found"))
            })?;
            dataset.caption_groups()[img_id].iter().map(|&c| (img, c)).collect()
        }
        (None, None) => (0..dataset.captions.len())
            .map(|c| (dataset.parent_of(c), c))
            .collect(),
    };
    println!("{:<12} {:<14} {:>10} {:>10} {:>10}", "image", "text", "s_local", "s_global", "s");
    let mut mean = 0.0;
    for &(img, txt) in &pairs {
        let ps = score(&dataset.images[img], &dataset.captions[txt], &params)?;
        println!(
            "{:<12} {:<14} {:>10.6} {:>10.6} {:>10.6}",
            dataset.images[img].image_id, dataset.captions[txt].text_id, ps.s_local, ps.s_global, ps.s
        );
        mean += ps.s;
    }
    if pairs.len() > 1 {
        println!("mean combined score over {} pairs: {:.6}", pairs.len(), mean / pairs.len() as f64);
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_ablate(args: AblateArgs) -> Result<ExitCode, AsclError> {
    let base = load_config(&args.config, &[])?;
    let data_path = base.data_path.clone().ok_or_else(|| {
        AsclError::ConfigError("config must set data.path to the training dataset".into())
    })?;
    let dataset = load_dataset_auto(&data_path)?;
    let variants: Vec<Ablation> = args
        .variants
        .split(',')
        .map(|v| Ablation::parse(v.trim()))
        .collect::<Result<_, _>>()?;
    if variants.is_empty() || args.seeds == 0 {
        return Err(AsclError::ConfigError("need at least one variant and one seed".into()));
    }
    let mut rows = Vec::new();
    for &variant in &variants {
        let mut rsums = Vec::new();
        for offset in 0..args.seeds {
            let mut cfg = base.clone();
            cfg.ablation = variant;
            cfg.seed = base.seed + offset;
            let outcome = train(&dataset, &cfg)?;
            let report = evaluate(
                &dataset,
                &outcome.params,
                &EvalOptions {
                    split: Split::Test,
                    lengths: false,
                    config: cfg.to_kv(),
                },
            )?;
            rsums.push(report.rsum);
        }
        let mean = rsums.iter().sum::<f64>() / rsums.len() as f64;
        rows.push((variant, mean, rsums));
    }
    println!("{:<10} {:>10}  per-seed rsum", "variant", "mean rsum");
    for (variant, mean, rsums) in &rows {
        let seeds: Vec<String> = rsums.iter().map(|r| format!("{r:.4}")).collect();
        println!("{:<10} {:>10.4}  [{}]", variant.as_str(), mean, seeds.join(", "));
    }
    if let Some(path) = args.out {
        let json: Vec<serde_json::Value> = rows
            .iter()
            .map(|(variant, mean, rsums)| {
                serde_json::json!({
                    "variant": variant.as_str(),
                    "mean_rsum": mean,
                    "per_seed_rsum": rsums,
                })
            })
            .collect();
        std::fs::write(path, serde_json::to_string_pretty(&json)?)?;
    }
    Ok(ExitCode::SUCCESS)
}
