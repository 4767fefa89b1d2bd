use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use stylenet::autodiff::primitive_suite;
use stylenet::config::parse_list;
use stylenet::harness::{
    evaluate, hands_of, labeled_set, network_grad_check, run_ablation, split_seen, split_unseen, AblationEval, EvalOptions, ExperimentData,
    ExperimentSplit, Protocol, DEFAULT_TRIALS,
};
use stylenet::synth::{generate_corpus, SynthConfig, MANIFEST_NAME};
use stylenet::trainer::{history_csv, TrainConfig, Trainer};
use stylenet::{DatasetManifest, Hands, InputMode, ModelConfig, StyleNet, Variant};

#[derive(Parser)]
#[command(name = "stylenet", version, about = "Typing-style person identification from hand-joint sequences")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic corpus and its manifest.
    Generate(GenerateArgs),
    /// Partition a corpus into train/val/test.
    Split(SplitArgs),
    /// Train a model; prints the per-epoch history.
    Train(TrainArgs),
    /// Score a checkpoint on the test set over repeated trials.
    Eval(EvalArgs),
    /// Compare analytic gradients with central differences.
    Gradcheck(GradcheckArgs),
    /// Train and score several variants over several seeds.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    persons: usize,
    #[arg(long)]
    sentences: usize,
    #[arg(long)]
    reps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// `2d` (one hand, scored pixels) or `3d` (two hands, xyz).
    #[arg(long, default_value = "2d")]
    mode: InputMode,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SplitArgs {
    /// `unseen` sentences or `seen` sentences.
    #[arg(long)]
    protocol: Protocol,
    /// Sentence counts (unseen) or repetition counts (seen) for train,val,test.
    #[arg(long)]
    spec: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// key = value training configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    split: PathBuf,
    /// Checkpoint of the best-validation weights.
    #[arg(long)]
    out: PathBuf,
    /// Resumable trainer state, rewritten after every epoch and picked up if present.
    #[arg(long)]
    state: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    split: PathBuf,
    #[arg(long, default_value_t = DEFAULT_TRIALS)]
    trials: usize,
    /// Occlude joints with the default weights before classifying.
    #[arg(long)]
    noise: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Check every coordinate of the one-hand network and add the two-hand network.
    #[arg(long)]
    full: bool,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Coordinates sampled per parameter tensor in the network checks.
    #[arg(long, default_value_t = 16)]
    per_tensor: usize,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    split: PathBuf,
    /// Comma-separated variants, e.g. `baseline,full`.
    #[arg(long, default_value = "baseline,+downsample,+downsample+TNL,+downsample+SNL,full")]
    variants: String,
    /// Comma-separated training seeds.
    #[arg(long, default_value = "1,2,3,4,5")]
    seeds: String,
    #[arg(long, default_value_t = DEFAULT_TRIALS)]
    trials: usize,
    /// Also report accuracy under occlusion noise.
    #[arg(long)]
    noise: bool,
}

fn load_config(path: Option<&PathBuf>) -> Result<TrainConfig> {
    let cfg = match path {
        Some(p) => TrainConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
        None => TrainConfig::default(),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn load_experiment(manifest: &PathBuf, split: &PathBuf) -> Result<(DatasetManifest, ExperimentSplit)> {
    let m = DatasetManifest::load(manifest).with_context(|| format!("reading {}", manifest.display()))?;
    let s = ExperimentSplit::load(split, &m).with_context(|| format!("reading {}", split.display()))?;
    Ok((m, s))
}

fn generate(a: GenerateArgs) -> Result<()> {
    let m = generate_corpus(&a.out, a.persons, a.sentences, a.reps, a.seed, a.mode, SynthConfig::default())?;
    println!("manifest,samples,mode,joints");
    println!("{},{},{},{}", a.out.join(MANIFEST_NAME).display(), m.len(), a.mode, m.records[0].joints);
    Ok(())
}

fn split(a: SplitArgs) -> Result<()> {
    let counts: Vec<usize> = parse_list(&a.spec)?;
    let Ok(counts) = <[usize; 3]>::try_from(counts) else {
        bail!("--spec needs exactly three counts");
    };
    let m = DatasetManifest::load(&a.manifest)?;
    let s = match a.protocol {
        Protocol::UnseenSentences => split_unseen(&m, counts, a.seed)?,
        Protocol::SeenSentences => split_seen(&m, counts, a.seed)?,
    };
    s.save(&a.out)?;
    println!("set,samples");
    for (name, set) in ["train", "val", "test"].iter().zip(s.sets()) {
        println!("{name},{}", set.len());
    }
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let cfg = load_config(a.config.as_ref())?;
    let (m, s) = load_experiment(&a.manifest, &a.split)?;
    let data = ExperimentData::load(&m, &s)?;
    let mut trainer = match &a.state {
        Some(p) if p.exists() => Trainer::load(p, cfg.clone()).with_context(|| format!("resuming from {}", p.display()))?,
        _ => {
            let net = StyleNet::new(cfg.model_config(hands_of(&data.train)?, data.num_classes), cfg.seed)?;
            Trainer::new(net, cfg.clone())?
        }
    };
    while trainer.epoch < cfg.epochs {
        let next = trainer.epoch + 1;
        trainer.run(&data.train, &data.val, next)?;
        if let Some(p) = &a.state {
            trainer.save(p)?;
        }
    }
    let outcome = trainer.finish();
    outcome.best.save(&a.out)?;
    print!("{}", history_csv(&outcome.history));
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let net = StyleNet::load(&a.ckpt).with_context(|| format!("reading {}", a.ckpt.display()))?;
    let (m, s) = load_experiment(&a.manifest, &a.split)?;
    let test = labeled_set(&m, &s.test)?;
    let hands = hands_of(&test)?;
    let mut opts = if a.noise { EvalOptions::noisy(a.trials, a.seed, hands) } else { EvalOptions::clean(a.trials, a.seed) };
    opts.batch_size = a.batch_size;
    print!("{}", evaluate(&net, &test, &opts)?.csv());
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> Result<bool> {
    const PRIMITIVE_TOL: f64 = 1e-6;
    const NETWORK_TOL: f64 = 1e-4;
    let mut ok = true;
    let mut row = |name: &str, err: f64, tol: f64, coords: usize| {
        let pass = err < tol;
        ok &= pass;
        println!("{name},{err:e},{tol:e},{coords},{}", if pass { "pass" } else { "FAIL" });
    };
    println!("check,max_rel_error,tolerance,coordinates,status");
    for c in primitive_suite(a.seed)? {
        row(c.name, c.max_rel_error, PRIMITIVE_TOL, c.coordinates);
    }
    let sampled = Some(a.per_tensor);
    let mut networks = vec![("network.tiny.v21", Hands::One, sampled)];
    if a.full {
        networks = vec![("network.tiny.v21.all", Hands::One, None), ("network.tiny.v42", Hands::Two, sampled)];
    }
    for (name, hands, per_tensor) in networks {
        let r = network_grad_check(&ModelConfig::tiny(hands, 3), 2, per_tensor, a.seed)?;
        row(name, r.max_rel_error, NETWORK_TOL, r.coordinates_checked);
    }
    Ok(ok)
}

fn ablate(a: AblateArgs) -> Result<()> {
    let cfg = load_config(a.config.as_ref())?;
    let variants: Vec<Variant> = parse_list(&a.variants)?;
    let seeds: Vec<u64> = parse_list(&a.seeds)?;
    let (m, s) = load_experiment(&a.manifest, &a.split)?;
    let data = ExperimentData::load(&m, &s)?;
    let table = run_ablation(&data, &cfg, &variants, &seeds, AblationEval { trials: a.trials, noise: a.noise })?;
    print!("{}", table.csv());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate(a) => generate(a),
        Command::Split(a) => split(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Gradcheck(a) => gradcheck(a).and_then(|ok| if ok { Ok(()) } else { bail!("gradient check exceeded tolerance") }),
        Command::Ablate(a) => ablate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
