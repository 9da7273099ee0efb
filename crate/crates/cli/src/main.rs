//! Command-line front end for the pre-training pipeline.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use twinspeech::audio::{load_corpus, load_noise_bank, load_wav, mix_at_snr, save_wav, NoiseBank, Waveform};
use twinspeech::config::RunConfig;
use twinspeech::correlation::write_report;
use twinspeech::evaluation::{
    embed_noisy_corpus, export_embeddings, NoiseAssignment, PooledEmbedding, ProbeReport,
};
use twinspeech::features::{mfcc, write_features, FrameFeatures};
use twinspeech::model::TapPoint;
use twinspeech::synth::{toy_corpus, toy_noise_bank, write_dataset};
use twinspeech::training::{
    check_model_gradient, load_checkpoint, prepare_examples, pretrain, resume, TrainState,
};
use twinspeech::units::{fit_kmeans_traced, pool_frames, read_codebook, write_codebook, Codebook, CodebookSource};
use twinspeech::{Error, Result};

const TOY_UTTERANCES: usize = 200;
const TOY_MIN_FRAMES: usize = 80;
const TOY_MAX_FRAMES: usize = 120;

#[derive(Debug, Parser)]
#[command(name = "twinspeech", version, about = "Noise-robust masked-unit speech pre-training")]
struct Cli {
    /// Seed for every random stream (overrides the config).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run configuration file (key = value lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Directory receiving all outputs.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Config override, e.g. `--set lr=1e-4`; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Mix one utterance with one noise at a target SNR.
    Mix {
        #[arg(long)]
        speech: PathBuf,
        #[arg(long)]
        noise: PathBuf,
        #[arg(long, allow_negative_numbers = true)]
        snr: f64,
    },
    /// Cache frame features and fit a k-means codebook on them.
    Units {
        #[arg(long)]
        corpus: PathBuf,
        /// Number of codes (default: `num_codes` from the config).
        #[arg(long)]
        k: Option<usize>,
        /// `mfcc` or `layer:N`.
        #[arg(long, default_value = "mfcc")]
        source: String,
        /// Model to read `layer:N` features from.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Pre-train a model. Without data flags a synthetic toy set is generated.
    Pretrain {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        noise: Option<PathBuf>,
        #[arg(long)]
        codebook: Option<PathBuf>,
        /// Continue from this checkpoint instead of starting fresh.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Total step count to train up to.
        #[arg(long)]
        steps: Option<u64>,
    },
    /// Noise-type k-NN probe on pooled embeddings of noisy mixtures.
    Eval {
        #[command(flatten)]
        embed: EmbedArgs,
        #[arg(long, default_value_t = 5)]
        k: usize,
    },
    /// Finite-difference check of the full training gradient.
    GradCheck {
        #[arg(long, default_value_t = 32)]
        trials: usize,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
        /// Check this model instead of a freshly initialized one.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Write pooled embeddings of noisy mixtures as CSV.
    ExportEmbeddings {
        #[command(flatten)]
        embed: EmbedArgs,
    },
}

#[derive(Debug, Args)]
struct EmbedArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    noise: PathBuf,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    snr: f64,
    #[arg(long, value_enum, default_value_t = Assignment::RoundRobin)]
    assignment: Assignment,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Assignment {
    All,
    RoundRobin,
}

impl From<Assignment> for NoiseAssignment {
    fn from(a: Assignment) -> Self {
        match a {
            Assignment::All => NoiseAssignment::All,
            Assignment::RoundRobin => NoiseAssignment::RoundRobin,
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    apply_overrides(cli, &mut cfg)?;
    Ok(cfg)
}

fn apply_overrides(cli: &Cli, cfg: &mut RunConfig) -> Result<()> {
    for kv in &cli.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override '{kv}' is not KEY=VALUE")))?;
        cfg.set(k.trim(), v.trim()).map_err(Error::Config)?;
    }
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
    }
    cfg.validate()
}

fn create_out(out: &Path) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    fs::write(path, format!("{value}\n")).map_err(|e| Error::io(path, e))
}

fn parse_source(s: &str) -> Result<CodebookSource> {
    if s == "mfcc" {
        return Ok(CodebookSource::Mfcc);
    }
    s.strip_prefix("layer:")
        .and_then(|l| l.parse().ok())
        .filter(|&l: &usize| l > 0)
        .map(CodebookSource::EncoderLayer)
        .ok_or_else(|| Error::Config(format!("unknown unit source '{s}'")))
}

fn cmd_mix(cli: &Cli, speech: &Path, noise: &Path, snr: f64) -> Result<()> {
    let s = load_wav(speech)?;
    let n = load_wav(noise)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cli.seed.unwrap_or(0));
    let mix = mix_at_snr(&s, &n, snr, &mut rng)?;
    create_out(&cli.out)?;
    save_wav(cli.out.join("mix.wav"), &mix.waveform)?;
    write_json(
        &cli.out.join("mix.json"),
        &json!({
            "requested_snr_db": mix.requested_snr_db,
            "measured_snr_db": mix.measured_snr_db(),
            "gain": mix.gain,
            "samples": mix.waveform.len(),
        }),
    )
}

/// Fits a codebook on `features` with the config's k-means settings and
/// writes it with a JSON summary.
fn fit_and_write(
    cfg: &RunConfig,
    features: &[FrameFeatures],
    k: usize,
    source: CodebookSource,
    out: &Path,
) -> Result<Codebook> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let pooled = pool_frames(features)?;
    let fit = fit_kmeans_traced(
        pooled.view(),
        k,
        &mut rng,
        cfg.train.kmeans_max_iters,
        cfg.train.kmeans_tol,
    )?;
    let codebook = Codebook::new(fit.centroids, source)?;
    write_codebook(out.join("codebook.dhcb"), &codebook)?;
    let source = match source {
        CodebookSource::Mfcc => "mfcc".to_string(),
        CodebookSource::EncoderLayer(l) => format!("layer:{l}"),
    };
    write_json(
        &out.join("units.json"),
        &json!({
            "k": k,
            "source": source,
            "frames": pooled.nrows(),
            "iterations": fit.iterations,
            "inertia": fit.inertia.last(),
        }),
    )?;
    Ok(codebook)
}

fn cmd_units(
    cli: &Cli,
    corpus: &Path,
    k: Option<usize>,
    source: &str,
    checkpoint: Option<&Path>,
) -> Result<()> {
    let source = parse_source(source)?;
    let corpus = load_corpus(corpus)?;
    create_out(&cli.out)?;
    let (cfg, features) = match source {
        CodebookSource::Mfcc => {
            let cfg = load_config(cli)?;
            let feats = corpus
                .iter()
                .map(|(_, w)| mfcc(w, &cfg.features()))
                .collect::<Result<Vec<_>>>()?;
            let dir = cli.out.join("features");
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            for ((id, _), f) in corpus.iter().zip(&feats) {
                write_features(dir.join(format!("{id}.dhft")), f)?;
            }
            (cfg, feats)
        }
        CodebookSource::EncoderLayer(l) => {
            let path = checkpoint
                .ok_or_else(|| Error::Config("--source layer:N needs --checkpoint".into()))?;
            let mut state = load_checkpoint(path)?;
            apply_overrides(cli, &mut state.config)?;
            let feats = corpus
                .iter()
                .map(|(_, w)| state.model.tap(w, TapPoint::Layer(l)))
                .collect::<Result<Vec<_>>>()?;
            (state.config, feats)
        }
    };
    let k = k.unwrap_or(cfg.model.num_codes);
    fit_and_write(&cfg, &features, k, source, &cli.out)?;
    Ok(())
}

/// The toy corpus and noise bank, written under `out/data`.
fn toy_data(seed: u64, out: &Path) -> Result<(Vec<(String, Waveform)>, NoiseBank)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let corpus = toy_corpus(TOY_UTTERANCES, TOY_MIN_FRAMES, TOY_MAX_FRAMES, &mut rng)?;
    let bank = toy_noise_bank(&mut rng)?;
    write_dataset(out.join("data"), &corpus, &bank)?;
    Ok((corpus, bank))
}

fn cmd_pretrain(
    cli: &Cli,
    corpus: Option<&Path>,
    noise: Option<&Path>,
    codebook: Option<&Path>,
    resume_from: Option<&Path>,
    steps: Option<u64>,
) -> Result<()> {
    let cfg = match resume_from {
        Some(p) => load_checkpoint(p)?.config,
        None => load_config(cli)?,
    };
    create_out(&cli.out)?;
    let (corpus, bank) = match (corpus, noise) {
        (Some(c), Some(n)) => (load_corpus(c)?, load_noise_bank(n)?),
        (None, None) => toy_data(cfg.train.seed, &cli.out)?,
        (Some(c), None) => {
            let (_, bank) = toy_data(cfg.train.seed, &cli.out)?;
            (load_corpus(c)?, bank)
        }
        (None, Some(n)) => (toy_data(cfg.train.seed, &cli.out)?.0, load_noise_bank(n)?),
    };
    let codebook = match codebook {
        Some(p) => read_codebook(p)?,
        None => {
            let feats = corpus
                .iter()
                .map(|(_, w)| mfcc(w, &cfg.features()))
                .collect::<Result<Vec<_>>>()?;
            fit_and_write(&cfg, &feats, cfg.model.num_codes, CodebookSource::Mfcc, &cli.out)?
        }
    };
    let last = match resume_from {
        Some(p) => resume(p, &corpus, &bank, &codebook, &cli.out, steps)?,
        None => {
            let mut cfg = cfg;
            if let Some(s) = steps {
                cfg.train.steps = s;
            }
            pretrain(&cfg, &corpus, &bank, &codebook, &cli.out)?
        }
    };
    println!("{}", last.display());
    Ok(())
}

fn embeddings(cli: &Cli, args: &EmbedArgs) -> Result<Vec<PooledEmbedding>> {
    let state = load_checkpoint(&args.checkpoint)?;
    let corpus = load_corpus(&args.corpus)?;
    let bank = load_noise_bank(&args.noise)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cli.seed.unwrap_or(state.config.train.seed));
    embed_noisy_corpus(&state.model, &corpus, &bank, args.snr, args.assignment.into(), &mut rng)
}

fn cmd_eval(cli: &Cli, args: &EmbedArgs, k: usize) -> Result<()> {
    let embs = embeddings(cli, args)?;
    let report = ProbeReport::evaluate(&embs, k)?;
    create_out(&cli.out)?;
    let text = report.to_json();
    fs::write(cli.out.join("probe.json"), format!("{text}\n")).map_err(|e| Error::io(&cli.out, e))?;
    println!("{text}");
    Ok(())
}

fn cmd_export(cli: &Cli, args: &EmbedArgs) -> Result<()> {
    let embs = embeddings(cli, args)?;
    create_out(&cli.out)?;
    export_embeddings(&embs, cli.out.join("embeddings.csv"))
}

/// Returns whether every probe passed.
fn cmd_grad_check(
    cli: &Cli,
    trials: usize,
    tol: f64,
    step: f64,
    checkpoint: Option<&Path>,
) -> Result<bool> {
    let state = match checkpoint {
        Some(p) => {
            let mut s = load_checkpoint(p)?;
            apply_overrides(cli, &mut s.config)?;
            s
        }
        None => {
            let mut cfg = match &cli.config {
                Some(p) => RunConfig::load(p)?,
                None => RunConfig::tiny(),
            };
            apply_overrides(cli, &mut cfg)?;
            TrainState::new(cfg)?
        }
    };
    let cfg = &state.config;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let corpus = toy_corpus(2, 20, 30, &mut rng)?;
    let bank = toy_noise_bank(&mut rng)?;
    let feats = corpus
        .iter()
        .map(|(_, w)| mfcc(w, &cfg.features()))
        .collect::<Result<Vec<_>>>()?;
    let fit = fit_kmeans_traced(pool_frames(&feats)?.view(), cfg.model.num_codes, &mut rng, 20, 1e-6)?;
    let codebook = Codebook::new(fit.centroids, CodebookSource::Mfcc)?;
    let examples = prepare_examples(&corpus, &codebook, &cfg.features(), None)?;
    let batch: Vec<_> = examples.iter().collect();
    let report = check_model_gradient(&state, &batch, &bank, trials, step, &mut rng)?;
    create_out(&cli.out)?;
    write_report(cli.out.join("gradcheck.jsonl"), &report)?;
    let passed = report.all_below(tol);
    println!(
        "{} probes, max rel_err {:.3e}, tol {tol:e}: {}",
        report.records.len(),
        report.max_rel_err(),
        if passed { "ok" } else { "FAILED" }
    );
    Ok(passed)
}

fn run(cli: &Cli) -> Result<bool> {
    match &cli.command {
        Command::Mix { speech, noise, snr } => cmd_mix(cli, speech, noise, *snr).map(|_| true),
        Command::Units {
            corpus,
            k,
            source,
            checkpoint,
        } => cmd_units(cli, corpus, *k, source, checkpoint.as_deref()).map(|_| true),
        Command::Pretrain {
            corpus,
            noise,
            codebook,
            resume,
            steps,
        } => cmd_pretrain(
            cli,
            corpus.as_deref(),
            noise.as_deref(),
            codebook.as_deref(),
            resume.as_deref(),
            *steps,
        )
        .map(|_| true),
        Command::Eval { embed, k } => cmd_eval(cli, embed, *k).map(|_| true),
        Command::GradCheck {
            trials,
            tol,
            step,
            checkpoint,
        } => cmd_grad_check(cli, *trials, *tol, *step, checkpoint.as_deref()),
        Command::ExportEmbeddings { embed } => cmd_export(cli, embed).map(|_| true),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let mut probe = RunConfig::default();
    for kv in &cli.overrides {
        let checked = kv
            .split_once('=')
            .ok_or_else(|| format!("override '{kv}' is not KEY=VALUE"))
            .and_then(|(k, v)| probe.set(k.trim(), v.trim()));
        if let Err(msg) = checked {
            eprintln!("error: {msg}\n\n{}", Cli::command().render_usage());
            return ExitCode::from(1);
        }
    }
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
