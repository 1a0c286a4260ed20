//! Command-line front end for the voice conversion pipeline: corpus
//! synthesis, scene degradation, feature extraction, training, zero-shot
//! conversion, score evaluation, and gradient checking.
//!
//! Every command is deterministic given its flags and seed, and writes the
//! fully resolved configuration (plus tool version) next to its outputs as
//! `run.resolved.toml`. Exit codes: 0 success, 1 computational failure,
//! 2 usage error.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use voicy_core::config::{load_run_config, RunConfig};
use voicy_core::corpus::{derive_seed, load_inventory, make_toy_corpus, ToyCorpusSpec};
use voicy_core::dsp::{
    mel_spectrogram, read_wav, write_mel, write_wav, MelSpectrogram, WavFormat,
};
use voicy_core::eval::{
    mushra_summary, mushra_tsv, pairwise_tsv, read_scores, snr_bucket_report, snr_bucket_tsv,
    wilcoxon_pairwise, SnrTag, WilcoxonMode,
};
use voicy_core::grad::{layer_battery, CheckReport, OptimizerState};
use voicy_core::model::{
    convert, load_model, load_train_data, loss_gradient_check, sample_batch, save_model,
    train_step, ModelState, UtterancePair,
};
use voicy_core::scene::build_dataset;

#[derive(Parser)]
#[command(name = "voicy", version, about = "Noise-robust zero-shot voice conversion pipeline")]
struct Cli {
    /// Global seed; overrides the config file and $VOICY_SEED.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads for data-parallel stages; 1 forces fully serial
    /// execution, 0 uses every core.
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// TOML run configuration; flags override file values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic toy corpus (audio, alignments, manifest).
    ToyCorpus(ToyCorpusArgs),
    /// Expand a clean manifest into Clean/Reverb/NoisyReverb conditions.
    BuildDataset(BuildDatasetArgs),
    /// Extract log-mel features from a WAV into a .mel file.
    Features(FeaturesArgs),
    /// Train the conversion model on a dataset manifest.
    Train(TrainArgs),
    /// Convert source utterances to target speakers. Zero-shot: no
    /// transcript input exists.
    Convert(ConvertArgs),
    /// Summarize listening scores: MUSHRA table, pairwise Wilcoxon matrix,
    /// SNR buckets.
    Eval(EvalArgs),
    /// Compare analytic gradients against finite differences, layer by
    /// layer and through the composed training objective.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Serialize)]
struct ToyCorpusArgs {
    /// Number of synthetic speakers.
    #[arg(long)]
    speakers: Option<usize>,
    /// Utterances per speaker.
    #[arg(long)]
    utts: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct BuildDatasetArgs {
    /// Clean input manifest (manifest.jsonl).
    #[arg(long)]
    manifest: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    t60_min: Option<f64>,
    #[arg(long)]
    t60_max: Option<f64>,
    #[arg(long)]
    snr_mean: Option<f64>,
    #[arg(long)]
    snr_sd: Option<f64>,
    #[arg(long)]
    snr_min: Option<f64>,
    #[arg(long)]
    snr_max: Option<f64>,
}

#[derive(Args, Serialize)]
struct FeaturesArgs {
    /// Input WAV.
    #[arg(long)]
    wav: PathBuf,
    /// Output directory; the mel file is named after the WAV stem.
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args, Serialize)]
struct TrainArgs {
    /// Dataset manifest (manifest.jsonl with Clean/Reverb/NoisyReverb rows).
    #[arg(long)]
    manifest: PathBuf,
    /// Run directory for checkpoint, loss log, and resolved config.
    #[arg(long)]
    run_dir: PathBuf,
    /// Phoneme inventory; defaults to inventory.txt next to the manifest.
    #[arg(long)]
    inventory: Option<PathBuf>,
    /// Resume from an existing checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Total steps to reach (including any resumed progress).
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    batch: Option<usize>,
    /// Distillation loss weight.
    #[arg(long)]
    beta: Option<f64>,
    /// Content consistency loss weight.
    #[arg(long)]
    lambda: Option<f64>,
    /// Adam learning rate.
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    checkpoint_every: Option<u64>,
}

#[derive(Args, Serialize)]
struct ConvertArgs {
    /// Model checkpoint.
    #[arg(long)]
    model: PathBuf,
    /// Source WAV(s); repeat the flag for batch conversion.
    #[arg(long, required = true)]
    source: Vec<PathBuf>,
    /// Target speaker reference WAV(s); every source is converted to every
    /// reference.
    #[arg(long = "target-ref", required = true)]
    target_ref: Vec<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out_dir: PathBuf,
    /// Additionally reconstruct a waveform (Griffin-Lim) next to each mel.
    #[arg(long)]
    vocode: bool,
}

#[derive(Args, Serialize)]
struct EvalArgs {
    /// Score records, one JSON object per line.
    #[arg(long)]
    scores: PathBuf,
    /// Optional per-utterance SNR map (JSON lines: {"utterance", "snr_db"});
    /// entries override the tags inside the score records.
    #[arg(long)]
    snr_map: Option<PathBuf>,
    /// Output directory for the report tables.
    #[arg(long)]
    out_dir: PathBuf,
    /// Comma-separated SNR bucket edges in dB; overrides the config.
    #[arg(long)]
    snr_edges: Option<String>,
}

#[derive(Args, Serialize)]
struct GradcheckArgs {
    /// Central-difference step.
    #[arg(long, default_value_t = 1e-5)]
    eps: f64,
    /// Width of each checked layer.
    #[arg(long, default_value_t = 32)]
    units: usize,
    /// Time rows of each checked layer.
    #[arg(long, default_value_t = 12)]
    steps: usize,
    /// Failure threshold on the relative error.
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    /// Optional directory for the report table.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

/// Flags > config file > $VOICY_SEED > 0.
fn resolve_seed(flag: Option<u64>, config: &RunConfig) -> Result<u64> {
    if let Some(s) = flag {
        return Ok(s);
    }
    if let Some(s) = config.seed {
        return Ok(s);
    }
    match std::env::var("VOICY_SEED") {
        Ok(text) => text
            .parse()
            .with_context(|| format!("VOICY_SEED {text:?} is not an unsigned integer")),
        Err(_) => Ok(0),
    }
}

#[derive(Serialize)]
struct RunMeta<'a> {
    version: &'a str,
    command: &'a str,
    seed: u64,
    threads: usize,
}

#[derive(Serialize)]
struct ResolvedRun<'a, F: Serialize> {
    run: RunMeta<'a>,
    flags: &'a F,
    config: &'a RunConfig,
}

/// Persists the resolved settings of this run: tool version, command, the
/// command's flags, and the full configuration after overrides.
fn write_resolved<F: Serialize>(
    dir: &Path,
    command: &str,
    seed: u64,
    threads: usize,
    flags: &F,
    config: &RunConfig,
) -> Result<()> {
    let resolved = ResolvedRun {
        run: RunMeta {
            version: env!("CARGO_PKG_VERSION"),
            command,
            seed,
            threads,
        },
        flags,
        config,
    };
    let text = toml::to_string_pretty(&resolved).context("serialize resolved config")?;
    fs::create_dir_all(dir).with_context(|| format!("create {}", dir.display()))?;
    let path = dir.join("run.resolved.toml");
    fs::write(&path, text).with_context(|| format!("write {}", path.display()))?;
    Ok(())
}

fn run(cli: Cli) -> Result<ExitCode> {
    let mut config = match &cli.config {
        Some(path) => load_run_config(path)?,
        None => RunConfig::default(),
    };
    let seed = resolve_seed(cli.seed, &config)?;
    config.seed = Some(seed);
    let threads = cli.threads.or(config.threads).unwrap_or(0);
    config.threads = Some(threads);
    if threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .context("configure thread pool")?;
    }

    match &cli.cmd {
        Cmd::ToyCorpus(args) => cmd_toy_corpus(args, &config, seed, threads),
        Cmd::BuildDataset(args) => cmd_build_dataset(args, &mut config, seed, threads),
        Cmd::Features(args) => cmd_features(args, &config, seed, threads),
        Cmd::Train(args) => cmd_train(args, &mut config, seed, threads),
        Cmd::Convert(args) => cmd_convert(args, &config, seed, threads),
        Cmd::Eval(args) => cmd_eval(args, &mut config, seed, threads),
        Cmd::Gradcheck(args) => cmd_gradcheck(args, &config, seed, threads),
    }
}

fn cmd_toy_corpus(
    args: &ToyCorpusArgs,
    config: &RunConfig,
    seed: u64,
    threads: usize,
) -> Result<ExitCode> {
    let spec = ToyCorpusSpec {
        n_speakers: args.speakers.unwrap_or(4),
        utterances_per_speaker: args.utts.unwrap_or(20),
        sample_rate_hz: config.features.sample_rate_hz,
        seed,
        ..ToyCorpusSpec::default()
    };
    let manifest = make_toy_corpus(&spec, &args.out)?;
    write_resolved(&args.out, "toy-corpus", seed, threads, args, config)?;
    println!(
        "toy corpus: {} records in {}",
        manifest.records.len(),
        args.out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_build_dataset(
    args: &BuildDatasetArgs,
    config: &mut RunConfig,
    seed: u64,
    threads: usize,
) -> Result<ExitCode> {
    let s = &mut config.sampler;
    if let Some(v) = args.t60_min {
        s.t60_range_s.0 = v;
    }
    if let Some(v) = args.t60_max {
        s.t60_range_s.1 = v;
    }
    if let Some(v) = args.snr_mean {
        s.snr_mean_db = v;
    }
    if let Some(v) = args.snr_sd {
        s.snr_sd_db = v;
    }
    if let Some(v) = args.snr_min {
        s.snr_min_db = v;
    }
    if let Some(v) = args.snr_max {
        s.snr_max_db = v;
    }
    let manifest = build_dataset(&args.manifest, &args.out, &config.sampler, seed)?;
    // Keep the output self-contained: training needs the inventory beside
    // the manifest.
    let inventory_src = args
        .manifest
        .parent()
        .unwrap_or(Path::new("."))
        .join("inventory.txt");
    if inventory_src.exists() {
        fs::copy(&inventory_src, args.out.join("inventory.txt"))
            .with_context(|| format!("copy {}", inventory_src.display()))?;
    }
    write_resolved(&args.out, "build-dataset", seed, threads, args, config)?;
    let failures = manifest.records.iter().filter(|r| r.error.is_some()).count();
    println!(
        "dataset: {} records ({failures} failed) in {}",
        manifest.records.len(),
        args.out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_features(
    args: &FeaturesArgs,
    config: &RunConfig,
    seed: u64,
    threads: usize,
) -> Result<ExitCode> {
    let wave = read_wav(&args.wav)?;
    if wave.sample_rate_hz != config.features.sample_rate_hz {
        bail!(
            "{} is {} Hz, configured features expect {} Hz",
            args.wav.display(),
            wave.sample_rate_hz,
            config.features.sample_rate_hz
        );
    }
    let mel = mel_spectrogram(&wave, &config.features.stft, &config.features.mel)?;
    fs::create_dir_all(&args.out_dir)
        .with_context(|| format!("create {}", args.out_dir.display()))?;
    let out = args.out_dir.join(format!("{}.mel", stem(&args.wav)));
    write_mel(&out, &mel)?;
    write_resolved(&args.out_dir, "features", seed, threads, args, config)?;
    println!(
        "features: {} frames x {} mels -> {}",
        mel.n_frames,
        mel.n_mels,
        out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_train(
    args: &TrainArgs,
    config: &mut RunConfig,
    seed: u64,
    threads: usize,
) -> Result<ExitCode> {
    if let Some(v) = args.steps {
        config.train.steps = v;
    }
    if let Some(v) = args.batch {
        config.train.batch_size = v;
    }
    if let Some(v) = args.checkpoint_every {
        config.train.checkpoint_every = v;
    }
    if let Some(v) = args.beta {
        config.model.beta = v;
    }
    if let Some(v) = args.lambda {
        config.model.lambda = v;
    }
    if let Some(v) = args.lr {
        config.optimizer.learning_rate = v;
    }

    let inventory_path = args
        .inventory
        .clone()
        .unwrap_or_else(|| sibling(&args.manifest, "inventory.txt"));
    let inventory = load_inventory(&inventory_path)?;
    let data = load_train_data(&args.manifest, &config.features, &inventory)?;

    let ckpt_path = args.run_dir.join("model.vckp");
    let (mut state, mut optimizer) = match &args.resume {
        Some(path) => {
            let (state, opt) =
                load_model(path).with_context(|| format!("load {}", path.display()))?;
            let opt = opt.with_context(|| {
                format!("{} has no optimizer state, cannot resume", path.display())
            })?;
            (state, opt)
        }
        None => {
            config.model.features = config.features;
            config.model.seed = derive_seed(seed, "init");
            config.model.inventory_id = inventory.id.clone();
            config.model.inventory = inventory.symbols.clone();
            config.model.mel_mean = data.stats.mean.clone();
            config.model.mel_std = data.stats.std.clone();
            let state = ModelState::new(config.model.clone())?;
            (state, OptimizerState::new(config.optimizer))
        }
    };
    // The resolved dump records the model actually trained, resumed or not.
    config.model = state.config.clone();
    config.optimizer = optimizer.config;

    fs::create_dir_all(&args.run_dir)
        .with_context(|| format!("create {}", args.run_dir.display()))?;
    write_resolved(&args.run_dir, "train", seed, threads, args, config)?;

    let log_path = args.run_dir.join("train_log.tsv");
    let mut log = if state.trained_steps > 0 && log_path.exists() {
        fs::OpenOptions::new()
            .append(true)
            .open(&log_path)
            .with_context(|| format!("append {}", log_path.display()))?
    } else {
        let mut f =
            fs::File::create(&log_path).with_context(|| format!("create {}", log_path.display()))?;
        writeln!(f, "step\tL\tL_recon\tL_phonetic\tL_content")?;
        f
    };

    let train_seed = derive_seed(seed, "train");
    let target = config.train.steps;
    let start = state.trained_steps;
    if start >= target {
        println!("nothing to do: checkpoint already at step {start} of {target}");
        save_model(&ckpt_path, &state, Some(&optimizer))?;
        return Ok(ExitCode::SUCCESS);
    }
    for step in start + 1..=target {
        let batch = sample_batch(
            &data,
            &state,
            train_seed,
            step,
            config.train.batch_size,
            config.train.crop_frames,
        )?;
        let report = train_step(&mut state, &mut optimizer, &batch)?;
        writeln!(
            log,
            "{step}\t{:.10}\t{:.10}\t{:.10}\t{:.10}",
            report.total, report.recon, report.phonetic, report.content
        )?;
        let cadence = config.train.checkpoint_every;
        if (cadence > 0 && step % cadence == 0) || step == target {
            log.flush()?;
            save_model(&ckpt_path, &state, Some(&optimizer))?;
        }
        if step % 100 == 0 || step == target {
            println!("step {step}/{target} L {:.6}", report.total);
        }
    }
    println!("checkpoint: {}", ckpt_path.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_convert(
    args: &ConvertArgs,
    config: &RunConfig,
    seed: u64,
    threads: usize,
) -> Result<ExitCode> {
    let (state, _) =
        load_model(&args.model).with_context(|| format!("load {}", args.model.display()))?;
    fs::create_dir_all(&args.out_dir)
        .with_context(|| format!("create {}", args.out_dir.display()))?;
    for source_path in &args.source {
        let source = read_wav(source_path)?;
        for ref_path in &args.target_ref {
            let reference = read_wav(ref_path)?;
            let conversion = convert(&state, &source, &reference, args.vocode)?;
            let name = format!("{}__to__{}", stem(source_path), stem(ref_path));
            let mel_path = args.out_dir.join(format!("{name}.mel"));
            write_mel(&mel_path, &conversion.mel)?;
            if let Some(audio) = &conversion.audio {
                write_wav(
                    &args.out_dir.join(format!("{name}.wav")),
                    audio,
                    WavFormat::Pcm16,
                )?;
            }
            println!("converted: {}", mel_path.display());
        }
    }
    write_resolved(&args.out_dir, "convert", seed, threads, args, config)?;
    Ok(ExitCode::SUCCESS)
}

#[derive(Deserialize)]
struct SnrMapRow {
    utterance: String,
    snr_db: SnrTag,
}

fn cmd_eval(
    args: &EvalArgs,
    config: &mut RunConfig,
    seed: u64,
    threads: usize,
) -> Result<ExitCode> {
    if let Some(text) = &args.snr_edges {
        let edges: std::result::Result<Vec<f64>, _> =
            text.split(',').map(|p| p.trim().parse::<f64>()).collect();
        config.eval.snr_edges = edges.with_context(|| format!("bad --snr-edges {text:?}"))?;
    }
    let records = read_scores(&args.scores)?;
    let mut snr_map = BTreeMap::new();
    if let Some(path) = &args.snr_map {
        let text =
            fs::read_to_string(path).with_context(|| format!("read {}", path.display()))?;
        for (i, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let row: SnrMapRow = serde_json::from_str(line)
                .with_context(|| format!("{}:{}", path.display(), i + 1))?;
            snr_map.insert(row.utterance, row.snr_db);
        }
    }

    fs::create_dir_all(&args.out_dir)
        .with_context(|| format!("create {}", args.out_dir.display()))?;
    let summary = mushra_tsv(&mushra_summary(&records));
    fs::write(args.out_dir.join("mushra_summary.tsv"), &summary)?;
    let pairs = pairwise_tsv(&wilcoxon_pairwise(&records, WilcoxonMode::Auto)?);
    fs::write(args.out_dir.join("wilcoxon_pairs.tsv"), &pairs)?;
    let buckets = snr_bucket_tsv(&snr_bucket_report(
        &records,
        &snr_map,
        &config.eval.snr_edges,
    )?);
    fs::write(args.out_dir.join("snr_buckets.tsv"), &buckets)?;
    write_resolved(&args.out_dir, "eval", seed, threads, args, config)?;
    println!(
        "reports: {} records -> {}",
        records.len(),
        args.out_dir.display()
    );
    Ok(ExitCode::SUCCESS)
}

/// A small synthetic model and pair for checking the composed objective;
/// dimensions stay tiny so the full sweep runs in seconds.
fn gradcheck_loss_case(seed: u64) -> Result<(ModelState, UtterancePair)> {
    use voicy_core::config::FeatureConfig;
    use voicy_core::model::ModelConfig;

    let mut features = FeatureConfig::default();
    features.mel.n_mels = 6;
    let cfg = ModelConfig {
        d_s: 4,
        d_c: 3,
        d_p: 4,
        ds_factor: 4,
        enc_hidden: 4,
        dec_hidden: 5,
        emb_dim: 3,
        seed: derive_seed(seed, "gradcheck-model"),
        inventory_id: "gradcheck".into(),
        inventory: ["sil", "aa", "bb", "cc"].iter().map(|s| s.to_string()).collect(),
        features,
        ..ModelConfig::default()
    };
    let state = ModelState::new(cfg)?;
    let mut rng = ChaCha20Rng::seed_from_u64(derive_seed(seed, "gradcheck-pair"));
    let mel = |rng: &mut ChaCha20Rng, frames: usize| MelSpectrogram {
        values: (0..frames * 6).map(|_| rng.gen_range(-2.0..2.0)).collect(),
        n_frames: frames,
        n_mels: 6,
        hop_size: state.config.features.stft.hop_size,
        sample_rate_hz: state.config.features.sample_rate_hz,
    };
    let pair = UtterancePair {
        id: "gradcheck".into(),
        source_mel: mel(&mut rng, 32),
        clean_target_mel: mel(&mut rng, 32),
        speaker_ref_mel: mel(&mut rng, 24),
        phonemes: vec![1, 3, 2],
    };
    Ok((state, pair))
}

fn cmd_gradcheck(
    args: &GradcheckArgs,
    config: &RunConfig,
    seed: u64,
    threads: usize,
) -> Result<ExitCode> {
    let mut rows: Vec<(String, CheckReport)> = Vec::new();
    for case in layer_battery(args.units, args.steps, seed) {
        let report = case.run(args.eps)?;
        rows.push((case.name.to_string(), report));
    }
    let (state, pair) = gradcheck_loss_case(seed)?;
    rows.push(("composed_loss".into(), loss_gradient_check(&state, &pair, args.eps)?));

    let mut table = String::from("case\tworst_rel_err\tworst_path\n");
    let mut failed: Option<&(String, CheckReport)> = None;
    for row in &rows {
        let (name, report) = row;
        let loc = if report.path.is_empty() {
            "-".to_string()
        } else {
            format!("{}[{}]", report.path, report.coord)
        };
        table.push_str(&format!("{name}\t{:.3e}\t{loc}\n", report.worst));
        if report.worst >= args.tolerance && failed.is_none() {
            failed = Some(row);
        }
    }
    print!("{table}");
    if let Some(dir) = &args.out_dir {
        fs::create_dir_all(dir).with_context(|| format!("create {}", dir.display()))?;
        fs::write(dir.join("gradcheck.tsv"), &table)?;
        write_resolved(dir, "gradcheck", seed, threads, args, config)?;
    }
    match failed {
        Some((name, report)) => {
            eprintln!(
                "gradient check failed: {name} at {}[{}], relative error {:.3e} >= {:.1e}",
                report.path, report.coord, report.worst, args.tolerance
            );
            Ok(ExitCode::from(1))
        }
        None => {
            println!("all gradients within {:.1e}", args.tolerance);
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "out".into())
}

fn sibling(path: &Path, name: &str) -> PathBuf {
    path.parent().unwrap_or(Path::new(".")).join(name)
}
