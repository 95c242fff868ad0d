use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::{info, warn};

use veil::metrics::{AsrClient, CommandPlugin, QualityBackend, REPORT_SCHEMA};
use veil::pipeline::{
    evaluate_condition, process_manifest, purify_manifest, run_desk, AudioSet, DeskConfig, Plugins,
};
use veil::purify::{DEFAULT_KERNEL, DEFAULT_QUANT_FACTOR, DEFAULT_SNR_DB};
use veil::speaker::{
    build_trials, train_toy_extractor, write_scores, ExtractorTrainingConfig, ToyExtractor,
};
use veil::synth::{write_corpus, ToyCorpusConfig};
use veil::trainer::{gradcheck, Trainer};
use veil::{
    compute_snr, load_wav, resample, save_wav, Checkpoint, EvaluationReport, Manifest,
    PurifyConfig, PurifyMethod, TrainingConfig, TrialList, Waveform,
};

/// Reversible speaker-adversarial protection for speech audio.
#[derive(Parser)]
#[command(name = "veil", version)]
struct Cli {
    /// Worker threads for per-utterance work (0 = one per core).
    #[arg(long, global = true, default_value_t = 0)]
    jobs: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Jointly train the perturbation generator and removal network.
    Train(TrainArgs),
    /// Add speaker-adversarial perturbations.
    Protect(ProtectArgs),
    /// Remove perturbations added by `protect` with the same checkpoint.
    Restore(RestoreArgs),
    /// Apply a perturbation-unaware purification baseline.
    Purify(PurifyArgs),
    /// Score one or more conditions and write an evaluation report.
    Evaluate(EvaluateArgs),
    /// Check analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
    /// Write the synthetic toy corpus.
    Synth(SynthArgs),
    /// Run the complete toy experiment end to end.
    Desk(DeskArgs),
    /// Print the JSON schema of evaluation reports.
    Schema,
}

/// One WAV file or a JSONL manifest.
#[derive(Args)]
#[group(required = true, multiple = false)]
struct Input {
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    wav: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// TOML training config; built-in defaults otherwise.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Checkpoint to write. The loss curve goes next to it as `<stem>.loss.csv`.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Trained toy extractor; overrides the config. Without one, an extractor
    /// is trained on the manifest first and saved as `<stem>.extractor.bin`.
    #[arg(long)]
    extractor: Option<PathBuf>,
    /// Continue from this checkpoint up to `--epochs`.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct ProtectArgs {
    #[command(flatten)]
    input: Input,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Must match the checkpoint's ε; only checked, never applied.
    #[arg(long)]
    epsilon: Option<f64>,
}

#[derive(Args)]
struct RestoreArgs {
    #[command(flatten)]
    input: Input,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    epsilon: Option<f64>,
    /// Originals (manifest or WAV) to log SNR(x, x̂) against.
    #[arg(long = "ref")]
    reference: Option<PathBuf>,
}

#[derive(Args)]
struct PurifyArgs {
    #[command(flatten)]
    input: Input,
    #[arg(long)]
    out: PathBuf,
    /// add_noise, quantize or median_smooth.
    #[arg(long, default_value = "quantize")]
    method: String,
    #[arg(long, default_value_t = DEFAULT_SNR_DB)]
    snr: f64,
    #[arg(long, default_value_t = DEFAULT_QUANT_FACTOR)]
    factor: u32,
    #[arg(long, default_value_t = DEFAULT_KERNEL)]
    kernel: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Test audio, as `PATH` or `LABEL=PATH`; repeat for several conditions.
    #[arg(long, required = true)]
    manifest: Vec<String>,
    /// Original recordings: enrollment audio and the reference for SNR,
    /// pitch and quality. Defaults to the first test manifest.
    #[arg(long = "ref")]
    reference: Option<PathBuf>,
    /// Trial list; built from the reference manifest when omitted.
    #[arg(long)]
    trials: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    targets_per_speaker: usize,
    #[arg(long, default_value_t = 30)]
    nontargets_per_speaker: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    extractor: PathBuf,
    /// Command printing a transcript for the WAV path it is given.
    #[arg(long)]
    asr_cmd: Option<String>,
    /// Command printing a quality score for `<reference.wav> <test.wav>`.
    #[arg(long)]
    quality_cmd: Option<String>,
    /// Report file: one object for one condition, an array for several.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    /// TOML config; must be tiny (seg_len <= 512, channels <= 4).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-3)]
    tolerance: f64,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 4)]
    speakers: usize,
    #[arg(long, default_value_t = 25)]
    utterances: usize,
    #[arg(long, default_value_t = 10)]
    held_out: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct DeskArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    epochs: Option<usize>,
}

fn cache_dir() -> PathBuf {
    std::env::var_os("VEIL_CACHE_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("veil-cache"))
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().unwrap_or_default().to_string_lossy();
    path.with_file_name(format!("{stem}.{suffix}"))
}

fn load_model_rate(path: &Path) -> Result<Waveform> {
    let w = load_wav(path)?;
    if w.sample_rate == veil::audio::MODEL_SAMPLE_RATE {
        return Ok(w);
    }
    warn!(
        "{}: resampling {} Hz to {} Hz",
        path.display(),
        w.sample_rate,
        veil::audio::MODEL_SAMPLE_RATE
    );
    Ok(resample(&w, veil::audio::MODEL_SAMPLE_RATE)?)
}

/// Runs `f` over the input; returns `(utterance id, input, output)` triples.
fn map_input<F>(input: &Input, out: &Path, f: F) -> Result<Vec<(String, Waveform, Waveform)>>
where
    F: Fn(usize, &Waveform) -> veil::Result<Waveform> + Sync,
{
    if let Some(wav) = &input.wav {
        let x = load_model_rate(wav)?;
        let y = f(0, &x)?;
        let out_file = if out.extension().is_some_and(|e| e.eq_ignore_ascii_case("wav")) {
            out.to_path_buf()
        } else {
            std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
            out.join(wav.file_name().context("input has no file name")?)
        };
        save_wav(&y, &out_file)?;
        let id = wav.file_stem().unwrap_or_default().to_string_lossy().into_owned();
        return Ok(vec![(id, x, y)]);
    }
    let path = input.manifest.as_ref().expect("clap requires one input");
    let manifest =
        Manifest::load(path).with_context(|| format!("reading manifest {}", path.display()))?;
    let written = process_manifest(&manifest, out, f)?;
    let inputs = AudioSet::load(&manifest)?;
    let outputs = AudioSet::load(&written)?;
    Ok(inputs
        .waveforms
        .into_iter()
        .zip(outputs.waveforms.into_values())
        .map(|((id, x), y)| (id, x, y))
        .collect())
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let manifest = Manifest::load(&args.manifest)
        .with_context(|| format!("reading manifest {}", args.manifest.display()))?;
    let mut config = match &args.config {
        Some(p) => TrainingConfig::load(p).with_context(|| format!("reading config {}", p.display()))?,
        None => TrainingConfig::default(),
    };
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(p) = args.extractor.clone() {
        config.extractor = Some(p);
    }
    let extractor = match &config.extractor {
        Some(p) => ToyExtractor::load(p).with_context(|| format!("loading extractor {}", p.display()))?,
        None => {
            let ext_cfg = ExtractorTrainingConfig {
                seed: config.seed,
                ..ExtractorTrainingConfig::default()
            };
            let trained = train_toy_extractor(&manifest, &ext_cfg)?;
            let path = sibling(&args.out, "extractor.bin");
            trained.extractor.save(&path)?;
            info!(
                "trained toy extractor (accuracy {:.3}) -> {}",
                trained.train_accuracy,
                path.display()
            );
            trained.extractor
        }
    };
    let data = manifest
        .entries
        .iter()
        .map(|e| manifest.load_entry(e).map(|w| w.samples))
        .collect::<veil::Result<Vec<_>>>()?;
    let trainer = match &args.resume {
        Some(p) => {
            let ck = Checkpoint::load(p).with_context(|| format!("loading {}", p.display()))?;
            let epochs = args.epochs.unwrap_or(ck.config.epochs);
            Trainer::resume(ck, epochs, &extractor)?
        }
        None => {
            if let Some(e) = args.epochs {
                config.epochs = e;
            }
            Trainer::new(config, &extractor)?
        }
    };
    let snapshot = cache_dir().join("snapshots");
    std::fs::create_dir_all(&snapshot)?;
    let checkpoint = trainer.train(&data, &mut |c| {
        c.save(snapshot.join(format!("epoch{:03}.bin", c.epoch)))
    })?;
    checkpoint.save(&args.out)?;
    let csv = sibling(&args.out, "loss.csv");
    std::fs::write(&csv, checkpoint.loss_csv()).with_context(|| format!("writing {}", csv.display()))?;
    info!("wrote {} and {}", args.out.display(), csv.display());
    Ok(())
}

fn cmd_protect(args: ProtectArgs) -> Result<()> {
    let ck = Checkpoint::load(&args.checkpoint)
        .with_context(|| format!("loading checkpoint {}", args.checkpoint.display()))?;
    let eps = ck.check_epsilon(args.epsilon)?;
    for (id, x, y) in map_input(&args.input, &args.out, |_, w| Ok(ck.generator.protect(w, eps)?.0))? {
        println!("{id}\tsnr_db={:.3}", compute_snr(&x, &y)?);
    }
    Ok(())
}

fn cmd_restore(args: RestoreArgs) -> Result<()> {
    let ck = Checkpoint::load(&args.checkpoint)
        .with_context(|| format!("loading checkpoint {}", args.checkpoint.display()))?;
    let eps = ck.check_epsilon(args.epsilon)?;
    let results = map_input(&args.input, &args.out, |_, w| ck.remover.restore_waveform(w, eps))?;
    let Some(reference) = &args.reference else {
        for (id, _, _) in &results {
            println!("{id}\trestored");
        }
        return Ok(());
    };
    let originals = if reference.extension().is_some_and(|e| e.eq_ignore_ascii_case("wav")) {
        let w = load_model_rate(reference)?;
        vec![(results[0].0.clone(), w)].into_iter().collect()
    } else {
        AudioSet::load(&Manifest::load(reference)?)?.waveforms
    };
    for (id, x_adv, x_hat) in &results {
        let x = originals
            .get(id)
            .with_context(|| format!("no original for {id} in {}", reference.display()))?;
        println!(
            "{id}\tsnr_adv_db={:.3}\tsnr_rst_db={:.3}",
            compute_snr(x, x_adv)?,
            compute_snr(x, x_hat)?
        );
    }
    Ok(())
}

fn cmd_purify(args: PurifyArgs) -> Result<()> {
    let method: PurifyMethod = args.method.parse()?;
    let config = PurifyConfig {
        method,
        snr_db: args.snr,
        quant_factor: args.factor,
        kernel: args.kernel,
        seed: args.seed,
    };
    config.validate()?;
    let results = match (&args.input.manifest, &args.input.wav) {
        (Some(m), _) => {
            let manifest = Manifest::load(m)?;
            let written = purify_manifest(&manifest, &config, &args.out)?;
            let a = AudioSet::load(&manifest)?.waveforms;
            let b = AudioSet::load(&written)?.waveforms;
            a.into_iter()
                .zip(b.into_values())
                .map(|((id, x), y)| (id, x, y))
                .collect()
        }
        _ => map_input(&args.input, &args.out, |_, w| config.apply(w))?,
    };
    for (id, x, y) in results {
        println!("{id}\tsnr_db={:.3}", compute_snr(&x, &y)?);
    }
    Ok(())
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<()> {
    let conditions: Vec<(String, PathBuf)> = args
        .manifest
        .iter()
        .map(|m| match m.split_once('=') {
            Some((label, path)) => (label.to_string(), PathBuf::from(path)),
            None => {
                let p = PathBuf::from(m);
                let label = p.file_stem().unwrap_or_default().to_string_lossy().into_owned();
                (label, p)
            }
        })
        .collect();
    let ref_path = args.reference.clone().unwrap_or_else(|| conditions[0].1.clone());
    let ref_manifest = Manifest::load(&ref_path)
        .with_context(|| format!("reading reference manifest {}", ref_path.display()))?;
    let reference = AudioSet::load(&ref_manifest)?;
    let trials = match &args.trials {
        Some(p) => TrialList::load(p).with_context(|| format!("reading trials {}", p.display()))?,
        None => build_trials(
            &ref_manifest,
            args.targets_per_speaker,
            args.nontargets_per_speaker,
            args.seed,
        )?,
    };
    let extractor = ToyExtractor::load(&args.extractor)
        .with_context(|| format!("loading extractor {}", args.extractor.display()))?;
    let scratch = cache_dir().join("plugins");
    let asr = args.asr_cmd.as_ref().map(|c| CommandPlugin::new(c, &scratch));
    let quality = args.quality_cmd.as_ref().map(|c| CommandPlugin::new(c, &scratch));
    let plugins = Plugins {
        asr: asr.as_ref().map(|p| p as &dyn AsrClient),
        quality: quality.as_ref().map(|p| p as &dyn QualityBackend),
    };
    let mut reports: Vec<EvaluationReport> = Vec::new();
    for (label, path) in &conditions {
        let manifest = Manifest::load(path)
            .with_context(|| format!("reading manifest {}", path.display()))?;
        let test = AudioSet::load(&manifest)?;
        let eval = evaluate_condition(label, Some(&trials), &reference, &test, &extractor, plugins)
            .with_context(|| format!("evaluating {label}"))?;
        write_scores(sibling(&args.out, &format!("{label}.scores")), &trials, &eval.scores)?;
        println!("{}", serde_json::to_string(&eval.report)?);
        reports.push(eval.report);
    }
    let json = if reports.len() == 1 {
        reports[0].to_json()?
    } else {
        serde_json::to_string_pretty(&reports)?
    };
    std::fs::write(&args.out, json + "\n")
        .with_context(|| format!("writing {}", args.out.display()))?;
    Ok(())
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<()> {
    let config = match &args.config {
        Some(p) => TrainingConfig::load(p)?,
        None => TrainingConfig::tiny(),
    };
    let report = gradcheck(&config, args.seed)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    // NaN fails too.
    if report.max_rel_error.partial_cmp(&args.tolerance) != Some(std::cmp::Ordering::Less) {
        bail!(
            "max relative error {:.3e} at {} exceeds {:.1e}",
            report.max_rel_error,
            report.worst_param,
            args.tolerance
        );
    }
    Ok(())
}

fn cmd_synth(args: SynthArgs) -> Result<()> {
    let config = ToyCorpusConfig {
        speakers: args.speakers,
        utterances_per_speaker: args.utterances,
        held_out_per_speaker: args.held_out,
        seed: args.seed,
        ..ToyCorpusConfig::default()
    };
    let files = write_corpus(&config, &args.out)?;
    println!(
        "{} utterances ({} train, {} held out) in {}",
        files.all.entries.len(),
        files.train.entries.len(),
        files.held_out.entries.len(),
        args.out.display()
    );
    Ok(())
}

fn cmd_desk(args: DeskArgs) -> Result<()> {
    let mut config = DeskConfig::default().with_seed(args.seed);
    if let Some(e) = args.epochs {
        config.training.epochs = e;
    }
    let outcome = run_desk(&config, &args.out)?;
    for eval in outcome.conditions.values() {
        println!("{}", serde_json::to_string(&eval.report)?);
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    if cli.jobs > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.jobs)
            .build_global()
            .context("configuring worker pool")?;
    }
    match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Protect(a) => cmd_protect(a),
        Command::Restore(a) => cmd_restore(a),
        Command::Purify(a) => cmd_purify(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Desk(a) => cmd_desk(a),
        Command::Schema => {
            print!("{REPORT_SCHEMA}");
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
