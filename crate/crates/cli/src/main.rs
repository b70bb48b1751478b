use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use hfsig::audio_io::{resample, AudioClip, CANONICAL_RATE};
use hfsig::checkpoint::Checkpoint;
use hfsig::dsp::write_band_csv;
use hfsig::evalkit::{band_attenuation_report, evaluate, EvalConfig};
use hfsig::keydp::{generate_keys, KeySet};
use hfsig::signet::{sign_audio, SignatureNet};
use hfsig::threatlab::{
    build_corpus, clone_proxy, ingest, load_corpus, read_wav_file, stream_rng, write_wav_file, AttackParams,
    CorpusSpec,
};
use hfsig::trainer::{train_joint_with, TrainConfig};
use hfsig::vernet::{verify_audio, VerifierNet, DEFAULT_THRESHOLD};

const EXIT_SIGNED: u8 = 0;
const EXIT_ERROR: u8 = 1;
const EXIT_UNSIGNED: u8 = 3;

#[derive(Parser)]
#[command(name = "hfsig", version, about = "Keyed high-frequency signatures for speech audio")]
struct Cli {
    /// Seed for every random draw of this invocation.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate private keys for user_000, user_001, ...
    Keygen {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a synthetic speech corpus with a manifest.
    SynthCorpus {
        #[arg(long)]
        users: usize,
        #[arg(long)]
        clips: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4.0)]
        duration: f64,
        /// Index of the first clip per speaker; later indices give unseen clips.
        #[arg(long, default_value_t = 0)]
        first_clip: usize,
    },
    /// Copy WAVs listed in a manifest into a 16 kHz corpus.
    Ingest {
        #[arg(long)]
        dir: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train both networks jointly.
    Train(TrainArgs),
    /// Sign a WAV with one user's key.
    Sign {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        key_id: String,
        #[arg(long)]
        keys: PathBuf,
        #[arg(long)]
        sig_ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Simulate a voice clone of a WAV.
    Clone {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a WAV; exits 0 when signed and 3 when not.
    Verify {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        ver_ckpt: PathBuf,
        #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
        threshold: f64,
    },
    /// Run the evaluation protocol on a corpus.
    Eval {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        keys: PathBuf,
        #[arg(long)]
        sig_ckpt: PathBuf,
        #[arg(long)]
        ver_ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
        threshold: f64,
    },
    /// Compare the band energy of two directories of WAVs.
    AnalyzeBands {
        #[arg(long)]
        cohort_a: PathBuf,
        #[arg(long)]
        cohort_b: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 600.0)]
        band_width: f64,
    },
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    keys: PathBuf,
    /// JSON training config; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    dp: bool,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    quiet: bool,
}

fn require_file(path: &Path) -> Result<()> {
    if !path.is_file() {
        bail!("{} does not exist or is not a file", path.display());
    }
    Ok(())
}

fn require_dir(path: &Path) -> Result<()> {
    if !path.is_dir() {
        bail!("{} does not exist or is not a directory", path.display());
    }
    Ok(())
}

fn read_keys(path: &Path) -> Result<KeySet> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    KeySet::from_json(&text).with_context(|| format!("parsing key file {}", path.display()))
}

fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Checkpoint::decode(&bytes).with_context(|| format!("decoding {}", path.display()))
}

fn read_canonical(path: &Path) -> Result<AudioClip> {
    let clip = read_wav_file(path)?;
    Ok(resample(&clip, CANONICAL_RATE)?)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn wav_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).with_context(|| format!("listing {}", d.display()))? {
            let path = entry?.path();
            if path.is_dir() {
                stack.push(path);
            } else if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("wav")) {
                out.push(path);
            }
        }
    }
    out.sort();
    if out.is_empty() {
        bail!("no WAV files under {}", dir.display());
    }
    Ok(out)
}

fn train(args: TrainArgs, seed: Option<u64>) -> Result<()> {
    require_dir(&args.corpus)?;
    require_file(&args.keys)?;
    let mut cfg = match &args.config {
        Some(path) => {
            require_file(path)?;
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            TrainConfig::from_json(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        None => TrainConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(n) = args.max_epochs {
        cfg.max_epochs = n;
    }
    if let Some(b) = args.batch_size {
        cfg.batch_size = b;
    }
    if args.dp {
        cfg.dp_enabled = true;
    }
    if let Some(e) = args.epsilon {
        cfg.epsilon = e;
    }
    cfg.validate()?;
    let keys = read_keys(&args.keys)?;
    let corpus = load_corpus(&args.corpus)?;
    fs::create_dir_all(&args.out_dir).with_context(|| format!("creating {}", args.out_dir.display()))?;
    let quiet = args.quiet;
    let out = train_joint_with(&corpus, &keys, &cfg, |r, _| {
        if !quiet {
            eprintln!(
                "epoch {:>3}  L_S {:.5}  L_phi {:.4}  val_joint {:.4}  val_acc {:.3}",
                r.epoch, r.l_s, r.l_phi, r.val_joint, r.val_acc
            );
        }
    })?;
    let dir = &args.out_dir;
    write_file(&dir.join("signet.ckpt"), &out.signet.to_checkpoint().encode()?)?;
    write_file(&dir.join("vernet.ckpt"), &out.vernet.to_checkpoint().encode()?)?;
    out.history.write_csv(&dir.join("history.csv"))?;
    write_file(&dir.join("train_config.json"), cfg.to_json().as_bytes())?;
    if let Some(epoch) = out.best_epoch {
        eprintln!("kept parameters from epoch {epoch}");
    }
    Ok(())
}

fn run(cli: Cli) -> Result<u8> {
    let seed = cli.seed.unwrap_or(0);
    match cli.command {
        Command::Keygen { n, out } => {
            let keys = generate_keys(n, &mut stream_rng(seed, 0))?;
            write_file(&out, keys.to_json().as_bytes())?;
        }
        Command::SynthCorpus {
            users,
            clips,
            out,
            duration,
            first_clip,
        } => {
            let spec = CorpusSpec {
                n_users: users,
                clips_per_user: clips,
                duration_s: duration,
                first_clip,
                seed,
            };
            let manifest = build_corpus(&out, &spec)?;
            eprintln!("wrote {} clips to {}", manifest.clip_count(), out.display());
        }
        Command::Ingest { dir, manifest, out } => {
            require_dir(&dir)?;
            require_file(&manifest)?;
            let m = ingest(&dir, &manifest, &out)?;
            eprintln!("wrote {} clips to {}", m.clip_count(), out.display());
        }
        Command::Train(args) => train(args, cli.seed)?,
        Command::Sign {
            input,
            key_id,
            keys,
            sig_ckpt,
            out,
        } => {
            require_file(&input)?;
            require_file(&keys)?;
            require_file(&sig_ckpt)?;
            let keys = read_keys(&keys)?;
            let key = keys.get(&key_id)?;
            let net = SignatureNet::from_checkpoint(&read_checkpoint(&sig_ckpt)?)?;
            let signed = sign_audio(&read_canonical(&input)?, key, &net)?;
            write_wav_file(&out, &signed)?;
        }
        Command::Clone { input, out } => {
            require_file(&input)?;
            let clip = read_canonical(&input)?;
            let mut rng = stream_rng(seed, 0);
            let params = AttackParams::sample(&mut rng);
            write_wav_file(&out, &clone_proxy(&clip, &params, &mut rng)?)?;
        }
        Command::Verify {
            input,
            ver_ckpt,
            threshold,
        } => {
            require_file(&input)?;
            require_file(&ver_ckpt)?;
            let ckpt = read_checkpoint(&ver_ckpt)?;
            if ckpt.header.confidential {
                bail!(
                    "{} is a confidential signing checkpoint; verification only accepts public verifier checkpoints",
                    ver_ckpt.display()
                );
            }
            let net = VerifierNet::from_checkpoint(&ckpt)?;
            let verdict = verify_audio(&read_canonical(&input)?, &net, threshold)?;
            println!("{}", serde_json::to_string(&verdict)?);
            return Ok(if verdict.signed { EXIT_SIGNED } else { EXIT_UNSIGNED });
        }
        Command::Eval {
            corpus,
            keys,
            sig_ckpt,
            ver_ckpt,
            out,
            threshold,
        } => {
            require_dir(&corpus)?;
            require_file(&keys)?;
            require_file(&sig_ckpt)?;
            require_file(&ver_ckpt)?;
            let keys = read_keys(&keys)?;
            let signet = SignatureNet::from_checkpoint(&read_checkpoint(&sig_ckpt)?)?;
            let vernet = VerifierNet::from_checkpoint(&read_checkpoint(&ver_ckpt)?)?;
            let corpus = load_corpus(&corpus)?;
            let cfg = EvalConfig {
                threshold,
                seed,
                ..EvalConfig::default()
            };
            let report = evaluate(&corpus, &keys, &signet, &vernet, &cfg)?;
            report.write_to(&out)?;
            println!(
                "EER {:.4} at {:.4}; median per-user accuracy {:.4}; clone rejection {:.4}",
                report.eer.eer, report.eer.threshold, report.accuracy_quartiles.median, report.clone_rejection
            );
        }
        Command::AnalyzeBands {
            cohort_a,
            cohort_b,
            out,
            band_width,
        } => {
            require_dir(&cohort_a)?;
            require_dir(&cohort_b)?;
            let load = |dir: &Path| -> Result<Vec<AudioClip>> { wav_files(dir)?.iter().map(|p| read_canonical(p)).collect() };
            let a = load(&cohort_a)?;
            let b = load(&cohort_b)?;
            let report = band_attenuation_report(&a, &b, band_width)?;
            let mut buf = Vec::new();
            write_band_csv(&mut buf, &report.rows("cohort_a", "cohort_b"))?;
            write_file(&out, &buf)?;
        }
    }
    Ok(EXIT_SIGNED)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_ERROR)
        }
    }
}
