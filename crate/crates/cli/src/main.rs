use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use timbrevq::audio::{self, Waveform};
use timbrevq::config::ProjectConfig;
use timbrevq::data::{self, Benchmark, Manifest};
use timbrevq::eval::{self, EvalMode, TripletModel};
use timbrevq::model::{self, DOWNSAMPLE_FACTOR};
use timbrevq::train::{self, Checkpoint};
use timbrevq::{vq, Error, Result};

#[derive(Parser)]
#[command(name = "timbrevq", version, about = "One-shot timbre transfer with a discrete content code")]
struct Cli {
    /// Project configuration file (TOML).
    #[arg(long, global = true, env = "TIMBREVQ_CONFIG")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic training set of segment pairs.
    Prepare {
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Number of pairs.
        #[arg(long, default_value_t = 200)]
        pairs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write a benchmark with this many rows to <out>/benchmark.
        #[arg(long)]
        benchmark: Option<usize>,
    },
    /// Train a model on a prepared dataset.
    Train {
        /// Dataset manifest or its directory.
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint directory.
        #[arg(long)]
        out: PathBuf,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Render the content recording with the timbre of the style recording.
    Transfer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        content: PathBuf,
        #[arg(long)]
        style: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Griffin-Lim iterations (defaults to the config value).
        #[arg(long)]
        gl_iters: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Score system outputs on a benchmark, with both copy baselines.
    Eval {
        /// Produce the outputs with this checkpoint first.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Directory of output_NNNNN.wav files.
        #[arg(long)]
        outputs: PathBuf,
        /// Benchmark manifest or its directory.
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_enum, default_value_t = ModeArg::Artificial)]
        mode: ModeArg,
        /// Report path; rows also go to the same path with a .jsonl extension.
        #[arg(long)]
        report: PathBuf,
        /// Timbre model file; created from --timbre-data if it does not exist.
        #[arg(long)]
        timbre_model: Option<PathBuf>,
        /// Training-set manifest used to fit the timbre model.
        #[arg(long)]
        timbre_data: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Report codebook usage and the information rate of the content code.
    Diagnose {
        #[arg(long)]
        ckpt: PathBuf,
        /// Dataset manifest or its directory.
        #[arg(long)]
        data: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Artificial,
    Real,
}

impl From<ModeArg> for EvalMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Artificial => EvalMode::Artificial,
            ModeArg::Real => EvalMode::Real,
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<ProjectConfig> {
    match path {
        Some(p) => ProjectConfig::load(p),
        None => Ok(ProjectConfig::default()),
    }
}

fn read_input(path: &Path, sample_rate: u32) -> Result<Waveform> {
    let w = audio::read_wav(path)?;
    Ok(if w.sample_rate == sample_rate {
        w
    } else {
        audio::resample_to(&w, sample_rate)
    })
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(cli.config.as_deref())?;
    match cli.command {
        Command::Prepare {
            out,
            pairs,
            seed,
            benchmark,
        } => {
            let dcfg = cfg.data();
            let m = data::build_dataset(&dcfg, pairs, seed, &out)?;
            let tracks: std::collections::BTreeSet<u64> = m.rows.iter().map(|r| r.track_seed).collect();
            let families: std::collections::BTreeSet<&str> =
                m.rows.iter().map(|r| r.patch.family.name()).collect();
            println!(
                "{} pairs from {} tracks ({} families), {:.3} s segments -> {}",
                m.rows.len(),
                tracks.len(),
                families.len(),
                dcfg.segment_seconds,
                out.join(data::MANIFEST_FILE).display()
            );
            if let Some(rows) = benchmark {
                let dir = out.join("benchmark");
                let b = data::build_benchmark(&dcfg, rows, seed, &dir)?;
                println!(
                    "{} benchmark rows -> {}",
                    b.rows.len(),
                    dir.join(data::BENCHMARK_FILE).display()
                );
            }
        }
        Command::Train {
            data,
            out,
            resume,
            seed,
        } => {
            let manifest = Manifest::load(&data)?;
            let tcfg = cfg.train(seed);
            let outcome = train::fit(&manifest, &tcfg, &out, resume.as_deref())?;
            if let Some(last) = outcome.history.last() {
                println!(
                    "epoch {}: recon {:.6} total {:.6}, {} codes in use",
                    last.epoch, last.recon, last.total, last.used_count
                );
            }
            println!("checkpoints in {}", out.display());
        }
        Command::Transfer {
            ckpt,
            content,
            style,
            out,
            gl_iters,
            seed,
        } => {
            let ck = Checkpoint::load(&ckpt)?;
            let sr = ck.meta.stft.sample_rate;
            let c = read_input(&content, sr)?;
            let s = read_input(&style, sr)?;
            let mut gl = cfg.griffin_lim(seed);
            if let Some(n) = gl_iters {
                gl.iterations = n;
            }
            let w = model::transfer(&c, &s, &ck.model, ck.meta.stft, gl)?;
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            audio::write_wav(&out, &w)?;
            println!("{:.3} s -> {}", w.duration(), out.display());
        }
        Command::Eval {
            ckpt,
            outputs,
            manifest,
            mode,
            report,
            timbre_model,
            timbre_data,
            seed,
        } => {
            let bench = Benchmark::load(&manifest)?;
            if let Some(ckpt) = ckpt {
                let ck = Checkpoint::load(&ckpt)?;
                let sr = ck.meta.stft.sample_rate;
                fs::create_dir_all(&outputs).map_err(|e| Error::io(&outputs, e))?;
                for r in &bench.rows {
                    let c = read_input(&bench.resolve(&r.content), sr)?;
                    let s = read_input(&bench.resolve(&r.style), sr)?;
                    let w = model::transfer(&c, &s, &ck.model, ck.meta.stft, cfg.griffin_lim(seed))?;
                    audio::write_wav(outputs.join(eval::output_file_name(r.pair_id)), &w)?;
                }
                log::info!("wrote {} outputs to {}", bench.rows.len(), outputs.display());
            }
            let timbre = match (&timbre_model, &timbre_data) {
                (Some(p), _) if p.exists() => TripletModel::load(p)?,
                (_, Some(d)) => {
                    let m = eval::train_triplet(&Manifest::load(d)?, cfg.timbre(seed))?;
                    if let Some(p) = &timbre_model {
                        m.save(p)?;
                    }
                    m
                }
                _ => {
                    return Err(Error::InvalidInput(
                        "need --timbre-model (existing file) or --timbre-data".into(),
                    ))
                }
            };
            let rep = eval::run_benchmark(&outputs, &bench, mode.into(), &timbre, &cfg.eval())?;
            rep.write(&report)?;
            print!("{}", rep.table());
        }
        Command::Diagnose { ckpt, data } => {
            let ck = Checkpoint::load(&ckpt)?;
            let manifest = Manifest::load(&data)?;
            let mut codes = Vec::new();
            for r in &manifest.rows {
                for seg in [&r.x, &r.y] {
                    let w = read_input(&manifest.resolve(&seg.audio), ck.meta.stft.sample_rate)?;
                    let spec = timbrevq::spectral::spectrogram(&w, ck.meta.stft)?;
                    let latent = ck.model.content_encode(&spec)?;
                    codes.push(ck.model.quantize(&latent)?);
                }
            }
            let k = ck.model.config.codebook_size;
            let stats = vq::codebook_stats(&codes, k)?;
            let rate = ck.meta.stft.frames_per_second() / DOWNSAMPLE_FACTOR as f64;
            println!("codebook size      {k}");
            println!("codes in use       {}", stats.used_count);
            println!("perplexity         {:.2}", stats.perplexity);
            println!("code rate          {rate:.3} codes/s");
            println!("tempo (bpm)   bits/beat");
            for tempo in [60.0, 120.0, 240.0] {
                let bits = vq::bits_per_beat(tempo, stats.used_count.max(1), rate)?;
                println!("{tempo:>11}   {bits:.2}");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("TIMBREVQ_LOG", "info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match std::panic::catch_unwind(|| run(cli)) {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_user_error() { 1 } else { 2 })
        }
        Err(_) => ExitCode::from(2),
    }
}
