//! `gvt` — train, run, and inspect the Gaussian-splat video tokenizer.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use gvt::codec;
use gvt::config::ModelConfig;
use gvt::metrics::MetricsWriter;
use gvt::pipeline::{MaskMode, Model, TrainConfig, Trainer, VideoClip};
use gvt::vq::CODEBOOK_PARAM;

#[derive(Parser)]
#[command(name = "gvt", version, about = "Gaussian-splat video tokenizer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model on clips from a directory or on synthetic data.
    Train(TrainArgs),
    /// Encode a clip into a token stream.
    Encode(EncodeArgs),
    /// Decode a token stream back into a clip.
    Decode(DecodeArgs),
    /// Run the finite-difference gradient suite (exit 1 on failure).
    Gradcheck(GradcheckArgs),
    /// Train per (K, tau) configuration and trace rate vs distortion.
    RdSweep(RdSweepArgs),
    /// Print a stream's header and token accounting.
    Stats(StatsArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Model config (TOML). Defaults to the desk-scale toy preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory of .gvcl clips.
    #[arg(long, conflicts_with = "synthetic")]
    data: Option<PathBuf>,
    /// Train on the built-in synthetic suite.
    #[arg(long)]
    synthetic: bool,
    /// Number of synthetic clips.
    #[arg(long, default_value_t = 8)]
    clips: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 2000)]
    steps: usize,
    /// Learning rate.
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    /// Disable partitioning (ablation baseline: every Gaussian dynamic).
    #[arg(long)]
    all_dynamic: bool,
    /// Checkpoint output path.
    #[arg(long, default_value = "gvt.gvck")]
    out: PathBuf,
    /// Metrics CSV output path.
    #[arg(long, default_value = "metrics.csv")]
    metrics: PathBuf,
    /// Print a metrics line every N steps (0 = quiet).
    #[arg(long, default_value_t = 100)]
    log_every: usize,
}

#[derive(Args)]
struct EncodeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Input clip: .gvcl file or a directory of PNG frames.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    /// Embed the codebook for a self-contained stream.
    #[arg(long)]
    embed_codebook: bool,
}

#[derive(Args)]
struct DecodeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    input: PathBuf,
    /// Output clip (.gvcl).
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Random instances per built-in op.
    #[arg(long, default_value_t = 100)]
    trials: usize,
}

#[derive(Args)]
struct RdSweepArgs {
    /// Sweep points as K:tau pairs, e.g. "64:0.1,64:0.25,64:0.5".
    #[arg(long)]
    configs: String,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 400)]
    steps: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 4)]
    clips: usize,
    /// RatePoint CSV output.
    #[arg(long, default_value = "rd.csv")]
    out: PathBuf,
    /// Plot data (TSV: bpp, psnr) output.
    #[arg(long, default_value = "rd.tsv")]
    plot: PathBuf,
}

#[derive(Args)]
struct StatsArgs {
    #[arg(long)]
    input: PathBuf,
}

fn main() {
    let cli = Cli::parse();
    let code = match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    };
    std::process::exit(code);
}

fn run(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Train(args) => train(args),
        Command::Encode(args) => encode(args),
        Command::Decode(args) => decode(args),
        Command::Gradcheck(args) => gradcheck(args),
        Command::RdSweep(args) => rd_sweep(args),
        Command::Stats(args) => stats(args),
    }
}

fn load_config(path: &Option<PathBuf>) -> Result<ModelConfig> {
    match path {
        Some(p) => ModelConfig::load(p).with_context(|| format!("loading config {}", p.display())),
        None => Ok(ModelConfig::toy()),
    }
}

fn load_clips(args: &TrainArgs, cfg: &ModelConfig) -> Result<Vec<VideoClip>> {
    if args.synthetic {
        return Ok(gvt::synth::training_clips(
            args.clips,
            cfg.clip_h,
            cfg.clip_w,
            cfg.frames(),
            args.seed,
        ));
    }
    let dir = args
        .data
        .as_ref()
        .context("pass --data DIR or --synthetic")?;
    let mut paths: Vec<_> = std::fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().map(|e| e == "gvcl").unwrap_or(false))
        .collect();
    paths.sort();
    if paths.is_empty() {
        bail!("no .gvcl clips in {}", dir.display());
    }
    paths
        .iter()
        .map(|p| gvt::clipio::read_clip(p).with_context(|| format!("reading {}", p.display())))
        .collect()
}

fn train(args: TrainArgs) -> Result<i32> {
    let cfg = load_config(&args.config)?;
    let clips = load_clips(&args, &cfg)?;
    for clip in &clips {
        if clip.h != cfg.clip_h || clip.w != cfg.clip_w || clip.frames != cfg.frames() {
            bail!(
                "clip is {} frames of {}x{}, config wants {} frames of {}x{}",
                clip.frames,
                clip.h,
                clip.w,
                cfg.frames(),
                cfg.clip_h,
                cfg.clip_w
            );
        }
    }
    let model = Model::new(cfg, args.seed);
    let train_cfg = TrainConfig {
        steps: args.steps,
        lr: args.lr,
        seed: args.seed,
        mask_mode: if args.all_dynamic {
            MaskMode::AllDynamic
        } else {
            MaskMode::Learned
        },
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(model, &train_cfg);
    let mut writer = MetricsWriter::create(&args.metrics)
        .with_context(|| format!("creating {}", args.metrics.display()))?;
    for i in 0..args.steps {
        let m = trainer.train_step(&clips[i % clips.len()])?;
        writer.append(&m)?;
        if args.log_every > 0 && (i % args.log_every == 0 || i + 1 == args.steps) {
            println!(
                "step {:>6}  recon {:.5}  gsp {:.5}  commit {:.5}  mean_mask {:.3}  S {:>4}  tokens {:>5}  psnr {:.2}",
                m.step, m.l_recon, m.l_gsp, m.l_commit, m.mean_mask, m.s, m.tokens, m.psnr
            );
        }
    }
    trainer.model.save_checkpoint(&args.out)?;
    println!("checkpoint written to {}", args.out.display());
    println!("metrics written to {}", args.metrics.display());
    Ok(0)
}

fn read_input_clip(path: &Path) -> Result<VideoClip> {
    if path.is_dir() {
        Ok(gvt::clipio::read_clip_png_dir(path)?)
    } else {
        Ok(gvt::clipio::read_clip(path)?)
    }
}

fn encode(args: EncodeArgs) -> Result<i32> {
    let model = Model::from_checkpoint(&args.checkpoint)?;
    let clip = read_input_clip(&args.input)?;
    let q = model.encode_clip(&clip)?;
    let entries = &model.store.get(CODEBOOK_PARAM).data;
    let mut coded = codec::code_set(&q, model.cfg.d, model.cfg.l, codec::codebook_hash(entries));
    if args.embed_codebook {
        coded.header.version = codec::VERSION_EMBEDDED_CODEBOOK;
        coded.embedded_codebook = Some(entries.iter().map(|&v| v as f32).collect());
    }
    let bytes = codec::serialize(&coded)?;
    std::fs::write(&args.output, &bytes)?;
    let st = codec::stream_stats(&coded.header);
    println!(
        "encoded {} tokens (S={} static) into {} bytes ({} payload bits)",
        st.token_count,
        coded.header.s,
        bytes.len(),
        st.payload_bits
    );
    Ok(0)
}

fn decode(args: DecodeArgs) -> Result<i32> {
    let model = Model::from_checkpoint(&args.checkpoint)?;
    let bytes = std::fs::read(&args.input)?;
    let coded = codec::deserialize(&bytes)?;
    let entries: Vec<f64> = match &coded.embedded_codebook {
        Some(cb) => cb.iter().map(|&v| v as f64).collect(),
        None => {
            let entries = model.store.get(CODEBOOK_PARAM).data.clone();
            codec::verify_codebook_hash(&coded.header, &entries)?;
            entries
        }
    };
    let (st, dy) = codec::decode_set(&coded, &entries);
    let clip = model.decode_gaussians(&st, &dy)?;
    gvt::clipio::write_clip(&args.output, &clip, gvt::clipio::DTYPE_F32)?;
    println!(
        "decoded {} frames of {}x{} to {}",
        clip.frames,
        clip.h,
        clip.w,
        args.output.display()
    );
    Ok(0)
}

fn gradcheck(args: GradcheckArgs) -> Result<i32> {
    let entries = gvt::gradsuite::run_suite(args.trials);
    let mut failed = 0usize;
    for e in &entries {
        println!("{}", e.line());
        if !e.report.pass() {
            failed += 1;
        }
    }
    let worst = entries
        .iter()
        .map(|e| e.report.worst_rel_err())
        .fold(0.0f64, f64::max);
    println!("---");
    println!(
        "{} checks, {} failed, max rel err {:.3e}",
        entries.len(),
        failed,
        worst
    );
    Ok(if failed == 0 { 0 } else { 1 })
}

fn rd_sweep(args: RdSweepArgs) -> Result<i32> {
    let base_cfg = load_config(&args.config)?;
    let configs: Vec<(usize, f64)> = args
        .configs
        .split(',')
        .map(|pair| {
            let (k, tau) = pair
                .split_once(':')
                .with_context(|| format!("bad K:tau pair `{pair}`"))?;
            Ok((k.trim().parse()?, tau.trim().parse()?))
        })
        .collect::<Result<_>>()?;
    let clips = gvt::synth::training_clips(
        args.clips,
        base_cfg.clip_h,
        base_cfg.clip_w,
        base_cfg.frames(),
        args.seed,
    );
    let train_cfg = TrainConfig {
        steps: args.steps,
        lr: args.lr,
        seed: args.seed,
        ..TrainConfig::default()
    };
    let points = codec::rd_sweep(&clips, &configs, &base_cfg, &train_cfg)?;
    let mut csv = String::from("k_init,tau,bits,bpp,psnr,tokens,initial_tokens\n");
    let mut tsv = String::from("bpp\tpsnr\tlabel\n");
    for p in &points {
        csv.push_str(&format!(
            "{},{},{},{:.6},{:.3},{},{}\n",
            p.k_init, p.tau, p.bits, p.bpp, p.psnr, p.tokens, p.initial_tokens
        ));
        tsv.push_str(&format!(
            "{:.6}\t{:.3}\tK={} tau={} ({} -> {} tokens)\n",
            p.bpp, p.psnr, p.k_init, p.tau, p.initial_tokens, p.tokens
        ));
        println!(
            "K={:<5} tau={:<5} bits={:<8} bpp={:.4} psnr={:.2} tokens {} -> {}",
            p.k_init, p.tau, p.bits, p.bpp, p.psnr, p.initial_tokens, p.tokens
        );
    }
    std::fs::write(&args.out, csv)?;
    std::fs::write(&args.plot, tsv)?;
    println!("rate points written to {} and {}", args.out.display(), args.plot.display());
    Ok(0)
}

fn stats(args: StatsArgs) -> Result<i32> {
    let bytes = std::fs::read(&args.input)?;
    let coded = codec::deserialize(&bytes)?;
    let h = &coded.header;
    let st = codec::stream_stats(h);
    println!("stream   {} ({} bytes)", args.input.display(), bytes.len());
    println!("version  {}", h.version);
    println!("steps    T={}", h.t);
    println!("set      K={} S={} dynamic={}", h.k, h.s, h.k - h.s);
    println!("gaussian D={} (coeff {})", h.d, h.coeff_dim());
    println!("codebook L={} (hash {})", h.l, hex8(&h.codebook_hash));
    println!("grid     {}x{}", h.grid_h, h.grid_w);
    println!("tokens   {}", st.token_count);
    println!(
        "bits     header {} + codebook {} + mask {} + payload {} + padding {} = {}",
        st.header_bits, st.codebook_bits, st.mask_bits, st.payload_bits, st.padding_bits, st.total_bits
    );
    println!("record   {} bits (geometry {} + index {})", st.record_bits, codec::GEOMETRY_BITS, h.index_bits());
    Ok(0)
}

fn hex8(bytes: &[u8; 8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
