//! Command-line interface for the deepmark watermarking toolkit.
//!
//! Exit codes: 0 success, 2 validation error, 3 numeric failure, 4 I/O
//! failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use deepmark_core::attack::AttackKind;
use deepmark_core::checkpoint::{load_codec, save_codec};
use deepmark_core::codec::{train_codec, BitMessage, CodecConfig, CodecTrainConfig};
use deepmark_core::config::RunConfig;
use deepmark_core::dataset::{ingest_dataset, load_image, Dataset, Split};
use deepmark_core::distortion::table1_panel;
use deepmark_core::ensemble::AttackPair;
use deepmark_core::error::Error;
use deepmark_core::evalrun::{curves_to_csv, run_stress_test, strength_curves, EvalReport};
use deepmark_core::trainer::{load_checkpoint, run_steps, train_run, AttackBank};
use deepmark_core::ImageTensor;

/// Environment variable overriding the dataset root.
const DATA_ROOT_ENV: &str = "DEEPMARK_DATA_ROOT";

#[derive(Parser)]
#[command(name = "deepmark", version, about = "Robust image watermarking: train, embed, extract, attack, evaluate")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the channel codec against a binary symmetric channel.
    TrainCodec(TrainCodecArgs),
    /// Train the watermark model with adversarial attack network(s).
    Train(TrainArgs),
    /// Embed a message into an image.
    Embed(EmbedArgs),
    /// Extract a message from an image.
    Extract(ExtractArgs),
    /// Apply a trained attack network to an image.
    Attack(AttackArgs),
    /// Run the distortion stress test and write the report.
    Evaluate(EvaluateArgs),
    /// Re-render a stored report, or sweep accuracy-vs-strength curves.
    Report(ReportArgs),
}

#[derive(Args)]
struct TrainCodecArgs {
    /// Message length in bits.
    #[arg(long, default_value_t = 30)]
    bits: usize,
    /// Redundant length in bits.
    #[arg(long, default_value_t = 120)]
    redundant: usize,
    /// Channel bit-flip probability.
    #[arg(long, default_value_t = 0.1)]
    flip: f64,
    #[arg(long, default_value_t = 256)]
    hidden: usize,
    #[arg(long, default_value_t = 8000)]
    steps: usize,
    #[arg(long, default_value_t = 256)]
    batch: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output checkpoint path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Pre-trained codec checkpoint.
    #[arg(long)]
    codec: PathBuf,
    /// Output directory (overrides the config).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Dataset root (overrides config and environment).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Root seed (overrides the config).
    #[arg(long)]
    seed: Option<u64>,
    /// Resume from a model checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct EmbedArgs {
    /// Model checkpoint (bundles the codec).
    #[arg(long)]
    ckpt: PathBuf,
    /// Message as hex (MSB-first, truncated to the message length).
    #[arg(long)]
    msg: String,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ExtractArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long = "in")]
    input: PathBuf,
}

#[derive(Args)]
struct AttackArgs {
    /// Which attack network to apply: cnn|transformer|dct-cnn|dct-transformer.
    #[arg(long)]
    net: String,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Override the DCT frequency-mask threshold.
    #[arg(long)]
    mask_t: Option<usize>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// `table1` or a path to a run config whose distortion list is used.
    #[arg(long, default_value = "table1")]
    distortions: String,
    #[arg(long)]
    ckpt: PathBuf,
    /// Optional external codec checkpoint to validate against the model.
    #[arg(long)]
    codec: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    /// Output CSV path; a companion .json lands next to it.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 64)]
    images: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Method label in the report.
    #[arg(long, default_value = "deepmark")]
    method: String,
}

#[derive(Args)]
struct ReportArgs {
    /// Re-render this stored report JSON to CSV.
    #[arg(long)]
    from: Option<PathBuf>,
    /// Sweep accuracy-vs-strength curves instead (needs --ckpt/--data).
    #[arg(long, default_value_t = false)]
    plot: bool,
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 6)]
    points: usize,
    #[arg(long, default_value_t = 16)]
    images: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "deepmark")]
    method: String,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::TrainCodec(a) => cmd_train_codec(a),
        Command::Train(a) => cmd_train(a),
        Command::Embed(a) => cmd_embed(a),
        Command::Extract(a) => cmd_extract(a),
        Command::Attack(a) => cmd_attack(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Report(a) => cmd_report(a),
    }
}

fn cmd_train_codec(a: TrainCodecArgs) -> Result<(), Error> {
    let cfg = CodecTrainConfig {
        codec: CodecConfig {
            msg_len: a.bits,
            redundant_len: a.redundant,
            p_flip: a.flip,
            hidden: a.hidden,
        },
        steps: a.steps,
        batch: a.batch,
        lr: 1e-3,
        seed: a.seed,
    };
    let (codec, report) = train_codec(&cfg)?;
    save_codec(&codec, &a.out)?;
    println!(
        "codec trained: steps={} loss={:.6} clean_accuracy={:.4}%",
        report.steps_run,
        report.final_loss,
        report.clean_accuracy * 100.0
    );
    println!("saved {}", a.out.display());
    Ok(())
}

fn data_root(flag: Option<PathBuf>, cfg: &RunConfig) -> PathBuf {
    flag.or_else(|| std::env::var_os(DATA_ROOT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| cfg.data_root.clone())
}

fn cmd_train(a: TrainArgs) -> Result<(), Error> {
    let mut cfg = RunConfig::load(&a.config)?;
    if let Some(seed) = a.seed {
        cfg = cfg.with_seed(seed);
    }
    if let Some(out) = &a.out {
        cfg.out_dir = out.clone();
    }
    cfg.data_root = data_root(a.data, &cfg);
    cfg.validate()?;

    let root = cfg.data_root.clone();
    let train_manifest = ingest_dataset(&root, Split::Train, cfg.training.image_size)?;
    for w in &train_manifest.warnings {
        eprintln!("warning: {w}");
    }
    let test_manifest = ingest_dataset(&root, Split::Test, cfg.training.image_size)?;
    let train_data = Dataset::load(&train_manifest)?;
    let eval_data = Dataset::load(&test_manifest)?;
    let out_dir = cfg.out_dir.clone();

    let summary = if let Some(resume) = &a.resume {
        let (mut state, codec) = load_checkpoint(resume)?;
        println!("resumed from {} at step {}", resume.display(), state.step);
        run_steps(&mut state, &codec, &train_data, &eval_data, &out_dir)?
    } else {
        let codec = load_codec(&a.codec)?;
        train_run(&cfg, &codec, &train_data, &eval_data, &out_dir)?
    };
    println!(
        "trained {} steps; held-out identity bit accuracy {:.3}%, PSNR_RGB {:.3} dB, SSIM {:.4}",
        summary.steps_run,
        summary.final_eval.identity_bit_acc,
        summary.final_eval.psnr_rgb,
        summary.final_eval.ssim
    );
    println!("checkpoint {}", summary.checkpoint_path.display());
    println!("metrics    {}", summary.metrics_path.display());
    Ok(())
}

fn load_image_for(model_size: usize, path: &Path) -> Result<ImageTensor, Error> {
    load_image(path, model_size)
}

fn cmd_embed(a: EmbedArgs) -> Result<(), Error> {
    let (state, codec) = load_checkpoint(&a.ckpt)?;
    let msg = BitMessage::from_hex(&a.msg, codec.config().msg_len)?;
    let cover = load_image_for(state.cfg.training.image_size, &a.input)?;
    let redundant = codec.encode_redundant(&msg)?;
    let wm = state.model.embed_single(&cover, &redundant)?;
    wm.to_rgb8(0)
        .save(&a.out)
        .map_err(|e| Error::Image(e.to_string()))?;
    println!("embedded {} into {}", msg.to_hex(), a.out.display());
    Ok(())
}

fn cmd_extract(a: ExtractArgs) -> Result<(), Error> {
    let (state, codec) = load_checkpoint(&a.ckpt)?;
    let img = load_image_for(state.cfg.training.image_size, &a.input)?;
    let logits = state.model.extract(&img)?;
    let redundant = deepmark_core::codec::binarize_batch(&logits);
    let confidences = codec.decode_soft(&redundant);
    let bits: Vec<u8> = confidences.row(0).iter().map(|&p| u8::from(p > 0.5)).collect();
    let msg = BitMessage::new(bits)?;
    println!("message: {}", msg.to_hex());
    let conf_str: Vec<String> = confidences.row(0).iter().map(|p| format!("{p:.4}")).collect();
    println!("confidences: {}", conf_str.join(" "));
    Ok(())
}

fn cmd_attack(a: AttackArgs) -> Result<(), Error> {
    let kind = AttackKind::parse(&a.net)?;
    let (mut state, _codec) = load_checkpoint(&a.ckpt)?;
    let img = load_image_for(state.cfg.training.image_size, &a.input)?;

    // locate the requested net in the checkpoint's bank
    let net = match (&mut state.bank, kind) {
        (AttackBank::Single { net, .. }, k) if net.kind() == k => net,
        (AttackBank::Ensemble { pair: AttackPair { cnn, .. }, .. }, AttackKind::Cnn) => cnn,
        (
            AttackBank::Ensemble {
                pair: AttackPair { dct_transformer, .. },
                ..
            },
            AttackKind::DctTransformer,
        ) => dct_transformer,
        (bank, k) => {
            let available = match bank {
                AttackBank::Single { net, .. } => net.kind().name().to_string(),
                AttackBank::Ensemble { .. } => "cnn, dct-transformer".to_string(),
            };
            return Err(Error::config(format!(
                "attack network '{}' not in this checkpoint (available: {available})",
                k.name()
            )));
        }
    };
    if let Some(t) = a.mask_t {
        if let deepmark_core::attack::AttackNet::Dct(d) = net {
            d.mask = deepmark_core::dct::FrequencyMask::anti_diagonal(t);
        }
    }
    let out = net.apply(&img);
    out.to_rgb8(0)
        .save(&a.out)
        .map_err(|e| Error::Image(e.to_string()))?;
    println!("wrote {}", a.out.display());
    Ok(())
}

fn distortion_list(arg: &str) -> Result<Vec<deepmark_core::distortion::DistortionSpec>, Error> {
    if arg == "table1" {
        Ok(table1_panel())
    } else {
        let cfg = RunConfig::load(Path::new(arg))?;
        Ok(cfg.distortions)
    }
}

fn cmd_evaluate(a: EvaluateArgs) -> Result<(), Error> {
    let (state, bundled_codec) = load_checkpoint(&a.ckpt)?;
    let codec = match &a.codec {
        Some(path) => {
            let external = load_codec(path)?;
            deepmark_core::evalrun::check_compatible(&state.model, &external)?;
            external
        }
        None => bundled_codec,
    };
    let specs = distortion_list(&a.distortions)?;
    let manifest = ingest_dataset(&a.data, Split::Test, state.cfg.training.image_size)?;
    for w in &manifest.warnings {
        eprintln!("warning: {w}");
    }
    let data = Dataset::load(&manifest)?;
    let report = run_stress_test(&state.model, &codec, &data, &specs, &a.method, a.images, a.seed)?;
    std::fs::write(&a.out, report.to_csv())?;
    let json_path = a.out.with_extension("json");
    std::fs::write(&json_path, report.to_json())?;
    println!("{}", report.to_csv().trim_end());
    println!(
        "quality: PSNR_RGB {:.3} Y {:.3} U {:.3} V {:.3} B {:.3} SSIM {:.4}",
        report.quality.psnr_rgb,
        report.quality.psnr_y,
        report.quality.psnr_u,
        report.quality.psnr_v,
        report.quality.psnr_b,
        report.quality.ssim
    );
    println!("wrote {} and {}", a.out.display(), json_path.display());
    Ok(())
}

fn cmd_report(a: ReportArgs) -> Result<(), Error> {
    if a.plot {
        let ckpt = a.ckpt.ok_or_else(|| Error::config("--plot needs --ckpt"))?;
        let data = a.data.ok_or_else(|| Error::config("--plot needs --data"))?;
        let (state, codec) = load_checkpoint(&ckpt)?;
        let manifest = ingest_dataset(&data, Split::Test, state.cfg.training.image_size)?;
        let dataset = Dataset::load(&manifest)?;
        let points = strength_curves(
            &state.model,
            &codec,
            &dataset,
            &table1_panel(),
            a.points,
            a.images,
            a.seed,
        )?;
        std::fs::write(&a.out, curves_to_csv(&a.method, &points))?;
        println!("wrote {} ({} curve points)", a.out.display(), points.len());
        Ok(())
    } else {
        let from = a
            .from
            .ok_or_else(|| Error::config("report needs --from <report.json> or --plot"))?;
        let text = std::fs::read_to_string(&from)?;
        let report: EvalReport = serde_json::from_str(&text)
            .map_err(|e| Error::config(format!("bad report json: {e}")))?;
        std::fs::write(&a.out, report.to_csv())?;
        println!("wrote {}", a.out.display());
        Ok(())
    }
}
