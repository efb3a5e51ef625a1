use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use sharp_unet::model::{DEFAULT_WIDTHS, WIDE_WIDTHS};
use sharp_unet::Connection;

mod commands;

#[derive(Parser)]
#[command(
    name = "sharp-unet",
    version,
    about = "Train and inspect U-Net segmenters with sharpening skip connections"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic segmentation dataset.
    GenData(GenDataArgs),
    /// Train one model with a hold-out validation split.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Write predicted masks as PGM images.
    Predict(PredictArgs),
    /// k-fold cross-validation.
    Cv(CvArgs),
    /// Plain vs sharp skip connections over several seeds on fold 0.
    Compare(CompareArgs),
    /// Apply the 3x3 sharpening kernel to a PGM image.
    Sharpen(SharpenArgs),
    /// Print the number of trainable parameters of a configuration.
    ParamCount(ParamCountArgs),
    /// Grad-CAM heatmap at a decoder concatenation.
    Gradcam(GradcamArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    n: usize,
    /// Square image side; must be a multiple of 16.
    #[arg(long, default_value_t = 64)]
    size: usize,
    /// Label values including background.
    #[arg(long, default_value_t = 2)]
    classes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    in_ch: usize,
    /// Boundary blur sigma in pixels.
    #[arg(long, default_value_t = 1.0)]
    blur: f64,
    #[arg(long, default_value_t = 0.05)]
    noise: f64,
    /// Draw hair-like occluding strokes.
    #[arg(long)]
    hair: bool,
    #[arg(long, default_value_t = 0.05)]
    area_min: f64,
    #[arg(long, default_value_t = 0.5)]
    area_max: f64,
}

/// Model and optimiser flags shared by the training subcommands.
#[derive(Args, Clone)]
struct FitArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_parser = parse_widths, default_value = "32,64,128,256,512")]
    widths: [usize; 5],
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    #[arg(long, default_value_t = 4)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.001)]
    lr: f64,
    #[arg(long, default_value_t = 10)]
    patience: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    fit: FitArgs,
    #[arg(long, value_enum, default_value_t = ConnectionArg::Sharp)]
    connection: ConnectionArg,
    /// Fraction of samples held out for validation; 0 validates on the
    /// training set.
    #[arg(long, default_value_t = 0.2)]
    val_fraction: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 4)]
    batch_size: usize,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Also write probability maps.
    #[arg(long)]
    probs: bool,
}

#[derive(Args)]
struct CvArgs {
    #[command(flatten)]
    fit: FitArgs,
    #[arg(long, value_enum, default_value_t = ConnectionArg::Sharp)]
    connection: ConnectionArg,
    #[arg(long, default_value_t = 5)]
    folds: usize,
    #[arg(long)]
    out: PathBuf,
    /// Train folds on separate threads.
    #[arg(long)]
    parallel: bool,
}

#[derive(Args)]
struct CompareArgs {
    #[command(flatten)]
    fit: FitArgs,
    /// Comma-separated seeds; each one fixes the split, initialisation and
    /// shuffling for both connection kinds.
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    seeds: Vec<u64>,
    #[arg(long, default_value_t = 5)]
    folds: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SharpenArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = ModeArg::Laplacian)]
    mode: ModeArg,
}

#[derive(Args)]
struct ParamCountArgs {
    #[arg(long, value_parser = parse_widths, default_value = "32,64,128,256,512")]
    widths: [usize; 5],
    #[arg(long, default_value_t = 3)]
    in_ch: usize,
    /// Output channels of the head (1 = sigmoid).
    #[arg(long, default_value_t = 1)]
    classes: usize,
    #[arg(long, value_enum, default_value_t = ConnectionArg::Plain)]
    connection: ConnectionArg,
}

#[derive(Args)]
struct GradcamArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Image as a `.tensor` file (1 x C x H x W) or a grayscale `.pgm`.
    #[arg(long)]
    image: PathBuf,
    /// Decoder concatenation, 1 (deepest) to 4 (full resolution).
    #[arg(long)]
    layer: usize,
    #[arg(long, default_value_t = 1)]
    class: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum ConnectionArg {
    Plain,
    Sharp,
}

impl From<ConnectionArg> for Connection {
    fn from(c: ConnectionArg) -> Self {
        match c {
            ConnectionArg::Plain => Connection::Plain,
            ConnectionArg::Sharp => Connection::Sharp,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Laplacian,
    Additive,
}

fn parse_widths(s: &str) -> Result<[usize; 5], String> {
    match s {
        "default" => return Ok(DEFAULT_WIDTHS),
        "wide" => return Ok(WIDE_WIDTHS),
        _ => {}
    }
    let parts = s
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("`{p}`: {e}")))
        .collect::<Result<Vec<_>, _>>()?;
    let widths: [usize; 5] = parts
        .try_into()
        .map_err(|v: Vec<usize>| format!("expected 5 widths, got {}", v.len()))?;
    if widths.contains(&0) {
        return Err("widths must be positive".into());
    }
    Ok(widths)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Predict(a) => commands::predict(a),
        Command::Cv(a) => commands::cv(a),
        Command::Compare(a) => commands::compare(a),
        Command::Sharpen(a) => commands::sharpen(a),
        Command::ParamCount(a) => commands::param_count(a),
        Command::Gradcam(a) => commands::gradcam(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
