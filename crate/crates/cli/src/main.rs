//! Command-line front end: dataset generation, surrogate and protector
//! training, image protection, evaluation, the amplitude sweep, the
//! discriminator ablation, and table rendering of result CSVs.
//!
//! Exit codes: 0 success, 1 usage error (bad flags), 2 runtime error.
//! Config precedence: flags > `--config` JSON > built-in defaults.

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use waveguard_core::dataio::{load_dataset, make_dataset, read_image, save_dataset, write_image};
use waveguard_core::harness::{
    ablate_discriminator, ablation_csv, eval_csv, evaluate, load_checkpoint, load_surrogate,
    parse_ablation_csv, parse_eval_csv, parse_sweep_csv, parse_train_log_csv, save_checkpoint,
    save_surrogate, sweep_csv, sweep_epsilon, train_log_csv, TrainConfig, TrainState,
    ABLATION_HEADER, EPSILON_GRID, EVAL_HEADER, SWEEP_HEADER, TRAIN_LOG_HEADER,
};
use waveguard_core::surrogate::train_surrogate;
use waveguard_core::tensor::Mode;
use waveguard_core::{Error, Real, Result};

/// Environment variable giving the default dataset directory for every
/// subcommand that reads or writes one.
const DATA_DIR_ENV: &str = "WAVEGUARD_DATA_DIR";

#[derive(Parser)]
#[command(
    name = "waveguard",
    version,
    about = "Wavelet-domain protective perturbations against face swapping"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic face dataset (train/val/test splits plus manifest)
    GenData(GenDataArgs),
    /// Train the face-swap surrogate and save its checkpoint
    TrainSurrogate(TrainSurrogateArgs),
    /// Train the protector against a frozen surrogate
    Train(TrainArgs),
    /// Embed the protective perturbation into PNG images
    Protect(ProtectArgs),
    /// Score a trained protector on the test split
    Evaluate(EvaluateArgs),
    /// Retrain across perturbation amplitudes and tabulate quality vs. attack success
    SweepEpsilon(SweepArgs),
    /// Train twin runs with and without the discriminator
    AblateDisc(AblateArgs),
    /// Render result CSVs as aligned text tables
    Report(ReportArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Number of faces across all splits [default: 300]
    #[arg(long, default_value_t = 300)]
    n: usize,
    /// Image side in pixels; must be a multiple of 4 [default: 64]
    #[arg(long, default_value_t = 64)]
    resolution: usize,
    /// Generation seed [default: 0]
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output dataset directory (env: WAVEGUARD_DATA_DIR)
    #[arg(long, env = DATA_DIR_ENV)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct TrainSurrogateArgs {
    /// Dataset directory (env: WAVEGUARD_DATA_DIR)
    #[arg(long, env = DATA_DIR_ENV)]
    data_dir: PathBuf,
    /// Training epochs [default: 180]
    #[arg(long, default_value_t = 180)]
    epochs: usize,
    /// Initialization and shuffling seed [default: 0]
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output checkpoint path
    #[arg(long)]
    out: PathBuf,
}

/// Training hyperparameters shared by `train`, `sweep-epsilon`, and
/// `ablate-disc`. Every flag overrides the matching field of the optional
/// JSON config, which in turn overrides the built-in default.
#[derive(Args)]
struct ConfigFlags {
    /// JSON config file mirroring the training config
    #[arg(long)]
    config: Option<PathBuf>,
    /// Learning rate [default: 0.0001]
    #[arg(long)]
    lr: Option<f64>,
    /// Perturbation amplitude bound [default: 0.05]
    #[arg(long)]
    epsilon: Option<f64>,
    /// Reconstruction loss weight [default: 5.0]
    #[arg(long)]
    lambda_rec: Option<f64>,
    /// Adversarial loss weight [default: 0.05]
    #[arg(long)]
    lambda_adv: Option<f64>,
    /// Swap-distortion loss weight [default: 1.0]
    #[arg(long)]
    lambda_swap: Option<f64>,
    /// Training epochs [default: 30]
    #[arg(long)]
    epochs: Option<usize>,
    /// Batch size [default: 8]
    #[arg(long)]
    batch: Option<usize>,
    /// Initialization and shuffling seed [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Train without the discriminator [default: discriminator on]
    #[arg(long)]
    no_discriminator: bool,
}

impl ConfigFlags {
    fn resolve(&self) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(path) => serde_json::from_slice::<TrainConfig>(&fs::read(path)?)?,
            None => TrainConfig::default(),
        };
        if let Some(v) = self.lr {
            cfg.lr = v;
        }
        if let Some(v) = self.epsilon {
            cfg.epsilon = v;
        }
        if let Some(v) = self.lambda_rec {
            cfg.weights.lambda_rec = v;
        }
        if let Some(v) = self.lambda_adv {
            cfg.weights.lambda_adv = v;
        }
        if let Some(v) = self.lambda_swap {
            cfg.weights.lambda_swap = v;
        }
        if let Some(v) = self.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = self.batch {
            cfg.batch = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if self.no_discriminator {
            cfg.discriminator = false;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory (env: WAVEGUARD_DATA_DIR)
    #[arg(long, env = DATA_DIR_ENV)]
    data_dir: PathBuf,
    /// Trained surrogate checkpoint
    #[arg(long)]
    surrogate: PathBuf,
    #[command(flatten)]
    flags: ConfigFlags,
    /// Output protector checkpoint path
    #[arg(long)]
    out: PathBuf,
    /// Optional training-log CSV path
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct ProtectArgs {
    /// Protector checkpoint
    #[arg(long)]
    model: PathBuf,
    /// Input PNG file, or directory of PNGs
    #[arg(long)]
    input: PathBuf,
    /// Output PNG file, or directory (mirrors the input kind)
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Protector checkpoint
    #[arg(long)]
    model: PathBuf,
    /// Trained surrogate checkpoint
    #[arg(long)]
    surrogate: PathBuf,
    /// Dataset directory (env: WAVEGUARD_DATA_DIR)
    #[arg(long, env = DATA_DIR_ENV)]
    data_dir: PathBuf,
    /// Output per-image CSV path
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    /// Dataset directory (env: WAVEGUARD_DATA_DIR)
    #[arg(long, env = DATA_DIR_ENV)]
    data_dir: PathBuf,
    /// Trained surrogate checkpoint
    #[arg(long)]
    surrogate: PathBuf,
    #[command(flatten)]
    flags: ConfigFlags,
    /// Amplitudes to retrain at [default: 0.01,0.02,0.03,0.04,0.05,0.06]
    #[arg(long, value_delimiter = ',')]
    grid: Option<Vec<f64>>,
    /// Seeds to average over [default: the config seed]
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Output CSV path
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    /// Dataset directory (env: WAVEGUARD_DATA_DIR)
    #[arg(long, env = DATA_DIR_ENV)]
    data_dir: PathBuf,
    /// Trained surrogate checkpoint
    #[arg(long)]
    surrogate: PathBuf,
    #[command(flatten)]
    flags: ConfigFlags,
    /// Output CSV path
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// Result CSVs (training log, evaluation, sweep, or ablation)
    #[arg(required = true)]
    files: Vec<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // --help and --version arrive as "errors" but are successes
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::GenData(a) => gen_data(a),
        Command::TrainSurrogate(a) => train_surrogate_cmd(a),
        Command::Train(a) => train_cmd(a),
        Command::Protect(a) => protect_cmd(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::SweepEpsilon(a) => sweep_cmd(a),
        Command::AblateDisc(a) => ablate_cmd(a),
        Command::Report(a) => report_cmd(a),
    }
}

/// Write through a sibling temp file so failures leave no partial output.
fn write_text(path: &Path, text: &str) -> Result<()> {
    let name = path
        .file_name()
        .ok_or_else(|| Error::invalid(format!("output path {} has no file name", path.display())))?
        .to_string_lossy()
        .into_owned();
    let tmp = path.with_file_name(format!("{name}.tmp"));
    fs::write(&tmp, text)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let splits = make_dataset(a.n, a.resolution, a.seed)?;
    // stage the whole directory, then swap it into place
    let staged = a.out_dir.with_extension("tmp");
    if staged.exists() {
        fs::remove_dir_all(&staged)?;
    }
    save_dataset(&staged, &splits)?;
    if a.out_dir.exists() {
        if !a.out_dir.join("manifest.json").exists() {
            return Err(Error::invalid(format!(
                "{} exists and does not look like a dataset directory; refusing to replace it",
                a.out_dir.display()
            )));
        }
        fs::remove_dir_all(&a.out_dir)?;
    }
    fs::rename(&staged, &a.out_dir)?;
    println!(
        "wrote {} images at {}x{} to {} (id {})",
        a.n,
        a.resolution,
        a.resolution,
        a.out_dir.display(),
        splits.dataset_id
    );
    Ok(())
}

fn train_surrogate_cmd(a: TrainSurrogateArgs) -> Result<()> {
    let splits = load_dataset(&a.data_dir)?;
    let (model, losses) = train_surrogate::<Real>(&splits.train, a.epochs, a.seed)?;
    save_surrogate(&model, a.seed, &a.out)?;
    if let (Some(first), Some(last)) = (losses.first(), losses.last()) {
        println!("surrogate loss {first:.5} -> {last:.5} over {} epochs", losses.len());
    }
    println!("saved surrogate to {}", a.out.display());
    Ok(())
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let cfg = a.flags.resolve()?;
    let splits = load_dataset(&a.data_dir)?;
    let surrogate = load_surrogate::<Real>(&a.surrogate)?;
    let mut state = waveguard_core::harness::init_train_state::<Real>(&cfg)?;
    let log = waveguard_core::harness::run_training(&mut state, &surrogate, &splits.train)?;
    for e in &log {
        println!(
            "epoch {:>3}  rec {:.5}  adv {:.5}  swap {:.5}  total {:.5}",
            e.epoch, e.rec, e.adv, e.swap, e.total
        );
    }
    save_checkpoint(&state, &a.out)?;
    if let Some(log_path) = &a.log {
        write_text(log_path, &train_log_csv(&log))?;
    }
    println!("saved protector to {}", a.out.display());
    Ok(())
}

fn load_protector(path: &Path) -> Result<TrainState<Real>> {
    load_checkpoint::<Real>(path)
}

fn protect_one(state: &TrainState<Real>, input: &Path, out: &Path) -> Result<()> {
    let img = read_image(input)?;
    let x_t = img.to_tensor::<Real>();
    let x_p = state.model.protect(&x_t, Mode::Eval)?;
    let protected = waveguard_core::dataio::Image::from_tensor(&x_p, 0)?;
    let name = out
        .file_name()
        .ok_or_else(|| Error::invalid(format!("output path {} has no file name", out.display())))?
        .to_string_lossy()
        .into_owned();
    let tmp = out.with_file_name(format!("{name}.tmp.png"));
    write_image(&tmp, &protected)?;
    fs::rename(&tmp, out)?;
    Ok(())
}

fn protect_cmd(a: ProtectArgs) -> Result<()> {
    let state = load_protector(&a.model)?;
    if a.input.is_dir() {
        let mut inputs: Vec<PathBuf> = fs::read_dir(&a.input)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
            .collect();
        inputs.sort();
        if inputs.is_empty() {
            return Err(Error::invalid(format!("no PNG files in {}", a.input.display())));
        }
        fs::create_dir_all(&a.out)?;
        for input in &inputs {
            let name = input.file_name().expect("filtered paths have names");
            protect_one(&state, input, &a.out.join(name))?;
        }
        println!("protected {} images into {}", inputs.len(), a.out.display());
    } else {
        protect_one(&state, &a.input, &a.out)?;
        println!("protected {} -> {}", a.input.display(), a.out.display());
    }
    Ok(())
}

fn evaluate_cmd(a: EvaluateArgs) -> Result<()> {
    let state = load_protector(&a.model)?;
    let surrogate = load_surrogate::<Real>(&a.surrogate)?;
    let splits = load_dataset(&a.data_dir)?;
    let report = evaluate(&state.model, &surrogate, &splits.test)?;
    write_text(&a.out, &eval_csv(&report))?;
    println!(
        "epsilon {}  PSNR {:.2}  SSIM {:.4}  ASR {:.3}  over {} pairs",
        report.epsilon,
        report.mean_psnr(),
        report.mean_ssim(),
        report.asr(),
        report.records.len()
    );
    println!("wrote {}", a.out.display());
    Ok(())
}

fn sweep_cmd(a: SweepArgs) -> Result<()> {
    let cfg = a.flags.resolve()?;
    let splits = load_dataset(&a.data_dir)?;
    let surrogate = load_surrogate::<Real>(&a.surrogate)?;
    let grid = a.grid.unwrap_or_else(|| EPSILON_GRID.to_vec());
    let seeds = a.seeds.unwrap_or_else(|| vec![cfg.seed]);
    let rows = sweep_epsilon(&cfg, &grid, &seeds, &surrogate, &splits)?;
    write_text(&a.out, &sweep_csv(&rows))?;
    for r in &rows {
        println!(
            "epsilon {:.3}  PSNR {:.2}  SSIM {:.4}  ASR {:.3}",
            r.epsilon, r.psnr, r.ssim, r.asr
        );
    }
    println!("wrote {}", a.out.display());
    Ok(())
}

fn ablate_cmd(a: AblateArgs) -> Result<()> {
    let cfg = a.flags.resolve()?;
    let splits = load_dataset(&a.data_dir)?;
    let surrogate = load_surrogate::<Real>(&a.surrogate)?;
    let rows = ablate_discriminator(&cfg, &surrogate, &splits)?;
    write_text(&a.out, &ablation_csv(&rows))?;
    for r in &rows {
        println!(
            "discriminator {:>5}  PSNR {:.2}  SSIM {:.4}  ASR {:.3}",
            r.discriminator, r.psnr, r.ssim, r.asr
        );
    }
    println!("wrote {}", a.out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// report rendering
// ---------------------------------------------------------------------------

fn render_table(headers: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = headers.iter().map(|h| h.len()).collect();
    for row in rows {
        for (i, cell) in row.iter().enumerate() {
            widths[i] = widths[i].max(cell.len());
        }
    }
    let mut out = String::new();
    let line = |cells: &[String], out: &mut String| {
        for (i, cell) in cells.iter().enumerate() {
            if i > 0 {
                out.push_str("  ");
            }
            out.push_str(&format!("{cell:>width$}", width = widths[i]));
        }
        out.push('\n');
    };
    line(&headers.iter().map(|h| h.to_string()).collect::<Vec<_>>(), &mut out);
    line(
        &widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>(),
        &mut out,
    );
    for row in rows {
        line(row, &mut out);
    }
    out
}

fn render_report(text: &str) -> Result<String> {
    let header = text.lines().next().unwrap_or("");
    match header {
        TRAIN_LOG_HEADER => {
            let log = parse_train_log_csv(text)?;
            let rows = log
                .iter()
                .map(|e| {
                    vec![
                        e.epoch.to_string(),
                        format!("{:.5}", e.rec),
                        format!("{:.5}", e.adv),
                        format!("{:.5}", e.swap),
                        format!("{:.5}", e.total),
                    ]
                })
                .collect::<Vec<_>>();
            Ok(render_table(&["epoch", "rec", "adv", "swap", "total"], &rows))
        }
        EVAL_HEADER => {
            let records = parse_eval_csv(text)?;
            let n = records.len().max(1) as f64;
            let psnr = records.iter().map(|r| r.psnr).sum::<f64>() / n;
            let ssim = records.iter().map(|r| r.ssim).sum::<f64>() / n;
            let asr = records.iter().filter(|r| r.success).count() as f64 / n;
            let summary = render_table(
                &["PSNR", "SSIM", "ASR"],
                &[vec![format!("{psnr:.2}"), format!("{ssim:.4}"), format!("{asr:.3}")]],
            );
            let rows = records
                .iter()
                .map(|r| {
                    vec![
                        r.index.to_string(),
                        format!("{:.2}", r.psnr),
                        format!("{:.4}", r.ssim),
                        format!("{:.4}", r.l1_dist),
                        r.success.to_string(),
                    ]
                })
                .collect::<Vec<_>>();
            let detail = render_table(&["index", "PSNR", "SSIM", "L1", "success"], &rows);
            Ok(format!("{summary}\n{detail}"))
        }
        SWEEP_HEADER => {
            let rows = parse_sweep_csv(text)?
                .iter()
                .map(|r| {
                    vec![
                        format!("{:.3}", r.epsilon),
                        format!("{:.2}", r.psnr),
                        format!("{:.4}", r.ssim),
                        format!("{:.3}", r.asr),
                    ]
                })
                .collect::<Vec<_>>();
            Ok(render_table(&["epsilon", "PSNR", "SSIM", "ASR"], &rows))
        }
        ABLATION_HEADER => {
            let rows = parse_ablation_csv(text)?
                .iter()
                .map(|r| {
                    vec![
                        r.discriminator.to_string(),
                        format!("{:.2}", r.psnr),
                        format!("{:.4}", r.ssim),
                        format!("{:.3}", r.asr),
                    ]
                })
                .collect::<Vec<_>>();
            Ok(render_table(&["discriminator", "PSNR", "SSIM", "ASR"], &rows))
        }
        other => Err(Error::Report(format!("unrecognized CSV header '{other}'"))),
    }
}

fn report_cmd(a: ReportArgs) -> Result<()> {
    for (i, path) in a.files.iter().enumerate() {
        let text = fs::read_to_string(path)?;
        if i > 0 {
            println!();
        }
        println!("{}", path.display());
        print!("{}", render_report(&text)?);
    }
    Ok(())
}
