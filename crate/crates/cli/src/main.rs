//! `dds`: generate synthetic data, train and evaluate gated reconstruction
//! models, run the ablation suite, verify gradients and export masks.
//!
//! Exit codes: 0 success, 1 failed check, 2 usage or configuration error,
//! 3 numerical abort.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use dds_core::gradcheck::{run_suite, GradcheckError, SuiteOptions, TOLERANCE};
use dds_core::synthdata::{
    self, overlap_from_mask, write_pgm, DataError, NoiseKind, Pattern, Split, SynthSpec,
};
use dds_core::tensor::OP_NAMES;
use dds_core::trainer::{
    ablation_suite, evaluate, infer_masks, jsonl_string, records_csv, train, write_jsonl,
    write_timings, ExperimentConfig, Nets, TrainError,
};

use config::{config_toml, Overrides};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("i/o error on {path}: {message}")]
    Io { path: String, message: String },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Gradcheck(#[from] GradcheckError),
    #[error("{0}")]
    CheckFailed(String),
}

impl CliError {
    pub fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        }
    }

    fn exit_code(&self) -> u8 {
        match self {
            CliError::CheckFailed(_) => 1,
            CliError::Train(e) if e.is_numerical() => 3,
            _ => 2,
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "dds",
    version,
    about = "Dynamic per-instance feature selection experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset file
    Gen(GenArgs),
    /// Train one model and write metrics and a checkpoint
    Train(TrainArgs),
    /// Evaluate a checkpoint in one eval mode
    Eval(EvalArgs),
    /// Train every mode at every budget and write the consolidated table
    Ablate(AblateArgs),
    /// Compare reverse-mode gradients with finite differences
    Gradcheck(GradcheckArgs),
    /// Export input, score and mask images and report mask overlap
    Mask(MaskArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum PatternArg {
    Blob,
    Bar,
    Glyph,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum NoiseArg {
    Uniform,
    SaltPepper,
    StructuredClutter,
}

#[derive(Debug, Args)]
struct GenArgs {
    /// Image height and width
    #[arg(long, default_value_t = 16)]
    size: usize,
    #[arg(long, default_value_t = 1)]
    channels: usize,
    /// Informative pixels per image
    #[arg(long, default_value_t = 24)]
    signal: usize,
    #[arg(long, value_enum, default_value_t = PatternArg::Blob)]
    pattern: PatternArg,
    #[arg(long, value_enum, default_value_t = NoiseArg::Uniform)]
    noise: NoiseArg,
    /// Background noise amplitude
    #[arg(long, default_value_t = 0.1)]
    noise_amplitude: f64,
    /// Peak signal intensity
    #[arg(long, default_value_t = 1.0)]
    intensity: f64,
    /// Per-pixel relative variation of the signal intensity
    #[arg(long, default_value_t = 0.5)]
    jitter: f64,
    #[arg(long, default_value_t = 256)]
    n_train: usize,
    #[arg(long, default_value_t = 64)]
    n_test: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output dataset file
    #[arg(long)]
    out: PathBuf,
    /// Also write this many image/truth PGM pairs into the directory
    #[arg(long, value_name = "DIR")]
    pgm: Option<PathBuf>,
    #[arg(long, default_value_t = 8, requires = "pgm")]
    pgm_count: usize,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Dataset file
    #[arg(long)]
    data: PathBuf,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint; its architecture comes from --config or from
    /// config.toml next to it
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    split: SplitArg,
    /// Also write the record to this JSON-lines file
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Debug, Args)]
struct AblateArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    /// First seed
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of consecutive seeds
    #[arg(long, default_value_t = 1)]
    seeds: u64,
    /// Parameter entries probed per composition case
    #[arg(long, default_value_t = 48)]
    probes: usize,
    /// Break the backward rule of this op (negative control)
    #[arg(long, hide = true, value_parser = parse_op)]
    corrupt: Option<&'static str>,
}

fn parse_op(s: &str) -> Result<&'static str, String> {
    OP_NAMES
        .iter()
        .copied()
        .find(|&op| op == s)
        .ok_or_else(|| format!("unknown op {s:?}; expected one of {}", OP_NAMES.join(", ")))
}

#[derive(Debug, Args)]
struct MaskArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    /// Output directory for the PGM files
    #[arg(long)]
    out: PathBuf,
    /// Images to export
    #[arg(long, default_value_t = 8)]
    count: usize,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    split: SplitArg,
    #[command(flatten)]
    overrides: Overrides,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => e.exit(),
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::Gen(a) => cmd_gen(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Mask(a) => cmd_mask(a),
    }
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn write_file(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn cmd_gen(a: GenArgs) -> Result<(), CliError> {
    let spec = SynthSpec {
        image_size: a.size,
        channels: a.channels,
        signal_pixels: a.signal,
        signal_pattern: match a.pattern {
            PatternArg::Blob => Pattern::Blob,
            PatternArg::Bar => Pattern::Bar,
            PatternArg::Glyph => Pattern::Glyph,
        },
        noise_kind: match a.noise {
            NoiseArg::Uniform => NoiseKind::Uniform,
            NoiseArg::SaltPepper => NoiseKind::SaltPepper,
            NoiseArg::StructuredClutter => NoiseKind::StructuredClutter,
        },
        noise_amplitude: a.noise_amplitude,
        signal_intensity: a.intensity,
        signal_jitter: a.jitter,
        n_train: a.n_train,
        n_test: a.n_test,
    };
    let ds = synthdata::generate(&spec, a.seed)?;
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    synthdata::save(&ds, &a.out)?;
    if let Some(dir) = &a.pgm {
        synthdata::export_pgm(&ds, dir, a.pgm_count)?;
    }
    println!(
        "wrote {}: N={} (train {}, test {}), F={}, shape {:?}, signal pixels {}",
        a.out.display(),
        ds.len(),
        ds.split_len(Split::Train),
        ds.split_len(Split::Test),
        ds.features(),
        ds.instance_shape(),
        ds.signal_pixels
    );
    Ok(())
}

/// Validates the config against the data and echoes it to `out`.
fn prepare(cfg: &ExperimentConfig, ds: &synthdata::Dataset, out: &Path) -> Result<(), CliError> {
    cfg.validate(&ds.instance_shape())?;
    create_dir(out)?;
    let text = config_toml(cfg)?;
    write_file(&out.join("config.toml"), &text)?;
    println!("resolved config:\n{text}");
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<(), CliError> {
    let ds = synthdata::load(&a.data)?;
    let cfg = a.overrides.resolve(None)?;
    prepare(&cfg, &ds, &a.out)?;
    let outcome = train(&cfg, &ds)?;
    write_jsonl(a.out.join("metrics.jsonl"), &outcome.records)?;
    write_file(&a.out.join("metrics.csv"), &records_csv(&outcome.records))?;
    write_timings(a.out.join("timings.csv"), &outcome.records)?;
    outcome.nets.save(a.out.join("model.dds1"))?;
    let last = outcome.final_test();
    print!("final test: {}", jsonl_string(std::slice::from_ref(last)));
    if !outcome.audit.is_clean() {
        return Err(CliError::CheckFailed(format!(
            "training audit failed: {:?}",
            outcome.audit
        )));
    }
    Ok(())
}

fn load_nets(
    overrides: &Overrides,
    ckpt: &Path,
    ds: &synthdata::Dataset,
) -> Result<(ExperimentConfig, Nets), CliError> {
    let sibling = ckpt.parent().map(|p| p.join("config.toml"));
    let trained = Overrides {
        mode: None,
        ..overrides.clone()
    }
    .resolve(sibling.as_deref())?;
    let mut nets = Nets::build(&trained, &ds.instance_shape())?;
    nets.load(ckpt)?;
    let cfg = overrides.resolve(sibling.as_deref())?;
    cfg.validate(&ds.instance_shape())?;
    Ok((cfg, nets))
}

fn cmd_eval(a: EvalArgs) -> Result<(), CliError> {
    let ds = synthdata::load(&a.data)?;
    let (cfg, nets) = load_nets(&a.overrides, &a.ckpt, &ds)?;
    let record = evaluate(&nets, &ds, a.split.into(), cfg.eval_mode, &cfg.gate, 0)?;
    let line = jsonl_string(std::slice::from_ref(&record));
    print!("{line}");
    if let Some(path) = &a.out {
        write_file(path, &line)?;
    }
    Ok(())
}

fn cmd_ablate(a: AblateArgs) -> Result<(), CliError> {
    let ds = synthdata::load(&a.data)?;
    let cfg = a.overrides.resolve(None)?;
    for m in cfg.sweep() {
        ExperimentConfig {
            gate: dds_core::GateConfig { m, ..cfg.gate },
            ..cfg.clone()
        }
        .validate(&ds.instance_shape())?;
    }
    prepare(&cfg, &ds, &a.out)?;
    let outcome = ablation_suite(&cfg, &ds)?;
    write_jsonl(a.out.join("metrics.jsonl"), &outcome.records)?;
    write_timings(a.out.join("timings.csv"), &outcome.records)?;
    outcome.table.write_csv(a.out.join("ablation.csv"))?;
    print!("{}", outcome.table.to_csv());
    Ok(())
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<(), CliError> {
    let options = SuiteOptions {
        seeds: a.seeds,
        param_probes: a.probes,
    };
    let report = run_suite(a.seed, options, a.corrupt)?;
    let worst = report.worst();
    println!(
        "gradcheck: {} cases, {} entries, {} kinks skipped, masked-input gradient violations {}",
        report.cases.len(),
        report.checked(),
        report.kinks(),
        report.zero_grad_violations()
    );
    println!(
        "max relative error {:.3e} ({}), tolerance {TOLERANCE:.0e}",
        report.max_rel_err(),
        worst.map(|c| c.name.as_str()).unwrap_or("-")
    );
    for case in report.cases.iter().filter(|c| !c.passed(TOLERANCE)) {
        println!(
            "  FAIL {}: rel err {:.3e} at {:?}",
            case.name, case.max_rel_err, case.worst
        );
    }
    if report.passed(TOLERANCE) {
        Ok(())
    } else {
        Err(CliError::CheckFailed(format!(
            "max relative error {:.3e} exceeds {TOLERANCE:.0e}",
            report.max_rel_err()
        )))
    }
}

/// Mean over the first axis of a `[k, H, W]` slab.
fn channel_mean(data: &[f64], k: usize, plane: usize) -> Vec<f64> {
    (0..plane)
        .map(|p| (0..k).map(|c| data[c * plane + p]).sum::<f64>() / k as f64)
        .collect()
}

fn cmd_mask(a: MaskArgs) -> Result<(), CliError> {
    let ds = synthdata::load(&a.data)?;
    let (cfg, nets) = load_nets(&a.overrides, &a.ckpt, &ds)?;
    if nets.selector.is_none() {
        return Err(CliError::Config(
            "checkpoint has no selector (naive_ae)".into(),
        ));
    }
    let split: Split = a.split.into();
    let images = ds.split_images(split);
    let (scores, mask) = infer_masks(&nets, &images, &cfg.gate)?;
    let n = images.shape()[0];
    let (c, h, w) = (images.shape()[1], images.shape()[2], images.shape()[3]);
    let k = scores.shape()[1];
    let plane = h * w;
    let rows = mask
        .clone()
        .reshaped(vec![n, k * plane])
        .map_err(DataError::from)?;
    let overlap = overlap_from_mask(&rows, &ds.split_relevance(split))?;

    create_dir(&a.out)?;
    let count = a.count.min(n);
    for i in 0..count {
        let img = &images.data()[i * c * plane..(i + 1) * c * plane];
        let sc = &scores.data()[i * k * plane..(i + 1) * k * plane];
        let mk = &mask.data()[i * k * plane..(i + 1) * k * plane];
        write_pgm(
            a.out.join(format!("{i:04}_input.pgm")),
            w,
            h,
            &channel_mean(img, c, plane),
        )?;
        write_pgm(
            a.out.join(format!("{i:04}_scores.pgm")),
            w,
            h,
            &channel_mean(sc, k, plane),
        )?;
        write_pgm(
            a.out.join(format!("{i:04}_mask.pgm")),
            w,
            h,
            &channel_mean(mk, k, plane),
        )?;
    }
    println!(
        "wrote {} image triplets to {}; M={} of F={}",
        count,
        a.out.display(),
        cfg.gate.m,
        k * plane
    );
    println!(
        "mean mask_overlap {overlap:.4} over {n} {} images (random baseline M/F {:.4})",
        split.as_str(),
        cfg.gate.m as f64 / (k * plane) as f64
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use dds_core::trainer::EvalMode;

    #[test]
    fn command_line_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }

    #[test]
    fn exit_codes() {
        assert_eq!(CliError::CheckFailed("x".into()).exit_code(), 1);
        assert_eq!(CliError::Config("x".into()).exit_code(), 2);
        let nan = TrainError::NonFiniteLoss {
            epoch: 1,
            batch: 0,
            mode: EvalMode::Dds,
            loss: f64::NAN,
        };
        assert_eq!(CliError::Train(nan).exit_code(), 3);
        assert_eq!(
            CliError::Train(TrainError::Config("x".into())).exit_code(),
            2
        );
    }
}
