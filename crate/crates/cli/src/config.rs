use std::path::{Path, PathBuf};

use clap::Args;
use dds_core::nets::Granularity;
use dds_core::trainer::{EvalMode, ExperimentConfig};

use crate::CliError;

/// Experiment settings shared by `train`, `eval`, `ablate` and `mask`.
///
/// Values come from the config file when one is given, then from these
/// flags, which take precedence.
#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    /// TOML experiment config; unknown keys are rejected
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Eval mode (training variant for `train`)
    #[arg(long, value_parser = parse_mode)]
    pub mode: Option<EvalMode>,
    /// Feature budget M
    #[arg(long)]
    pub m: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Adam learning rate
    #[arg(long)]
    pub lr: Option<f64>,
    /// Selector learning rate as a multiple of --lr
    #[arg(long)]
    pub selector_lr_scale: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Logistic noise scale of the gate during training
    #[arg(long)]
    pub kappa: Option<f64>,
    /// Probability of lifting the budget to all features during training
    #[arg(long)]
    pub epsilon: Option<f64>,
    /// Width of the selector
    #[arg(long)]
    pub selector_channels: Option<usize>,
    /// Width of the reconstructor
    #[arg(long)]
    pub reconstructor_channels: Option<usize>,
    /// Dense bottleneck of the gated reconstructor
    #[arg(long)]
    pub latent_dim: Option<usize>,
    /// Score per pixel or per pixel and channel
    #[arg(long, value_parser = parse_granularity)]
    pub granularity: Option<Granularity>,
    /// Gated-arm epochs relative to the naive autoencoder in `ablate`
    #[arg(long)]
    pub dds_epoch_factor: Option<usize>,
    /// Comma-separated budgets swept by `ablate`
    #[arg(long, value_delimiter = ',')]
    pub m_sweep: Option<Vec<usize>>,
    /// Comma-separated modes run by `ablate`
    #[arg(long, value_delimiter = ',', value_parser = parse_mode)]
    pub modes: Option<Vec<EvalMode>>,
}

fn parse_mode(s: &str) -> Result<EvalMode, String> {
    s.parse::<EvalMode>().map_err(|e| {
        let names: Vec<&str> = EvalMode::ALL.iter().map(|m| m.as_str()).collect();
        format!("{e}; expected one of {}", names.join(", "))
    })
}

fn parse_granularity(s: &str) -> Result<Granularity, String> {
    match s {
        "pixel" => Ok(Granularity::Pixel),
        "feature" => Ok(Granularity::Feature),
        other => Err(format!(
            "unknown granularity {other:?}; expected pixel or feature"
        )),
    }
}

pub fn read_config(path: &Path) -> Result<ExperimentConfig, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

pub fn config_toml(cfg: &ExperimentConfig) -> Result<String, CliError> {
    toml::to_string(cfg).map_err(|e| CliError::Config(format!("cannot serialise config: {e}")))
}

impl Overrides {
    /// Config file (or `fallback` when no `--config` is given and the file
    /// exists, else the defaults) with every flag applied.
    pub fn resolve(&self, fallback: Option<&Path>) -> Result<ExperimentConfig, CliError> {
        let mut cfg = match (&self.config, fallback) {
            (Some(p), _) => read_config(p)?,
            (None, Some(p)) if p.exists() => read_config(p)?,
            _ => ExperimentConfig::default(),
        };
        if let Some(v) = self.mode {
            cfg.eval_mode = v;
        }
        if let Some(v) = self.m {
            cfg.gate.m = v;
        }
        if let Some(v) = self.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = self.lr {
            cfg.optimizer.lr = v;
        }
        if let Some(v) = self.selector_lr_scale {
            cfg.selector_lr_scale = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.kappa {
            cfg.gate.kappa = v;
        }
        if let Some(v) = self.epsilon {
            cfg.gate.epsilon = v;
        }
        if let Some(v) = self.selector_channels {
            cfg.selector.channels = v;
        }
        if let Some(v) = self.reconstructor_channels {
            cfg.reconstructor.channels = v;
        }
        if let Some(v) = self.latent_dim {
            cfg.reconstructor.latent_dim = v;
        }
        if let Some(v) = self.granularity {
            cfg.selector.granularity = v;
        }
        if let Some(v) = self.dds_epoch_factor {
            cfg.dds_epoch_factor = v;
        }
        if let Some(v) = &self.m_sweep {
            cfg.m_sweep = v.clone();
        }
        if let Some(v) = &self.modes {
            cfg.ablation_modes = v.clone();
        }
        Ok(cfg)
    }
}
