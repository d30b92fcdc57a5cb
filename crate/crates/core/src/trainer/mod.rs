//! Training and evaluation of the gated reconstruction pipeline, the
//! baseline autoencoder and every ablation variant, plus metrics output.

mod ablation;
mod metrics;
pub mod pipeline;

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use ablation::{ablation_suite, AblationOutcome, ArmResult};
pub use metrics::{
    jsonl_string, read_jsonl, records_csv, write_jsonl, write_timings, AblationRow, AblationTable,
    MetricsRecord, RECORD_CSV_HEADER,
};

use crate::gating::{apply_gate, dynamic_m, GateConfig, GateError, GateMode};
use crate::nets::{
    build_reconstructor, build_selector, load_checkpoint, save_checkpoint, Adam, AdamConfig,
    CheckpointError, Granularity, NetError, Network,
};
use crate::synthdata::{overlap_from_mask, DataError, Dataset, Split};
use crate::tensor::{Tape, Tensor, TensorError, Var};
use pipeline::{dds_forward, gate_scores, mask_for, Bound, GateNoise, Gating, MaskSource};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TrainError {
    #[error("non-finite loss {loss} at epoch {epoch}, batch {batch} (mode {mode})")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        mode: EvalMode,
        loss: f64,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("unknown eval mode {0:?}")]
    UnknownMode(String),
    #[error("i/o error on {path}: {message}")]
    Io { path: String, message: String },
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Gate(#[from] GateError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

impl TrainError {
    /// True for failures caused by NaN or infinite values during training.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            TrainError::NonFiniteLoss { .. } | TrainError::Net(NetError::NonFiniteGradient(_))
        )
    }
}

/// Training variant and evaluation behaviour of an experiment arm.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    /// Full method.
    Dds,
    /// Autoencoder with a latent of size M and no selection.
    NaiveAe,
    /// Selector and reconstructor without residual links.
    NoResidual,
    /// Stretch interval (-0.1, 1.1).
    HardSigmoid,
    /// Noise scale 1.
    ClassicConcrete,
    /// Noise scale 0.
    NoConcrete,
    /// Budget never lifted (epsilon = 0).
    NoDynamicM,
    /// Trained as `Dds`, evaluated on the unmasked input.
    DdsTrainOnly,
    /// Trained as `Dds`, evaluated with every score and mask entry set to 1.
    ForcedAllOnes,
    /// Trained as `Dds`, evaluated with the mask kept and selected scores set to 1.
    ForcedUniformImportance,
}

impl EvalMode {
    pub const ALL: [EvalMode; 10] = [
        EvalMode::Dds,
        EvalMode::NaiveAe,
        EvalMode::NoResidual,
        EvalMode::HardSigmoid,
        EvalMode::ClassicConcrete,
        EvalMode::NoConcrete,
        EvalMode::NoDynamicM,
        EvalMode::DdsTrainOnly,
        EvalMode::ForcedAllOnes,
        EvalMode::ForcedUniformImportance,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EvalMode::Dds => "dds",
            EvalMode::NaiveAe => "naive_ae",
            EvalMode::NoResidual => "no_residual",
            EvalMode::HardSigmoid => "hard_sigmoid",
            EvalMode::ClassicConcrete => "classic_concrete",
            EvalMode::NoConcrete => "no_concrete",
            EvalMode::NoDynamicM => "no_dynamic_m",
            EvalMode::DdsTrainOnly => "dds_train_only",
            EvalMode::ForcedAllOnes => "forced_all_ones",
            EvalMode::ForcedUniformImportance => "forced_uniform_importance",
        }
    }

    /// Modes that only change evaluation of a `Dds`-trained model.
    pub fn is_eval_only(self) -> bool {
        matches!(
            self,
            EvalMode::DdsTrainOnly | EvalMode::ForcedAllOnes | EvalMode::ForcedUniformImportance
        )
    }

    /// The variant actually trained for this mode.
    pub fn training_variant(self) -> EvalMode {
        if self.is_eval_only() {
            EvalMode::Dds
        } else {
            self
        }
    }

    pub fn uses_selector(self) -> bool {
        self != EvalMode::NaiveAe
    }

    /// Gate configuration of this variant derived from the base one.
    pub fn gate_config(self, base: &GateConfig<f64>) -> GateConfig<f64> {
        match self {
            EvalMode::HardSigmoid => base.with_classic_stretch(),
            EvalMode::ClassicConcrete => GateConfig {
                kappa: 1.0,
                ..*base
            },
            EvalMode::NoConcrete => GateConfig {
                kappa: 0.0,
                ..*base
            },
            EvalMode::NoDynamicM => GateConfig {
                epsilon: 0.0,
                ..*base
            },
            _ => *base,
        }
    }
}

impl fmt::Display for EvalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EvalMode {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        EvalMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| TrainError::UnknownMode(s.to_owned()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SelectorSpec {
    pub channels: usize,
    pub granularity: Granularity,
}

impl Default for SelectorSpec {
    fn default() -> Self {
        Self {
            channels: 8,
            granularity: Granularity::Pixel,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReconstructorSpec {
    pub channels: usize,
    /// Dense bottleneck width of the gated arms. The naive autoencoder uses
    /// M instead.
    pub latent_dim: usize,
    /// Encoder-to-decoder skip links in the gated arms.
    pub skips: bool,
}

impl Default for ReconstructorSpec {
    fn default() -> Self {
        Self {
            channels: 8,
            latent_dim: 32,
            skips: true,
        }
    }
}

/// Everything that determines a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub gate: GateConfig<f64>,
    pub selector: SelectorSpec,
    pub reconstructor: ReconstructorSpec,
    pub optimizer: AdamConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub eval_mode: EvalMode,
    /// Check the masked-input gradient every this many batches (0: never).
    pub audit_every: usize,
    /// Training epochs of the gated arms relative to the naive autoencoder
    /// in an ablation.
    pub dds_epoch_factor: usize,
    /// Selector learning rate as a multiple of `optimizer.lr`.
    pub selector_lr_scale: f64,
    /// Budgets swept by an ablation; empty means just `gate.m`.
    pub m_sweep: Vec<usize>,
    /// Modes run by an ablation; empty means all.
    pub ablation_modes: Vec<EvalMode>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            gate: GateConfig::train(24),
            selector: SelectorSpec::default(),
            reconstructor: ReconstructorSpec::default(),
            optimizer: AdamConfig::default(),
            epochs: 20,
            batch_size: 32,
            seed: 0,
            eval_mode: EvalMode::Dds,
            audit_every: 5,
            dds_epoch_factor: 2,
            selector_lr_scale: 1.0,
            m_sweep: Vec::new(),
            ablation_modes: Vec::new(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self, instance_shape: &[usize]) -> Result<(), TrainError> {
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be positive".into()));
        }
        if self.dds_epoch_factor == 0 {
            return Err(TrainError::Config(
                "dds_epoch_factor must be positive".into(),
            ));
        }
        if !(self.optimizer.lr >= 0.0 && self.optimizer.lr.is_finite()) {
            return Err(TrainError::Config(format!(
                "learning rate must be finite and non-negative, got {}",
                self.optimizer.lr
            )));
        }
        if !(self.selector_lr_scale >= 0.0 && self.selector_lr_scale.is_finite()) {
            return Err(TrainError::Config(format!(
                "selector_lr_scale must be finite and non-negative, got {}",
                self.selector_lr_scale
            )));
        }
        let features = gate_features(self.selector.granularity, instance_shape)?;
        self.eval_mode.gate_config(&self.gate).validate(features)?;
        Ok(())
    }

    /// Mode list of an ablation with the empty default expanded.
    pub fn modes(&self) -> Vec<EvalMode> {
        if self.ablation_modes.is_empty() {
            EvalMode::ALL.to_vec()
        } else {
            self.ablation_modes.clone()
        }
    }

    pub fn sweep(&self) -> Vec<usize> {
        if self.m_sweep.is_empty() {
            vec![self.gate.m]
        } else {
            self.m_sweep.clone()
        }
    }
}

/// Number of gated features for inputs of shape `[C, H, W]`.
pub fn gate_features(
    granularity: Granularity,
    instance_shape: &[usize],
) -> Result<usize, TrainError> {
    let &[c, h, w] = instance_shape else {
        return Err(TrainError::Config(format!(
            "expected an instance shape [C, H, W], got {instance_shape:?}"
        )));
    };
    Ok(match granularity {
        Granularity::Pixel => h * w,
        Granularity::Feature => c * h * w,
    })
}

fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

const INIT_STREAM: u64 = 0;
const SHUFFLE_STREAM: u64 = 1;
const NOISE_STREAM: u64 = 2;
const BUDGET_STREAM: u64 = 3;

/// The networks of one arm. The naive autoencoder has no selector.
#[derive(Debug, Clone, PartialEq)]
pub struct Nets {
    pub selector: Option<Network<f64>>,
    pub reconstructor: Network<f64>,
}

impl Nets {
    /// Builds freshly initialised networks for the training variant of
    /// `cfg.eval_mode`.
    pub fn build(cfg: &ExperimentConfig, instance_shape: &[usize]) -> Result<Self, TrainError> {
        let mut rng = rng_stream(cfg.seed, INIT_STREAM);
        let variant = cfg.eval_mode.training_variant();
        let residual = variant != EvalMode::NoResidual;
        let selector = if variant.uses_selector() {
            Some(build_selector(
                cfg.selector.channels,
                instance_shape,
                residual,
                cfg.selector.granularity,
                &mut rng,
            )?)
        } else {
            None
        };
        let (latent, skips) = match variant {
            EvalMode::NaiveAe => (cfg.gate.m, false),
            EvalMode::NoResidual => (cfg.reconstructor.latent_dim, false),
            _ => (cfg.reconstructor.latent_dim, cfg.reconstructor.skips),
        };
        let reconstructor = build_reconstructor(
            cfg.reconstructor.channels,
            latent,
            instance_shape,
            skips,
            &mut rng,
        )?;
        Ok(Self {
            selector,
            reconstructor,
        })
    }

    pub fn param_count(&self) -> usize {
        self.selector.as_ref().map_or(0, Network::param_count) + self.reconstructor.param_count()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), TrainError> {
        let mut nets = vec![&self.reconstructor];
        if let Some(s) = &self.selector {
            nets.insert(0, s);
        }
        Ok(save_checkpoint(path, &nets)?)
    }

    /// Overwrites the parameters from a checkpoint written by [`save`](Self::save).
    pub fn load(&mut self, path: impl AsRef<Path>) -> Result<(), TrainError> {
        let records = load_checkpoint(path)?;
        if let Some(s) = &mut self.selector {
            s.load_params(&records)?;
        }
        self.reconstructor.load_params(&records)?;
        let expected =
            self.selector.as_ref().map_or(0, |s| s.params.len()) + self.reconstructor.params.len();
        if records.len() != expected {
            return Err(TrainError::Config(format!(
                "checkpoint holds {} parameters, the configured networks have {expected}",
                records.len()
            )));
        }
        Ok(())
    }

    fn selector_for(&self, mode: EvalMode) -> Result<&Network<f64>, TrainError> {
        self.selector
            .as_ref()
            .ok_or_else(|| TrainError::Config(format!("mode {mode} needs a selector network")))
    }
}

/// Counters filled in while training.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainAudit {
    pub batches: usize,
    /// Per-instance training masks inspected.
    pub masks_checked: usize,
    /// Training masks whose cardinality differs from the drawn budget or
    /// whose budget is neither M nor F.
    pub cardinality_violations: usize,
    /// Training masks with all F features kept.
    pub full_budget_masks: usize,
    pub max_cardinality: usize,
    pub eval_masks_checked: usize,
    /// Evaluation masks whose cardinality differs from M.
    pub eval_cardinality_violations: usize,
    /// Batches whose input gradient was inspected.
    pub zero_grad_batches: usize,
    /// Masked input entries inspected.
    pub zero_grad_entries: usize,
    /// Masked input entries with a non-zero gradient.
    pub zero_grad_violations: usize,
}

impl TrainAudit {
    pub fn is_clean(&self) -> bool {
        self.cardinality_violations == 0
            && self.eval_cardinality_violations == 0
            && self.zero_grad_violations == 0
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainOptions {
    /// Epochs after which a copy of the networks is kept.
    pub snapshot_epochs: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub nets: Nets,
    /// Test record per epoch (from epoch 0) and a train record per
    /// completed epoch.
    pub records: Vec<MetricsRecord>,
    pub audit: TrainAudit,
    pub snapshots: Vec<(usize, Nets)>,
}

impl TrainOutcome {
    pub fn test_record(&self, epoch: usize) -> Option<&MetricsRecord> {
        self.records
            .iter()
            .find(|r| r.split == Split::Test && r.epoch == epoch)
    }

    pub fn final_test(&self) -> &MetricsRecord {
        self.records
            .iter()
            .rev()
            .find(|r| r.split == Split::Test)
            .expect("epoch 0 is always evaluated")
    }
}

pub fn train(cfg: &ExperimentConfig, ds: &Dataset) -> Result<TrainOutcome, TrainError> {
    train_with(cfg, ds, &TrainOptions::default())
}

pub fn train_with(
    cfg: &ExperimentConfig,
    ds: &Dataset,
    options: &TrainOptions,
) -> Result<TrainOutcome, TrainError> {
    let nets = Nets::build(cfg, &ds.instance_shape())?;
    train_from(cfg, ds, nets, options)
}

/// Trains `nets` as the variant of `cfg.eval_mode`, evaluating on the test
/// split before the first epoch and after every epoch.
pub fn train_from(
    cfg: &ExperimentConfig,
    ds: &Dataset,
    mut nets: Nets,
    options: &TrainOptions,
) -> Result<TrainOutcome, TrainError> {
    let shape = ds.instance_shape();
    cfg.validate(&shape)?;
    if ds.split_len(Split::Train) == 0 {
        return Err(TrainError::Config("training split is empty".into()));
    }
    let mode = cfg.eval_mode;
    let variant = mode.training_variant();
    if variant.uses_selector() != nets.selector.is_some() {
        return Err(TrainError::Config(format!(
            "networks do not match the {variant} variant"
        )));
    }
    let features = gate_features(cfg.selector.granularity, &shape)?;
    let train_gate = GateConfig {
        mode: GateMode::Train,
        ..variant.gate_config(&cfg.gate)
    };

    let mut shuffle_rng = rng_stream(cfg.seed, SHUFFLE_STREAM);
    let mut noise_rng = rng_stream(cfg.seed, NOISE_STREAM);
    let mut budget_rng = rng_stream(cfg.seed, BUDGET_STREAM);
    let mut sel_opt = nets.selector.as_ref().map(|s| {
        let config = AdamConfig {
            lr: cfg.optimizer.lr * cfg.selector_lr_scale,
            ..cfg.optimizer
        };
        Adam::new(config, &s.params)
    });
    let mut rec_opt = Adam::new(cfg.optimizer, &nets.reconstructor.params);

    let start = Instant::now();
    let mut audit = TrainAudit::default();
    let mut records = Vec::new();
    let mut snapshots = Vec::new();

    let train_images = ds.split_images(Split::Train);
    let train_truth = ds.split_relevance(Split::Train);
    let n_train = ds.split_len(Split::Train);
    let mut order: Vec<usize> = (0..n_train).collect();

    let (mut record, counts) = evaluate_counted(&nets, ds, Split::Test, mode, &cfg.gate, 0)?;
    audit.eval_masks_checked += counts.0;
    audit.eval_cardinality_violations += counts.1;
    record.wall_clock_seconds = start.elapsed().as_secs_f64();
    records.push(record);
    if options.snapshot_epochs.contains(&0) {
        snapshots.push((0, nets.clone()));
    }

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut stats = SplitStats::default();
        for (batch, idx) in order.chunks(cfg.batch_size).enumerate() {
            let xb = train_images.gather_batch(idx)?;
            let audit_grad = variant.uses_selector()
                && cfg.audit_every > 0
                && audit.batches % cfg.audit_every == 0;
            audit.batches += 1;

            let mut tape = Tape::new();
            let rec_params = nets.reconstructor.bind(&mut tape);
            let target = tape.constant(xb.clone());
            let (output, gate_state, x) = match &nets.selector {
                None => {
                    let x = tape.constant(xb.clone());
                    (
                        nets.reconstructor.forward(&mut tape, &rec_params, x)?,
                        None,
                        x,
                    )
                }
                Some(selector) => {
                    let sel_params = selector.bind(&mut tape);
                    let x = if audit_grad {
                        tape.leaf(xb.clone())
                    } else {
                        tape.constant(xb.clone())
                    };
                    let x_sel = tape.constant(xb.clone());
                    let budgets = dynamic_m(idx.len(), &train_gate, features, &mut budget_rng);
                    let fwd = dds_forward(
                        &mut tape,
                        Bound {
                            net: selector,
                            params: &sel_params,
                        },
                        Bound {
                            net: &nets.reconstructor,
                            params: &rec_params,
                        },
                        x,
                        x_sel,
                        Gating {
                            config: &train_gate,
                            noise: GateNoise::Sampled(&mut noise_rng),
                            mask: MaskSource::TopM(&budgets),
                        },
                    )?;
                    (fwd.output, Some((fwd, sel_params, budgets)), x)
                }
            };
            let loss = tape.mse(output, target)?;
            let loss_value = tape.value(loss).data()[0];
            if !loss_value.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    epoch,
                    batch,
                    mode,
                    loss: loss_value,
                });
            }
            tape.backward(loss)?;
            stats.add_loss(loss_value, xb.numel());

            if let Some((fwd, sel_params, budgets)) = &gate_state {
                let mask = tape.value(fwd.mask);
                let scores = tape.value(fwd.scores);
                check_train_masks(mask, budgets, cfg.gate.m, features, &mut audit);
                stats.add_mask(mask, scores, &train_truth.gather_batch(idx)?)?;
                if audit_grad {
                    check_zero_grad(&tape, x, mask, &mut audit);
                }
                let grads: Vec<Option<&Tensor<f64>>> =
                    sel_params.iter().map(|&v| tape.grad(v)).collect();
                let selector = nets
                    .selector
                    .as_mut()
                    .expect("gated variant has a selector");
                sel_opt
                    .as_mut()
                    .expect("selector optimizer")
                    .step(&mut selector.params, &grads)?;
            }
            let grads: Vec<Option<&Tensor<f64>>> =
                rec_params.iter().map(|&v| tape.grad(v)).collect();
            rec_opt.step(&mut nets.reconstructor.params, &grads)?;
        }

        let elapsed = start.elapsed().as_secs_f64();
        records.push(stats.record(epoch, Split::Train, variant, cfg.gate.m, elapsed));
        let (mut record, counts) =
            evaluate_counted(&nets, ds, Split::Test, mode, &cfg.gate, epoch)?;
        audit.eval_masks_checked += counts.0;
        audit.eval_cardinality_violations += counts.1;
        record.wall_clock_seconds = start.elapsed().as_secs_f64();
        records.push(record);
        if options.snapshot_epochs.contains(&epoch) {
            snapshots.push((epoch, nets.clone()));
        }
    }

    Ok(TrainOutcome {
        nets,
        records,
        audit,
        snapshots,
    })
}

fn check_train_masks(
    mask: &Tensor<f64>,
    budgets: &[usize],
    m: usize,
    features: usize,
    audit: &mut TrainAudit,
) {
    let per = mask.numel() / budgets.len().max(1);
    for (row, &budget) in mask.data().chunks(per.max(1)).zip(budgets) {
        let ones = row.iter().filter(|&&v| v == 1.0).count();
        let zeros = row.iter().filter(|&&v| v == 0.0).count();
        audit.masks_checked += 1;
        audit.max_cardinality = audit.max_cardinality.max(ones);
        if ones == features {
            audit.full_budget_masks += 1;
        }
        if ones + zeros != row.len() || ones != budget || (budget != m && budget != features) {
            audit.cardinality_violations += 1;
        }
    }
}

/// Every input entry whose mask is 0 must have a gradient of exactly 0.
fn check_zero_grad(tape: &Tape<f64>, x: Var, mask: &Tensor<f64>, audit: &mut TrainAudit) {
    audit.zero_grad_batches += 1;
    let shape = tape.shape(x).to_vec();
    let (b, c) = (shape[0], shape[1]);
    let plane: usize = shape[2..].iter().product();
    let mask_channels = mask.numel() / (b * plane).max(1);
    let grad = tape.grad(x);
    for i in 0..b {
        for ch in 0..c {
            let mc = if mask_channels == 1 { 0 } else { ch };
            for p in 0..plane {
                if mask.data()[(i * mask_channels + mc) * plane + p] == 0.0 {
                    audit.zero_grad_entries += 1;
                    let g = grad.map_or(0.0, |g| g.data()[(i * c + ch) * plane + p]);
                    if g != 0.0 {
                        audit.zero_grad_violations += 1;
                    }
                }
            }
        }
    }
}

/// Running sums for one split of one epoch.
#[derive(Debug, Default)]
struct SplitStats {
    sq_err: f64,
    elements: usize,
    overlap_sum: f64,
    overlap_n: usize,
    score_sum: f64,
    selected: f64,
}

impl SplitStats {
    fn add_loss(&mut self, mse: f64, elements: usize) {
        self.sq_err += mse * elements as f64;
        self.elements += elements;
    }

    fn add_mask(
        &mut self,
        mask: &Tensor<f64>,
        scores: &Tensor<f64>,
        truth: &Tensor<f64>,
    ) -> Result<(), TrainError> {
        let b = mask.shape()[0];
        let rows = mask.clone().reshaped(vec![b, mask.numel() / b.max(1)])?;
        self.overlap_sum += overlap_from_mask(&rows, truth)? * b as f64;
        self.overlap_n += b;
        for (&s, &k) in scores.data().iter().zip(mask.data()) {
            self.score_sum += s * k;
            self.selected += k;
        }
        Ok(())
    }

    fn record(
        &self,
        epoch: usize,
        split: Split,
        mode: EvalMode,
        m: usize,
        elapsed: f64,
    ) -> MetricsRecord {
        MetricsRecord {
            epoch,
            split,
            eval_mode: mode,
            m,
            mse: self.sq_err / self.elements.max(1) as f64,
            mask_overlap: (self.overlap_n > 0).then(|| self.overlap_sum / self.overlap_n as f64),
            mean_selected_score: (self.selected > 0.0).then(|| self.score_sum / self.selected),
            wall_clock_seconds: elapsed,
        }
    }
}

const EVAL_BATCH: usize = 64;

/// Deterministic evaluation (no noise, budget fixed at M) of one split.
pub fn evaluate(
    nets: &Nets,
    ds: &Dataset,
    split: Split,
    mode: EvalMode,
    gate: &GateConfig<f64>,
    epoch: usize,
) -> Result<MetricsRecord, TrainError> {
    Ok(evaluate_counted(nets, ds, split, mode, gate, epoch)?.0)
}

/// Soft scores and binary masks the deterministic gate produces for
/// `images`, each `[B, k, H, W]` with `k` 1 or C.
pub fn infer_masks(
    nets: &Nets,
    images: &Tensor<f64>,
    gate: &GateConfig<f64>,
) -> Result<(Tensor<f64>, Tensor<f64>), TrainError> {
    let selector = nets.selector_for(EvalMode::Dds)?;
    let eval_gate = gate.for_eval();
    let mut tape = Tape::new();
    let params = selector.bind_frozen(&mut tape);
    let x = tape.constant(images.clone());
    let (_, scores) = gate_scores(
        &mut tape,
        Bound {
            net: selector,
            params: &params,
        },
        x,
        &eval_gate,
        GateNoise::Off,
    )?;
    let budgets = vec![eval_gate.m; images.shape()[0]];
    let mask = mask_for(&mut tape, scores, MaskSource::TopM(&budgets))?;
    Ok((tape.value(scores).clone(), tape.value(mask).clone()))
}

/// Returns the record and (masks checked, masks whose size is not M).
fn evaluate_counted(
    nets: &Nets,
    ds: &Dataset,
    split: Split,
    mode: EvalMode,
    gate: &GateConfig<f64>,
    epoch: usize,
) -> Result<(MetricsRecord, (usize, usize)), TrainError> {
    let start = Instant::now();
    let eval_gate = mode.training_variant().gate_config(gate).for_eval();
    let images = ds.split_images(split);
    let truth = ds.split_relevance(split);
    let n = ds.split_len(split);
    let mut stats = SplitStats::default();
    let (mut checked, mut violations) = (0, 0);

    for lo in (0..n).step_by(EVAL_BATCH) {
        let hi = (lo + EVAL_BATCH).min(n);
        let xb = images.slice_batch(lo, hi)?;
        let mut tape = Tape::new();
        let rec_params = nets.reconstructor.bind_frozen(&mut tape);
        let x = tape.constant(xb.clone());
        let rec =
            |tape: &mut Tape<f64>, input: Var| nets.reconstructor.forward(tape, &rec_params, input);

        let output = match mode {
            EvalMode::NaiveAe | EvalMode::DdsTrainOnly => rec(&mut tape, x)?,
            EvalMode::ForcedAllOnes => {
                nets.selector_for(mode)?;
                let b = hi - lo;
                stats.overlap_sum += b as f64;
                stats.overlap_n += b;
                stats.score_sum += xb.numel() as f64;
                stats.selected += xb.numel() as f64;
                rec(&mut tape, x)?
            }
            _ => {
                let selector = nets.selector_for(mode)?;
                let sel_params = selector.bind_frozen(&mut tape);
                let (_, scores) = gate_scores(
                    &mut tape,
                    Bound {
                        net: selector,
                        params: &sel_params,
                    },
                    x,
                    &eval_gate,
                    GateNoise::Off,
                )?;
                let budgets = vec![eval_gate.m; hi - lo];
                let mask = mask_for(&mut tape, scores, MaskSource::TopM(&budgets))?;
                let mask_value = tape.value(mask).clone();
                for row in mask_value.data().chunks(mask_value.numel() / (hi - lo)) {
                    checked += 1;
                    if row.iter().filter(|&&v| v == 1.0).count() != eval_gate.m {
                        violations += 1;
                    }
                }
                let applied = if mode == EvalMode::ForcedUniformImportance {
                    tape.constant(Tensor::ones(mask_value.shape().to_vec()))
                } else {
                    scores
                };
                let gated = apply_gate(&mut tape, x, applied, mask)?;
                stats.add_mask(
                    &mask_value,
                    tape.value(applied),
                    &truth.slice_batch(lo, hi)?,
                )?;
                rec(&mut tape, gated)?
            }
        };
        let target = tape.constant(xb.clone());
        let loss = tape.mse(output, target)?;
        stats.add_loss(tape.value(loss).data()[0], xb.numel());
    }

    let record = stats.record(epoch, split, mode, gate.m, start.elapsed().as_secs_f64());
    Ok((record, (checked, violations)))
}

#[cfg(test)]
mod tests;
