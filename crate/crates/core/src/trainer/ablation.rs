use super::{
    evaluate, train_with, AblationRow, AblationTable, EvalMode, ExperimentConfig, MetricsRecord,
    Nets, TrainAudit, TrainError, TrainOptions,
};
use crate::synthdata::{Dataset, Split};

/// One trained arm of an ablation.
#[derive(Debug, Clone)]
pub struct ArmResult {
    pub variant: EvalMode,
    pub m: usize,
    pub epochs: usize,
    pub nets: Nets,
    pub audit: TrainAudit,
}

#[derive(Debug, Clone)]
pub struct AblationOutcome {
    pub table: AblationTable,
    /// Every record of every arm, in training order, followed by the
    /// evaluation-only modes.
    pub records: Vec<MetricsRecord>,
    pub arms: Vec<ArmResult>,
}

impl AblationOutcome {
    pub fn arm(&self, variant: EvalMode, m: usize) -> Option<&ArmResult> {
        self.arms.iter().find(|a| a.variant == variant && a.m == m)
    }
}

/// Trains every variant needed by `base.modes()` at every budget of
/// `base.sweep()` and tabulates the test MSE.
///
/// The naive autoencoder trains for `base.epochs`; every gated variant for
/// `base.epochs * base.dds_epoch_factor`. The matched column reads all arms
/// at `base.epochs`, the final column at the end of each arm. All arms share
/// `base.seed`. Evaluation-only modes reuse the `Dds` arm of the same budget.
pub fn ablation_suite(
    base: &ExperimentConfig,
    ds: &Dataset,
) -> Result<AblationOutcome, TrainError> {
    let modes = base.modes();
    let sweep = base.sweep();
    let matched = base.epochs;
    let doubled = base.epochs * base.dds_epoch_factor;
    let mut variants: Vec<EvalMode> = Vec::new();
    for m in &modes {
        let v = m.training_variant();
        if !variants.contains(&v) {
            variants.push(v);
        }
    }

    let mut rows = Vec::new();
    let mut records = Vec::new();
    let mut collapse_records = Vec::new();
    let mut arms = Vec::new();
    for &m in &sweep {
        for &variant in &variants {
            let epochs = if variant == EvalMode::NaiveAe {
                matched
            } else {
                doubled
            };
            let cfg = ExperimentConfig {
                eval_mode: variant,
                epochs,
                gate: super::GateConfig { m, ..base.gate },
                ..base.clone()
            };
            let out = train_with(
                &cfg,
                ds,
                &TrainOptions {
                    snapshot_epochs: vec![matched],
                },
            )?;
            let at_matched = out
                .test_record(matched)
                .ok_or_else(|| TrainError::Config(format!("no record at epoch {matched}")))?
                .clone();
            let last = out.final_test().clone();
            for &mode in modes.iter().filter(|md| md.training_variant() == variant) {
                let (mr, fr) = if mode == variant {
                    (at_matched.clone(), last.clone())
                } else {
                    let snap = &out
                        .snapshots
                        .iter()
                        .find(|(e, _)| *e == matched)
                        .expect("snapshot requested")
                        .1;
                    let mr = evaluate(snap, ds, Split::Test, mode, &cfg.gate, matched)?;
                    let fr = evaluate(&out.nets, ds, Split::Test, mode, &cfg.gate, epochs)?;
                    if epochs != matched {
                        collapse_records.push(mr.clone());
                    }
                    collapse_records.push(fr.clone());
                    (mr, fr)
                };
                rows.push(AblationRow {
                    mode,
                    m,
                    matched_epochs: matched,
                    matched_mse: mr.mse,
                    final_epochs: epochs,
                    final_mse: fr.mse,
                    final_overlap: fr.mask_overlap,
                    final_score: fr.mean_selected_score,
                });
            }
            records.extend(out.records);
            arms.push(ArmResult {
                variant,
                m,
                epochs,
                nets: out.nets,
                audit: out.audit,
            });
        }
    }
    records.extend(collapse_records);
    let position = |mode: EvalMode| modes.iter().position(|&x| x == mode).unwrap_or(usize::MAX);
    let sweep_pos = |m: usize| sweep.iter().position(|&x| x == m).unwrap_or(usize::MAX);
    rows.sort_by_key(|r: &AblationRow| (position(r.mode), sweep_pos(r.m)));
    Ok(AblationOutcome {
        table: AblationTable { rows },
        records,
        arms,
    })
}
