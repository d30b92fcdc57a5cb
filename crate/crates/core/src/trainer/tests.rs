use super::*;
use crate::synthdata::{generate, SynthSpec};

fn tiny_data() -> Dataset {
    let spec = SynthSpec {
        image_size: 8,
        signal_pixels: 6,
        n_train: 16,
        n_test: 8,
        ..SynthSpec::default()
    };
    generate(&spec, 1).unwrap()
}

fn tiny_cfg(mode: EvalMode) -> ExperimentConfig {
    ExperimentConfig {
        gate: GateConfig::train(8),
        selector: SelectorSpec {
            channels: 2,
            ..SelectorSpec::default()
        },
        reconstructor: ReconstructorSpec {
            channels: 2,
            latent_dim: 4,
            skips: true,
        },
        epochs: 2,
        batch_size: 8,
        seed: 5,
        eval_mode: mode,
        audit_every: 1,
        ..ExperimentConfig::default()
    }
}

#[test]
fn mode_names_round_trip() {
    for mode in EvalMode::ALL {
        assert_eq!(mode.as_str().parse::<EvalMode>().unwrap(), mode);
        let json = serde_json::to_string(&mode).unwrap();
        assert_eq!(json, format!("\"{mode}\""));
    }
    assert_eq!(
        "dds_plus".parse::<EvalMode>().unwrap_err(),
        TrainError::UnknownMode("dds_plus".into())
    );
}

#[test]
fn variants_and_gates() {
    let base = GateConfig::train(10);
    assert_eq!(EvalMode::ForcedAllOnes.training_variant(), EvalMode::Dds);
    assert_eq!(EvalMode::HardSigmoid.gate_config(&base).zeta, 1.1);
    assert_eq!(EvalMode::HardSigmoid.gate_config(&base).gamma, -0.1);
    assert_eq!(EvalMode::ClassicConcrete.gate_config(&base).kappa, 1.0);
    assert_eq!(EvalMode::NoConcrete.gate_config(&base).kappa, 0.0);
    assert_eq!(EvalMode::NoDynamicM.gate_config(&base).epsilon, 0.0);
    assert_eq!(EvalMode::Dds.gate_config(&base), base);
}

#[test]
fn zero_learning_rate_leaves_test_mse() {
    let ds = tiny_data();
    let mut cfg = tiny_cfg(EvalMode::Dds);
    cfg.optimizer.lr = 0.0;
    cfg.epochs = 1;
    let out = train(&cfg, &ds).unwrap();
    let before = out.test_record(0).unwrap();
    let after = out.test_record(1).unwrap();
    assert_eq!(before.mse, after.mse);
    assert_eq!(out.nets, Nets::build(&cfg, &ds.instance_shape()).unwrap());
}

#[test]
fn records_cover_every_epoch() {
    let ds = tiny_data();
    let out = train(&tiny_cfg(EvalMode::Dds), &ds).unwrap();
    let tests: Vec<usize> = out
        .records
        .iter()
        .filter(|r| r.split == Split::Test)
        .map(|r| r.epoch)
        .collect();
    assert_eq!(tests, vec![0, 1, 2]);
    assert_eq!(out.records.len(), 5);
    for r in &out.records {
        r.check_invariants().unwrap();
        assert!(r.mse.is_finite());
    }
}

#[test]
fn naive_autoencoder_bypasses_selection() {
    let ds = tiny_data();
    let cfg = tiny_cfg(EvalMode::NaiveAe);
    let out = train(&cfg, &ds).unwrap();
    assert!(out.nets.selector.is_none());
    let latent = out.nets.reconstructor.param("latent.weight").unwrap();
    assert_eq!(latent.value.shape()[1], 8);
    assert!(out.records.iter().all(|r| r.mask_overlap.is_none()));
    assert_eq!(out.audit.masks_checked, 0);
}

#[test]
fn audits_are_clean() {
    let ds = tiny_data();
    let mut cfg = tiny_cfg(EvalMode::Dds);
    cfg.gate.epsilon = 0.5;
    let out = train(&cfg, &ds).unwrap();
    let a = &out.audit;
    assert!(a.is_clean(), "{a:?}");
    assert_eq!(a.masks_checked, 32);
    assert!(a.full_budget_masks > 0 && a.full_budget_masks < 32);
    assert_eq!(a.max_cardinality, 64);
    assert_eq!(a.eval_masks_checked, 3 * 8);
    assert_eq!(a.zero_grad_batches, 4);
    assert!(a.zero_grad_entries > 0);
}

#[test]
fn identical_seeds_give_identical_metrics() {
    let ds = tiny_data();
    let cfg = tiny_cfg(EvalMode::Dds);
    let a = train(&cfg, &ds).unwrap();
    let b = train(&cfg, &ds).unwrap();
    assert_eq!(jsonl_string(&a.records), jsonl_string(&b.records));
    assert_eq!(a.nets, b.nets);
    let other = train(&ExperimentConfig { seed: 6, ..cfg }, &ds).unwrap();
    assert_ne!(jsonl_string(&a.records), jsonl_string(&other.records));
}

#[test]
fn jsonl_omits_wall_clock() {
    let ds = tiny_data();
    let mut cfg = tiny_cfg(EvalMode::Dds);
    cfg.epochs = 0;
    let out = train(&cfg, &ds).unwrap();
    let line = jsonl_string(&out.records);
    assert!(!line.contains("wall"));
    assert!(line.starts_with("{\"epoch\":0,\"split\":\"test\",\"eval_mode\":\"dds\",\"m\":8,"));
    let back: MetricsRecord = serde_json::from_str(line.trim()).unwrap();
    assert_eq!(back.mse, out.records[0].mse);
}

#[test]
fn nan_input_aborts_with_context() {
    let mut ds = tiny_data();
    ds.images.data_mut()[3] = f64::NAN;
    let mut cfg = tiny_cfg(EvalMode::NaiveAe);
    cfg.batch_size = 16;
    let err = train(&cfg, &ds).unwrap_err();
    assert!(matches!(
        err,
        TrainError::NonFiniteLoss {
            epoch: 1,
            batch: 0,
            mode: EvalMode::NaiveAe,
            ..
        }
    ));
    assert!(err.is_numerical());
}

#[test]
fn collapse_modes_on_untrained_nets() {
    let ds = tiny_data();
    let cfg = tiny_cfg(EvalMode::Dds);
    let nets = Nets::build(&cfg, &ds.instance_shape()).unwrap();
    let eval = |mode| evaluate(&nets, &ds, Split::Test, mode, &cfg.gate, 0).unwrap();
    let ones = eval(EvalMode::ForcedAllOnes);
    let raw = eval(EvalMode::DdsTrainOnly);
    assert_eq!(ones.mse, raw.mse);
    assert_eq!(ones.mask_overlap, Some(1.0));
    assert_eq!(raw.mask_overlap, None);
    let dds = eval(EvalMode::Dds);
    let uniform = eval(EvalMode::ForcedUniformImportance);
    assert_eq!(dds.mask_overlap, uniform.mask_overlap);
    assert_eq!(uniform.mean_selected_score, Some(1.0));
    assert!(dds.mean_selected_score.unwrap() < 1.0);
    let naive = Nets::build(&tiny_cfg(EvalMode::NaiveAe), &ds.instance_shape()).unwrap();
    assert!(evaluate(&naive, &ds, Split::Test, EvalMode::Dds, &cfg.gate, 0).is_err());
}

#[test]
fn every_parameter_gets_a_gradient_at_init() {
    let ds = tiny_data();
    let cfg = tiny_cfg(EvalMode::Dds);
    let nets = Nets::build(&cfg, &ds.instance_shape()).unwrap();
    let selector = nets.selector.as_ref().unwrap();
    let gate = GateConfig::train(8);
    let mut rng = rng_stream(11, 0);
    let mut seen_sel = vec![false; selector.params.len()];
    let mut seen_rec = vec![false; nets.reconstructor.params.len()];
    for b in 0..10 {
        let idx: Vec<usize> = (0..4).map(|i| (b * 4 + i) % 16).collect();
        let xb = ds.images.gather_batch(&idx).unwrap();
        let mut tape = Tape::new();
        let sp = selector.bind(&mut tape);
        let rp = nets.reconstructor.bind(&mut tape);
        let x = tape.constant(xb.clone());
        let budgets = dynamic_m(4, &gate, 64, &mut rng);
        let fwd = dds_forward(
            &mut tape,
            Bound {
                net: selector,
                params: &sp,
            },
            Bound {
                net: &nets.reconstructor,
                params: &rp,
            },
            x,
            x,
            Gating {
                config: &gate,
                noise: GateNoise::Sampled(&mut rng),
                mask: MaskSource::TopM(&budgets),
            },
        )
        .unwrap();
        let loss = tape.mse(fwd.output, x).unwrap();
        tape.backward(loss).unwrap();
        for (seen, vars) in [(&mut seen_sel, &sp), (&mut seen_rec, &rp)] {
            for (s, &v) in seen.iter_mut().zip(vars.iter()) {
                *s |= tape
                    .grad(v)
                    .is_some_and(|g| g.data().iter().any(|&x| x != 0.0));
            }
        }
    }
    assert!(seen_sel.iter().all(|&s| s), "{seen_sel:?}");
    assert!(seen_rec.iter().all(|&s| s), "{seen_rec:?}");
}

#[test]
fn checkpoint_round_trip_through_nets() {
    let ds = tiny_data();
    let cfg = tiny_cfg(EvalMode::Dds);
    let out = train(&cfg, &ds).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.dds1");
    out.nets.save(&path).unwrap();
    let mut fresh = Nets::build(&cfg, &ds.instance_shape()).unwrap();
    fresh.load(&path).unwrap();
    assert_eq!(fresh, out.nets);
    let mut naive = Nets::build(&tiny_cfg(EvalMode::NaiveAe), &ds.instance_shape()).unwrap();
    assert!(naive.load(&path).is_err());
}

#[test]
fn ablation_table_shape() {
    let ds = tiny_data();
    let cfg = ExperimentConfig {
        epochs: 1,
        m_sweep: vec![4, 8],
        ablation_modes: vec![EvalMode::Dds, EvalMode::NaiveAe, EvalMode::ForcedAllOnes],
        ..tiny_cfg(EvalMode::Dds)
    };
    let out = ablation_suite(&cfg, &ds).unwrap();
    assert_eq!(out.table.rows.len(), 6);
    assert_eq!(out.arms.len(), 4);
    let dds = out.table.get(EvalMode::Dds, 4).unwrap();
    assert_eq!((dds.matched_epochs, dds.final_epochs), (1, 2));
    let naive = out.table.get(EvalMode::NaiveAe, 8).unwrap();
    assert_eq!(naive.final_epochs, 1);
    assert_eq!(naive.matched_mse, naive.final_mse);
    let csv = out.table.to_csv();
    assert_eq!(csv.lines().count(), 7);
    assert!(csv.lines().nth(1).unwrap().starts_with("dds,4,1,"));
}

#[test]
fn config_json_round_trip_and_unknown_keys() {
    let cfg = tiny_cfg(EvalMode::NoResidual);
    let json = serde_json::to_string(&cfg).unwrap();
    let back: ExperimentConfig = serde_json::from_str(&json).unwrap();
    assert_eq!(back, cfg);
    let partial: ExperimentConfig =
        serde_json::from_str(r#"{"epochs": 3, "gate": {"m": 5}}"#).unwrap();
    assert_eq!(partial.epochs, 3);
    assert_eq!(partial.gate.m, 5);
    assert_eq!(partial.gate.beta, 2.0 / 3.0);
    assert!(serde_json::from_str::<ExperimentConfig>(r#"{"epoch": 3}"#).is_err());
    assert!(serde_json::from_str::<ExperimentConfig>(r#"{"gate": {"kapa": 0.1}}"#).is_err());
}
