use redlab::model::LnStyle;
use redlab::tasks::{generate, Dataset, SyntheticTask, TaskKind};
use redlab::tensor::{Fault, OpKind};
use redlab::train::{grad_check, perturb_peft, GradCheckOptions, TrainConfig, Trainer};
use redlab::{Error, Method, PeftModel, PeftSpec, Scalar, TransformerConfig, TransformerModel};

fn model_config() -> TransformerConfig {
    TransformerConfig {
        n_layers: 2,
        d_model: 16,
        n_heads: 2,
        d_ff: None,
        vocab_size: 4,
        max_seq_len: 8,
        n_classes: 2,
        ln_style: LnStyle::PostLn,
        ln_eps: 1e-5,
    }
}

fn data(seed: u64) -> Dataset {
    generate(&SyntheticTask::parity(8, 120, 40, 40), seed).unwrap()
}

fn train_config() -> TrainConfig {
    TrainConfig {
        lr: 1e-2,
        warmup_ratio: 0.1,
        epochs: 2,
        batch_size: 16,
        seed: 3,
        ..TrainConfig::default()
    }
}

fn model<T: Scalar>(spec: &PeftSpec) -> PeftModel<T> {
    PeftModel::attach(TransformerModel::init(model_config(), 3).unwrap(), spec, 3).unwrap()
}

fn snapshot<T: Scalar>(m: &PeftModel<T>) -> Vec<(String, Vec<f64>)> {
    m.base
        .params
        .iter()
        .chain(m.peft.params.iter())
        .map(|p| (p.name.clone(), p.value.to_f64_vec()))
        .collect()
}

#[test]
fn zero_epochs_reports_only_the_initial_evaluation() {
    let cfg = TrainConfig {
        epochs: 0,
        ..train_config()
    };
    let trainer = Trainer::new(model::<f32>(&PeftSpec::red()), data(0), cfg).unwrap();
    let (_, report) = trainer.finish().unwrap();
    assert_eq!(report.epochs.len(), 1);
    assert!(report.steps.is_empty());
    assert_eq!(report.best_epoch, 0);
    assert_eq!(report.frozen_digest_initial, report.frozen_digest_final);
    assert!(report.test_acc.is_some());
}

#[test]
fn same_seed_gives_bitwise_identical_trajectories() {
    let run = || {
        let mut t = Trainer::new(model::<f32>(&PeftSpec::red()), data(0), train_config()).unwrap();
        t.run().unwrap();
        t.finish().unwrap().1
    };
    let (a, b) = (run(), run());
    let bits = |r: &redlab::train::TrainReport| {
        r.steps.iter().map(|s| s.loss.to_bits()).collect::<Vec<_>>()
    };
    assert_eq!(bits(&a), bits(&b));
    assert_eq!(a.steps_csv(), b.steps_csv());
    assert_eq!(
        serde_json::to_string(&a).unwrap(),
        serde_json::to_string(&b).unwrap()
    );
}

#[test]
fn split_runs_equal_one_continuous_run() {
    let mut whole = Trainer::new(model::<f32>(&PeftSpec::red()), data(1), train_config()).unwrap();
    let total = whole.total_steps();
    assert_eq!(total, 16);
    whole.run().unwrap();

    let mut split = Trainer::new(model::<f32>(&PeftSpec::red()), data(1), train_config()).unwrap();
    split.run_steps(5).unwrap();
    assert_eq!(split.steps_done(), 5);
    split.run_steps(total - 5).unwrap();
    assert!(split.is_done());

    assert_eq!(snapshot(&whole.model), snapshot(&split.model));
    assert_eq!(whole.report().steps, split.report().steps);
}

#[test]
fn only_registry_parameters_change() {
    for spec in [
        PeftSpec::red(),
        PeftSpec::with_rank(Method::Lora, 2),
        PeftSpec::with_rank(Method::Adapter, 2),
        PeftSpec::new(Method::Bitfit),
    ] {
        let before = model::<f32>(&spec);
        let registry = before.registry();
        let mut t = Trainer::new(before.clone(), data(2), train_config()).unwrap();
        t.run_steps(6).unwrap();
        assert_eq!(
            t.optimizer().state_len(),
            2 * before.trainable_count(),
            "{}",
            spec.label()
        );
        for (name, old) in snapshot(&before) {
            let now = t
                .model
                .base
                .params
                .get(&name)
                .or_else(|| t.model.peft.params.get(&name))
                .unwrap()
                .value
                .to_f64_vec();
            if registry.contains(&name) {
                assert!(t.optimizer().has_state(&name));
            } else {
                assert_eq!(now, old, "{} changed under {}", name, spec.label());
            }
        }
        assert!(registry.iter().any(|n| {
            let now = t
                .model
                .peft
                .params
                .get(n)
                .or_else(|| t.model.base.params.get(n))
                .unwrap();
            now.value.to_f64_vec()
                != before
                    .peft
                    .params
                    .get(n)
                    .or_else(|| before.base.params.get(n))
                    .unwrap()
                    .value
                    .to_f64_vec()
        }));
        let (_, report) = t.finish().unwrap();
        assert_eq!(
            report.frozen_digest_initial,
            report.frozen_digest_final,
            "{}",
            spec.label()
        );
    }
}

#[test]
fn full_fine_tuning_moves_the_digest_after_one_step() {
    let mut t = Trainer::new(
        model::<f32>(&PeftSpec::new(Method::FullFt)),
        data(2),
        train_config(),
    )
    .unwrap();
    let before = t.model.frozen_digest();
    // The first step runs at lr = 0 (warmup starts from zero).
    t.run_steps(2).unwrap();
    assert_ne!(t.model.frozen_digest(), before);
}

#[test]
fn lr_follows_warmup_then_linear_decay() {
    let mut t = Trainer::new(model::<f32>(&PeftSpec::red()), data(0), train_config()).unwrap();
    t.run().unwrap();
    let lrs: Vec<f64> = t.report().steps.iter().map(|s| s.lr).collect();
    // 16 steps, warmup round(1.6) = 2: 0, lr/2, then lr·(16 − t)/14.
    assert_eq!(lrs[0], 0.0);
    assert!((lrs[1] - 5e-3).abs() < 1e-15);
    assert!((lrs[2] - 1e-2).abs() < 1e-15);
    assert!((lrs[15] - 1e-2 / 14.0).abs() < 1e-15);
}

#[test]
fn divergence_stops_with_the_last_finite_state() {
    let mut m = model::<f32>(&PeftSpec::red());
    m.peft
        .params
        .get_mut("block.0.ffn.red.bias")
        .unwrap()
        .value
        .data_mut()[0] = f32::NAN;
    let before = snapshot(&m);
    let mut t = Trainer::new(m, data(0), train_config()).unwrap();
    let err = t.run().unwrap_err();
    assert!(matches!(err, Error::Diverged { step: 1, .. }), "{err}");
    assert_eq!(t.steps_done(), 0);
    let after = snapshot(&t.model);
    for ((n, a), (_, b)) in before.iter().zip(&after) {
        let same = a
            .iter()
            .zip(b)
            .all(|(x, y)| x == y || (x.is_nan() && y.is_nan()));
        assert!(same, "{n} changed");
    }
}

#[test]
fn best_epoch_is_restored_at_finish() {
    let cfg = TrainConfig {
        epochs: 4,
        lr: 5e-2,
        ..train_config()
    };
    let mut t = Trainer::new(model::<f32>(&PeftSpec::red()), data(4), cfg).unwrap();
    t.run().unwrap();
    let (_, report) = t.finish().unwrap();
    let max = report
        .epochs
        .iter()
        .map(|e| e.valid_acc)
        .fold(f64::MIN, f64::max);
    assert_eq!(report.best_valid_acc, max);
    let first_best = report
        .epochs
        .iter()
        .find(|e| e.valid_acc == max)
        .unwrap()
        .epoch;
    assert_eq!(report.best_epoch, first_best);
    assert_eq!(report.best_checkpoint, format!("epoch-{first_best}"));
}

fn toy_batch() -> (redlab::TokenBatch, Vec<usize>) {
    let t = SyntheticTask {
        name: TaskKind::Majority,
        vocab_size: 4,
        seq_len: 8,
        n_classes: 4,
        train_size: 8,
        valid_size: 4,
        test_size: 4,
        seed: None,
    };
    let d = generate(&t, 0).unwrap();
    d.train.batch(&[0, 1, 2, 3]).unwrap()
}

fn toy_model(spec: &PeftSpec) -> PeftModel<f64> {
    let cfg = TransformerConfig {
        n_classes: 4,
        ..model_config()
    };
    let mut m = PeftModel::attach(TransformerModel::init(cfg, 8).unwrap(), spec, 8).unwrap();
    perturb_peft(&mut m, 8, 0.1);
    m
}

#[test]
fn grad_check_passes_for_red_and_lora() {
    let (batch, labels) = toy_batch();
    for spec in [
        PeftSpec::red(),
        PeftSpec {
            positions: redlab::peft::Positions::Both,
            ..PeftSpec::red()
        },
        PeftSpec::with_rank(Method::Lora, 2),
        PeftSpec::with_rank(Method::Adapter, 2),
    ] {
        let mut m = toy_model(&spec);
        let report = grad_check(&mut m, &batch, &labels, GradCheckOptions::default()).unwrap();
        assert!(report.pass(), "{}\n{}", spec.label(), report.to_table());
        assert!(report
            .rows
            .iter()
            .all(|r| !r.group.starts_with("embed") && !r.group.starts_with("head")));
        assert_eq!(
            report.rows.iter().map(|r| r.elements).sum::<usize>(),
            m.trainable_count()
        );
    }
}

#[test]
fn grad_check_groups_merge_blocks() {
    let (batch, labels) = toy_batch();
    let mut m = toy_model(&PeftSpec::red());
    let report = grad_check(&mut m, &batch, &labels, GradCheckOptions::default()).unwrap();
    let groups: Vec<&str> = report.rows.iter().map(|r| r.group.as_str()).collect();
    assert_eq!(
        groups,
        vec!["block.*.ffn.red.scaling", "block.*.ffn.red.bias"]
    );
    assert_eq!(
        redlab::train::param_group("block.11.attn.w_q.lora.up"),
        "block.*.attn.w_q.lora.up"
    );
    assert_eq!(redlab::train::param_group("head.weight"), "head.weight");
}

#[test]
fn grad_check_catches_a_corrupted_backward() {
    let (batch, labels) = toy_batch();
    let mut m = toy_model(&PeftSpec::red());
    let opts = GradCheckOptions {
        fault: Some(Fault {
            op: OpKind::MatMul,
            factor: 1.01,
        }),
        ..GradCheckOptions::default()
    };
    let report = grad_check(&mut m, &batch, &labels, opts).unwrap();
    assert!(!report.pass(), "{}", report.to_table());
}
